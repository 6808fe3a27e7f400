"""Adapter zoo: LoRA, DoRA, DeLoRA and the ETHER-derived ablation ladder.

Orientation: a pretrained weight ``W`` is ``d x f`` and a layer computes
``W.T @ x + bias`` for activations ``x`` of shape ``d x n``. Low-rank factors
are stored as ``B`` (``d x r``) and ``A`` (``r x f``) so that ``B @ A`` is
already ``d x f``. Multiplicative variants act on ``W`` from the left with a
``d x d`` transform ``H``.

The per-component normalizers (the diagonal of 1/(|b_i||a_i|) and its
ETHER counterparts) are never materialized; they are folded into the
products as ``r`` scalars.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numkit import ShapeError, as_matrix, column_norms, frobenius_norm, kaiming_uniform

EPS = 1e-12
UNBOUNDED = "unbounded"


class Variant(str, Enum):
    LORA = "lora"
    DORA = "dora"
    DORA_FIXED_MAG = "dora_fixed_mag"
    DELORA = "delora"
    DELORA_NO_WEIGHT_SCALE = "delora_no_weight_scale"
    ETHER = "ether"
    ETHER_PLUS = "ether_plus"
    ETHER_PLUS_CTRL = "ether_plus_ctrl"
    ETHER_PLUS_HIGH_RANK = "ether_plus_high_rank"
    ETHER_PLUS_RELAXED = "ether_plus_relaxed"

    def __str__(self) -> str:
        return self.value


ALL_VARIANTS = tuple(Variant)

PARAM_NAMES: dict[Variant, tuple[str, ...]] = {
    Variant.LORA: ("B", "A"),
    Variant.DORA: ("B", "A", "m"),
    Variant.DORA_FIXED_MAG: ("B", "A"),
    Variant.DELORA: ("B", "A", "lambda"),
    Variant.DELORA_NO_WEIGHT_SCALE: ("B", "A", "lambda"),
    Variant.ETHER: ("u",),
    Variant.ETHER_PLUS: ("u", "v"),
    Variant.ETHER_PLUS_CTRL: ("u", "v", "lambda"),
    Variant.ETHER_PLUS_HIGH_RANK: ("U", "V", "lambda"),
    Variant.ETHER_PLUS_RELAXED: ("B", "A", "D", "C", "lambda"),
}

BOUNDED = frozenset(
    {
        Variant.DELORA,
        Variant.DELORA_NO_WEIGHT_SCALE,
        Variant.ETHER_PLUS_CTRL,
        Variant.ETHER_PLUS_HIGH_RANK,
        Variant.ETHER_PLUS_RELAXED,
    }
)
MULTIPLICATIVE = frozenset(
    {
        Variant.ETHER,
        Variant.ETHER_PLUS,
        Variant.ETHER_PLUS_CTRL,
        Variant.ETHER_PLUS_HIGH_RANK,
        Variant.ETHER_PLUS_RELAXED,
    }
)
PAIRED = frozenset({Variant.ETHER_PLUS_HIGH_RANK, Variant.ETHER_PLUS_RELAXED})
DORA_FAMILY = frozenset({Variant.DORA, Variant.DORA_FIXED_MAG})
DELORA_FAMILY = frozenset({Variant.DELORA, Variant.DELORA_NO_WEIGHT_SCALE})


class AdapterError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PretrainedLayer:
    """Frozen adaptation target.

    ``w_init_offset`` is the snapshot of the initial update that gets
    subtracted so the adapted layer starts at the pretrained function; it is
    zero for adapters that start from a zero update natively.
    """

    w_bar: np.ndarray
    bias: np.ndarray
    w_init_offset: np.ndarray
    frob_w_bar: float

    @classmethod
    def create(cls, w_bar, bias=None, w_init_offset=None) -> "PretrainedLayer":
        w = as_matrix(w_bar)
        b = np.zeros((w.shape[1], 1)) if bias is None else as_matrix(bias)
        off = np.zeros_like(w) if w_init_offset is None else as_matrix(w_init_offset)
        if b.shape != (w.shape[1], 1):
            raise ShapeError("PretrainedLayer bias", w.shape, b.shape)
        if off.shape != w.shape:
            raise ShapeError("PretrainedLayer offset", w.shape, off.shape)
        return cls(_frozen(w), _frozen(b), _frozen(off), frobenius_norm(w))

    @property
    def d(self) -> int:
        return self.w_bar.shape[0]

    @property
    def f(self) -> int:
        return self.w_bar.shape[1]

    @property
    def base_weight(self) -> np.ndarray:
        return self.w_bar - self.w_init_offset

    def with_offset(self, offset: np.ndarray) -> "PretrainedLayer":
        return PretrainedLayer.create(self.w_bar, self.bias, offset)


@dataclass
class Adapter:
    variant: Variant
    rank: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    alpha: float = 1.0
    eps: float = EPS

    @property
    def lam(self) -> float:
        return float(self.params["lambda"])

    @property
    def param_names(self) -> tuple[str, ...]:
        return PARAM_NAMES[self.variant]

    @property
    def magnitude(self) -> np.ndarray:
        if self.variant is Variant.DORA:
            return self.params["m"]
        return self.buffers["m"]

    def copy(self) -> "Adapter":
        return copy.deepcopy(self)


# -- normalized products ----------------------------------------------------


def _xi_norms(b_mats: np.ndarray, a_mats: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nb = column_norms(b_mats)
    na = np.sqrt(np.sum(np.square(a_mats), axis=1))
    return nb, na, np.maximum(nb * na, eps)


def xi_scaled_product(b_mats: np.ndarray, a_mats: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Sum of rank-1 terms b_i a_i^T / max(|b_i| |a_i|, eps)."""
    if b_mats.shape[1] != a_mats.shape[0]:
        raise ShapeError("xi_scaled_product", b_mats.shape, a_mats.shape)
    _, _, n = _xi_norms(b_mats, a_mats, eps)
    return (b_mats / n) @ a_mats


def projector_sum(vecs: np.ndarray) -> np.ndarray:
    """Sum of u_i u_i^T / |u_i|^2 over the columns of *vecs*."""
    sq = np.sum(np.square(vecs), axis=0)
    return (vecs / sq) @ vecs.T


def transform_minus_identity(adapter: Adapter) -> np.ndarray:
    """``H - I`` for the multiplicative variants (``d x d``)."""
    p = adapter.params
    v = adapter.variant
    if v is Variant.ETHER:
        return -2.0 * projector_sum(p["u"])
    if v is Variant.ETHER_PLUS:
        return projector_sum(p["v"]) - projector_sum(p["u"])
    if v is Variant.ETHER_PLUS_CTRL:
        return 0.5 * adapter.lam * (projector_sum(p["v"]) - projector_sum(p["u"]))
    if v is Variant.ETHER_PLUS_HIGH_RANK:
        return adapter.lam / adapter.rank * (projector_sum(p["V"]) - projector_sum(p["U"]))
    if v is Variant.ETHER_PLUS_RELAXED:
        bxa = xi_scaled_product(p["B"], p["A"], adapter.eps)
        dpc = xi_scaled_product(p["D"], p["C"], adapter.eps)
        return -adapter.lam / adapter.rank * (bxa - dpc)
    raise AdapterError(f"{v} is not a multiplicative variant")


def delora_scale(adapter: Adapter, layer: PretrainedLayer) -> float:
    s = adapter.lam / adapter.rank
    if adapter.variant is Variant.DELORA:
        s *= layer.frob_w_bar
    return s


def _check_dims(adapter: Adapter, layer: PretrainedLayer) -> None:
    p = adapter.params
    d, f = layer.d, layer.f
    v = adapter.variant
    if v in MULTIPLICATIVE:
        for name in ("u", "v", "U", "V", "B", "D"):
            if name in p and p[name].shape[0] != d:
                raise ShapeError(f"{v} factor {name}", p[name].shape, layer.w_bar.shape)
        for name in ("A", "C"):
            if name in p and p[name].shape[1] != d:
                raise ShapeError(f"{v} factor {name}", p[name].shape, layer.w_bar.shape)
        return
    if p["B"].shape[0] != d or p["A"].shape[1] != f or p["B"].shape[1] != p["A"].shape[0]:
        raise ShapeError(f"{v} factors", p["B"].shape, p["A"].shape, layer.w_bar.shape)


def raw_update(adapter: Adapter, layer: PretrainedLayer) -> np.ndarray:
    """The update before the frozen init offset is subtracted."""
    _check_dims(adapter, layer)
    v = adapter.variant
    p = adapter.params
    if v is Variant.LORA:
        return (adapter.alpha / adapter.rank) * (p["B"] @ p["A"])
    if v in DORA_FAMILY:
        return dora_weight(adapter, layer) - layer.w_bar
    if v in DELORA_FAMILY:
        return delora_scale(adapter, layer) * xi_scaled_product(p["B"], p["A"], adapter.eps)
    return transform_minus_identity(adapter) @ layer.w_bar


def dora_weight(adapter: Adapter, layer: PretrainedLayer) -> np.ndarray:
    p = adapter.params
    v = layer.w_bar + (adapter.alpha / adapter.rank) * (p["B"] @ p["A"])
    return v * (adapter.magnitude / np.maximum(column_norms(v), adapter.eps))


def delta_weight(adapter: Adapter, layer: PretrainedLayer) -> np.ndarray:
    """Full ``d x f`` update such that merged weights are ``w_bar + delta``."""
    return raw_update(adapter, layer) - layer.w_init_offset


def merged_weight(adapter: Adapter | None, layer: PretrainedLayer) -> np.ndarray:
    if adapter is None:
        return layer.base_weight
    return layer.w_bar + delta_weight(adapter, layer)


def forward(adapter: Adapter | None, layer: PretrainedLayer, x) -> np.ndarray:
    """Adapted layer output, using factored products where the variant allows."""
    x = as_matrix(x)
    if x.shape[0] != layer.d:
        raise ShapeError("forward", layer.w_bar.shape, x.shape)
    if adapter is None:
        return layer.base_weight.T @ x + layer.bias
    _check_dims(adapter, layer)
    v = adapter.variant
    p = adapter.params
    if v in DORA_FAMILY:
        return dora_weight(adapter, layer).T @ x + layer.bias
    out = layer.base_weight.T @ x + layer.bias
    if v is Variant.LORA:
        return out + (adapter.alpha / adapter.rank) * (p["A"].T @ (p["B"].T @ x))
    if v in DELORA_FAMILY:
        _, _, n = _xi_norms(p["B"], p["A"], adapter.eps)
        bs = p["B"] * (delora_scale(adapter, layer) / n)
        return out + p["A"].T @ (bs.T @ x)
    # multiplicative: ((H - I) W)^T x = W^T (H - I)^T x
    return out + layer.w_bar.T @ _transform_t_apply(adapter, x)


def _proj_apply(vecs: np.ndarray, x: np.ndarray) -> np.ndarray:
    sq = np.sum(np.square(vecs), axis=0)
    return vecs @ ((vecs.T @ x) / sq[:, None])


def _xi_t_apply(b_mats: np.ndarray, a_mats: np.ndarray, eps: float, x: np.ndarray) -> np.ndarray:
    # (B Xi A)^T x = A^T Xi B^T x
    _, _, n = _xi_norms(b_mats, a_mats, eps)
    return a_mats.T @ ((b_mats.T @ x) / n[:, None])


def _transform_t_apply(adapter: Adapter, x: np.ndarray) -> np.ndarray:
    p = adapter.params
    v = adapter.variant
    if v is Variant.ETHER:
        return -2.0 * _proj_apply(p["u"], x)
    if v is Variant.ETHER_PLUS:
        return _proj_apply(p["v"], x) - _proj_apply(p["u"], x)
    if v is Variant.ETHER_PLUS_CTRL:
        return 0.5 * adapter.lam * (_proj_apply(p["v"], x) - _proj_apply(p["u"], x))
    if v is Variant.ETHER_PLUS_HIGH_RANK:
        return adapter.lam / adapter.rank * (_proj_apply(p["V"], x) - _proj_apply(p["U"], x))
    bx = _xi_t_apply(p["B"], p["A"], adapter.eps, x)
    dx = _xi_t_apply(p["D"], p["C"], adapter.eps, x)
    return -adapter.lam / adapter.rank * (bx - dx)


def merge(adapter: Adapter | None, layer: PretrainedLayer) -> PretrainedLayer:
    """Fold the adapter into a new frozen layer with zero offset.

    ``merge(None, layer)`` folds only the pending offset, so it is idempotent.
    """
    return PretrainedLayer.create(merged_weight(adapter, layer), layer.bias)


def effective_boundary(adapter: Adapter, layer: PretrainedLayer) -> float | str:
    """Radius of the ball the variant's update lives in.

    Additive DeLoRA variants report the weight-space radius of the raw
    update; ETHER variants report the bound on ``|H - I|_F`` in
    transform space; LoRA and DoRA have none.
    """
    v = adapter.variant
    if v is Variant.DELORA:
        return abs(adapter.lam) * layer.frob_w_bar
    if v is Variant.DELORA_NO_WEIGHT_SCALE:
        return abs(adapter.lam)
    if v in (Variant.ETHER, Variant.ETHER_PLUS):
        return 2.0
    if v in MULTIPLICATIVE:
        return abs(adapter.lam)
    return UNBOUNDED


def weight_boundary(adapter: Adapter, layer: PretrainedLayer) -> float:
    """Bound on ``|raw_update|_F`` in weight space (``inf`` when unbounded).

    For multiplicative variants ``|(H - I) W|_F <= |H - I|_F |W|_F``.
    """
    b = effective_boundary(adapter, layer)
    if b == UNBOUNDED:
        return math.inf
    if adapter.variant in MULTIPLICATIVE:
        return b * layer.frob_w_bar
    return b


def init_adapter(
    variant: Variant | str,
    layer: PretrainedLayer,
    rank: int,
    lambda_init: float = 8.0,
    alpha: float | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Adapter, PretrainedLayer]:
    """Build a fresh adapter and the layer it must be paired with.

    The returned layer carries the frozen offset that makes the adapted
    forward equal the pretrained forward at step 0. ``alpha`` defaults to
    ``rank`` (unit LoRA scale).
    """
    try:
        variant = Variant(variant)
    except ValueError:
        raise AdapterError(f"unknown variant {variant!r}") from None
    if rng is None:
        raise AdapterError("init_adapter needs an rng")
    if rank < 1:
        raise AdapterError(f"rank must be >= 1, got {rank}")
    if variant in PAIRED and rank % 2:
        raise AdapterError(f"{variant} needs an even rank, got {rank}")
    if variant in BOUNDED and not lambda_init > 0:
        raise AdapterError(f"{variant} needs lambda_init > 0, got {lambda_init}")
    if variant is Variant.ETHER:
        rank = 1
    elif variant is Variant.ETHER_PLUS:
        rank = 2
    alpha = float(rank if alpha is None else alpha)
    d, f = layer.d, layer.f
    lam = np.array(float(lambda_init))
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    if variant in (Variant.LORA, *DORA_FAMILY):
        params["A"] = kaiming_uniform(rank, f, rng)
        params["B"] = np.zeros((d, rank))
        if variant is Variant.DORA:
            params["m"] = column_norms(layer.w_bar)
        elif variant is Variant.DORA_FIXED_MAG:
            buffers["m"] = _frozen(column_norms(layer.w_bar))
    elif variant in DELORA_FAMILY:
        params["B"] = kaiming_uniform(d, rank, rng)
        params["A"] = kaiming_uniform(rank, f, rng)
        params["lambda"] = lam
    elif variant is Variant.ETHER:
        params["u"] = kaiming_uniform(d, 1, rng)
    elif variant in (Variant.ETHER_PLUS, Variant.ETHER_PLUS_CTRL):
        params["u"] = kaiming_uniform(d, 1, rng)
        params["v"] = params["u"].copy()
        if variant is Variant.ETHER_PLUS_CTRL:
            params["lambda"] = lam
    elif variant is Variant.ETHER_PLUS_HIGH_RANK:
        params["U"] = kaiming_uniform(d, rank // 2, rng)
        params["V"] = params["U"].copy()
        params["lambda"] = lam
    else:
        half = rank // 2
        params["B"] = kaiming_uniform(d, half, rng)
        params["A"] = kaiming_uniform(half, d, rng)
        params["D"] = kaiming_uniform(d, half, rng)
        params["C"] = kaiming_uniform(half, d, rng)
        params["lambda"] = lam

    params = {k: params[k] for k in PARAM_NAMES[variant]}
    adapter = Adapter(variant, rank, params, buffers, alpha=alpha)
    base = PretrainedLayer.create(layer.w_bar, layer.bias)
    if variant in DELORA_FAMILY or variant in (Variant.ETHER, Variant.ETHER_PLUS_RELAXED):
        base = base.with_offset(raw_update(adapter, base))
    return adapter, base


def ether_plus_two_sided_delta(w: np.ndarray, u, v, u_right, v_right) -> np.ndarray:
    """``H+ W H~+ - W`` with left reflections on ``d`` and right ones on ``f``.

    Used only by the rank-check harness; not a trainable variant.
    """
    left = np.eye(w.shape[0]) + projector_sum(as_matrix(v)) - projector_sum(as_matrix(u))
    right = np.eye(w.shape[1]) + projector_sum(as_matrix(v_right)) - projector_sum(as_matrix(u_right))
    return left @ w @ right - w
