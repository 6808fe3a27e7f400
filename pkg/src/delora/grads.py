"""Analytic backward passes for every adapter variant, plus an FD oracle.

The scalar being differentiated is ``L = <upstream, forward(x)>``; any other
loss reaches these functions through its output gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adapters import (
    DELORA_FAMILY,
    DORA_FAMILY,
    Adapter,
    PretrainedLayer,
    Variant,
    forward,
    merged_weight,
)
from .numkit import ShapeError, as_matrix, column_norms, frobenius_norm

GradBundle = dict[str, np.ndarray]


def _xi_grads(gk: np.ndarray, b_mats: np.ndarray, a_mats: np.ndarray, coef: float, eps: float):
    """Gradients of ``coef * <gk, B Xi A>`` w.r.t. B and A, and ``<gk, B Xi A>``.

    Each b_i gradient is the quotient-rule projection
    ``coef / n_i * (gk a_i - (b_i^T gk a_i) b_i / |b_i|^2)``, which has no
    radial component. Components clamped by ``eps`` lose the normalizer
    derivative.
    """
    ga = gk @ a_mats.T
    gtb = gk.T @ b_mats
    p = np.einsum("ij,ij->j", b_mats, ga)
    nb = column_norms(b_mats)
    na = np.sqrt(np.sum(np.square(a_mats), axis=1))
    raw = nb * na
    live = raw >= eps
    n = np.where(live, raw, eps)
    rb = np.where(live, p / np.where(live, nb * nb, 1.0), 0.0)
    ra = np.where(live, p / np.where(live, na * na, 1.0), 0.0)
    d_b = coef * (ga - b_mats * rb) / n
    d_a = coef * (gtb.T - a_mats * ra[:, None]) / n[:, None]
    return d_b, d_a, float(np.sum(p / n))


def _proj_grad(gk: np.ndarray, vecs: np.ndarray):
    """Gradient of ``sum_i u_i^T gk u_i / |u_i|^2`` w.r.t. the columns, and its value."""
    sq = np.sum(np.square(vecs), axis=0)
    sym = (gk + gk.T) @ vecs
    q = np.einsum("ij,ij->j", vecs, gk @ vecs)
    return sym / sq - 2.0 * vecs * (q / (sq * sq)), float(np.sum(q / sq))


def backward(adapter: Adapter, layer: PretrainedLayer, x, upstream) -> GradBundle:
    """Exact gradients of ``<upstream, forward(adapter, layer, x)>``."""
    x = as_matrix(x)
    g = as_matrix(upstream)
    if x.shape[0] != layer.d or g.shape != (layer.f, x.shape[1]):
        raise ShapeError("backward", x.shape, g.shape, layer.w_bar.shape)
    v = adapter.variant
    p = adapter.params
    r = adapter.rank
    out: GradBundle = {}

    if v is Variant.LORA:
        s = adapter.alpha / r
        out["B"] = s * (x @ (p["A"] @ g).T)
        out["A"] = s * ((p["B"].T @ x) @ g.T)
    elif v in DORA_FAMILY:
        s = adapter.alpha / r
        gw = x @ g.T
        vmat = layer.w_bar + s * (p["B"] @ p["A"])
        nv = np.maximum(column_norms(vmat), adapter.eps)
        vhat = vmat / nv
        radial = np.sum(vhat * gw, axis=0)
        gv = (gw - vhat * radial) * (adapter.magnitude / nv)
        out["B"] = s * (gv @ p["A"].T)
        out["A"] = s * (p["B"].T @ gv)
        if v is Variant.DORA:
            out["m"] = radial
    elif v in DELORA_FAMILY:
        unit = layer.frob_w_bar / r if v is Variant.DELORA else 1.0 / r
        gw = x @ g.T
        out["B"], out["A"], inner = _xi_grads(gw, p["B"], p["A"], adapter.lam * unit, adapter.eps)
        out["lambda"] = np.array(unit * inner)
    else:
        # <Gw, K W> = <Gw W^T, K>
        gk = x @ (layer.w_bar @ g).T
        if v is Variant.ETHER:
            gu, _ = _proj_grad(gk, p["u"])
            out["u"] = -2.0 * gu
        elif v is Variant.ETHER_PLUS:
            gu, _ = _proj_grad(gk, p["u"])
            gv, _ = _proj_grad(gk, p["v"])
            out["u"], out["v"] = -gu, gv
        elif v is Variant.ETHER_PLUS_CTRL:
            gu, qu = _proj_grad(gk, p["u"])
            gv, qv = _proj_grad(gk, p["v"])
            half = 0.5 * adapter.lam
            out["u"], out["v"] = -half * gu, half * gv
            out["lambda"] = np.array(0.5 * (qv - qu))
        elif v is Variant.ETHER_PLUS_HIGH_RANK:
            gu, qu = _proj_grad(gk, p["U"])
            gv, qv = _proj_grad(gk, p["V"])
            c = adapter.lam / r
            out["U"], out["V"] = -c * gu, c * gv
            out["lambda"] = np.array((qv - qu) / r)
        else:
            c = adapter.lam / r
            out["B"], out["A"], s_ba = _xi_grads(gk, p["B"], p["A"], -c, adapter.eps)
            out["D"], out["C"], s_dc = _xi_grads(gk, p["D"], p["C"], c, adapter.eps)
            out["lambda"] = np.array(-(s_ba - s_dc) / r)
    return {k: out[k] for k in adapter.param_names}


def input_grad(adapter: Adapter | None, layer: PretrainedLayer, upstream) -> np.ndarray:
    """Gradient of ``<upstream, forward(x)>`` w.r.t. ``x``."""
    return merged_weight(adapter, layer) @ as_matrix(upstream)


def probe_loss(adapter: Adapter, layer: PretrainedLayer, x, upstream) -> float:
    return float(np.sum(as_matrix(upstream) * forward(adapter, layer, x)))


def fd_gradient(adapter: Adapter, layer: PretrainedLayer, x, upstream, param_name: str, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of the probe loss w.r.t. one parameter."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    if param_name not in adapter.params:
        raise KeyError(f"{adapter.variant} has no learnable parameter {param_name!r}")
    probe = adapter.copy()
    theta = probe.params[param_name]
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = probe_loss(probe, layer, x, upstream)
        flat[i] = orig - h
        minus = probe_loss(probe, layer, x, upstream)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    return frobenius_norm(analytic - fd) / max(frobenius_norm(fd), 1e-30)


@dataclass
class ParamCheck:
    max_rel_error: float
    mean_rel_error: float


@dataclass
class GradCheckReport:
    variant: Variant
    h: float
    tolerance: float
    params: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.max_rel_error < self.tolerance for c in self.params.values())

    def rows(self) -> list[dict]:
        return [
            {
                "variant": str(self.variant),
                "param": name,
                "max_rel_error": c.max_rel_error,
                "mean_rel_error": c.mean_rel_error,
                "h": self.h,
                "tolerance": self.tolerance,
                "verdict": "pass" if c.max_rel_error < self.tolerance else "fail",
            }
            for name, c in self.params.items()
        ]


def randomize(adapter: Adapter, rng: np.random.Generator) -> Adapter:
    """Copy of *adapter* with every learnable factor redrawn at random.

    Scales (lambda, DoRA magnitudes) stay positive; low-rank factors are
    standard normal so no gradient is structurally zero.
    """
    out = adapter.copy()
    for name, val in out.params.items():
        if name == "lambda":
            out.params[name] = np.array(rng.uniform(0.5, 2.0))
        elif name == "m":
            out.params[name] = val * rng.uniform(0.5, 1.5, size=val.shape)
        else:
            out.params[name] = rng.standard_normal(val.shape)
    return out


def grad_check(
    adapter: Adapter,
    layer: PretrainedLayer,
    rng: np.random.Generator,
    tolerance: float = 1e-4,
    h: float = 1e-6,
    n: int = 3,
    trials: int = 1,
    backward_fn: Callable[..., GradBundle] = backward,
) -> GradCheckReport:
    """Compare *backward_fn* against central differences on random states.

    Every trial redraws the learnable factors, the inputs and the upstream
    gradient; per parameter the report keeps the max and mean of the
    Frobenius relative error across trials.
    """
    if tolerance <= 0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    errs: dict[str, list[float]] = {name: [] for name in adapter.param_names}
    for _ in range(trials):
        inst = randomize(adapter, rng)
        x = rng.standard_normal((layer.d, n))
        up = rng.standard_normal((layer.f, n))
        analytic = backward_fn(inst, layer, x, up)
        for name in inst.param_names:
            fd = fd_gradient(inst, layer, x, up, name, h)
            errs[name].append(relative_error(analytic[name], fd))
    report = GradCheckReport(adapter.variant, h, tolerance)
    for name, e in errs.items():
        report.params[name] = ParamCheck(float(np.max(e)), float(np.mean(e)))
    return report
