"""Desk-scale teacher/student finetuning with distance telemetry."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .adapters import (
    Adapter,
    PretrainedLayer,
    Variant,
    forward,
    init_adapter,
    merged_weight,
    weight_boundary,
)
from .grads import GradBundle, backward, input_grad
from .numkit import ShapeError, column_norms, frobenius_norm, kaiming_uniform, make_rng, spawn

DIVERGENCE_LOSS = 1e6
SWEEP_AXES = ("main", "lambda", "both")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, trace: list["TraceRecord"] | None = None):
        self.step = step
        self.loss = loss
        self.trace = trace or []
        super().__init__(f"training diverged at step {step} (loss={loss!r})")


@dataclass
class TeacherTask:
    pretrained: list[PretrainedLayer]
    teacher_perturbation: list[np.ndarray]
    inputs: np.ndarray
    targets: np.ndarray
    noise_std: float

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[0]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[0]

    @property
    def depth(self) -> int:
        return len(self.pretrained)

    def teacher_layers(self) -> list[PretrainedLayer]:
        return [
            PretrainedLayer.create(layer.w_bar + p, layer.bias)
            for layer, p in zip(self.pretrained, self.teacher_perturbation)
        ]


def network_forward(adapters, layers, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Stack of adapted layers with tanh in between; returns output and layer inputs."""
    inputs = []
    h = x
    for i, (ad, layer) in enumerate(zip(adapters, layers)):
        inputs.append(h)
        h = forward(ad, layer, h)
        if i < len(layers) - 1:
            h = np.tanh(h)
    return h, inputs


def make_task(
    d: int,
    f: int,
    depth: int,
    n_samples: int,
    perturb_scale: float,
    noise_std: float,
    rng: np.random.Generator,
    perturb_rank: int | None = 4,
) -> TeacherTask:
    """Random frozen network plus a perturbed teacher that labels Gaussian inputs.

    The first layer maps ``d`` to ``f`` features, later ones ``f`` to ``f``.
    Each teacher perturbation is a random matrix of rank ``perturb_rank``
    (full rank when None) with Frobenius norm ``perturb_scale`` times the
    norm of the layer it perturbs.
    """
    if min(d, f, depth, n_samples) < 1:
        raise ValueError("task dimensions must be >= 1")
    if perturb_scale < 0 or noise_std < 0:
        raise ValueError("perturb_scale and noise_std must be nonnegative")
    streams = spawn(rng, depth + 1)
    layers, perts = [], []
    for k in range(depth):
        r = streams[k]
        fan_in = d if k == 0 else f
        w = kaiming_uniform(fan_in, f, r)
        bound = 1.0 / math.sqrt(fan_in)
        b = r.uniform(-bound, bound, size=(f, 1))
        if perturb_rank is None:
            p = r.standard_normal(w.shape)
        else:
            p = r.standard_normal((fan_in, perturb_rank)) @ r.standard_normal((perturb_rank, f))
        p *= perturb_scale * frobenius_norm(w) / frobenius_norm(p)
        layers.append(PretrainedLayer.create(w, b))
        perts.append(p)
    data = streams[depth]
    x = data.standard_normal((d, n_samples))
    task = TeacherTask(layers, perts, x, np.empty((f, n_samples)), noise_std)
    clean, _ = network_forward([None] * depth, task.teacher_layers(), x)
    task.targets = clean + noise_std * data.standard_normal(clean.shape)
    return task


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    diff = pred - target
    return float(np.mean(np.square(diff))), 2.0 * diff / diff.size


@dataclass
class OptimState:
    method: str = "adam"
    lr_main: float = 1e-2
    lr_lambda: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")

    def fresh(self) -> "OptimState":
        return replace(self, step=0, exp_avg={}, exp_avg_sq={})

    def lr_for(self, name: str) -> float:
        return self.lr_lambda if name == "lambda" else self.lr_main


def optim_step(opt: OptimState, adapter: Adapter, grads: GradBundle) -> tuple[Adapter, OptimState]:
    """In-place update of *adapter*; lambda follows ``lr_lambda``, the rest ``lr_main``."""
    if set(grads) != set(adapter.params):
        raise KeyError(f"gradient keys {sorted(grads)} do not match parameters {sorted(adapter.params)}")
    opt.step += 1
    b1, b2 = opt.betas
    for name, g in grads.items():
        p = adapter.params[name]
        lr = opt.lr_for(name)
        if opt.method == "sgd":
            p -= lr * g
            continue
        m = opt.exp_avg.setdefault(name, np.zeros_like(p))
        v = opt.exp_avg_sq.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        m_hat = m / (1 - b1**opt.step)
        v_hat = v / (1 - b2**opt.step)
        p -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return adapter, opt


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    dist_to_pretrained: tuple[float, ...]
    lambda_value: tuple[float, ...]
    boundary: tuple[float, ...]


def trace_record(step: int, loss: float, adapters, layers) -> TraceRecord:
    dist, lam, bound = [], [], []
    for ad, layer in zip(adapters, layers):
        dist.append(frobenius_norm(merged_weight(ad, layer) - layer.w_bar))
        lam.append(ad.lam if ad is not None and "lambda" in ad.params else math.nan)
        bound.append(math.inf if ad is None else weight_boundary(ad, layer))
    return TraceRecord(step, loss, tuple(dist), tuple(lam), tuple(bound))


def attach(task: TeacherTask, variant, rank: int, lambda_init: float, alpha: float | None,
           rng: np.random.Generator) -> tuple[list[Adapter], list[PretrainedLayer]]:
    """One freshly initialized adapter per pretrained layer, one rng stream each."""
    pairs = [
        init_adapter(variant, layer, rank, lambda_init, alpha, r)
        for layer, r in zip(task.pretrained, spawn(rng, task.depth))
    ]
    return [a for a, _ in pairs], [l for _, l in pairs]


def train(
    task: TeacherTask,
    adapters: list[Adapter],
    layers: list[PretrainedLayer],
    opt: OptimState,
    steps: int,
    trace_every: int = 50,
    divergence_loss: float | None = None,
    on_step: Callable[[int, list[Adapter]], None] | None = None,
) -> tuple[list[Adapter], list[TraceRecord]]:
    """Full-batch training; traces step 0, every ``trace_every`` steps and the last step.

    The record for step ``k`` is taken after ``k`` updates. A non-finite loss
    (or one above ``divergence_loss`` when given) raises TrainingDiverged.
    ``on_step(k, adapters)`` is called after the k-th update.
    """
    if steps < 0 or trace_every < 1:
        raise ValueError("steps must be >= 0 and trace_every >= 1")
    adapters = [a.copy() for a in adapters]
    opts = [opt.fresh() for _ in adapters]
    trace: list[TraceRecord] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps + 1):
            out, inputs = network_forward(adapters, layers, task.inputs)
            loss, g = mse_loss(out, task.targets)
            if not math.isfinite(loss) or (divergence_loss is not None and loss > divergence_loss):
                raise TrainingDiverged(step, loss, trace)
            if step % trace_every == 0 or step == steps:
                trace.append(trace_record(step, loss, adapters, layers))
            if step == steps:
                break
            grads = []
            for i in reversed(range(len(layers))):
                grads.append(backward(adapters[i], layers[i], inputs[i], g))
                if i > 0:
                    g = input_grad(adapters[i], layers[i], g) * (1.0 - np.square(inputs[i]))
            for ad, o, gb in zip(adapters, opts, reversed(grads)):
                optim_step(o, ad, gb)
            if on_step is not None:
                on_step(step + 1, adapters)
    return adapters, trace


@dataclass
class SweepRun:
    variant: Variant
    axis: str
    multiplier: float
    final_loss: float
    final_distance: tuple[float, ...]
    diverged: bool
    diverged_step: int | None
    trace: list[TraceRecord]


def scaled_optimizer(base: OptimState, axis: str, multiplier: float) -> OptimState:
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    lr_main = base.lr_main * (multiplier if axis in ("main", "both") else 1.0)
    lr_lambda = base.lr_lambda * (multiplier if axis in ("lambda", "both") else 1.0)
    return replace(base.fresh(), lr_main=lr_main, lr_lambda=lr_lambda)


def _sweep_point(args) -> SweepRun:
    task, variant, rank, lambda_init, alpha, base, axis, mult, steps, trace_every, seed = args
    adapters, layers = attach(task, variant, rank, lambda_init, alpha, make_rng(seed))
    opt = scaled_optimizer(base, axis, mult)
    try:
        final, trace = train(task, adapters, layers, opt, steps, trace_every, DIVERGENCE_LOSS)
    except TrainingDiverged as e:
        last = e.trace[-1].dist_to_pretrained if e.trace else tuple(math.nan for _ in layers)
        return SweepRun(Variant(variant), axis, mult, e.loss, last, True, e.step, e.trace)
    rec = trace[-1]
    return SweepRun(Variant(variant), axis, mult, rec.loss, rec.dist_to_pretrained, False, None, trace)


def lr_sweep(
    task: TeacherTask,
    variant,
    base: OptimState,
    multipliers: list[float],
    steps: int,
    rng: np.random.Generator | int,
    axis: str = "main",
    rank: int = 4,
    lambda_init: float = 8.0,
    alpha: float | None = None,
    trace_every: int = 50,
    jobs: int = 1,
) -> list[SweepRun]:
    """One independent run per learning-rate multiplier.

    Every run starts from the same adapter initialization (the seed is drawn
    once), so runs differ only in the scaled learning rates. Diverged runs are
    recorded, not raised.
    """
    if not multipliers or any(m <= 0 for m in multipliers):
        raise ValueError("multipliers must be a nonempty list of positive numbers")
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    seed = rng if isinstance(rng, int) else int(rng.integers(2**63))
    jobs_args = [
        (task, variant, rank, lambda_init, alpha, base, axis, float(m), steps, trace_every, seed)
        for m in multipliers
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_point, jobs_args))
    return [_sweep_point(a) for a in jobs_args]


def column_norm_report(layers: list[PretrainedLayer], labels: list[str] | None = None) -> list[dict]:
    """Mean and standard deviation of each layer's column norms."""
    if labels is None:
        labels = [f"layer_{i}" for i in range(len(layers))]
    if len(labels) != len(layers):
        raise ValueError("one label per layer required")
    rows = []
    for label, layer in zip(labels, layers):
        cn = column_norms(layer.w_bar)
        rows.append({"label": label, "rows": layer.d, "cols": layer.f,
                     "mean_column_norm": float(np.mean(cn)), "std_column_norm": float(np.std(cn))})
    return rows
