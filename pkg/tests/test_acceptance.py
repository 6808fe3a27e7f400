"""Acceptance gate: one test per criterion, each reporting a pass/fail line.

The lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
terminal summary under "acceptance criteria".
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from delora import cli, reports
from delora.adapters import (
    ALL_VARIANTS,
    PretrainedLayer,
    Variant,
    forward,
    init_adapter,
    merge,
    merged_weight,
    projector_sum,
    xi_scaled_product,
)
from delora.config import RunConfig
from delora.grads import backward, grad_check, randomize
from delora.numkit import column_norms, frobenius_norm, make_rng, spawn
from delora.rankcheck import run_rank_checks
from delora.trainkit import attach, lr_sweep, network_forward, train


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_boundary_invariant():
    rng = make_rng(101)
    start = time.perf_counter()
    worst_prod, worst_scaled, worst_unit = -math.inf, -math.inf, 0.0
    for _ in range(1000):
        d, f, r = rng.integers(1, 65), rng.integers(1, 65), rng.integers(1, 17)
        b, a = rng.standard_normal((d, r)), rng.standard_normal((r, f))
        prod = xi_scaled_product(b, a)
        lam = rng.uniform(0.01, 100.0)
        worst_prod = max(worst_prod, frobenius_norm(prod) - r)
        worst_scaled = max(worst_scaled, frobenius_norm(lam / r * prod) - lam)
        for i in range(r):
            term = xi_scaled_product(b[:, i:i + 1], a[i:i + 1])
            worst_unit = max(worst_unit, abs(frobenius_norm(term) - 1.0))
    elapsed = time.perf_counter() - start
    ok = worst_prod <= 1e-9 and worst_scaled <= 1e-9 and worst_unit <= 1e-12 and elapsed < 5.0
    record(1, ok, f"max(|BxiA|-r)={worst_prod:.3g} max(|scaled|-lam)={worst_scaled:.3g} "
                  f"max unit-term dev={worst_unit:.3g} runtime={elapsed:.2f}s")


def test_criterion_2_ether_fixed_boundary():
    rng = make_rng(102)
    worst_dist, worst_orth = 0.0, 0.0
    for _ in range(100):
        d = int(rng.integers(2, 65))
        u = rng.standard_normal((d, 1))
        u /= np.linalg.norm(u)
        h = np.eye(d) - 2.0 * projector_sum(u)
        worst_dist = max(worst_dist, abs(frobenius_norm(h - np.eye(d)) - 2.0))
        worst_orth = max(worst_orth, frobenius_norm(h @ h.T - np.eye(d)))
    record(2, worst_dist <= 1e-10 and worst_orth < 1e-10,
           f"max ||H-I|-2|={worst_dist:.3g} max |HH^T-I|={worst_orth:.3g}")


def test_criterion_3_rank_bounds():
    cases = {c.name: c for c in run_rank_checks(24, 16, 4, 100, 1e-10, make_rng(103))}
    wanted = ("ether", "ether_plus_one_sided", "ether_plus_two_sided")
    ok = all(cases[n].ok and len(cases[n].ranks) == 100 for n in wanted)
    detail = " ".join(f"{n}:[{min(cases[n].ranks)},{max(cases[n].ranks)}]" for n in wanted)
    record(3, ok, f"rank ranges over 100 trials {detail}")


def test_criterion_4_init_identity():
    worst = 0.0
    for variant in ALL_VARIANTS:
        for seed in range(20):
            rng = make_rng(seed)
            base = PretrainedLayer.create(rng.standard_normal((12, 9)), rng.standard_normal(9))
            ad, lay = init_adapter(variant, base, 4, 8.0, None, rng)
            x = rng.standard_normal((12, 100))
            ref = base.w_bar.T @ x + base.bias
            worst = max(worst, float(np.max(np.abs(forward(ad, lay, x) - ref))))
    record(4, worst < 1e-12, f"max abs error over 10 variants x 20 seeds = {worst:.3g}")


def default_task():
    return cli.build_task(RunConfig())


def test_criterion_5_merge_equivalence():
    cfg = RunConfig()
    task, adapter_rng = default_task()
    worst = 0.0
    for variant, r in zip(ALL_VARIANTS, spawn(adapter_rng, len(ALL_VARIANTS))):
        adapters, layers = attach(task, variant, cfg.rank, cfg.lambda_init, None, r)
        final, _ = train(task, adapters, layers, cli.optimizer(cfg), 200, trace_every=200)
        merged = [merge(a, l) for a, l in zip(final, layers)]
        x = r.standard_normal((task.input_dim, 100))
        for a, l, m in zip(final, layers, merged):
            xi = r.standard_normal((l.d, 100))
            worst = max(worst, float(np.max(np.abs(forward(a, l, xi) - forward(None, m, xi)))))
        adapted, _ = network_forward(final, layers, x)
        plain, _ = network_forward([None] * len(merged), merged, x)
        worst = max(worst, float(np.max(np.abs(adapted - plain))))
    record(5, worst < 1e-10, f"max abs error after 200 steps over 10 variants = {worst:.3g}")


def test_criterion_6_gradient_correctness():
    d, f, r = RunConfig().gradcheck_dims
    rng = make_rng(106)
    worst, failed = 0.0, []
    for variant, vrng in zip(ALL_VARIANTS, spawn(rng, len(ALL_VARIANTS))):
        base = PretrainedLayer.create(vrng.standard_normal((d, f)), vrng.standard_normal(f))
        ad, lay = init_adapter(variant, base, r, 1.0, None, vrng)
        report = grad_check(ad, lay, vrng, tolerance=1e-4, h=1e-6)
        worst = max(worst, max(p.max_rel_error for p in report.params.values()))
        if not report.passed:
            failed.append(str(variant))
    base = PretrainedLayer.create(rng.standard_normal((d, f)))
    radial = 0.0
    for _ in range(20):
        ad, lay = init_adapter("delora", base, r, 1.0, None, rng)
        ad = randomize(ad, rng)
        g = backward(ad, lay, rng.standard_normal((d, 3)), rng.standard_normal((f, 3)))["B"]
        b = ad.params["B"]
        rel = np.abs(np.sum(g * b, axis=0)) / (np.linalg.norm(g, axis=0) * np.linalg.norm(b, axis=0))
        radial = max(radial, float(np.max(rel)))
    ok = not failed and radial <= 1e-9
    record(6, ok, f"worst FD rel error={worst:.3g} failures={failed or 'none'} "
                  f"max relative <dL/db_i, b_i>={radial:.3g}")


def test_criterion_7_dora_column_contract():
    rng = make_rng(107)
    worst_static = 0.0
    for variant in (Variant.DORA, Variant.DORA_FIXED_MAG):
        for _ in range(20):
            base = PretrainedLayer.create(rng.standard_normal((10, 7)))
            ad, lay = init_adapter(variant, base, 3, 1.0, None, rng)
            ad = randomize(ad, rng)
            cols = column_norms(merged_weight(ad, lay))
            worst_static = max(worst_static, float(np.max(np.abs(cols - ad.magnitude))))
    cfg = RunConfig()
    task, adapter_rng = default_task()
    adapters, layers = attach(task, Variant.DORA_FIXED_MAG, cfg.rank, 1.0, None, adapter_rng)
    init_cols = [column_norms(l.w_bar) for l in layers]
    drift = [0.0]

    def check(step, ads):
        for a, l, c0 in zip(ads, layers, init_cols):
            drift[0] = max(drift[0], float(np.max(np.abs(column_norms(merged_weight(a, l)) - c0))))

    _, trace = train(task, adapters, layers, cli.optimizer(cfg), 300, trace_every=100, on_step=check)
    moved = max(trace[-1].dist_to_pretrained)
    ok = worst_static <= 1e-12 and drift[0] <= 1e-10 and moved > 0
    record(7, ok, f"max |colnorm-m|={worst_static:.3g} fixed-magnitude drift over 300 steps={drift[0]:.3g} "
                  f"(weights moved {moved:.3g})")


def test_criterion_8_desk_scale_sweep(tmp_path):
    cfg = {"trace_every": 1}
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "sweep"
    start = time.perf_counter()
    code = cli.main(["sweep", "--config", str(path), "--out", str(out)])
    elapsed = time.perf_counter() - start
    rows = reports.read_csv(out / "sweep_summary.csv")
    defaults = RunConfig()
    expected = {(v.value, float(m)) for v in defaults.variants for m in defaults.multipliers}
    got = {(r["variant"], float(r["multiplier"])) for r in rows}
    flags_ok = all(r["diverged"] in ("true", "false") for r in rows)
    worst_excess, checked = -math.inf, 0
    for m in defaults.multipliers:
        trace = reports.parse_trace(out / "traces" / f"delora_main_x{m:g}.csv")
        for rec in trace:
            for dist, lam, layer_bound in zip(rec.dist_to_pretrained, rec.lambda_value, rec.boundary):
                worst_excess = max(worst_excess, dist - layer_bound)
                checked += 1
    n_steps = defaults.steps + 1
    diverged = sorted(f"{r['variant']}x{float(r['multiplier']):g}" for r in rows if r["diverged"] == "true")
    ok = (code == 0 and len(rows) == 18 and got == expected and flags_ok
          and worst_excess <= 1e-6 and checked == len(defaults.multipliers) * n_steps * defaults.depth and elapsed < 300)
    record(8, ok, f"rows={len(rows)} delora max(dist-|lam|*|W|)={worst_excess:.3g} over {checked} "
                  f"traced layer-steps, diverged={diverged or 'none'}, runtime={elapsed:.1f}s")


def test_criterion_8_boundary_column_is_lambda_times_norm():
    cfg = RunConfig(steps=20)
    task, adapter_rng = default_task()
    seed = int(adapter_rng.integers(2**63))
    run = lr_sweep(task, "delora", cli.optimizer(cfg), [1.0], 20, seed, lambda_init=cfg.lambda_init,
                   trace_every=1)[0]
    for rec in run.trace:
        for lam, bound, layer in zip(rec.lambda_value, rec.boundary, task.pretrained):
            assert bound == pytest.approx(abs(lam) * layer.frob_w_bar, rel=1e-12)


def test_criterion_9_delora_axes_stable():
    cfg = RunConfig()
    task, adapter_rng = default_task()
    seed = int(adapter_rng.integers(2**63))
    multipliers = [m for m in cfg.multipliers if m <= 16]
    diverged, worst = [], 0.0
    for axis in ("main", "lambda", "both"):
        runs = lr_sweep(task, "delora", cli.optimizer(cfg), multipliers, cfg.steps, seed, axis=axis,
                        rank=cfg.rank, lambda_init=cfg.lambda_init, trace_every=cfg.trace_every)
        diverged += [f"{axis}x{r.multiplier:g}" for r in runs if r.diverged]
        worst = max(worst, max(r.final_loss for r in runs))
    n = 3 * len(multipliers)
    record(9, not diverged, f"{n} runs, diverged={diverged or 'none'}, worst final loss={worst:.3g}")


def _snapshot(out: Path) -> dict[str, bytes]:
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    cfg = {"d": 12, "f": 10, "n_samples": 64, "steps": 60, "trace_every": 10, "rank_trials": 5,
           "variants": ["lora", "dora", "delora"], "multipliers": [1, 8, 32], "seed": 7}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    mismatched, codes = [], {}
    for command in ("train", "sweep", "gradcheck", "rankcheck", "norms", "merge"):
        snaps = []
        for rep in range(2):
            out = tmp_path / f"{command}_{rep}"
            extra = []
            if command == "merge":
                extra = ["--checkpoint", str(tmp_path / "train_0" / "checkpoint.bin")]
            codes[command] = cli.main([command, "--config", str(cfg_path), "--out", str(out), *extra])
            snaps.append(_snapshot(out))
        if not snaps[0] or snaps[0] != snaps[1]:
            mismatched.append(command)
    ok = not mismatched and all(c == 0 for c in codes.values())
    record(10, ok, f"6 subcommands repeated, differing outputs={mismatched or 'none'}, exit codes={codes}")
