"""``delora`` command line.

Exit codes: 0 success, 1 configuration or input error, 2 training divergence,
3 gradient-check failure, 4 rank bound violated.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, reports
from .adapters import ALL_VARIANTS, PretrainedLayer, init_adapter, merge
from .config import ConfigError, RunConfig, canonical_json, load_config, override
from .grads import grad_check
from .numkit import make_rng, spawn
from .rankcheck import HEADER as RANK_HEADER
from .rankcheck import run_rank_checks
from .trainkit import (
    DIVERGENCE_LOSS,
    OptimState,
    TrainingDiverged,
    attach,
    column_norm_report,
    lr_sweep,
    make_task,
    train,
)

log = logging.getLogger("delora")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK, EXIT_RANK = 0, 1, 2, 3, 4
# file locations stay out of the checkpoint sidecar so outputs do not depend on where they are written
FILE_KEYS = ("out", "checkpoint", "layers")


def build_task(cfg: RunConfig):
    task_rng, adapter_rng = spawn(make_rng(cfg.seed), 2)
    task = make_task(cfg.d, cfg.f, cfg.depth, cfg.n_samples, cfg.perturb_scale, cfg.noise_std, task_rng,
                     perturb_rank=cfg.perturb_rank)
    return task, adapter_rng


def optimizer(cfg: RunConfig) -> OptimState:
    return OptimState(cfg.optimizer, cfg.lr_main, cfg.lr_lambda)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig) -> int:
    task, adapter_rng = build_task(cfg)
    adapters, layers = attach(task, cfg.variant, cfg.rank, cfg.lambda_init, cfg.alpha, adapter_rng)
    out = _out(cfg)
    try:
        final, trace = train(task, adapters, layers, optimizer(cfg), cfg.steps, cfg.trace_every, DIVERGENCE_LOSS)
    except TrainingDiverged as e:
        reports.write_trace(out / "trace.csv", e.trace, task.depth)
        print(f"{cfg.variant}: diverged at step {e.step} (loss {e.loss!r})", file=sys.stderr)
        return EXIT_DIVERGED
    reports.write_trace(out / "trace.csv", trace, task.depth)
    hyper = {k: v for k, v in json.loads(canonical_json(cfg)).items() if k not in FILE_KEYS}
    checkpoint.save(out / "checkpoint.bin", layers, final, extra=hyper)
    last = trace[-1]
    dists = ", ".join(f"{x:.4g}" for x in last.dist_to_pretrained)
    print(f"{cfg.variant}: step {last.step} loss {last.loss:.6g} (initial {trace[0].loss:.6g}); "
          f"distance to pretrained per layer [{dists}]")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    task, adapter_rng = build_task(cfg)
    seed = int(adapter_rng.integers(2**63))
    out = _out(cfg)
    runs = []
    for variant in cfg.variants:
        runs += lr_sweep(task, variant, optimizer(cfg), cfg.multipliers, cfg.steps, seed, axis=cfg.axis,
                         rank=cfg.rank, lambda_init=cfg.lambda_init, alpha=cfg.alpha,
                         trace_every=cfg.trace_every, jobs=cfg.jobs)
    for r in runs:
        reports.write_trace(out / "traces" / f"{r.variant}_{r.axis}_x{r.multiplier:g}.csv", r.trace, task.depth)
    header = reports.sweep_header(task.depth)
    rows = reports.sweep_rows(runs)
    reports.write_csv(out / "sweep_summary.csv", header, rows)
    print(reports.aligned_table(header, rows))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    d, f, r = cfg.gradcheck_dims
    rng = make_rng(cfg.seed)
    rows = []
    ok = True
    for variant, vrng in zip(ALL_VARIANTS, spawn(rng, len(ALL_VARIANTS))):
        layer = PretrainedLayer.create(vrng.standard_normal((d, f)), vrng.standard_normal(f))
        rank = r + (r % 2)
        adapter, layer = init_adapter(variant, layer, rank, 1.0, None, vrng)
        report = grad_check(adapter, layer, vrng, cfg.tolerance, cfg.fd_step, trials=cfg.gradcheck_trials)
        ok &= report.passed
        rows += [list(row.values()) for row in report.rows()]
    header = ["variant", "param", "max_rel_error", "mean_rel_error", "h", "tolerance", "verdict"]
    reports.write_csv(_out(cfg) / "gradcheck.csv", header, rows)
    print(reports.aligned_table(header, rows))
    print("all variants pass" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_rankcheck(cfg: RunConfig) -> int:
    cases = run_rank_checks(cfg.d, cfg.f, cfg.rank, cfg.rank_trials, cfg.rank_tol, make_rng(cfg.seed))
    rows = [c.row() for c in cases]
    reports.write_csv(_out(cfg) / "rankcheck.csv", RANK_HEADER, rows)
    print(reports.aligned_table(RANK_HEADER, rows))
    return EXIT_OK if all(c.ok for c in cases) else EXIT_RANK


def cmd_norms(cfg: RunConfig) -> int:
    if cfg.layers:
        layers, _ = checkpoint.load(cfg.layers)
    else:
        layers = build_task(cfg)[0].pretrained
    rows = column_norm_report(layers)
    table = [[row[k] for k in reports.NORMS_HEADER] for row in rows]
    reports.write_csv(_out(cfg) / "norms.csv", reports.NORMS_HEADER, table)
    print(reports.aligned_table(reports.NORMS_HEADER, table))
    return EXIT_OK


def cmd_merge(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: merge needs a checkpoint path")
    layers, adapters = checkpoint.load(cfg.checkpoint)
    merged = [merge(a, l) for a, l in zip(adapters, layers)]
    path = checkpoint.save(_out(cfg) / "merged.bin", merged)
    print(f"merged {len(merged)} layer(s) into {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "rankcheck": cmd_rankcheck,
    "norms": cmd_norms,
    "merge": cmd_merge,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--tolerance", type=float, help="gradcheck tolerance override")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint to merge")
    common.add_argument("--layers", metavar="PATH", help="saved layers for norms")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    parser = _Parser(prog="delora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = make_parser().parse_args(argv)
        cfg = override(load_config(args.config), seed=args.seed, out=args.out, tolerance=args.tolerance,
                       checkpoint=args.checkpoint, layers=args.layers)
        if args.print_config:
            sys.stdout.write(canonical_json(cfg))
            return EXIT_OK
        return COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # exit codes are a closed set
        log.exception("unexpected failure")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
