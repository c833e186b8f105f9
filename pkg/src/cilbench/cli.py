"""Command-line entry points: run, sweep, eval.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import debias, nn
from .checkpoint import load_checkpoint
from .config import load_config
from .errors import ConfigurationError
from .harness import emit_results, emit_sweep, run_experiment, sweep
from .protocol import load_dataset


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cilbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one incremental experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p_run.add_argument("--resume", default="", help="checkpoint to continue from")

    p_sweep = sub.add_parser("sweep", help="run a grid over one config axis")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p_sweep.add_argument("--axis", required=True, choices=["R", "T", "K", "scheme"])
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--out", default="", help="sweep table CSV path")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--format", default="csv", choices=["csv", "raw-f32"])
    p_eval.add_argument("--no-debias", action="store_true", help="ignore any stored head state")
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.resume:
        cfg.output.resume = args.resume
    result = run_experiment(cfg)
    if cfg.output.results:
        emit_results(result, cfg.output.results)
        print(f"results written to {cfg.output.results}")
    for t, acc in enumerate(result.overall):
        print(f"step {t}: overall accuracy {acc:.4f}")
    print(f"avg incremental accuracy {result.avg_incremental_accuracy:.4f}")
    if result.forgetting_per_step:
        print(f"avg incremental forgetting {result.avg_incremental_forgetting:.4f}")
    print(f"wall clock {result.wall_clock:.1f}s")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.overrides)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    result = sweep(cfg, args.axis, values)
    for agg in result.aggregate():
        print(
            f"{args.axis}={agg['value']}: acc {agg['acc_mean']:.4f} +/- {agg['acc_std']:.4f}, "
            f"forgetting {agg['forget_mean']:.4f} +/- {agg['forget_std']:.4f} ({agg['runs']} runs)"
        )
    if args.out:
        emit_sweep(result, args.out)
        print(f"sweep table written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    # labels must already be in classifier index space (order of first use)
    ds = load_dataset(args.data, args.format, class_count=state.model.num_classes)
    head = None if args.no_debias else state.head
    predict = debias.apply_to_model(state.model, head, enabled=head is not None)
    pred = np.argmax(predict(ds.inputs), axis=1)
    overall = float((pred == ds.labels).mean())
    print(f"samples {len(ds)}, classes {state.model.num_classes}")
    for c in np.unique(ds.labels):
        mask = ds.labels == c
        print(f"class {int(c)}: accuracy {float((pred[mask] == c).mean()):.4f} ({int(mask.sum())} samples)")
    print(f"overall accuracy {overall:.4f}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "sweep": _cmd_sweep, "eval": _cmd_eval}
    try:
        return handlers[args.command](args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
