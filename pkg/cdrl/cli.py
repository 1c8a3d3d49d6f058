"""CLI entry point using argparse."""

from __future__ import annotations

import argparse
import logging
import sys
import threading
from pathlib import Path

from .config import COMMANDS, ExperimentSpec, parse_config
from .errors import CDRLError, ConfigError
from .evaluation import (
    ACT_PROBS,
    GENERALIZATION_TABLE,
    OBS_SIGMAS,
    EvalCell,
    EvalReport,
)
from .experiments import (
    create_run_dir,
    load_models,
    run_eval,
    run_generalize,
    run_grid,
    run_sweep,
    run_train,
    sweep_points,
)
from .qnet import MODEL_KINDS
from .reporting import report
from .trainer import TrainResult

# Lock for thread-safe printing from worker callbacks
print_lock = threading.Lock()


class Progress:
    """``[i/total] label`` lines followed by an indented result line."""

    def __init__(self, total: int):
        self.total = total
        self.done = 0

    def __call__(self, label: str, result: str) -> None:
        with print_lock:
            self.done += 1
            print(f"[{self.done}/{self.total}] {label}")
            print(f"         -> {result}")

    def eval_callback(self):
        def on_result(cell: EvalCell, report: EvalReport) -> None:
            self(
                f"{cell.model} {cell.env_id} {cell.noise.label}",
                f"win rate {report.win_rate_mean:.3f} +/- {report.win_rate_std:.3f}, "
                f"reward {report.reward_mean:.2f}",
            )

        return on_result


def _print_reports(reports: list[EvalReport]) -> None:
    wins = [r.win_rate_mean for r in reports]
    print(f"Conditions evaluated: {len(reports)}")
    if wins:
        print(f"Mean win rate: {sum(wins) / len(wins):.3f}")


def run(
    spec: ExperimentSpec, paths: list[Path] | None = None, plot: bool = False
) -> int:
    """Dispatch one command; artifacts land in a fresh run directory."""
    paths = list(paths or [])
    models = None
    points = None
    if spec.command == "report" and not paths:
        raise ConfigError("report needs at least one run directory")
    if spec.command in ("eval", "grid", "generalize"):
        # load before creating the run directory so a bad path leaves nothing behind
        models = load_models([Path(p) for p in spec.checkpoints])
    if spec.command == "sweep":
        points = sweep_points(spec)

    run_dir = create_run_dir(spec)
    print(
        f"Command: {spec.command} | Model: {spec.model_kind} | "
        f"Seeds: {','.join(str(s) for s in spec.seeds)}"
    )
    print(f"Run directory: {run_dir.root}")
    print()

    if spec.command == "train":
        progress = Progress(len(spec.seeds))

        def on_seed(seed: int, result: TrainResult) -> None:
            ema = result.ema_rewards[-1] if result.ema_rewards else float("nan")
            progress(f"seed {seed}", f"EMA reward {ema:.2f} -> {result.checkpoint}")

        results = run_train(spec, run_dir, on_seed)
        summary = [
            f"Trained: {len(results)} model(s)",
            f"Episodes per seed: {spec.train.num_episodes}",
        ]
    elif spec.command == "eval":
        progress = Progress(len(models))
        reports = run_eval(spec, run_dir, models, progress.eval_callback())
        summary = None
    elif spec.command == "grid":
        progress = Progress(len(OBS_SIGMAS) * len(ACT_PROBS) * len(models))
        reports = run_grid(spec, run_dir, models, progress.eval_callback())
        summary = None
    elif spec.command == "generalize":
        progress = Progress(len(GENERALIZATION_TABLE) * len(models))
        reports = run_generalize(spec, run_dir, models, progress.eval_callback())
        summary = None
    elif spec.command == "sweep":
        progress = Progress(len(points) * len(spec.seeds))
        frame = run_sweep(
            spec,
            run_dir,
            points=points,
            on_point=lambda label, seed: progress(
                f"{spec.sweep.axis}={label} seed {seed}", "trained and evaluated"
            ),
        )
        summary = [f"Sweep rows: {len(frame)}"]
    else:
        result = report(paths, run_dir.reports, plot=plot)
        summary = [
            f"Tables: {len(result.tables)}",
            f"Matrices: {len(result.matrices)}",
            f"Plots: {len(result.plots)}",
        ]

    print()
    print("=" * 40)
    if summary is None:
        _print_reports(reports)
    else:
        for line in summary:
            print(line)
    print(f"Artifacts: {run_dir.root}")
    return 0


def main(argv: list[str] | None = None):
    """Main entry point."""
    parser = argparse.ArgumentParser(
        prog="cdrl",
        description="Train and evaluate cerebellar and baseline DDQN agents on Pong.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s train --model cdrl --seeds 1,2,3        Train one agent per seed
  %(prog)s grid runs/*/checkpoints/*.ckpt -w 4     Robustness grid with 4 workers
  %(prog)s sweep --set sweep.axis=topk_fraction    Sensitivity sweep
  %(prog)s report runs/2025*                       Merge results into tables
        """,
    )

    parser.add_argument("command", choices=COMMANDS, help="What to run")

    parser.add_argument(
        "paths",
        nargs="*",
        type=Path,
        help="Checkpoints (eval, grid, generalize) or run directories (report)",
    )

    parser.add_argument("--config", type=Path, help="Config file of key = value lines")

    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one config key (repeatable)",
    )

    parser.add_argument("--out", help="Output directory (default: runs)")

    parser.add_argument("--seeds", help="Comma-separated seeds (default: 1,2,3,4,5)")

    parser.add_argument(
        "--model", choices=MODEL_KINDS, help="Model kind (default: cdrl)"
    )

    parser.add_argument(
        "--gate", choices=("on", "off"), help="Dendritic gate on or off"
    )

    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Log per-episode and per-condition progress",
    )

    parser.add_argument(
        "-w",
        "--workers",
        type=int,
        help="Number of parallel workers (default: 1)",
    )

    parser.add_argument(
        "--plot", action="store_true", help="Render heat maps (report only)"
    )

    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    flags = {
        "command": args.command,
        "out_dir": args.out,
        "seeds": args.seeds,
        "model_kind": args.model,
        "gate.enabled": args.gate,
        "train.workers": args.workers,
        "eval.workers": args.workers,
    }
    if args.paths and args.command != "report":
        flags["checkpoints"] = ",".join(str(p) for p in args.paths)

    try:
        spec = parse_config(args.config, args.overrides, **flags)
        report_paths = args.paths if args.command == "report" else None
        status = run(spec, report_paths, plot=args.plot)
    except CDRLError as e:
        print(f"ERROR: {args.command}: {e}", file=sys.stderr)
        sys.exit(1)
    return status


if __name__ == "__main__":
    sys.exit(main())
