"""Command implementations: each writes its artifacts into one run directory."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint
from .config import ExperimentSpec, write_spec
from .errors import ConfigError
from .evaluation import (
    ACT_PROBS,
    GENERALIZATION_COLUMNS,
    OBS_SIGMAS,
    EvalCell,
    EvalReport,
    NoiseSpec,
    evaluate,
    generalization_sweep,
    reports_frame,
    robustness_grid,
)
from .qnet import ModelConfig, QNetwork
from .reporting import SWEEP_COLUMNS, write_matrices
from .trainer import TrainResult, train

logger = logging.getLogger(__name__)

EvalCallback = Callable[[EvalCell, EvalReport], None]


@dataclass(frozen=True)
class RunDir:
    root: Path

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def spec_path(self) -> Path:
        return self.root / "spec.conf"


def create_run_dir(spec: ExperimentSpec, now: datetime | None = None) -> RunDir:
    """``<out_dir>/<timestamp>-<command>-<model_kind>/`` holding the resolved spec."""
    stamp = (now or datetime.now()).strftime("%Y%m%d-%H%M%S")
    base = Path(spec.out_dir) / f"{stamp}-{spec.command}-{spec.model_kind}"
    root = base
    suffix = 1
    while root.exists():
        root = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    run = RunDir(root)
    for path in (run.logs, run.checkpoints, run.reports):
        path.mkdir(parents=True)
    write_spec(spec, run.spec_path)
    return run


def load_models(paths: Sequence[Path]) -> dict[str, QNetwork]:
    """Load checkpoints keyed by model kind, or by file stem when kinds repeat."""
    if not paths:
        raise ConfigError("no checkpoints given")
    networks = [load_checkpoint(Path(p)) for p in paths]
    kinds = [n.kind for n in networks]
    unique = len(set(kinds)) == len(kinds)
    return {
        (network.kind if unique else Path(path).stem): network
        for path, network in zip(paths, networks, strict=True)
    }


def run_train(
    spec: ExperimentSpec,
    run: RunDir,
    on_seed: Callable[[int, TrainResult], None] | None = None,
) -> list[TrainResult]:
    """One model per seed; seeds run on ``train.workers`` threads."""

    def train_seed(seed: int) -> TrainResult:
        return train(
            spec.env,
            spec.train,
            spec.model_kind,
            seed,
            model_config=spec.model,
            gate_config=spec.gate,
            log_path=run.logs / f"train-{spec.model_kind}-seed{seed}.csv",
            checkpoint_dir=run.checkpoints,
        )

    results: dict[int, TrainResult] = {}
    with ThreadPoolExecutor(max_workers=spec.train.workers) as executor:
        futures = {executor.submit(train_seed, seed): seed for seed in spec.seeds}
        for future in as_completed(futures):
            seed = futures[future]
            results[seed] = future.result()
            if on_seed is not None:
                on_seed(seed, results[seed])
    return [results[seed] for seed in spec.seeds]


def _write(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False)
    logger.info("wrote %s", path)
    return path


def run_eval(
    spec: ExperimentSpec,
    run: RunDir,
    models: dict[str, QNetwork],
    on_result: EvalCallback | None = None,
) -> list[EvalReport]:
    reports = []
    for model_id, network in models.items():
        report = evaluate(
            network,
            spec.env,
            spec.noise,
            spec.eval.episodes,
            spec.seeds,
            spec.eval.max_episode_steps,
            model_id=model_id,
        )
        reports.append(report)
        if on_result is not None:
            on_result(EvalCell(model_id, "train", spec.env, spec.noise), report)
    _write(reports_frame(reports), run.reports / "eval.csv")
    return reports


def run_grid(
    spec: ExperimentSpec,
    run: RunDir,
    models: dict[str, QNetwork],
    on_result: EvalCallback | None = None,
) -> list[EvalReport]:
    reports = robustness_grid(
        models,
        spec.env,
        spec.eval.episodes,
        spec.seeds,
        workers=spec.eval.workers,
        max_episode_steps=spec.eval.max_episode_steps,
        on_result=on_result,
    )
    frame = reports_frame(reports)
    _write(frame, run.reports / "grid.csv")
    write_matrices(frame, run.reports)
    return reports


def run_generalize(
    spec: ExperimentSpec,
    run: RunDir,
    models: dict[str, QNetwork],
    on_result: EvalCallback | None = None,
) -> list[EvalReport]:
    reports = generalization_sweep(
        models,
        spec.env,
        spec.eval.episodes,
        spec.seeds,
        workers=spec.eval.workers,
        max_episode_steps=spec.eval.max_episode_steps,
        on_result=on_result,
    )
    frame = reports_frame(reports, GENERALIZATION_COLUMNS)
    _write(frame, run.reports / "generalization.csv")
    return reports


def noise_curves(
    obs_sigmas: Sequence[float], act_probs: Sequence[float]
) -> list[tuple[str, float, NoiseSpec]]:
    """Observation-noise axis at act_prob=0, then action-noise axis at obs_sigma=0."""
    curves = [
        ("obs", s, NoiseSpec(obs_sigma=s, noise_seed=i))
        for i, s in enumerate(obs_sigmas)
    ]
    curves += [
        ("act", p, NoiseSpec(act_prob=p, noise_seed=len(obs_sigmas) + i))
        for i, p in enumerate(act_probs)
    ]
    return curves


def normalized_auc(levels: np.ndarray, win_rates: np.ndarray) -> float:
    """Area under the win-rate curve divided by the noise range."""
    if len(levels) < 2 or levels[-1] == levels[0]:
        return float(np.mean(win_rates))
    return float(np.trapezoid(win_rates, levels) / (levels[-1] - levels[0]))


def sweep_summary(frame: pd.DataFrame) -> pd.DataFrame:
    rows = []
    keys = ["axis", "value", "noise_kind"]
    for (axis, value, kind), part in frame.groupby(keys, sort=False):
        curve = part.groupby("noise_level", sort=True)["win_rate"].mean()
        auc = normalized_auc(curve.index.to_numpy(float), curve.to_numpy(float))
        rows.append(
            {
                "axis": axis,
                "value": value,
                "noise_kind": kind,
                "auc": auc,
            }
        )
    return pd.DataFrame(rows, columns=[*keys, "auc"])


def sweep_points(spec: ExperimentSpec) -> list[tuple[str, ModelConfig]]:
    """Validated (label, model config) per axis value, checked before any training."""
    if spec.model_kind == "baseline":
        raise ConfigError(
            "sweep varies cerebellar parameters; model_kind cannot be baseline"
        )
    return spec.sweep.model_overrides(spec.model)


def run_sweep(
    spec: ExperimentSpec,
    run: RunDir,
    obs_sigmas: Sequence[float] | None = None,
    act_probs: Sequence[float] | None = None,
    on_point: Callable[[str, int], None] | None = None,
    points: list[tuple[str, ModelConfig]] | None = None,
) -> pd.DataFrame:
    """Train one model per (axis value, seed), then score it along both noise axes."""
    if points is None:
        points = sweep_points(spec)
    curves = noise_curves(obs_sigmas or OBS_SIGMAS, act_probs or ACT_PROBS)
    rows = []
    for label, model_config in points:
        value_rows = []
        for seed in spec.seeds:
            checkpoint_dir = run.checkpoints / f"{spec.sweep.axis}-{label}"
            result = train(
                spec.env,
                spec.train,
                spec.model_kind,
                seed,
                model_config=model_config,
                gate_config=spec.gate,
                log_path=run.logs / f"sweep-{spec.sweep.axis}-{label}-seed{seed}.csv",
                checkpoint_dir=checkpoint_dir,
            )
            network = load_checkpoint(result.checkpoint)
            for kind, level, noise in curves:
                report = evaluate(
                    network,
                    spec.env,
                    noise,
                    spec.eval.episodes,
                    [seed],
                    spec.eval.max_episode_steps,
                )
                value_rows.append(
                    {
                        "axis": spec.sweep.axis,
                        "value": label,
                        "noise_kind": kind,
                        "noise_level": level,
                        "seed": seed,
                        "win_rate": report.win_rates[0],
                        "mean_reward": report.mean_rewards[0],
                    }
                )
            if on_point is not None:
                on_point(label, seed)
        value_frame = pd.DataFrame(value_rows, columns=SWEEP_COLUMNS)
        _write(value_frame, run.reports / f"sweep-{spec.sweep.axis}-{label}.csv")
        rows += value_rows

    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    _write(frame, run.reports / "sweep.csv")
    _write(sweep_summary(frame), run.reports / "sweep_summary.csv")
    return frame

