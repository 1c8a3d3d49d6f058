"""Merge per-seed result CSVs into mean/std tables and heat-map matrices."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from .errors import ReportError
from .evaluation import EVAL_COLUMNS, GENERALIZATION_COLUMNS

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "axis",
    "value",
    "noise_kind",
    "noise_level",
    "seed",
    "win_rate",
    "mean_reward",
]

# report file stem -> (required columns, grouping keys)
SCHEMAS: dict[str, tuple[list[str], list[str]]] = {
    "eval": (EVAL_COLUMNS, ["obs_sigma", "act_prob", "sticky_prob", "model"]),
    "grid": (EVAL_COLUMNS, ["obs_sigma", "act_prob", "sticky_prob", "model"]),
    "generalization": (GENERALIZATION_COLUMNS, ["test_id", "model"]),
    "sweep": (SWEEP_COLUMNS, ["axis", "value", "noise_kind", "noise_level"]),
}
METRICS = ["win_rate", "mean_reward"]


def read_results(path: Path, columns: list[str]) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ReportError(f"{path}: cannot read results ({e})") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ReportError(f"{path}: schema mismatch, missing columns {missing}")
    return frame


def summarize(frame: pd.DataFrame, keys: list[str]) -> pd.DataFrame:
    """Mean and population std over seeds for every condition."""
    grouped = frame.groupby(keys, sort=True)[METRICS]
    summary = grouped.agg(["mean", lambda s: s.std(ddof=0), "count"])
    summary.columns = [
        f"{metric}_{stat}" for metric in METRICS for stat in ("mean", "std", "n")
    ]
    summary = summary.drop(columns=["mean_reward_n"])
    summary = summary.rename(columns={"win_rate_n": "seeds"})
    return summary.reset_index()


def win_rate_matrices(frame: pd.DataFrame) -> dict[str, pd.DataFrame]:
    """Per model, mean win rate with rows obs_sigma and columns act_prob."""
    grid = frame[frame["sticky_prob"] == 0]
    return {
        str(model): part.pivot_table(
            index="obs_sigma", columns="act_prob", values="win_rate", aggfunc="mean"
        )
        for model, part in grid.groupby("model", sort=True)
    }


def difference_pairs(models: list[str]) -> list[tuple[str, str]]:
    """Every other model against the baseline when present, else all pairs."""
    if "baseline" in models:
        return [(m, "baseline") for m in models if m != "baseline"]
    return list(itertools.combinations(models, 2))


def write_matrices(frame: pd.DataFrame, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    matrices = win_rate_matrices(frame)
    written = []
    for model, matrix in matrices.items():
        path = out_dir / f"matrix-{model}.csv"
        matrix.to_csv(path)
        written.append(path)
    for a, b in difference_pairs(list(matrices)):
        path = out_dir / f"diff-{a}-minus-{b}.csv"
        (matrices[a] - matrices[b]).to_csv(path)
        written.append(path)
    return written


def plot_matrix(matrix: pd.DataFrame, path: Path, title: str) -> Path:
    """Heat map of a matrix file with the value printed in every cell."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    limit = max(float(matrix.abs().to_numpy().max()), 1e-6)
    image = ax.imshow(
        matrix.to_numpy(), cmap="RdBu", vmin=-limit, vmax=limit, origin="upper"
    )
    ax.set_xticks(range(len(matrix.columns)), [f"{c:g}" for c in matrix.columns])
    ax.set_yticks(range(len(matrix.index)), [f"{r:g}" for r in matrix.index])
    ax.set_xlabel("action noise probability")
    ax.set_ylabel("observation noise sigma")
    ax.set_title(title)
    for (i, j), value in pd.DataFrame(matrix.to_numpy()).stack().items():
        ax.text(j, i, f"{value:.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(image, ax=ax)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


@dataclass
class ReportResult:
    tables: dict[str, Path] = field(default_factory=dict)
    matrices: list[Path] = field(default_factory=list)
    plots: list[Path] = field(default_factory=list)


def report(run_dirs: list[Path], out_dir: Path, plot: bool = False) -> ReportResult:
    """Merge every known results file under ``<run>/reports`` across runs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged: dict[str, list[pd.DataFrame]] = {}
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        if not run_dir.is_dir():
            raise ReportError(f"run directory not found: {run_dir}")
        for stem, (columns, _) in SCHEMAS.items():
            path = run_dir / "reports" / f"{stem}.csv"
            if path.exists():
                merged.setdefault(stem, []).append(read_results(path, columns))
    if not merged:
        raise ReportError(f"no result CSVs found under {[str(d) for d in run_dirs]}")

    result = ReportResult()
    for stem, frames in merged.items():
        _, keys = SCHEMAS[stem]
        frame = pd.concat(frames, ignore_index=True)
        path = out_dir / f"summary-{stem}.csv"
        summarize(frame, keys).to_csv(path, index=False)
        result.tables[stem] = path
        logger.info("wrote %s (%d rows merged)", path, len(frame))
        if stem == "grid":
            result.matrices += write_matrices(frame, out_dir)

    if plot:
        for path in result.matrices:
            matrix = pd.read_csv(path, index_col=0)
            matrix.columns = [float(c) for c in matrix.columns]
            result.plots.append(
                plot_matrix(matrix, path.with_suffix(".png"), path.stem)
            )
    return result
