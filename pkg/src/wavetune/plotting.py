"""Tidy long-format export of training curves and matplotlib renderings."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

TIDY_COLUMNS = ("episode", "metric", "value", "algo")
CURVE_METRICS = ("mean_reward", "mean_eval", "mean_ter", "shaped_mean", "penalty_mean", "grad_norm")


def _read(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def find_runs(run_dir: Path) -> list[Path]:
    """metrics.csv of a single run directory, or of each run directly below it."""
    if (run_dir / "metrics.csv").is_file():
        return [run_dir / "metrics.csv"]
    return sorted(p / "metrics.csv" for p in run_dir.iterdir() if (p / "metrics.csv").is_file())


def tidy_rows(source: Path) -> list[dict]:
    """Long-format rows from a run directory, a directory of runs, or an existing tidy CSV."""
    source = Path(source)
    if source.is_file():
        rows = _read(source)
        if not rows or tuple(rows[0]) != TIDY_COLUMNS:
            raise ValueError(f"{source} is not a tidy CSV with columns {', '.join(TIDY_COLUMNS)}")
        return rows
    runs = find_runs(source) if source.is_dir() else []
    if not runs:
        raise FileNotFoundError(f"no metrics.csv under {source}")
    tables = [(path, _read(path)) for path in runs]
    algos = [rows[0]["algo"] if rows else path.parent.name for path, rows in tables]
    out = []
    for (path, rows), algo in zip(tables, algos):
        label = algo if algos.count(algo) == 1 else f"{algo}:{path.parent.name}"
        for row in rows:
            out.extend({"episode": row["episode"], "metric": m, "value": row[m], "algo": label} for m in CURVE_METRICS)
    return out


def tidy_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, TIDY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def plot_curves(rows: list[dict], path, metrics=("mean_reward", "mean_eval")) -> None:
    """Per-algo curves against episode, one panel per metric."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 3.5), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        series: dict[str, tuple[list, list]] = {}
        for r in rows:
            if r["metric"] == metric:
                xs, ys = series.setdefault(r["algo"], ([], []))
                xs.append(int(r["episode"]))
                ys.append(float(r["value"]))
        for algo, (xs, ys) in sorted(series.items()):
            ax.plot(xs, ys, label=algo, linewidth=1.2)
        ax.set_xlabel("episode")
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def plot_report(rows: list[dict], path) -> None:
    """Bar chart of an evaluation report, error bars at one standard deviation."""
    metrics = ("proxy_mos", "eval_mos", "ter")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    names = [r["model"] for r in rows]
    for ax, m in zip(axes, metrics):
        ax.bar(names, [float(r[f"{m}_mean"]) for r in rows], yerr=[float(r[f"{m}_std"]) for r in rows], capsize=3)
        ax.set_title(m)
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
