"""Result aggregation: one stable CSV row schema for every evaluation,
comparison tables built from those rows, and accuracy-by-domain figures
rendered to image files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

from taskaug.train import EvalReport

# the one schema every subcommand writes and `report` consumes
RESULT_COLUMNS: tuple[str, ...] = (
    "model",
    "domain",
    "way",
    "shot",
    "episodes",
    "mean_accuracy",
    "ci95_halfwidth",
    "seed",
)


def result_row(
    model: str, domain: str, way: int, shot: int, report: EvalReport, seed: int
) -> dict:
    """Flatten one evaluation into a CSV row."""
    return {
        "model": model,
        "domain": domain,
        "way": way,
        "shot": shot,
        "episodes": report.episodes,
        "mean_accuracy": report.mean_accuracy,
        "ci95_halfwidth": report.ci95_halfwidth,
        "seed": seed,
    }


def append_results(path: str | Path, rows: Iterable[dict]) -> None:
    """Append rows to a results CSV, writing the header only on creation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(list(rows), columns=RESULT_COLUMNS)
    df.to_csv(path, mode="a", header=not path.exists(), index=False)


def load_results(paths: Sequence[str | Path]) -> pd.DataFrame:
    """Read and concatenate result CSVs, validating the schema."""
    frames = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"results file not found: {p}")
        df = pd.read_csv(p)
        missing = [c for c in RESULT_COLUMNS if c not in df.columns]
        if missing:
            raise ValueError(f"results file {p} is missing columns: {missing}")
        frames.append(df[list(RESULT_COLUMNS)])
    out = pd.concat(frames, ignore_index=True)
    if out.empty:
        raise ValueError("no result rows found")
    return out


def comparison_table(df: pd.DataFrame) -> pd.DataFrame:
    """Aggregate rows over seeds: one line per (model, domain, way, shot)
    with the across-seed mean accuracy, the mean CI half-width, and the
    number of contributing runs."""
    grouped = (
        df.groupby(["model", "domain", "way", "shot"], as_index=False)
        .agg(
            runs=("seed", "size"),
            mean_accuracy=("mean_accuracy", "mean"),
            ci95_halfwidth=("ci95_halfwidth", "mean"),
        )
        .sort_values(["way", "shot", "domain", "model"], kind="stable")
        .reset_index(drop=True)
    )
    return grouped


def render_accuracy_figure(df: pd.DataFrame, path: str | Path) -> Path:
    """Bar chart of mean accuracy per domain, one bar group per domain and
    one bar per model, 95% CI error bars; one panel per (way, shot)."""
    table = comparison_table(df)
    settings = sorted(set(zip(table["way"], table["shot"])))
    fig, axes = plt.subplots(
        1, len(settings), figsize=(1.0 + 4.0 * len(settings), 3.6), squeeze=False
    )
    for ax, (way, shot) in zip(axes[0], settings):
        sub = table[(table["way"] == way) & (table["shot"] == shot)]
        domains = sorted(sub["domain"].unique())
        models = sorted(sub["model"].unique())
        width = 0.8 / max(len(models), 1)
        for j, model in enumerate(models):
            rows = sub[sub["model"] == model].set_index("domain")
            xs, ys, errs = [], [], []
            for i, domain in enumerate(domains):
                if domain not in rows.index:
                    continue
                xs.append(i + (j - (len(models) - 1) / 2) * width)
                ys.append(rows.loc[domain, "mean_accuracy"])
                errs.append(rows.loc[domain, "ci95_halfwidth"])
            ax.bar(xs, ys, width=width, yerr=errs, capsize=3, label=model)
        ax.set_xticks(range(len(domains)))
        ax.set_xticklabels(domains, rotation=20, ha="right")
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("mean accuracy")
        ax.set_title(f"{way}-way {shot}-shot")
        ax.legend(fontsize="small")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
