"""Figure rendering for the report path.

Reads the delimited outputs an experiment wrote (results.csv, trace/,
similarity*.csv, sweep.csv) and renders matplotlib figures next to them.
The CSV/JSON files remain the primary outputs; figures are derived views.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_summary(results_csv: Path, out_path: Path) -> Path | None:
    df = pd.read_csv(results_csv)
    if df.empty:
        return None
    lsr = 100.0 * df["link_success"].mean()
    asr = 100.0 * df["misclassified"].mean()
    clean = 100.0 * (df["clean_pred"] != df["true_label"]).mean()
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    bars = ax.bar(["LSR", "ASR", "clean miscls"], [lsr, asr, clean],
                  color=["#4878d0", "#d65f5f", "#aaaaaa"])
    for b, v in zip(bars, [lsr, asr, clean]):
        ax.text(b.get_x() + b.get_width() / 2, v + 1, f"{v:.1f}",
                ha="center", fontsize=9)
    ax.set_ylabel("percent of targets")
    ax.set_ylim(0, 105)
    return _save(fig, out_path)


def plot_traces(trace_dir: Path, out_path: Path, max_traces: int = 8) -> Path | None:
    files = sorted(Path(trace_dir).glob("*.jsonl"))[:max_traces]
    if not files:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.2), sharex=True)
    for f in files:
        recs = [json.loads(line) for line in f.read_text().splitlines()]
        epochs = [r["epoch"] for r in recs]
        axes[0].plot(epochs, [r["total"] for r in recs], alpha=0.7, lw=1)
        axes[1].plot(epochs, [r["link_term"] for r in recs], alpha=0.7, lw=1)
    axes[0].set_title("total attack loss")
    axes[1].set_title("link term")
    for ax in axes:
        ax.set_xlabel("outer epoch")
    return _save(fig, out_path)


def plot_similarity(hist_csv: Path, out_path: Path) -> Path | None:
    df = pd.read_csv(hist_csv)
    if df.empty:
        return None
    centers = 0.5 * (df["bin_left"] + df["bin_right"])
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    ax.bar(centers, df["count"], width=0.05 * 0.9, color="#4878d0")
    ax.set_xlabel("cosine similarity to target")
    ax.set_ylabel("pairs")
    ax.set_xlim(-1, 1)
    return _save(fig, out_path)


def plot_sweep(sweep_csv: Path, out_path: Path) -> Path | None:
    df = pd.read_csv(sweep_csv)
    if df.empty:
        return None
    params = [c for c in df.columns if c not in ("lsr", "asr", "n_failed", "error")]
    fig = None
    if len(params) == 2:
        pivot = df.pivot_table(index=params[0], columns=params[1], values="asr")
        fig, ax = plt.subplots(figsize=(5.0, 3.8))
        im = ax.imshow(pivot.to_numpy(), origin="lower", cmap="viridis",
                       aspect="auto")
        ax.set_xticks(range(pivot.shape[1]), [str(c) for c in pivot.columns])
        ax.set_yticks(range(pivot.shape[0]), [str(i) for i in pivot.index])
        ax.set_xlabel(params[1])
        ax.set_ylabel(params[0])
        fig.colorbar(im, ax=ax, label="ASR %")
    elif len(params) == 1:
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(df[params[0]], df["asr"], "o-", label="ASR")
        ax.plot(df[params[0]], df["lsr"], "s--", label="LSR")
        ax.set_xlabel(params[0])
        ax.set_ylabel("percent")
        ax.legend()
    if fig is None:
        return None
    return _save(fig, out_path)


def render_report(results_dir, out_dir=None) -> list[Path]:
    """Render every figure the delimited outputs in results_dir support."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir else results_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if (results_dir / "results.csv").exists():
        p = plot_summary(results_dir / "results.csv", out_dir / "rates.png")
        if p:
            written.append(p)
    if (results_dir / "trace").is_dir():
        p = plot_traces(results_dir / "trace", out_dir / "attack_trace.png")
        if p:
            written.append(p)
    if (results_dir / "similarity_hist.csv").exists():
        p = plot_similarity(results_dir / "similarity_hist.csv",
                            out_dir / "similarity_hist.png")
        if p:
            written.append(p)
    if (results_dir / "sweep.csv").exists():
        p = plot_sweep(results_dir / "sweep.csv", out_dir / "sweep.png")
        if p:
            written.append(p)
    return written
