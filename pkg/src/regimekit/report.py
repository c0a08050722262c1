"""Report bundle writer: delimited output plus rendered figures.

Every numeric cell is printed with six decimal places. Output is a pure
function of the inputs, so regenerating a report from the same artifacts
produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .backtest import BacktestResult, ConfusionMatrix, MetricTable  # noqa: E402

__all__ = [
    "emit_report",
    "write_metrics",
    "write_equity",
    "write_confusion",
    "render_equity_figure",
    "render_confusion_figure",
    "render_probability_figure",
    "render_training_figure",
    "fmt",
]


def fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.6f}"


def write_metrics(metrics: MetricTable, json_path, csv_path) -> None:
    d = metrics.as_dict()
    payload = {k: (None if v is None else round(v, 6)) if isinstance(v, float) else v
               for k, v in d.items()}
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w") as fh:
        fh.write("metric,value\n")
        for k, v in d.items():
            if k == "notes":
                continue
            fh.write(f"{k},{fmt(v)}\n")


def write_equity(timestamps, strat, asset, path) -> None:
    strat = np.asarray(strat)
    asset = np.asarray(asset)
    cs, ca = np.cumsum(strat), np.cumsum(asset)
    with open(path, "w") as fh:
        fh.write("date,cum_strategy,cum_asset\n")
        for t, s, a in zip(timestamps, cs, ca):
            fh.write(f"{t},{fmt(s)},{fmt(a)}\n")


def write_confusion(cm: ConfusionMatrix, path) -> None:
    m = cm.counts.shape[0]
    with open(path, "w") as fh:
        header = ",".join(f"true_{j}" for j in range(m))
        fh.write(f"predicted,{header}\n")
        for i in range(m):
            cells = ",".join(str(int(c)) for c in cm.counts[i])
            fh.write(f"{i},{cells}\n")
        fh.write("class,precision,recall,f1,support\n")
        for c in range(m):
            fh.write(f"{c},{fmt(cm.precision[c])},{fmt(cm.recall[c])},"
                     f"{fmt(cm.f1[c])},{int(cm.support[c])}\n")
        fh.write(f"accuracy,{fmt(cm.accuracy)}\n")


def render_equity_figure(timestamps, strat, asset, path) -> None:
    cs, ca = np.cumsum(np.asarray(strat)), np.cumsum(np.asarray(asset))
    x = np.arange(len(cs))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(x, cs, label="strategy", lw=1.2)
    ax.plot(x, ca, label="asset", lw=1.0, alpha=0.8)
    ax.set_xlabel("day")
    ax.set_ylabel("cumulative log return")
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    if len(timestamps):
        ticks = np.linspace(0, len(cs) - 1, min(6, len(cs))).astype(int)
        ax.set_xticks(ticks)
        ax.set_xticklabels([str(timestamps[i]) for i in ticks],
                           rotation=20, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_confusion_figure(cm: ConfusionMatrix, path) -> None:
    m = cm.counts.shape[0]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(cm.counts, cmap="Blues")
    for i in range(m):
        for j in range(m):
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    color="black", fontsize=10)
    ax.set_xlabel("true class")
    ax.set_ylabel("predicted class")
    ax.set_xticks(range(m))
    ax.set_yticks(range(m))
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_probability_figure(timestamps, probs: np.ndarray, path,
                              title: str = "smoothed regime probabilities") -> None:
    probs = np.asarray(probs)
    x = np.arange(len(probs))
    fig, ax = plt.subplots(figsize=(8, 3.2))
    for k in range(probs.shape[1]):
        ax.plot(x, probs[:, k], lw=0.9, label=f"regime {k + 1}")
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("probability")
    ax.set_title(title, fontsize=10)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    if len(timestamps):
        ticks = np.linspace(0, len(probs) - 1, min(6, len(probs))).astype(int)
        ax.set_xticks(ticks)
        ax.set_xticklabels([str(timestamps[i]) for i in ticks],
                           rotation=20, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_figure(train_losses, val_losses, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = np.arange(1, len(train_losses) + 1)
    ax.plot(epochs, train_losses, label="train", lw=1.2)
    ax.plot(epochs, val_losses, label="validation", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _metrics_markdown(metrics: MetricTable) -> list[str]:
    rows = [
        ("Mean Return", metrics.mean_return),
        ("Standard Deviation", metrics.std),
        ("Sharpe Ratio", metrics.sharpe),
        ("Max Drawdown", metrics.max_drawdown),
        ("Sortino Ratio", metrics.sortino),
        ("Mean Daily Turnover", metrics.mean_daily_turnover),
        ("Annual Turnover", metrics.annual_turnover),
        ("Mean Return on Volume", metrics.return_on_volume),
        ("Beta", metrics.beta),
        ("Alpha", metrics.alpha),
    ]
    lines = ["| metric | value |", "| --- | --- |"]
    for name, v in rows:
        lines.append(f"| {name} | {fmt(v) or 'n/a'} |")
    return lines


def emit_report(result: BacktestResult, out_dir, label: str = "backtest") -> list[str]:
    """Write the full bundle: metrics (json+csv), equity and confusion
    CSVs, a markdown summary, and the rendered figures. Returns the list
    of files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    write_metrics(result.metrics, out / "metrics.json", out / "metrics.csv")
    files += ["metrics.json", "metrics.csv"]

    ts = result.timestamps or list(range(len(result.strat_returns)))
    write_equity(ts, result.strat_returns, result.asset_returns, out / "equity.csv")
    files.append("equity.csv")

    write_confusion(result.confusion, out / "confusion.csv")
    files.append("confusion.csv")

    render_equity_figure(ts, result.strat_returns, result.asset_returns,
                         out / "equity.png")
    render_confusion_figure(result.confusion, out / "confusion.png")
    files += ["equity.png", "confusion.png"]

    cm = result.confusion
    lines = [f"# {label} report", ""]
    lines += _metrics_markdown(result.metrics)
    lines += ["", "## Classification", "",
              f"accuracy: {fmt(cm.accuracy)}", "",
              "| class | precision | recall | f1 | support |",
              "| --- | --- | --- | --- | --- |"]
    for c in range(len(cm.precision)):
        lines.append(f"| {c} | {fmt(cm.precision[c])} | {fmt(cm.recall[c])} "
                     f"| {fmt(cm.f1[c])} | {int(cm.support[c])} |")
    if result.metrics.notes:
        lines += ["", "## Notes", ""]
        for k, v in sorted(result.metrics.notes.items()):
            lines.append(f"- {k}: {v}")
    lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    files.append("report.md")
    return files
