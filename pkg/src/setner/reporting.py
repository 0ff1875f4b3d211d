"""Report rendering: aligned text tables, JSON/CSV files, and figures.

Every command that writes machine-readable output drops a matplotlib
figure next to the delimited files, so a run directory is self-describing.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_csv(path, headers: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(rows)


def history_rows(history) -> list[list]:
    return [
        [m.epoch, m.train_loss, m.dev_precision, m.dev_recall, m.dev_f1, m.lr]
        for m in history
    ]


HISTORY_HEADERS = ["epoch", "train_loss", "dev_precision", "dev_recall", "dev_f1", "lr"]


def save_history(history, out_dir: Path) -> None:
    rows = history_rows(history)
    write_csv(out_dir / "metrics.csv", HISTORY_HEADERS, rows)
    write_json(
        out_dir / "metrics.json",
        [dict(zip(HISTORY_HEADERS, row)) for row in rows],
    )
    save_training_curves(history, out_dir / "training_curves.png")


def save_training_curves(history, path) -> None:
    epochs = [m.epoch for m in history]
    fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [m.train_loss for m in history], color="tab:blue")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_yscale("log")
    ax_f1.plot(epochs, [m.dev_f1 for m in history], color="tab:orange")
    ax_f1.set_xlabel("epoch")
    ax_f1.set_ylabel("dev F1")
    ax_f1.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_report(report, category_name, out_dir: Path, stem: str = "eval") -> None:
    payload = report.to_dict(category_name)
    write_json(out_dir / f"{stem}.json", payload)
    rows = [["ALL", report.tp, report.fp, report.fn,
             report.precision, report.recall, report.f1]]
    for cat, counts in sorted(report.per_category.items()):
        rows.append([category_name(cat), counts.tp, counts.fp, counts.fn,
                     counts.precision, counts.recall, counts.f1])
    write_csv(out_dir / f"{stem}.csv",
              ["category", "tp", "fp", "fn", "precision", "recall", "f1"], rows)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [row[0] for row in rows[1:]] or ["ALL"]
    f1s = [row[6] for row in rows[1:]] or [report.f1]
    ax.bar(names, f1s, color="tab:green")
    ax.axhline(report.f1, color="tab:gray", linestyle="--", label="micro F1")
    ax.set_ylabel("F1")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}.png", dpi=120)
    plt.close(fig)


STATS_HEADERS = ["sentences", "with_nested", "avg_length",
                 "total_entities", "nested_entities", "nested_pct"]


def save_stats(stats, lengths: Sequence[int], out_dir: Path) -> None:
    payload = stats.to_dict()
    write_json(out_dir / "stats.json", payload)
    write_csv(out_dir / "stats.csv", STATS_HEADERS,
              [[payload[h] for h in STATS_HEADERS]])
    fig, (ax_len, ax_nested) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_len.hist(lengths, bins=range(1, max(lengths) + 2), color="tab:blue",
                rwidth=0.9)
    ax_len.set_xlabel("sentence length")
    ax_len.set_ylabel("sentences")
    flat = stats.total_entities - stats.nested_entities
    ax_nested.bar(["flat", "nested"], [flat, stats.nested_entities],
                  color=["tab:gray", "tab:red"])
    ax_nested.set_ylabel("entities")
    fig.tight_layout()
    fig.savefig(out_dir / "stats.png", dpi=120)
    plt.close(fig)


def save_sweep(axis: str, rows, out_dir: Path) -> None:
    headers = [axis, "precision", "recall", "f1", "error"]
    table = []
    for row in rows:
        if row.report is not None:
            table.append([row.value, row.report.precision, row.report.recall,
                          row.report.f1, ""])
        else:
            table.append([row.value, "", "", "", row.error])
    write_csv(out_dir / "sweep.csv", headers, table)
    write_json(out_dir / "sweep.json", [
        {
            axis: row.value,
            "report": None if row.report is None else row.report.to_dict(),
            "error": row.error,
        }
        for row in rows
    ])
    scored = [(str(r.value), r.report.f1) for r in rows if r.report is not None]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if scored:
        ax.plot([s[0] for s in scored], [s[1] for s in scored],
                marker="o", color="tab:purple")
    ax.set_xlabel(axis)
    ax.set_ylabel("test F1")
    ax.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(out_dir / "sweep.png", dpi=120)
    plt.close(fig)


def save_ablation(result: dict, out_dir: Path) -> None:
    rows = [[r.seed, r.loss_mode, r.precision, r.recall, r.f1]
            for r in result["rows"]]
    write_csv(out_dir / "ablation.csv",
              ["seed", "loss_mode", "precision", "recall", "f1"], rows)
    write_json(out_dir / "ablation.json", {
        "rows": [
            {"seed": r.seed, "loss_mode": r.loss_mode, "precision": r.precision,
             "recall": r.recall, "f1": r.f1}
            for r in result["rows"]
        ],
        "mean_f1": result["mean_f1"],
    })
    fig, ax = plt.subplots(figsize=(5, 3.5))
    modes = list(result["mean_f1"].keys())
    ax.bar(modes, [result["mean_f1"][m] for m in modes],
           color=["tab:blue", "tab:orange"])
    ax.set_ylabel("mean test F1")
    ax.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(out_dir / "ablation.png", dpi=120)
    plt.close(fig)
