"""Figures and summaries for a finished run.

Everything renders through the Agg backend to files, never to a screen, and
savefig strips the writer tag so reruns of the same run are byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import csv
from pathlib import Path
from typing import Any, Mapping, Sequence

import matplotlib.pyplot as plt
import numpy as np

from agescreen.data import AGE_MAX, SPLITS, Sample
from agescreen.metrics import CalibratedThreshold, DetCurve, GroupMetrics, render_metrics_text
from agescreen.trainer import TrainReport

_SAVE = {"dpi": 120, "metadata": {"Software": None}}
_RATE_FLOOR = 1e-6  # log axes cannot show exact zeros


def render_det_figure(
    curves: Mapping[int, DetCurve],
    path: str | Path,
    target_fnr: float | None = None,
) -> Path:
    """Log-log detection-error tradeoff, one line per head."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for t in sorted(curves):
        curve = curves[t]
        fpr = np.clip(np.asarray(curve.fpr, dtype=np.float64), _RATE_FLOOR, None)
        fnr = np.clip(np.asarray(curve.fnr, dtype=np.float64), _RATE_FLOOR, None)
        ax.plot(fpr, fnr, drawstyle="steps-post", label=f"under-{t} head")
    if target_fnr is not None and target_fnr > 0:
        ax.axhline(target_fnr, color="gray", linestyle=":", linewidth=1.0,
                   label=f"target false-adult rate {target_fnr:g}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("false underage rate")
    ax.set_ylabel("false adult rate")
    ax.grid(True, which="both", linewidth=0.3, alpha=0.5)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def render_training_curves(report: TrainReport, path: str | Path) -> Path:
    """Loss curves plus validation MAE, best epoch marked."""
    path = Path(path)
    epochs = np.arange(1, len(report.epochs) + 1)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, [e.train_loss for e in report.epochs], label="train loss")
    ax.plot(epochs, [e.val_loss for e in report.epochs], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [e.val_mae for e in report.epochs], color="tab:green",
             linestyle="--", label="val MAE")
    ax2.set_ylabel("val MAE (years)")
    ax.axvline(report.best_epoch, color="gray", linestyle=":", linewidth=1.0)
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def render_age_histogram(samples: Sequence[Sample], path: str | Path) -> Path:
    """Stacked per-split age counts over the full label range."""
    path = Path(path)
    ages = np.arange(AGE_MAX + 1)
    fig, ax = plt.subplots(figsize=(7.0, 3.5))
    bottom = np.zeros(AGE_MAX + 1)
    for split in SPLITS:
        counts = np.bincount(
            [s.age for s in samples if s.split == split], minlength=AGE_MAX + 1,
        ).astype(np.float64)
        ax.bar(ages, counts, bottom=bottom, width=1.0, label=split)
        bottom += counts
    ax.set_xlabel("age label (years)")
    ax.set_ylabel("samples")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def render_group_bars(groups: Sequence[GroupMetrics], head: int, path: str | Path) -> Path:
    """Recall and precision per evaluation group for one head."""
    path = Path(path)
    names = [g.name for g in groups]
    recalls = [g.heads[head].get("recall") for g in groups]
    precisions = [g.heads[head].get("precision") for g in groups]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * len(names) + 2.0), 4.0))
    to_plot = lambda vals: [np.nan if v is None else v for v in vals]
    ax.bar(x - 0.2, to_plot(recalls), width=0.4, label="recall")
    ax.bar(x + 0.2, to_plot(precisions), width=0.4, label="precision")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(f"rate at under-{head} operating point")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def _flat_rows(
    config_hash: str,
    train_report: TrainReport | None,
    thresholds: Mapping[int, CalibratedThreshold] | None,
    metrics: Mapping[str, Any] | None,
) -> list[tuple[str, str, str]]:
    rows: list[tuple[str, str, str]] = [("run", "config_hash", config_hash)]
    if train_report is not None:
        best = train_report.epochs[train_report.best_epoch - 1]
        rows.append(("train", "epochs", str(len(train_report.epochs))))
        rows.append(("train", "best_epoch", str(train_report.best_epoch)))
        rows.append(("train", "selection_metric", train_report.selection_metric))
        rows.append(("train", "best_val_mae", repr(best.val_mae)))
        rows.append(("train", "best_val_loss", repr(best.val_loss)))
    if thresholds is not None:
        for t in sorted(thresholds):
            ct = thresholds[t]
            rows.append(("calibration", f"head_{t}.threshold", repr(ct.threshold)))
            rows.append(("calibration", f"head_{t}.achieved_fnr", repr(ct.achieved_fnr)))
            rows.append(("calibration", f"head_{t}.target_fnr", repr(ct.target_fnr)))
    if metrics is not None:
        rows.append(("evaluation", "split", str(metrics.get("split", ""))))
        for g in metrics.get("groups", []):
            base = f"group.{g['name']}"
            rows.append(("evaluation", f"{base}.size", str(g["size"])))
            if g.get("mae") is not None:
                rows.append(("evaluation", f"{base}.mae", repr(g["mae"])))
            for t, m in sorted(g.get("heads", {}).items(), key=lambda kv: int(kv[0])):
                for key in ("precision", "recall", "f1", "f2", "fnr", "fpr"):
                    value = m.get(key)
                    rows.append((
                        "evaluation", f"{base}.head_{t}.{key}",
                        "" if value is None else repr(value),
                    ))
    return rows


def write_summary(
    report_dir: str | Path,
    config_hash: str,
    train_report: TrainReport | None = None,
    thresholds: Mapping[int, CalibratedThreshold] | None = None,
    metrics: Mapping[str, Any] | None = None,
    group_metrics: Sequence[GroupMetrics] | None = None,
    missing: Sequence[str] = (),
) -> tuple[Path, Path]:
    """summary.txt (readable) and summary.csv (section,key,value) in report_dir."""
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    rows = _flat_rows(config_hash, train_report, thresholds, metrics)

    csv_path = report_dir / "summary.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["section", "key", "value"])
        writer.writerows(rows)

    lines = [f"config {config_hash}", ""]
    if train_report is not None:
        best = train_report.epochs[train_report.best_epoch - 1]
        lines.append(
            f"training: {len(train_report.epochs)} epochs, kept epoch "
            f"{train_report.best_epoch} by {train_report.selection_metric} "
            f"(val MAE {best.val_mae:.4f}, val loss {best.val_loss:.4f})"
        )
    if thresholds is not None:
        lines.append("calibrated operating points:")
        for t in sorted(thresholds):
            ct = thresholds[t]
            lines.append(
                f"  under-{t}: score >= {ct.threshold:.6g} "
                f"(false-adult rate {ct.achieved_fnr:.4f}, target {ct.target_fnr:.4f})"
            )
    if group_metrics:
        lines.append("")
        lines.append(render_metrics_text(group_metrics).rstrip("\n"))
    for item in missing:
        lines.append(f"missing: {item}")
    txt_path = report_dir / "summary.txt"
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return txt_path, csv_path
