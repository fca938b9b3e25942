"""Binary screening metrics, DET curves, and operating-point calibration.

The positive class is always "underage"; a sample is flagged when its score
is at or above the operating threshold. Everything here emits plain numbers,
JSON-ready dicts, or delimited text; figure rendering lives elsewhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True, slots=True)
class ConfusionMatrix:
    """Counts at one operating point; positive means underage."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float | None:
        flagged = self.tp + self.fp
        return self.tp / flagged if flagged else None

    @property
    def recall(self) -> float | None:
        positives = self.tp + self.fn
        return self.tp / positives if positives else None

    @property
    def fnr(self) -> float | None:
        positives = self.tp + self.fn
        return self.fn / positives if positives else None

    @property
    def fpr(self) -> float | None:
        negatives = self.fp + self.tn
        return self.fp / negatives if negatives else None

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion_at(
    scores: np.ndarray, is_positive: np.ndarray, threshold: float,
) -> ConfusionMatrix:
    """Counts when flagging every score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    flag = s >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(flag & pos)),
        fp=int(np.sum(flag & ~pos)),
        tn=int(np.sum(~flag & ~pos)),
        fn=int(np.sum(~flag & pos)),
    )


def fbeta(precision: float | None, recall: float | None, beta: float) -> float | None:
    """F-beta from a precision/recall pair; None propagates, (0, 0) gives 0."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if precision is None or recall is None:
        return None
    if precision == 0.0 and recall == 0.0:
        return 0.0
    b2 = beta * beta
    return (1.0 + b2) * precision * recall / (b2 * precision + recall)


def mae(estimates: Sequence[float] | np.ndarray, ages: Sequence[float] | np.ndarray) -> float:
    est = np.asarray(estimates, dtype=np.float64)
    true = np.asarray(ages, dtype=np.float64)
    if est.shape != true.shape or est.size == 0:
        raise ValueError("estimates and ages must be equal-length and non-empty")
    return float(np.mean(np.abs(est - true)))


def _split_pairs(pairs: Iterable[tuple[float, bool]]) -> tuple[np.ndarray, np.ndarray]:
    items = list(pairs)
    if not items:
        raise ValueError("need at least one (score, label) pair")
    scores = np.array([float(s) for s, _ in items])
    labels = np.array([bool(y) for _, y in items])
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels


@dataclass(frozen=True, slots=True)
class DetCurve:
    """Error-tradeoff curve: one row per distinct score plus two sentinels.

    Thresholds ascend from -inf (flag everyone: FNR 0, FPR 1) to +inf (flag
    no one: FNR 1, FPR 0); FPR never increases and FNR never decreases along
    the way.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    fnr: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return [
            (float(t), float(a), float(b))
            for t, a, b in zip(self.thresholds, self.fpr, self.fnr)
        ]

    def to_csv(self) -> str:
        lines = ["threshold,fpr,fnr"]
        lines += [f"{t!r},{a!r},{b!r}" for t, a, b in self.points()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "DetCurve":
        rows = list(csv.DictReader(text.splitlines()))
        return cls(
            thresholds=np.array([float(r["threshold"]) for r in rows]),
            fpr=np.array([float(r["fpr"]) for r in rows]),
            fnr=np.array([float(r["fnr"]) for r in rows]),
        )


def det_curve(pairs: Iterable[tuple[float, bool]]) -> DetCurve:
    """DET curve over (score, is_underage) pairs.

    Both classes must be present, otherwise one of the two rates has no
    denominator.
    """
    scores, labels = _split_pairs(pairs)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0:
        raise ValueError("cannot build a DET curve without positive (underage) samples")
    if n_neg == 0:
        raise ValueError("cannot build a DET curve without negative (adult) samples")
    pos_sorted = np.sort(scores[labels])
    neg_sorted = np.sort(scores[~labels])
    distinct = np.unique(scores)
    thresholds = np.concatenate(([-np.inf], distinct, [np.inf]))
    fn = np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    return DetCurve(thresholds=thresholds, fpr=fp / n_neg, fnr=fn / n_pos)


@dataclass(frozen=True, slots=True)
class CalibratedThreshold:
    """A chosen operating point for one head."""

    threshold: float
    achieved_fnr: float
    target_fnr: float
    head: int | None = None

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "threshold": self.threshold,
            "achieved_fnr": self.achieved_fnr,
            "target_fnr": self.target_fnr,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibratedThreshold":
        return cls(
            threshold=float(obj["threshold"]),
            achieved_fnr=float(obj["achieved_fnr"]),
            target_fnr=float(obj["target_fnr"]),
            head=obj.get("head"),
        )


def calibrate_threshold(
    pairs: Iterable[tuple[float, bool]],
    target_fnr: float = 0.01,
    head: int | None = None,
) -> CalibratedThreshold:
    """Largest observed score threshold whose miss rate stays within target.

    Candidates are the distinct observed scores. FNR(t) = fraction of
    positives strictly below t is non-decreasing in t, and the smallest
    candidate always achieves FNR 0, so the maximum feasible candidate
    exists; any larger candidate would overshoot the target.
    """
    if not 0.0 <= target_fnr < 1.0:
        raise ValueError(f"target_fnr must lie in [0, 1), got {target_fnr}")
    scores, labels = _split_pairs(pairs)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("cannot calibrate a miss rate without positive (underage) samples")
    pos_sorted = np.sort(scores[labels])
    candidates = np.unique(scores)
    fnr = np.searchsorted(pos_sorted, candidates, side="left") / n_pos
    feasible = np.flatnonzero(fnr <= target_fnr)
    idx = int(feasible[-1])
    return CalibratedThreshold(
        threshold=float(candidates[idx]),
        achieved_fnr=float(fnr[idx]),
        target_fnr=float(target_fnr),
        head=head,
    )


@dataclass(frozen=True, slots=True)
class PredictionRow:
    """One evaluated sample: label, decoded age, and per-head underage scores."""

    id: str
    age: int
    age_estimate: float
    scores: dict[int, float] = field(default_factory=dict)


def write_predictions_csv(path: str | Path, rows: Sequence[PredictionRow]) -> None:
    """Delimited dump: id, age, age_estimate, then one score column per head."""
    thresholds = sorted(rows[0].scores) if rows else []
    header = ["id", "age", "age_estimate"] + [f"score_{t}" for t in thresholds]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [row.id, row.age, repr(row.age_estimate)]
                + [repr(row.scores[t]) for t in thresholds]
            )


def read_predictions_csv(path: str | Path) -> list[PredictionRow]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{Path(path).name}: empty predictions file")
        score_cols = {
            int(name.split("_", 1)[1]): name
            for name in reader.fieldnames
            if name.startswith("score_")
        }
        rows = []
        for record in reader:
            rows.append(
                PredictionRow(
                    id=record["id"],
                    age=int(record["age"]),
                    age_estimate=float(record["age_estimate"]),
                    scores={t: float(record[col]) for t, col in score_cols.items()},
                )
            )
    return rows


@dataclass(frozen=True, slots=True)
class GroupMetrics:
    """Metrics of one evaluation group at fixed operating points."""

    name: str
    size: int
    mae: float | None
    heads: dict[int, dict]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "size": self.size,
            "mae": self.mae,
            "heads": {str(t): dict(m) for t, m in self.heads.items()},
        }


def head_metrics(
    ages: np.ndarray, scores: np.ndarray, age_threshold: int, score_threshold: float,
) -> dict:
    """Confusion-derived rates at one operating point; truth is age < threshold."""
    is_pos = np.asarray(ages) < age_threshold
    cm = confusion_at(scores, is_pos, score_threshold)
    return {
        "score_threshold": score_threshold,
        "confusion": cm.to_dict(),
        "precision": cm.precision,
        "recall": cm.recall,
        "fnr": cm.fnr,
        "fpr": cm.fpr,
        "f1": fbeta(cm.precision, cm.recall, 1.0),
        "f2": fbeta(cm.precision, cm.recall, 2.0),
    }


def grouped_report(
    rows: Sequence[PredictionRow],
    groups: Sequence[tuple[str, frozenset | set | None]],
    operating_points: dict[int, float],
) -> list[GroupMetrics]:
    """Per-group metric table at fixed operating points.

    ``groups`` pairs a display name with a member id set (None means every
    row). Groups may overlap. Metrics with an empty denominator come back as
    None rather than a silent zero.
    """
    out = []
    for name, members in groups:
        selected = rows if members is None else [r for r in rows if r.id in members]
        ages = np.array([r.age for r in selected], dtype=np.int64)
        estimates = np.array([r.age_estimate for r in selected])
        group_mae = float(np.mean(np.abs(estimates - ages))) if selected else None
        heads: dict[int, dict] = {}
        for t, thr in sorted(operating_points.items()):
            if selected:
                scores = np.array([r.scores[t] for r in selected])
                heads[t] = head_metrics(ages, scores, t, thr)
            else:
                heads[t] = {
                    "score_threshold": thr,
                    "confusion": {"tp": 0, "fp": 0, "tn": 0, "fn": 0},
                    "precision": None, "recall": None, "fnr": None, "fpr": None,
                    "f1": None, "f2": None,
                }
        out.append(GroupMetrics(name=name, size=len(selected), mae=group_mae, heads=heads))
    return out


def _fmt(value: float | None, width: int = 9) -> str:
    return f"{value:.4f}".ljust(width) if value is not None else "-".ljust(width)


def render_metrics_text(report: Sequence[GroupMetrics]) -> str:
    """Aligned-column text, one block per head threshold."""
    if not report:
        return "no groups\n"
    lines: list[str] = []
    name_w = max(12, max(len(g.name) for g in report) + 2)
    for t in sorted(report[0].heads):
        thr = report[0].heads[t]["score_threshold"]
        lines.append(f"underage head {t} (score threshold {thr:.6g})")
        header = "group".ljust(name_w) + "n".rjust(7) + "  " + "mae".ljust(9)
        header += "".join(
            c.ljust(9) for c in ("precision", "recall", "f1", "f2", "fnr", "fpr")
        )
        lines.append(header)
        for g in report:
            row = g.name.ljust(name_w) + str(g.size).rjust(7) + "  " + _fmt(g.mae)
            m = g.heads[t]
            row += "".join(_fmt(m[k]) for k in ("precision", "recall", "f1", "f2", "fnr", "fpr"))
            lines.append(row.rstrip())
        lines.append("")
    return "\n".join(lines) + "\n"
