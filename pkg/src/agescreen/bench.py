"""Composition of a wild-condition evaluation set and label-noise review lists.

Samples are pulled into the hard subset by two kinds of rule: percentile cuts
on image-quality statistics (worst contrast, sharpness, brightness, and both
saturation extremes) and absolute thresholds on head pose and expression
intensity. Sources listed as ``designated`` are large enough to swamp the
percentile cuts, so they form their own pools and contribute at half the
percentage.

Image statistics can be computed here from decoded pixel arrays: brightness
is the mean of the BT.601 grayscale, contrast its population standard
deviation, saturation the mean hexcone S channel, and sharpness the variance
of the 3x3 Laplacian over the valid interior.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from agescreen.data import Sample

# criterion keys in canonical order; percentile rules first, then thresholds
PERCENTILE_CRITERIA = (
    ("low_contrast", "contrast", "lowest"),
    ("low_sharpness", "sharpness", "lowest"),
    ("low_brightness", "brightness", "lowest"),
    ("low_saturation", "saturation", "lowest"),
    ("high_saturation", "saturation", "highest"),
)
THRESHOLD_CRITERIA = ("strong_pose", "strong_expression")
ALL_CRITERIA = tuple(name for name, _, _ in PERCENTILE_CRITERIA) + THRESHOLD_CRITERIA

_BT601 = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, slots=True)
class ImageStats:
    brightness: float
    contrast: float
    saturation: float
    sharpness: float

    def to_dict(self) -> dict[str, float]:
        return {
            "brightness": self.brightness,
            "contrast": self.contrast,
            "saturation": self.saturation,
            "sharpness": self.sharpness,
        }


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """BT.601 luma of an (h, w) or (h, w, 3) array, float64."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr @ _BT601
    raise ValueError(f"expected (h, w) or (h, w, 3) pixels, got shape {arr.shape}")


def laplacian_variance(gray: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian over the valid interior (no padding)."""
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError(f"image must be at least 3x3 for the sharpness statistic, got {g.shape}")
    lap = (
        g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:]
        - 4.0 * g[1:-1, 1:-1]
    )
    return float(np.var(lap))


def mean_saturation(pixels: np.ndarray) -> float:
    """Mean hexcone saturation (max-min)/max per pixel; 0 where max is 0."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        return 0.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (h, w) or (h, w, 3) pixels, got shape {arr.shape}")
    top = arr.max(axis=2)
    spread = top - arr.min(axis=2)
    sat = np.divide(spread, top, out=np.zeros_like(top), where=top > 0)
    return float(sat.mean())


def image_stats(pixels: np.ndarray) -> ImageStats:
    """All four quality statistics of one decoded image.

    Pixel values are interpreted on the 0..255 scale; uint8 input converts
    exactly, float input is used as given.
    """
    gray = to_grayscale(pixels)
    return ImageStats(
        brightness=float(gray.mean()),
        contrast=float(gray.std()),
        saturation=mean_saturation(pixels),
        sharpness=laplacian_variance(gray),
    )


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG into an (h, w, 3) uint8 array."""
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def pose_norm(pitch: float, yaw: float, roll: float) -> float:
    """Euclidean magnitude of the three head-pose angles, degrees."""
    return float(np.sqrt(pitch * pitch + yaw * yaw + roll * roll))


def expression_intensity(arousal: float, valence: float) -> float:
    """Distance from the neutral point of the arousal/valence plane."""
    return float(np.sqrt(arousal * arousal + valence * valence))


def percentile_select(
    values: Sequence[tuple[str, float]], pct: float, mode: str = "lowest",
) -> list[str]:
    """Ids of the most extreme floor(pct% of n) entries.

    Ties and equal values resolve by input order (stable sort), so a rerun
    over the same input always picks the same ids.
    """
    if mode not in ("lowest", "highest"):
        raise ValueError(f"mode must be 'lowest' or 'highest', got {mode!r}")
    if not 0.0 <= pct <= 100.0:
        raise ValueError(f"pct must lie in [0, 100], got {pct}")
    k = int(len(values) * pct / 100.0)
    if k == 0:
        return []
    sign = 1.0 if mode == "lowest" else -1.0
    order = sorted(range(len(values)), key=lambda i: (sign * values[i][1], i))
    return [values[i][0] for i in order[:k]]


@dataclass(frozen=True, slots=True)
class SelectionCriteria:
    """Tunable knobs of the wild-set composition; defaults are the study values."""

    low_contrast_pct: float = 8.0
    low_sharpness_pct: float = 8.0
    low_brightness_pct: float = 4.0
    low_saturation_pct: float = 4.0
    high_saturation_pct: float = 4.0
    pose_threshold: float = 45.0
    expression_threshold: float = 0.7
    expression_overrides: dict[str, float] = field(default_factory=dict)
    expression_quota: int | None = None
    designated_sources: tuple[str, ...] = ()

    def pct_for(self, criterion: str) -> float:
        return {
            "low_contrast": self.low_contrast_pct,
            "low_sharpness": self.low_sharpness_pct,
            "low_brightness": self.low_brightness_pct,
            "low_saturation": self.low_saturation_pct,
            "high_saturation": self.high_saturation_pct,
        }[criterion]

    def to_dict(self) -> dict:
        return {
            "low_contrast_pct": self.low_contrast_pct,
            "low_sharpness_pct": self.low_sharpness_pct,
            "low_brightness_pct": self.low_brightness_pct,
            "low_saturation_pct": self.low_saturation_pct,
            "high_saturation_pct": self.high_saturation_pct,
            "pose_threshold": self.pose_threshold,
            "expression_threshold": self.expression_threshold,
            "expression_overrides": dict(self.expression_overrides),
            "expression_quota": self.expression_quota,
            "designated_sources": list(self.designated_sources),
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "SelectionCriteria":
        known = {
            "low_contrast_pct", "low_sharpness_pct", "low_brightness_pct",
            "low_saturation_pct", "high_saturation_pct", "pose_threshold",
            "expression_threshold", "expression_overrides", "expression_quota",
            "designated_sources",
        }
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown selection criteria keys: {sorted(unknown)}")
        kwargs = dict(obj)
        if "expression_overrides" in kwargs:
            kwargs["expression_overrides"] = dict(kwargs["expression_overrides"])
        if "designated_sources" in kwargs:
            kwargs["designated_sources"] = tuple(kwargs["designated_sources"])
        return cls(**kwargs)


def _stat_of(sample: Sample, name: str, overlay: Mapping[str, Mapping[str, float]] | None) -> float | None:
    if overlay is not None:
        values = overlay.get(sample.id)
        if values is not None and name in values and values[name] is not None:
            return float(values[name])
    if sample.meta is None:
        return None
    value = sample.meta.get(name)
    return None if value is None else float(value)


def _expression_category(sample: Sample) -> str | None:
    value = sample.extra.get("expression")
    if value is None and sample.meta is not None:
        value = sample.meta.extra.get("expression")
    return value if isinstance(value, str) else None


@dataclass(frozen=True, slots=True)
class WildSelection:
    """Outcome of one composition run."""

    per_criterion: dict[str, tuple[str, ...]]
    union: tuple[str, ...]
    missing: dict[str, int]
    sources: dict[str, str]  # sample id -> source tag

    def breakdown(self) -> list[dict]:
        """Criterion x source count table, plus a closing union row."""
        source_names = sorted(set(self.sources.values()))
        rows = []
        for criterion in ALL_CRITERIA:
            ids = self.per_criterion.get(criterion, ())
            row: dict[str, Any] = {"criterion": criterion}
            for name in source_names:
                row[name] = sum(1 for i in ids if self.sources[i] == name)
            row["total"] = len(ids)
            rows.append(row)
        union_row: dict[str, Any] = {"criterion": "union"}
        for name in source_names:
            union_row[name] = sum(1 for i in self.union if self.sources[i] == name)
        union_row["total"] = len(self.union)
        rows.append(union_row)
        return rows

    def breakdown_csv(self) -> str:
        rows = self.breakdown()
        header = list(rows[0].keys())
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(str(row[h]) for h in header))
        return "\n".join(lines) + "\n"


def compose_wild(
    samples: Sequence[Sample],
    criteria: SelectionCriteria,
    stats: Mapping[str, Mapping[str, float]] | None = None,
) -> WildSelection:
    """Select the hard-condition subset of ``samples``.

    Percentile rules run separately inside each designated source and once
    over the pooled remainder, with designated pools at half the percentage.
    Pose and expression rules are absolute thresholds over all samples.
    Samples missing the statistic a rule needs are skipped and counted in
    ``missing``.
    """
    if not samples:
        raise ValueError("cannot compose a wild set from an empty sample list")
    per_criterion: dict[str, tuple[str, ...]] = {}
    missing: dict[str, int] = {}

    designated = set(criteria.designated_sources)
    pools: list[tuple[bool, list[Sample]]] = []
    for source in criteria.designated_sources:
        members = [s for s in samples if s.source == source]
        if members:
            pools.append((True, members))
    rest = [s for s in samples if s.source not in designated]
    if rest:
        pools.append((False, rest))

    for criterion, stat, mode in PERCENTILE_CRITERIA:
        chosen: list[str] = []
        skipped = 0
        for halved, pool in pools:
            eligible = []
            for s in pool:
                value = _stat_of(s, stat, stats)
                if value is None:
                    skipped += 1
                else:
                    eligible.append((s.id, value))
            pct = criteria.pct_for(criterion)
            chosen += percentile_select(eligible, pct / 2.0 if halved else pct, mode)
        per_criterion[criterion] = tuple(chosen)
        missing[criterion] = skipped

    pose_ids = []
    skipped = 0
    for s in samples:
        angles = [_stat_of(s, n, stats) for n in ("pitch", "yaw", "roll")]
        if any(a is None for a in angles):
            skipped += 1
            continue
        if pose_norm(*angles) > criteria.pose_threshold:
            pose_ids.append(s.id)
    per_criterion["strong_pose"] = tuple(pose_ids)
    missing["strong_pose"] = skipped

    expressive: list[str] = []
    runners_up: list[tuple[float, int, str]] = []
    skipped = 0
    for i, s in enumerate(samples):
        arousal = _stat_of(s, "arousal", stats)
        valence = _stat_of(s, "valence", stats)
        if arousal is None or valence is None:
            skipped += 1
            continue
        intensity = expression_intensity(arousal, valence)
        category = _expression_category(s)
        cutoff = criteria.expression_overrides.get(category, criteria.expression_threshold)
        if intensity > cutoff:
            expressive.append(s.id)
        else:
            runners_up.append((-intensity, i, s.id))
    if criteria.expression_quota is not None and len(expressive) < criteria.expression_quota:
        # lower the bar: admit the strongest remaining until the quota is met
        runners_up.sort()
        need = criteria.expression_quota - len(expressive)
        expressive += [sid for _, _, sid in runners_up[:need]]
    per_criterion["strong_expression"] = tuple(expressive)
    missing["strong_expression"] = skipped

    union: list[str] = []
    seen: set[str] = set()
    for criterion in ALL_CRITERIA:
        for sid in per_criterion[criterion]:
            if sid not in seen:
                seen.add(sid)
                union.append(sid)
    return WildSelection(
        per_criterion=per_criterion,
        union=tuple(union),
        missing=missing,
        sources={s.id: s.source for s in samples},
    )


def build_eval_groups(
    samples: Sequence[Sample],
    specs: Sequence[Mapping[str, Any]],
    stats: Mapping[str, Mapping[str, float]] | None = None,
) -> list[tuple[str, frozenset[str] | None]]:
    """Evaluation groups from declarative specs.

    {"by": "source"} fans out one group per source value; {"name", "stat",
    "mode", "pct"} selects a percentile extreme of any metadata statistic,
    including the derived pose_norm and expression_intensity.
    """
    groups: list[tuple[str, frozenset[str] | None]] = [("overall", None)]
    for spec in specs:
        if "by" in spec:
            if spec["by"] != "source":
                raise ValueError(f"can only group by 'source', got {spec['by']!r}")
            for source in sorted({s.source for s in samples}):
                members = frozenset(s.id for s in samples if s.source == source)
                groups.append((f"source={source}", members))
            continue
        try:
            name, stat, mode, pct = spec["name"], spec["stat"], spec["mode"], spec["pct"]
        except KeyError as exc:
            raise ValueError(f"grouping spec needs name/stat/mode/pct, missing {exc}") from exc
        eligible: list[tuple[str, float]] = []
        for s in samples:
            if stat == "pose_norm":
                angles = [_stat_of(s, n, stats) for n in ("pitch", "yaw", "roll")]
                value = None if any(a is None for a in angles) else pose_norm(*angles)
            elif stat == "expression_intensity":
                arousal = _stat_of(s, "arousal", stats)
                valence = _stat_of(s, "valence", stats)
                value = None if arousal is None or valence is None else expression_intensity(arousal, valence)
            else:
                value = _stat_of(s, stat, stats)
            if value is not None:
                eligible.append((s.id, value))
        groups.append((name, frozenset(percentile_select(eligible, float(pct), mode))))
    return groups


@dataclass(frozen=True, slots=True)
class NoiseRules:
    """Quantile and error cutoffs for the label-review rules."""

    adult_low_pct: float = 0.5
    minor_high_pct: float = 2.0
    underestimation_error: float = -16.0
    underestimation_cap: float = 24.0
    overestimation_error: float = 9.0
    adult_age: int = 18

    def to_dict(self) -> dict:
        return {
            "adult_low_pct": self.adult_low_pct,
            "minor_high_pct": self.minor_high_pct,
            "underestimation_error": self.underestimation_error,
            "underestimation_cap": self.underestimation_cap,
            "overestimation_error": self.overestimation_error,
            "adult_age": self.adult_age,
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "NoiseRules":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown noise rule keys: {sorted(unknown)}")
        return cls(**dict(obj))


@dataclass(frozen=True, slots=True)
class NoiseFlag:
    id: str
    rule: str


def flag_label_noise(
    rows: Sequence[tuple[str, int, float, float]],
    rules: NoiseRules = NoiseRules(),
) -> list[NoiseFlag]:
    """Review list over (id, age_label, age_estimate, over_adult_score) rows.

    Four rules, each contributing its own flag: adults whose over-threshold
    score sits in the lowest ``adult_low_pct`` percent of adults; minors in
    the highest ``minor_high_pct`` percent of minors; estimates undershooting
    the label by ``underestimation_error`` or more while staying below the
    cap; and minors overshot by ``overestimation_error`` or more. The result
    is a review queue, never an automatic relabeling.
    """
    flags: list[NoiseFlag] = []
    adults = [(sid, score) for sid, age, _, score in rows if age >= rules.adult_age]
    minors = [(sid, score) for sid, age, _, score in rows if age < rules.adult_age]
    for sid in percentile_select(adults, rules.adult_low_pct, "lowest"):
        flags.append(NoiseFlag(sid, "adult_low_score"))
    for sid in percentile_select(minors, rules.minor_high_pct, "highest"):
        flags.append(NoiseFlag(sid, "minor_high_score"))
    for sid, age, estimate, _ in rows:
        error = estimate - age
        if error <= rules.underestimation_error and estimate < rules.underestimation_cap:
            flags.append(NoiseFlag(sid, "underestimated"))
    for sid, age, estimate, _ in rows:
        if age < rules.adult_age and estimate - age >= rules.overestimation_error:
            flags.append(NoiseFlag(sid, "overestimated_minor"))
    return flags


def flags_csv(flags: Sequence[NoiseFlag]) -> str:
    lines = ["id,rule"] + [f"{f.id},{f.rule}" for f in flags]
    return "\n".join(lines) + "\n"


def read_stats_csv(path: str | Path) -> dict[str, dict[str, float]]:
    """Per-sample statistic overlay from a delimited file with an id column."""
    out: dict[str, dict[str, float]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise ValueError(f"{Path(path).name}: stats file needs an 'id' column")
        for record in reader:
            values = {}
            for key, text in record.items():
                if key == "id" or text in (None, ""):
                    continue
                values[key] = float(text)
            out[record["id"]] = values
    return out
