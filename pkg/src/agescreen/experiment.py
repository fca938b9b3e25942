"""One JSON file describes a run; its hash names the run directory.

Paths inside the file resolve relative to the file's own directory, so a
config can travel with its data. The hash covers the resolved settings,
seed override included, which makes a grid of runs self-separating: same
settings, same directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from agescreen.bench import NoiseRules, SelectionCriteria
from agescreen.data import SPLITS
from agescreen.losses import HeadLossConfig
from agescreen.net import NetworkConfig
from agescreen.trainer import OptimizerConfig, TrainConfig

HASH_LENGTH = 12


class ConfigError(ValueError):
    """The experiment config file is missing, malformed, or inconsistent."""


def _require_mapping(obj: Any, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(obj).__name__}")
    return obj


def _reject_unknown(obj: Mapping[str, Any], known: set[str], where: str) -> None:
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True, slots=True)
class CalibrationConfig:
    """Which split fixes the working points and at what miss-rate target."""

    target_fnr: float = 0.01
    split: str = "val"

    def __post_init__(self) -> None:
        if not 0.0 <= self.target_fnr < 1.0:
            raise ValueError(f"target_fnr must lie in [0, 1), got {self.target_fnr}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_dict(self) -> dict:
        return {"target_fnr": self.target_fnr, "split": self.split}


@dataclass(frozen=True, slots=True)
class EvaluationConfig:
    """Evaluation split plus the group fan-out for the metrics report."""

    split: str = "test"
    score_from_age: bool = False
    groupings: tuple[dict, ...] = field(default_factory=lambda: ({"by": "source"},))

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for g in self.groupings:
            if not isinstance(g, dict):
                raise ValueError(f"each grouping must be an object, got {g!r}")

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "score_from_age": self.score_from_age,
            "groupings": [dict(g) for g in self.groupings],
        }


@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    """Everything a run needs, with defaults already applied."""

    seed: int
    output_dir: str = "runs"
    manifest: str | None = None
    embeddings: str | None = None
    network: NetworkConfig | None = None
    train: TrainConfig | None = None
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    wild: SelectionCriteria = field(default_factory=SelectionCriteria)
    noise: NoiseRules = field(default_factory=NoiseRules)
    base_dir: Path = Path(".")

    def data_paths(self) -> tuple[Path, Path]:
        if self.manifest is None or self.embeddings is None:
            raise ConfigError("this command needs a 'data' section with manifest and embeddings")
        return self._resolve(self.manifest), self._resolve(self.embeddings)

    def require_network(self) -> NetworkConfig:
        if self.network is None:
            raise ConfigError("this command needs a 'network' section")
        return self.network

    def require_train(self) -> TrainConfig:
        if self.train is None:
            raise ConfigError("this command needs a 'train' section")
        return self.train

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def resolved(self) -> dict:
        """Every setting explicit; this dict is the run's identity."""
        train = None
        if self.train is not None:
            train = {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "resampling": self.train.resampling,
                "selection_metric": self.train.selection_metric,
                "optimizer": self.train.optimizer.to_dict(),
                "bin_boundaries": list(self.train.bin_boundaries),
                "heads": [h.to_dict() for h in self.train.head_configs],
                "head_weights": list(self.train.head_weights),
            }
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": {"manifest": self.manifest, "embeddings": self.embeddings},
            "network": self.network.to_dict() if self.network is not None else None,
            "train": train,
            "calibration": self.calibration.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "wild": self.wild.to_dict(),
            "noise": self.noise.to_dict(),
        }

    def config_hash(self) -> str:
        return config_hash(self.resolved())

    def run_dir(self, command: str, out_override: str | Path | None = None) -> Path:
        root = Path(out_override) if out_override is not None else self._resolve(self.output_dir)
        return root / f"{command}-{self.config_hash()}"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(resolved: Mapping[str, Any]) -> str:
    digest = hashlib.sha256(canonical_json(resolved).encode("utf-8")).hexdigest()
    return digest[:HASH_LENGTH]


def write_resolved(run_path: Path, resolved: Mapping[str, Any]) -> None:
    run_path.mkdir(parents=True, exist_ok=True)
    text = json.dumps(resolved, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    (run_path / "resolved_config.json").write_text(text, encoding="utf-8")


def _parse_data(obj: Any) -> tuple[str, str]:
    section = _require_mapping(obj, "'data'")
    _reject_unknown(section, {"manifest", "embeddings"}, "'data'")
    for key in ("manifest", "embeddings"):
        if key not in section or not isinstance(section[key], str):
            raise ConfigError(f"'data' needs a string {key!r} path")
    return section["manifest"], section["embeddings"]


def _parse_network(obj: Any) -> NetworkConfig:
    section = _require_mapping(obj, "'network'")
    _reject_unknown(
        section, {"dim", "variant", "bottleneck", "num_ages", "thresholds"}, "'network'"
    )
    try:
        return NetworkConfig.from_dict(section)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid 'network' section: {exc}") from exc


def _parse_train(obj: Any, seed: int, network: NetworkConfig | None) -> TrainConfig:
    section = _require_mapping(obj, "'train'")
    known = {
        "epochs", "batch_size", "resampling", "selection_metric",
        "optimizer", "bin_boundaries", "heads", "head_weights",
    }
    _reject_unknown(section, known, "'train'")
    try:
        if "heads" in section:
            heads = tuple(HeadLossConfig.from_dict(h) for h in section["heads"])
        elif network is not None:
            heads = tuple(HeadLossConfig(threshold=t) for t in network.thresholds)
        else:
            raise ConfigError("'train' needs 'heads' when no 'network' section is present")
        weights = section.get("head_weights", [1.0] * (1 + len(heads)))
        kwargs: dict[str, Any] = {
            "head_configs": heads,
            "head_weights": tuple(float(w) for w in weights),
            "seed": seed,
        }
        if "optimizer" in section:
            opt = _require_mapping(section["optimizer"], "'train.optimizer'")
            _reject_unknown(
                opt,
                {"name", "learning_rate", "momentum", "beta1", "beta2", "epsilon"},
                "'train.optimizer'",
            )
            kwargs["optimizer"] = OptimizerConfig.from_dict(opt)
        for key in ("epochs", "batch_size", "resampling", "selection_metric"):
            if key in section:
                kwargs[key] = section[key]
        if "bin_boundaries" in section:
            kwargs["bin_boundaries"] = tuple(int(b) for b in section["bin_boundaries"])
        return TrainConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid 'train' section: {exc}") from exc


def _parse_section(obj: Any, where: str, builder, known: set[str] | None = None):
    section = _require_mapping(obj, where)
    if known is not None:
        _reject_unknown(section, known, where)
    try:
        return builder(section)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid {where} section: {exc}") from exc


def parse_config(obj: Any, base_dir: Path, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a decoded JSON document into an ExperimentConfig."""
    top = _require_mapping(obj, "config")
    known = {
        "seed", "output_dir", "data", "network", "train",
        "calibration", "evaluation", "wild", "noise",
    }
    _reject_unknown(top, known, "config")

    seed = seed_override if seed_override is not None else top.get("seed")
    if seed is None:
        raise ConfigError("config needs a 'seed' (or pass --seed)")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    output_dir = top.get("output_dir", "runs")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")

    manifest = embeddings = None
    if "data" in top:
        manifest, embeddings = _parse_data(top["data"])
    network = _parse_network(top["network"]) if "network" in top else None
    train = _parse_train(top["train"], seed, network) if "train" in top else None
    if train is not None and network is not None:
        head_thresholds = tuple(h.threshold for h in train.head_configs)
        if head_thresholds != network.thresholds:
            raise ConfigError(
                f"train head thresholds {head_thresholds} do not match "
                f"network thresholds {network.thresholds}"
            )

    calibration = (
        _parse_section(
            top["calibration"], "'calibration'",
            lambda s: CalibrationConfig(**s), {"target_fnr", "split"},
        )
        if "calibration" in top else CalibrationConfig()
    )
    evaluation = (
        _parse_section(
            top["evaluation"], "'evaluation'",
            lambda s: EvaluationConfig(
                split=s.get("split", "test"),
                score_from_age=bool(s.get("score_from_age", False)),
                groupings=tuple(s.get("groupings", [{"by": "source"}])),
            ),
            {"split", "score_from_age", "groupings"},
        )
        if "evaluation" in top else EvaluationConfig()
    )
    wild = (
        _parse_section(top["wild"], "'wild'", SelectionCriteria.from_dict)
        if "wild" in top else SelectionCriteria()
    )
    noise = (
        _parse_section(top["noise"], "'noise'", NoiseRules.from_dict)
        if "noise" in top else NoiseRules()
    )

    return ExperimentConfig(
        seed=seed, output_dir=output_dir, manifest=manifest, embeddings=embeddings,
        network=network, train=train, calibration=calibration, evaluation=evaluation,
        wild=wild, noise=noise, base_dir=base_dir,
    )


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    """Read, decode, and validate an experiment config file."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    return parse_config(obj, base_dir=p.parent, seed_override=seed_override)
