"""Minibatch training with hand-rolled optimizers and per-epoch selection.

Loss normalization follows the per-batch convention: the age term averages
over the batch, each binary head averages over its non-masked members (a
fully masked head contributes nothing). The run is a pure function of the
seed; three PCG64 streams are derived from it with fixed tags: parameter
init uses ``seed`` itself, batch shuffling ``[seed, 1]``, and the balanced
sampler ``[seed, 2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from agescreen.data import EmbeddingStore, Manifest, Sample, split_view
from agescreen.losses import (
    HeadLossConfig,
    ResolvedHead,
    batch_age_ce_loss,
    batch_head_terms,
    resolve_heads,
)
from agescreen.metrics import PredictionRow
from agescreen.net import (
    NetworkConfig,
    NetworkParams,
    batch_backward,
    batch_forward,
    batch_predict,
    init_params,
)
from agescreen.sampler import DEFAULT_BIN_BOUNDARIES, build_bins, sample_indices

_EVAL_CHUNK = 65536


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True, slots=True)
class OptimizerConfig:
    """First-order update rule; adam or plain momentum sgd."""

    name: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.name not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.name!r}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("adam betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def to_dict(self) -> dict:
        return {
            "name": self.name, "learning_rate": self.learning_rate,
            "momentum": self.momentum, "beta1": self.beta1,
            "beta2": self.beta2, "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "OptimizerConfig":
        return cls(**obj)


class _Sgd:
    def __init__(self, cfg: OptimizerConfig, tensors: dict[str, np.ndarray]):
        self.lr = cfg.learning_rate
        self.momentum = cfg.momentum
        self.velocity = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g
            tensors[name] -= self.lr * v


class _Adam:
    def __init__(self, cfg: OptimizerConfig, tensors: dict[str, np.ndarray]):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bias1 = 1.0 - c.beta1**self.t
        bias2 = 1.0 - c.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            tensors[name] -= c.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + c.epsilon)


def _make_optimizer(cfg: OptimizerConfig, tensors: dict[str, np.ndarray]):
    return _Adam(cfg, tensors) if cfg.name == "adam" else _Sgd(cfg, tensors)


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Everything the loop needs beyond the architecture."""

    head_configs: tuple[HeadLossConfig, ...]
    head_weights: tuple[float, ...]
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    resampling: bool = False
    bin_boundaries: tuple[int, ...] = DEFAULT_BIN_BOUNDARIES
    selection_metric: str = "val_mae"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.selection_metric not in ("val_mae", "val_total_loss"):
            raise ValueError(
                f"selection_metric must be 'val_mae' or 'val_total_loss', got {self.selection_metric!r}"
            )
        if len(self.head_weights) != 1 + len(self.head_configs):
            raise ValueError(
                f"need {1 + len(self.head_configs)} head weights "
                f"(age plus {len(self.head_configs)} binary), got {len(self.head_weights)}"
            )
        if any(w < 0 for w in self.head_weights):
            raise ValueError("head weights must be non-negative")


@dataclass(frozen=True, slots=True)
class EpochStats:
    train_loss: float
    val_loss: float
    val_mae: float

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "val_mae": self.val_mae}


@dataclass(frozen=True, slots=True)
class TrainReport:
    """Per-epoch curves and which epoch's weights were kept."""

    epochs: tuple[EpochStats, ...]
    best_epoch: int  # 1-based
    selection_metric: str

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "selection_metric": self.selection_metric,
            "epochs": [e.to_dict() for e in self.epochs],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainReport":
        return cls(
            epochs=tuple(EpochStats(**e) for e in obj["epochs"]),
            best_epoch=int(obj["best_epoch"]),
            selection_metric=obj["selection_metric"],
        )


def _batch_terms(
    params: NetworkParams, net_config: NetworkConfig, inputs: np.ndarray,
    ages: np.ndarray, heads: Sequence[ResolvedHead], weights: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Normalized batch loss and the two logit-gradient blocks."""
    trace = batch_forward(params, net_config, inputs)
    n = inputs.shape[0]
    age_losses, age_grads = batch_age_ce_loss(trace.age_probs, ages)
    bin_losses, bin_grads, mask = batch_head_terms(trace.bin_logits, ages, heads)
    counts = np.maximum(mask.sum(axis=0), 1)
    loss = weights[0] * float(age_losses.mean())
    loss += float(np.sum(weights[1:] * bin_losses.sum(axis=0) / counts))
    d_age = (weights[0] / n) * age_grads
    d_bin = bin_grads * (weights[1:] / counts)[None, :]
    return loss, d_age, d_bin


def train(
    manifest: Manifest,
    store: EmbeddingStore,
    net_config: NetworkConfig,
    train_config: TrainConfig,
) -> tuple[NetworkParams, TrainReport]:
    """Fit the heads and return the best-epoch parameters plus the curves.

    The returned parameters are rounded through float32, the checkpoint
    precision, so saving and reloading them is bit-exact.
    """
    head_thresholds = tuple(h.threshold for h in train_config.head_configs)
    if head_thresholds != net_config.thresholds:
        raise ValueError(
            f"loss head thresholds {head_thresholds} must match "
            f"network thresholds {net_config.thresholds}"
        )
    train_samples = split_view(manifest, "train")
    val_samples = split_view(manifest, "val")
    if not train_samples or not val_samples:
        raise ValueError("training needs non-empty train and val splits")

    train_ages = np.array([s.age for s in train_samples], dtype=np.int64)
    val_ages = np.array([s.age for s in val_samples], dtype=np.int64)
    train_z = store.matrix([s.embedding_index for s in train_samples])
    val_z = store.matrix([s.embedding_index for s in val_samples])

    heads = resolve_heads(train_config.head_configs, train_ages)
    weights = np.asarray(train_config.head_weights, dtype=np.float64)

    params = init_params(net_config, train_config.seed)
    optimizer = _make_optimizer(train_config.optimizer, params.tensors)
    shuffle_rng = np.random.default_rng([train_config.seed, 1])
    sampler_rng = np.random.default_rng([train_config.seed, 2])

    bins = build_bins(train_samples, train_config.bin_boundaries) if train_config.resampling else None
    n = len(train_samples)
    batches_per_epoch = math.ceil(n / train_config.batch_size)

    stats: list[EpochStats] = []
    best_value = math.inf
    best_epoch = 0
    best_params = params.copy()

    for epoch in range(1, train_config.epochs + 1):
        if bins is not None:
            batch_indices = [
                sample_indices(bins, train_config.batch_size, sampler_rng)
                for _ in range(batches_per_epoch)
            ]
        else:
            order = shuffle_rng.permutation(n)
            batch_indices = [
                order[start:start + train_config.batch_size]
                for start in range(0, n, train_config.batch_size)
            ]
        epoch_loss = 0.0
        for batch_no, idx in enumerate(batch_indices, start=1):
            loss, d_age, d_bin = _batch_terms(
                params, net_config, train_z[idx], train_ages[idx], heads, weights,
            )
            if not math.isfinite(loss):
                raise DivergenceError(epoch, batch_no)
            grads = batch_backward(params, net_config, train_z[idx], d_age, d_bin)
            optimizer.step(params.tensors, grads)
            epoch_loss += loss
        train_loss = epoch_loss / len(batch_indices)

        val_loss, _, _ = _batch_terms(params, net_config, val_z, val_ages, heads, weights)
        val_trace = batch_forward(params, net_config, val_z)
        val_mae = float(np.mean(np.abs(val_trace.age_estimates - val_ages)))
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch, 0)
        stats.append(EpochStats(train_loss=train_loss, val_loss=val_loss, val_mae=val_mae))

        value = val_mae if train_config.selection_metric == "val_mae" else val_loss
        if value < best_value:
            best_value = value
            best_epoch = epoch
            best_params = params.copy()

    report = TrainReport(epochs=tuple(stats), best_epoch=best_epoch,
                         selection_metric=train_config.selection_metric)
    return best_params.round_to_float32(), report


def evaluate_split(
    params: NetworkParams,
    net_config: NetworkConfig,
    samples: Sequence[Sample],
    store: EmbeddingStore,
    score_from_age: bool = False,
) -> list[PredictionRow]:
    """Prediction rows for a sample sequence, order preserved.

    With ``score_from_age`` the underage score for threshold T becomes
    T minus the decoded age, the operating rule of an age-only model; the
    sigmoid heads are ignored.
    """
    rows: list[PredictionRow] = []
    for start in range(0, len(samples), _EVAL_CHUNK):
        chunk = samples[start:start + _EVAL_CHUNK]
        z = store.matrix([s.embedding_index for s in chunk])
        estimates, scores = batch_predict(params, net_config, z)
        for i, s in enumerate(chunk):
            if score_from_age:
                row_scores = {t: float(t - estimates[i]) for t in net_config.thresholds}
            else:
                row_scores = {
                    t: float(scores[i, j]) for j, t in enumerate(net_config.thresholds)
                }
            rows.append(PredictionRow(id=s.id, age=s.age, age_estimate=float(estimates[i]),
                                      scores=row_scores))
    return rows
