"""The multi-head network: a two-layer MLP trunk over a frozen face embedding,
an age softmax decoded by expectation, and one sigmoid head per age threshold.

The trunk comes in two variants. "WS" applies one square weight matrix twice
(both layers share it), "IND" uses an independent pair with a configurable
bottleneck width. All math is float64 numpy; gradients are hand-derived, and
`batch_backward` is the single implementation the per-sample wrapper reuses.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from agescreen.numerics import relu, sigmoid, softmax

VARIANTS = ("WS", "IND")

CHECKPOINT_MAGIC = b"MAGP"
CHECKPOINT_VERSION = 1

_CKPT_HEADER = struct.Struct("<4sII")  # magic, version, tensor count
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """A checkpoint file violates the format contract."""


@dataclass(frozen=True, slots=True)
class NetworkConfig:
    """Architecture description; everything needed to build or check params.

    dim         embedding dimension fed to the trunk
    variant     "WS" (one shared square matrix) or "IND" (independent pair)
    bottleneck  hidden width m, IND only; must be None for WS
    num_ages    age classes, decoded as 0..num_ages-1
    thresholds  ascending integer age limits, one binary head each
    """

    dim: int
    variant: str = "WS"
    bottleneck: int | None = None
    num_ages: int = 102
    thresholds: tuple[int, ...] = (12, 15, 18, 21)

    def __post_init__(self) -> None:
        if not isinstance(self.dim, int) or isinstance(self.dim, bool) or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "IND":
            if not isinstance(self.bottleneck, int) or isinstance(self.bottleneck, bool) or self.bottleneck < 1:
                raise ValueError(f"IND variant needs a positive bottleneck, got {self.bottleneck!r}")
        elif self.bottleneck is not None:
            raise ValueError("WS variant takes no bottleneck")
        if not isinstance(self.num_ages, int) or self.num_ages < 2:
            raise ValueError(f"num_ages must be an integer >= 2, got {self.num_ages!r}")
        thresholds = tuple(self.thresholds)
        object.__setattr__(self, "thresholds", thresholds)
        if not thresholds:
            raise ValueError("at least one threshold head is required")
        for t in thresholds:
            if not isinstance(t, int) or isinstance(t, bool) or not 1 <= t < self.num_ages:
                raise ValueError(f"thresholds must be integers in [1, {self.num_ages - 1}], got {t!r}")
        if any(a >= b for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {thresholds}")

    @property
    def num_heads(self) -> int:
        return len(self.thresholds)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "variant": self.variant,
            "bottleneck": self.bottleneck,
            "num_ages": self.num_ages,
            "thresholds": list(self.thresholds),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NetworkConfig":
        return cls(
            dim=obj["dim"],
            variant=obj.get("variant", "WS"),
            bottleneck=obj.get("bottleneck"),
            num_ages=obj.get("num_ages", 102),
            thresholds=tuple(obj.get("thresholds", (12, 15, 18, 21))),
        )


def expected_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape map for one architecture."""
    d, c, k = config.dim, config.num_ages, config.num_heads
    if config.variant == "WS":
        shapes = {"mlp.w": (d, d), "mlp.b1": (d,), "mlp.b2": (d,)}
    else:
        m = config.bottleneck
        shapes = {"mlp.w1": (m, d), "mlp.b1": (m,), "mlp.w2": (d, m), "mlp.b2": (d,)}
    shapes.update({"age.w": (c, d), "age.b": (c,), "bin.w": (k, d), "bin.b": (k,)})
    return shapes


def parameter_count(config: NetworkConfig) -> int:
    """Total scalar parameters, biases included."""
    return sum(int(np.prod(shape)) for shape in expected_shapes(config).values())


@dataclass
class NetworkParams:
    """Named float64 tensors matching one NetworkConfig."""

    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.tensors))

    def round_to_float32(self) -> "NetworkParams":
        """Params rounded through float32, the on-disk precision."""
        return NetworkParams(
            {k: v.astype(np.float32).astype(np.float64) for k, v in self.tensors.items()}
        )


def validate_params(params: NetworkParams, config: NetworkConfig) -> None:
    shapes = expected_shapes(config)
    if set(params.tensors) != set(shapes):
        raise ValueError(
            f"tensor names {sorted(params.tensors)} do not match expected {sorted(shapes)}"
        )
    for name, shape in shapes.items():
        t = params.tensors[name]
        if t.shape != shape:
            raise ValueError(f"tensor {name!r} has shape {t.shape}, expected {shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError(f"tensor {name!r} contains non-finite values")


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: NetworkConfig, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases; one seeded PCG64 stream, fixed draw order."""
    rng = np.random.default_rng(seed)
    d, c, k = config.dim, config.num_ages, config.num_heads
    tensors: dict[str, np.ndarray] = {}
    if config.variant == "WS":
        tensors["mlp.w"] = _glorot(rng, (d, d), d, d)
        tensors["mlp.b1"] = np.zeros(d)
        tensors["mlp.b2"] = np.zeros(d)
    else:
        m = config.bottleneck
        tensors["mlp.w1"] = _glorot(rng, (m, d), d, m)
        tensors["mlp.b1"] = np.zeros(m)
        tensors["mlp.w2"] = _glorot(rng, (d, m), m, d)
        tensors["mlp.b2"] = np.zeros(d)
    tensors["age.w"] = _glorot(rng, (c, d), d, c)
    tensors["age.b"] = np.zeros(c)
    # each threshold head is a d -> 1 readout
    tensors["bin.w"] = _glorot(rng, (k, d), d, 1)
    tensors["bin.b"] = np.zeros(k)
    return NetworkParams(tensors)


@dataclass(frozen=True, slots=True)
class BatchTrace:
    """Every intermediate of a batched forward pass, rows indexed by sample."""

    inputs: np.ndarray        # (n, d)
    pre1: np.ndarray          # first pre-activation
    hidden: np.ndarray        # relu(pre1)
    pre2: np.ndarray          # second pre-activation
    rep: np.ndarray           # relu(pre2), shared representation (n, d)
    age_logits: np.ndarray    # (n, c)
    age_probs: np.ndarray     # softmax rows
    age_estimates: np.ndarray # expectation-decoded ages (n,)
    bin_logits: np.ndarray    # (n, k), over-threshold orientation
    bin_probs: np.ndarray     # sigmoid(bin_logits)


@dataclass(frozen=True, slots=True)
class ForwardTrace:
    """Single-sample view of a forward pass."""

    inputs: np.ndarray
    pre1: np.ndarray
    hidden: np.ndarray
    pre2: np.ndarray
    rep: np.ndarray
    age_logits: np.ndarray
    age_probs: np.ndarray
    age_estimate: float
    bin_logits: np.ndarray
    bin_probs: np.ndarray


def batch_forward(params: NetworkParams, config: NetworkConfig, inputs: np.ndarray) -> BatchTrace:
    """Forward pass over a (n, dim) float matrix."""
    z = np.asarray(inputs, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != config.dim:
        raise ValueError(f"inputs must have shape (n, {config.dim}), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("inputs contain non-finite values")
    t = params.tensors
    if config.variant == "WS":
        w = t["mlp.w"]
        pre1 = z @ w.T + t["mlp.b1"]
        hidden = relu(pre1)
        pre2 = hidden @ w.T + t["mlp.b2"]
    else:
        pre1 = z @ t["mlp.w1"].T + t["mlp.b1"]
        hidden = relu(pre1)
        pre2 = hidden @ t["mlp.w2"].T + t["mlp.b2"]
    rep = relu(pre2)
    age_logits = rep @ t["age.w"].T + t["age.b"]
    age_probs = softmax(age_logits, axis=1)
    ages = np.arange(config.num_ages, dtype=np.float64)
    age_estimates = age_probs @ ages
    bin_logits = rep @ t["bin.w"].T + t["bin.b"]
    bin_probs = sigmoid(bin_logits)
    return BatchTrace(
        inputs=z, pre1=pre1, hidden=hidden, pre2=pre2, rep=rep,
        age_logits=age_logits, age_probs=age_probs, age_estimates=age_estimates,
        bin_logits=bin_logits, bin_probs=bin_probs,
    )


def forward(params: NetworkParams, config: NetworkConfig, z: np.ndarray) -> ForwardTrace:
    """Forward pass for one embedding vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != config.dim:
        raise ValueError(f"z must be a vector of length {config.dim}, got shape {z.shape}")
    b = batch_forward(params, config, z[None, :])
    return ForwardTrace(
        inputs=b.inputs[0], pre1=b.pre1[0], hidden=b.hidden[0], pre2=b.pre2[0],
        rep=b.rep[0], age_logits=b.age_logits[0], age_probs=b.age_probs[0],
        age_estimate=float(b.age_estimates[0]), bin_logits=b.bin_logits[0],
        bin_probs=b.bin_probs[0],
    )


def batch_backward(
    params: NetworkParams, config: NetworkConfig, inputs: np.ndarray,
    d_age_logits: np.ndarray, d_bin_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Parameter gradients summed over the batch.

    Takes the loss gradients at both logit blocks and chains them through the
    shared representation and the trunk; the forward intermediates are
    recomputed here. ReLU uses the (pre > 0) subgradient.
    """
    trace = batch_forward(params, config, inputs)
    d_age = np.asarray(d_age_logits, dtype=np.float64)
    d_bin = np.asarray(d_bin_logits, dtype=np.float64)
    n = trace.inputs.shape[0]
    if d_age.shape != (n, config.num_ages):
        raise ValueError(f"d_age_logits must have shape ({n}, {config.num_ages}), got {d_age.shape}")
    if d_bin.shape != (n, config.num_heads):
        raise ValueError(f"d_bin_logits must have shape ({n}, {config.num_heads}), got {d_bin.shape}")
    t = params.tensors
    grads: dict[str, np.ndarray] = {
        "age.w": d_age.T @ trace.rep,
        "age.b": d_age.sum(axis=0),
        "bin.w": d_bin.T @ trace.rep,
        "bin.b": d_bin.sum(axis=0),
    }
    d_rep = d_age @ t["age.w"] + d_bin @ t["bin.w"]
    d_pre2 = d_rep * (trace.pre2 > 0.0)
    grads["mlp.b2"] = d_pre2.sum(axis=0)
    if config.variant == "WS":
        w = t["mlp.w"]
        grad_layer2 = d_pre2.T @ trace.hidden
        d_hidden = d_pre2 @ w
        d_pre1 = d_hidden * (trace.pre1 > 0.0)
        grads["mlp.b1"] = d_pre1.sum(axis=0)
        # the shared matrix accumulates both applications
        grads["mlp.w"] = grad_layer2 + d_pre1.T @ trace.inputs
    else:
        grads["mlp.w2"] = d_pre2.T @ trace.hidden
        d_hidden = d_pre2 @ t["mlp.w2"]
        d_pre1 = d_hidden * (trace.pre1 > 0.0)
        grads["mlp.b1"] = d_pre1.sum(axis=0)
        grads["mlp.w1"] = d_pre1.T @ trace.inputs
    return grads


def backward(
    params: NetworkParams, config: NetworkConfig, z: np.ndarray,
    d_age_logits: np.ndarray, d_bin_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Single-sample parameter gradients."""
    z = np.asarray(z, dtype=np.float64)
    return batch_backward(
        params, config, z[None, :],
        np.asarray(d_age_logits)[None, :], np.asarray(d_bin_logits)[None, :],
    )


def predict(params: NetworkParams, config: NetworkConfig, z: np.ndarray) -> tuple[float, dict[int, float]]:
    """Decoded age estimate and the underage score per threshold.

    Scores are sigmoid(-u), the underage orientation, computed directly from
    the logit so tail values keep full precision.
    """
    trace = forward(params, config, z)
    scores = sigmoid(-trace.bin_logits)
    return trace.age_estimate, {
        t: float(scores[i]) for i, t in enumerate(config.thresholds)
    }


def batch_predict(
    params: NetworkParams, config: NetworkConfig, inputs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Age estimates (n,) and underage scores (n, num_heads), threshold order."""
    trace = batch_forward(params, config, inputs)
    return trace.age_estimates, sigmoid(-trace.bin_logits)


def save_checkpoint(path: str | Path, params: NetworkParams, config: NetworkConfig) -> None:
    """Write params as float32 named tensors plus a sibling JSON config.

    Tensors are stored sorted by name: magic, version, count, then for each
    tensor a length-prefixed utf-8 name, rank, u32 dims, and the row-major
    float32 payload. The config lands at the same path with a .json suffix.
    """
    validate_params(params, config)
    path = Path(path)
    blob = bytearray()
    names = sorted(params.tensors)
    blob += _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(names))
    for name in names:
        raw = name.encode("utf-8")
        tensor = np.ascontiguousarray(params.tensors[name], dtype=np.float32)
        blob += _U32.pack(len(raw))
        blob += raw
        blob += _U32.pack(tensor.ndim)
        for dim in tensor.shape:
            blob += _U32.pack(dim)
        blob += tensor.tobytes(order="C")
    path.write_bytes(bytes(blob))
    config_path = path.with_suffix(".json")
    config_path.write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, NetworkConfig]:
    """Read a checkpoint and its sibling config, validating shapes against it."""
    path = Path(path)
    config_path = path.with_suffix(".json")
    if not config_path.exists():
        raise CheckpointError(f"missing config file {config_path.name} next to {path.name}")
    try:
        config = NetworkConfig.from_dict(json.loads(config_path.read_text()))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{config_path.name}: invalid network config: {exc}") from exc

    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path.name}: file shorter than the header")
    magic, version, count = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path.name}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported version {version}")
    offset = _CKPT_HEADER.size
    tensors: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointError(f"{path.name}: truncated at byte {offset}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    for _ in range(count):
        (name_len,) = _U32.unpack(take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = _U32.unpack(take(4))
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        payload = take(4 * size)
        if name in tensors:
            raise CheckpointError(f"{path.name}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    if offset != len(raw):
        raise CheckpointError(f"{path.name}: {len(raw) - offset} trailing bytes")
    params = NetworkParams(tensors)
    validate_params(params, config)
    return params, config
