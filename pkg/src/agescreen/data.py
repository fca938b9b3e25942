"""Dataset plumbing: manifest records, JSON-Lines IO, and the embedding store.

A manifest is a JSON-Lines file with one sample object per line. The embedding
store is a flat binary file of float32 rows addressed by ``embedding_index``.
Both formats round-trip byte-identically through the canonical writers here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

AGE_MIN = 0
AGE_MAX = 101
SPLITS = ("train", "val", "test")

EMBEDDING_MAGIC = b"MAGE"
EMBEDDING_VERSION = 1

# magic, version, dim, count; all integers little-endian u32
_EMBEDDING_HEADER = struct.Struct("<4sIII")

# numeric metadata fields with inclusive validation bounds (None = unbounded)
_META_RANGES: dict[str, tuple[float | None, float | None]] = {
    "pitch": (None, None),
    "yaw": (None, None),
    "roll": (None, None),
    "brightness": (0.0, 255.0),
    "contrast": (0.0, None),
    "saturation": (0.0, 1.0),
    "sharpness": (0.0, None),
    "arousal": (-1.0, 1.0),
    "valence": (-1.0, 1.0),
}


class ManifestError(ValueError):
    """A manifest or embedding file violates the format contract."""


def _is_int(value: Any) -> bool:
    # bool is an int subclass; JSON true/false must not pass as numbers
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True, slots=True)
class Metadata:
    """Optional per-sample image statistics, head pose, and expression values.

    Fields keep the numeric type they had in the source JSON so that the
    canonical serializer reproduces the input bytes. ``extra`` holds unknown
    metadata keys verbatim.
    """

    pitch: float | None = None
    yaw: float | None = None
    roll: float | None = None
    brightness: float | None = None
    contrast: float | None = None
    saturation: float | None = None
    sharpness: float | None = None
    arousal: float | None = None
    valence: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for name in _META_RANGES:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        out.update(self.extra)
        return out

    def get(self, name: str) -> Any:
        """Return a known field or an extra key, None when absent."""
        if name in _META_RANGES:
            return getattr(self, name)
        return self.extra.get(name)


@dataclass(frozen=True, slots=True)
class Sample:
    """One manifest record: identity, integer age label, and bookkeeping tags."""

    id: str
    age: int
    source: str
    split: str
    embedding_index: int
    meta: Metadata | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "age": self.age,
            "source": self.source,
            "split": self.split,
            "embedding_index": self.embedding_index,
        }
        if self.meta is not None:
            out["meta"] = self.meta.to_dict()
        out.update(self.extra)
        return out


def _parse_meta(obj: Any, where: str) -> Metadata:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: meta must be an object, got {type(obj).__name__}")
    fields: dict[str, Any] = {}
    extra: dict[str, Any] = {}
    for key, value in obj.items():
        if key not in _META_RANGES:
            extra[key] = value
            continue
        if not _is_number(value):
            raise ManifestError(f"{where}: meta field {key!r} must be a number")
        if not np.isfinite(value):
            raise ManifestError(f"{where}: meta field {key!r} is not finite")
        lo, hi = _META_RANGES[key]
        if (lo is not None and value < lo) or (hi is not None and value > hi):
            raise ManifestError(
                f"{where}: meta field {key!r} = {value!r} outside [{lo}, {hi}]"
            )
        fields[key] = value
    return Metadata(extra=extra, **fields)


def parse_sample(obj: Any, where: str = "sample") -> Sample:
    """Build a validated Sample from a decoded JSON object.

    ``where`` names the source location (file line) so errors identify the
    offending record.
    """
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object, got {type(obj).__name__}")

    sid = obj.get("id")
    if not isinstance(sid, str) or not sid:
        raise ManifestError(f"{where}: field 'id' must be a non-empty string")
    where = f"{where} (id={sid!r})"

    age = obj.get("age")
    if not _is_int(age):
        raise ManifestError(f"{where}: field 'age' must be an integer, got {age!r}")
    if not AGE_MIN <= age <= AGE_MAX:
        raise ManifestError(
            f"{where}: age {age} outside the supported range [{AGE_MIN}, {AGE_MAX}]"
        )

    source = obj.get("source")
    if not isinstance(source, str):
        raise ManifestError(f"{where}: field 'source' must be a string")

    split = obj.get("split")
    if split not in SPLITS:
        raise ManifestError(f"{where}: field 'split' must be one of {SPLITS}, got {split!r}")

    index = obj.get("embedding_index")
    if not _is_int(index) or index < 0:
        raise ManifestError(
            f"{where}: field 'embedding_index' must be a non-negative integer, got {index!r}"
        )

    meta = None
    if "meta" in obj:
        meta = _parse_meta(obj["meta"], where)

    known = {"id", "age", "source", "split", "embedding_index", "meta"}
    extra = {k: v for k, v in obj.items() if k not in known}
    return Sample(
        id=sid, age=age, source=source, split=split, embedding_index=index,
        meta=meta, extra=extra,
    )


def canonical_line(sample: Sample) -> str:
    """Serialize one sample as its canonical JSON line (sorted keys, compact)."""
    return json.dumps(sample.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True, slots=True)
class Manifest:
    """An immutable, validated collection of samples.

    Construction enforces unique ids and, within each split, unique embedding
    rows, so downstream code never has to re-check either.
    """

    samples: tuple[Sample, ...]

    def __post_init__(self) -> None:
        seen_ids: set[str] = set()
        seen_rows: set[tuple[str, int]] = set()
        for sample in self.samples:
            if sample.id in seen_ids:
                raise ManifestError(f"duplicate sample id {sample.id!r}")
            seen_ids.add(sample.id)
            key = (sample.split, sample.embedding_index)
            if key in seen_rows:
                raise ManifestError(
                    f"sample {sample.id!r}: embedding_index {sample.embedding_index} "
                    f"already referenced in split {sample.split!r}"
                )
            seen_rows.add(key)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}


def split_view(manifest: Manifest, split: str) -> tuple[Sample, ...]:
    """Samples of one split, in manifest order."""
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}, expected one of {SPLITS}")
    return tuple(s for s in manifest.samples if s.split == split)


def load_manifest(path: str | Path) -> Manifest:
    """Read and validate a JSON-Lines manifest.

    Raises ManifestError with the line number (and sample id once known) for
    any malformed line, out-of-range value, duplicate id, or duplicate
    embedding row within a split.
    """
    path = Path(path)
    samples: list[Sample] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.rstrip("\n")
            if not text.strip():
                raise ManifestError(f"{path.name}:{line_no}: blank line in manifest")
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path.name}:{line_no}: invalid JSON: {exc.msg}") from exc
            samples.append(parse_sample(obj, where=f"{path.name}:{line_no}"))
    return Manifest(samples=tuple(samples))


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    """Write the canonical JSON-Lines form (one sorted-key compact line per sample)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for sample in manifest.samples:
            fh.write(canonical_line(sample))
            fh.write("\n")


@dataclass(frozen=True)
class EmbeddingStore:
    """In-memory float32 embedding matrix of shape (count, dim)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ManifestError(f"embedding data must be 2-D, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ManifestError(f"embedding data must be float32, got {self.data.dtype}")
        if not np.all(np.isfinite(self.data)):
            raise ManifestError("embedding data contains non-finite values")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, index: int) -> np.ndarray:
        """One embedding as a float64 vector (copy)."""
        if not 0 <= index < self.count:
            raise ManifestError(f"embedding row {index} out of range [0, {self.count})")
        return self.data[index].astype(np.float64)

    def matrix(self, indices: Any) -> np.ndarray:
        """Rows gathered into a float64 matrix (copy)."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.count):
            raise ManifestError("embedding row index out of range")
        return self.data[idx].astype(np.float64)


def write_embeddings(path: str | Path, data: np.ndarray) -> None:
    """Write a float32 matrix as an embedding file (header + row-major payload)."""
    store = EmbeddingStore(data=np.ascontiguousarray(data, dtype=np.float32))
    header = _EMBEDDING_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, store.dim, store.count)
    with Path(path).open("wb") as fh:
        fh.write(header)
        fh.write(store.data.tobytes(order="C"))


def load_embeddings(path: str | Path, expected_dim: int | None = None) -> EmbeddingStore:
    """Read an embedding file, verifying magic, version, dimension, and length.

    The payload must hold exactly ``count * dim`` float32 values; both short
    and over-long files are rejected.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _EMBEDDING_HEADER.size:
        raise ManifestError(f"{path.name}: file shorter than the {_EMBEDDING_HEADER.size}-byte header")
    magic, version, dim, count = _EMBEDDING_HEADER.unpack_from(raw, 0)
    if magic != EMBEDDING_MAGIC:
        raise ManifestError(f"{path.name}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if version != EMBEDDING_VERSION:
        raise ManifestError(f"{path.name}: unsupported version {version}")
    if dim < 1:
        raise ManifestError(f"{path.name}: dimension must be positive, got {dim}")
    if expected_dim is not None and dim != expected_dim:
        raise ManifestError(f"{path.name}: dimension {dim} does not match expected {expected_dim}")
    payload = raw[_EMBEDDING_HEADER.size:]
    expected_bytes = 4 * dim * count
    if len(payload) < expected_bytes:
        raise ManifestError(
            f"{path.name}: truncated payload, expected {expected_bytes} bytes "
            f"({count} x {dim} float32) but found {len(payload)}"
        )
    if len(payload) > expected_bytes:
        raise ManifestError(
            f"{path.name}: {len(payload) - expected_bytes} trailing bytes after the payload"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    return EmbeddingStore(data=data)


def validate_against_store(manifest: Manifest, store: EmbeddingStore) -> None:
    """Check that every referenced embedding row exists in the store."""
    for sample in manifest.samples:
        if sample.embedding_index >= store.count:
            raise ManifestError(
                f"sample {sample.id!r}: embedding_index {sample.embedding_index} "
                f"out of range for a store with {store.count} rows"
            )
