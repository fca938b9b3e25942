"""Age-balanced minibatch sampling.

Training ages are partitioned into bins; each minibatch slot first picks a
non-empty bin, then a member uniformly inside it. Every sample's selection
probability is therefore proportional to the inverse of its bin's count, so
rare ages are revisited as often as common ones and each bin contributes
equally to the gradient stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from agescreen.data import Sample

# upper-exclusive bin edges; ages below the first edge form bin 0,
# ages at or above the last edge form the final bin
DEFAULT_BIN_BOUNDARIES = (4, 8, 12, 16, 20, 24, 28, 32, 36, 42, 50)


def bin_index(age: int, boundaries: Sequence[int] = DEFAULT_BIN_BOUNDARIES) -> int:
    """Bin number for one age under upper-exclusive edges."""
    return int(np.searchsorted(np.asarray(boundaries), age, side="right"))


@dataclass(frozen=True)
class AgeBins:
    """Bin assignment of a sample list, ready for balanced drawing.

    ``weights`` holds the normalized inverse-count factor of each bin (zero
    when empty); it is the relative selection weight a member of that bin
    carries. Drawing itself equalizes bins: each non-empty bin is picked with
    the same probability, then a member uniformly, which realizes exactly
    those per-member weights.
    """

    boundaries: tuple[int, ...]
    counts: np.ndarray
    weights: np.ndarray
    ids: tuple[str, ...]
    member_positions: np.ndarray  # sample positions grouped by bin
    offsets: np.ndarray           # bin b owns member_positions[offsets[b]:offsets[b+1]]

    @property
    def num_bins(self) -> int:
        return len(self.counts)

    def members(self, b: int) -> np.ndarray:
        return self.member_positions[self.offsets[b]:self.offsets[b + 1]]


def build_bins(
    samples: Sequence[Sample], boundaries: Sequence[int] = DEFAULT_BIN_BOUNDARIES,
) -> AgeBins:
    """Assign samples to age bins and compute their balance weights."""
    if len(samples) == 0:
        raise ValueError("cannot build age bins from an empty sample list")
    edges = tuple(int(b) for b in boundaries)
    if not edges or any(a >= b for a, b in zip(edges, edges[1:])) or edges[0] <= 0:
        raise ValueError(f"bin boundaries must be positive and strictly increasing, got {edges}")
    num_bins = len(edges) + 1
    ages = np.array([s.age for s in samples], dtype=np.int64)
    assignment = np.searchsorted(np.asarray(edges), ages, side="right")
    counts = np.bincount(assignment, minlength=num_bins).astype(np.int64)

    inverse = np.zeros(num_bins)
    nonzero = counts > 0
    inverse[nonzero] = 1.0 / counts[nonzero]
    weights = inverse / inverse.sum()

    order = np.argsort(assignment, kind="stable")
    offsets = np.zeros(num_bins + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return AgeBins(
        boundaries=edges,
        counts=counts,
        weights=weights,
        ids=tuple(s.id for s in samples),
        member_positions=order,
        offsets=offsets,
    )


def sample_indices(bins: AgeBins, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Positions (into the original sample list) of one balanced draw."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    nonempty = np.flatnonzero(bins.counts)
    chosen_bins = nonempty[rng.integers(0, len(nonempty), size=batch_size)]
    member = rng.integers(0, bins.counts[chosen_bins])
    return bins.member_positions[bins.offsets[chosen_bins] + member]


def sample_minibatch(
    bins: AgeBins, batch_size: int, rng: np.random.Generator | int,
) -> list[str]:
    """Sample ids of one balanced minibatch; slots are drawn independently."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    positions = sample_indices(bins, batch_size, rng)
    return [bins.ids[i] for i in positions]
