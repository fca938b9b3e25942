"""Seeded synthetic manifests and embeddings with a learnable age signal.

Ages are drawn from a configurable histogram whose default mirrors a typical
face corpus: minors are scarce, the mass sits in the working-age range.
Embeddings are a random linear map of a smooth age encoding (Gaussian bumps
tiling the age axis) plus isotropic noise, so age is linearly decodable up
to the noise level and harder for the youngest, rarest ages.
"""

from __future__ import annotations

import numpy as np

from agescreen.data import AGE_MAX, Manifest, Metadata, Sample

NUM_AGES = AGE_MAX + 1
DEFAULT_BUMPS = 16
DEFAULT_BUMP_WIDTH = 6.0


def default_age_weights() -> np.ndarray:
    """Skewed draw weights over ages 0..101 (unnormalized).

    A broad working-age bulge plus a smooth logistic suppression of minors;
    roughly one sample in six is under 18.
    """
    ages = np.arange(NUM_AGES, dtype=np.float64)
    bulk = 0.10 + 2.6 * np.exp(-((ages - 29.0) ** 2) / (2 * 10.0**2))
    bulk += 1.0 * np.exp(-((ages - 47.0) ** 2) / (2 * 13.0**2))
    bulk += 0.9 * np.exp(-((ages - 16.0) ** 2) / (2 * 5.0**2))
    minor_ramp = 0.40 + 0.60 / (1.0 + np.exp(-(ages - 12.0) / 4.0))
    return bulk * minor_ramp


def age_feature(ages: np.ndarray, bumps: int = DEFAULT_BUMPS,
                width: float = DEFAULT_BUMP_WIDTH) -> np.ndarray:
    """Smooth (n, bumps) encoding: Gaussian bumps with centers tiling 0..101."""
    centers = np.linspace(0.0, float(AGE_MAX), bumps)
    a = np.asarray(ages, dtype=np.float64)[:, None]
    return np.exp(-((a - centers[None, :]) ** 2) / (2.0 * width * width))


def _draw_meta(rng: np.random.Generator) -> Metadata:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    radius = np.sqrt(rng.uniform(0.0, 1.0))
    return Metadata(
        pitch=round(float(np.clip(rng.normal(0, 18), -90, 90)), 4),
        yaw=round(float(np.clip(rng.normal(0, 22), -90, 90)), 4),
        roll=round(float(np.clip(rng.normal(0, 12), -90, 90)), 4),
        brightness=round(float(rng.uniform(30, 225)), 4),
        contrast=round(float(rng.uniform(5, 95)), 4),
        saturation=round(float(rng.uniform(0, 1)), 4),
        sharpness=round(float(rng.lognormal(3.5, 0.8)), 4),
        arousal=round(float(radius * np.cos(angle)), 4),
        valence=round(float(radius * np.sin(angle)), 4),
    )


def synth_dataset(
    size: int,
    dim: int = 64,
    noise: float = 0.5,
    seed: int = 0,
    age_weights: np.ndarray | None = None,
    split_fracs: tuple[float, float, float] = (0.7, 0.15, 0.15),
    source: str = "synth",
    with_meta: bool = False,
    bumps: int = DEFAULT_BUMPS,
    bump_width: float = DEFAULT_BUMP_WIDTH,
) -> tuple[Manifest, np.ndarray]:
    """Generate a manifest and its float32 embedding matrix.

    Everything is a pure function of the arguments and the seed: ages, the
    mixing matrix, the noise, the split assignment, and any metadata come
    from one PCG64 stream in a fixed draw order.
    """
    if size < 1:
        raise ValueError(f"size must be positive, got {size}")
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    fracs = np.asarray(split_fracs, dtype=np.float64)
    if fracs.shape != (3,) or np.any(fracs < 0) or abs(fracs.sum() - 1.0) > 1e-9:
        raise ValueError(f"split_fracs must be three non-negative numbers summing to 1, got {split_fracs}")

    rng = np.random.default_rng(seed)
    weights = default_age_weights() if age_weights is None else np.asarray(age_weights, dtype=np.float64)
    if weights.shape != (NUM_AGES,) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError(f"age_weights must be {NUM_AGES} non-negative numbers with positive mass")
    probs = weights / weights.sum()

    ages = rng.choice(NUM_AGES, size=size, p=probs)
    mixing = rng.normal(size=(dim, bumps))
    features = age_feature(ages, bumps=bumps, width=bump_width)
    embeddings = features @ mixing.T + noise * rng.normal(size=(size, dim))
    embeddings = embeddings.astype(np.float32)

    n_train = int(np.floor(fracs[0] * size))
    n_val = int(np.floor(fracs[1] * size))
    assignment = np.full(size, "test", dtype=object)
    order = rng.permutation(size)
    assignment[order[:n_train]] = "train"
    assignment[order[n_train:n_train + n_val]] = "val"

    samples = []
    for i in range(size):
        samples.append(
            Sample(
                id=f"{source}-{i:06d}",
                age=int(ages[i]),
                source=source,
                split=str(assignment[i]),
                embedding_index=i,
                meta=_draw_meta(rng) if with_meta else None,
            )
        )
    return Manifest(samples=tuple(samples)), embeddings
