"""Label rules and losses for the age head and the per-threshold binary heads.

The binary heads train on an underage-vs-adult label derived from the integer
age. An optional gap rule masks ages too close to the decision threshold so
borderline faces never contribute gradient. Class imbalance is handled by a
square-root weighting pair computed from the training-split label counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from agescreen.numerics import sigmoid

# probability clamp applied inside every log
_P_MIN = 1e-12

GAP_MODES = ("none", "fixed", "relative")


@dataclass(frozen=True, slots=True)
class GapRule:
    """How to mask training ages near a binary head's threshold.

    ``none`` labels every age. ``fixed`` masks ages within ``width`` years on
    both sides. ``relative`` scales the threshold by ``factor`` (a rational,
    kept exact) and truncates the distances to integers, so higher thresholds
    get wider masks.
    """

    mode: str = "none"
    width: int = 0
    factor: Fraction = Fraction(6, 5)

    def __post_init__(self) -> None:
        if self.mode not in GAP_MODES:
            raise ValueError(f"gap mode must be one of {GAP_MODES}, got {self.mode!r}")
        if self.mode == "fixed":
            if not isinstance(self.width, int) or isinstance(self.width, bool) or self.width < 0:
                raise ValueError(f"fixed gap width must be a non-negative integer, got {self.width!r}")
        if self.mode == "relative":
            factor = Fraction(self.factor)
            if factor <= 1:
                raise ValueError(f"relative gap factor must exceed 1, got {factor}")
            object.__setattr__(self, "factor", factor)

    @classmethod
    def none(cls) -> "GapRule":
        return cls(mode="none")

    @classmethod
    def fixed(cls, width: int) -> "GapRule":
        return cls(mode="fixed", width=width)

    @classmethod
    def relative(cls, factor: Fraction | str | int = Fraction(6, 5)) -> "GapRule":
        return cls(mode="relative", factor=Fraction(factor))

    def to_dict(self) -> dict:
        if self.mode == "fixed":
            return {"mode": "fixed", "width": self.width}
        if self.mode == "relative":
            return {"mode": "relative", "factor": str(self.factor)}
        return {"mode": "none"}

    @classmethod
    def from_dict(cls, obj: dict) -> "GapRule":
        mode = obj.get("mode", "none")
        if mode == "fixed":
            return cls.fixed(obj.get("width", 0))
        if mode == "relative":
            return cls.relative(Fraction(obj.get("factor", "6/5")))
        if mode == "none":
            return cls.none()
        raise ValueError(f"gap mode must be one of {GAP_MODES}, got {mode!r}")


def gap_bounds(threshold: int, rule: GapRule) -> tuple[int, int]:
    """Integer mask widths (below, above) for one threshold.

    Relative mode uses exact rational arithmetic and truncates toward zero:
    below = trunc(T - T/f), above = trunc(T*f - T).
    """
    if rule.mode == "none":
        return (0, 0)
    if rule.mode == "fixed":
        return (rule.width, rule.width)
    t = Fraction(threshold)
    below = int(t - t / rule.factor)
    above = int(t * rule.factor - t)
    return (below, above)


def binary_label(age: int, threshold: int, rule: GapRule) -> int | None:
    """Underage-vs-adult training label for one head; None when masked.

    Ages in [threshold - below, threshold + above) are masked. Outside the
    mask, underage (1) means age < threshold and adult (0) means age >=
    threshold, so with no gap every age is labeled.
    """
    below, above = gap_bounds(threshold, rule)
    if age < threshold - below:
        return 1
    if age >= threshold + above:
        return 0
    return None


def alpha_weights(n_underage: int, n_adult: int) -> tuple[float, float]:
    """Square-root imbalance weights (alpha_underage, alpha_adult).

    The minority class gets sqrt(N_major / N_minor), the majority class the
    reciprocal, so the product of the two weights is always 1.
    """
    if n_underage <= 0 or n_adult <= 0:
        raise ValueError(
            f"both classes need at least one sample, got underage={n_underage}, adult={n_adult}"
        )
    # the square root assigns the >1 weight to whichever class is smaller
    ratio = float(np.sqrt(n_adult / n_underage))
    return (ratio, 1.0 / ratio)


def focal_loss(
    p_hat: np.ndarray | float, y: np.ndarray | int,
    alpha_y: np.ndarray | float, gamma: float,
) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Class-weighted focal loss and its derivative w.r.t. the underage logit.

    L = -alpha_y (1-p)^g y log p - (1-alpha_y) p^g (1-y) log(1-p)

    with p the predicted underage probability, clamped away from 0 and 1
    before any log. The returned derivative is dL/dv for p = sigmoid(v),
    derived in closed form (no autodiff):

        y=1:  alpha * (g p (1-p)^g log p - (1-p)^(g+1))
        y=0:  (1-alpha) * (p^(g+1) - g p^g (1-p) log(1-p))

    Broadcasts over array inputs; scalars in, scalars out.
    """
    p = np.clip(np.asarray(p_hat, dtype=np.float64), _P_MIN, 1.0 - _P_MIN)
    yy = np.asarray(y, dtype=np.float64)
    a = np.asarray(alpha_y, dtype=np.float64)

    log_p = np.log(p)
    log_q = np.log(1.0 - p)
    pow_q = np.power(1.0 - p, gamma)
    pow_p = np.power(p, gamma)

    loss_pos = -a * pow_q * log_p
    loss_neg = -(1.0 - a) * pow_p * log_q
    loss = yy * loss_pos + (1.0 - yy) * loss_neg

    grad_pos = a * (gamma * p * pow_q * log_p - pow_q * (1.0 - p))
    grad_neg = (1.0 - a) * (pow_p * p - gamma * pow_p * (1.0 - p) * log_q)
    grad = yy * grad_pos + (1.0 - yy) * grad_neg

    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def age_ce_loss(age_probs: np.ndarray, age: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of the age softmax and its gradient w.r.t. the logits."""
    p = np.asarray(age_probs, dtype=np.float64)
    if not 0 <= age < p.shape[-1]:
        raise ValueError(f"age {age} outside the {p.shape[-1]}-class range")
    loss = -float(np.log(max(p[age], _P_MIN)))
    grad = p.copy()
    grad[age] -= 1.0
    return loss, grad


def batch_age_ce_loss(age_probs: np.ndarray, ages: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized cross-entropy; returns per-sample losses and logit gradients."""
    p = np.asarray(age_probs, dtype=np.float64)
    idx = np.arange(p.shape[0])
    picked = np.clip(p[idx, ages], _P_MIN, None)
    losses = -np.log(picked)
    grads = p.copy()
    grads[idx, ages] -= 1.0
    return losses, grads


@dataclass(frozen=True, slots=True)
class HeadLossConfig:
    """Loss settings for one binary head."""

    threshold: int
    gamma: float = 0.0
    alpha_mode: str = "off"
    gap: GapRule = field(default_factory=GapRule.none)

    def __post_init__(self) -> None:
        if not isinstance(self.threshold, int) or isinstance(self.threshold, bool) or self.threshold < 1:
            raise ValueError(f"head threshold must be a positive integer, got {self.threshold!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.alpha_mode not in ("off", "imbalance"):
            raise ValueError(f"alpha_mode must be 'off' or 'imbalance', got {self.alpha_mode!r}")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "gamma": self.gamma,
            "alpha_mode": self.alpha_mode,
            "gap": self.gap.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "HeadLossConfig":
        return cls(
            threshold=obj["threshold"],
            gamma=float(obj.get("gamma", 0.0)),
            alpha_mode=obj.get("alpha_mode", "off"),
            gap=GapRule.from_dict(obj.get("gap", {"mode": "none"})),
        )


@dataclass(frozen=True, slots=True)
class ResolvedHead:
    """A head's loss settings with the class weights already fixed.

    ``alpha_pos`` feeds the loss when the label is underage, ``alpha_neg``
    when adult; the adult branch carries the (1 - alpha) factor inside the
    loss, so alpha_mode "off" resolves to (1, 0) and both branches end up
    with coefficient 1.
    """

    threshold: int
    gamma: float
    gap: GapRule
    alpha_pos: float
    alpha_neg: float


def resolve_heads(
    configs: Sequence[HeadLossConfig], train_ages: Sequence[int] | np.ndarray,
) -> tuple[ResolvedHead, ...]:
    """Fix each head's class weights from the training-split age labels.

    Imbalance weights are computed from the post-masking label counts of the
    raw (pre-resampling) training split.
    """
    ages = np.asarray(train_ages, dtype=np.int64)
    resolved = []
    for cfg in configs:
        if cfg.alpha_mode == "off":
            resolved.append(ResolvedHead(cfg.threshold, cfg.gamma, cfg.gap, 1.0, 0.0))
            continue
        below, above = gap_bounds(cfg.threshold, cfg.gap)
        n_under = int(np.sum(ages < cfg.threshold - below))
        n_adult = int(np.sum(ages >= cfg.threshold + above))
        if n_under == 0 or n_adult == 0:
            raise ValueError(
                f"head {cfg.threshold}: cannot resolve imbalance weights, post-masking "
                f"counts are underage={n_under}, adult={n_adult}"
            )
        alpha_under, alpha_adult = alpha_weights(n_under, n_adult)
        resolved.append(ResolvedHead(cfg.threshold, cfg.gamma, cfg.gap, alpha_under, alpha_adult))
    return tuple(resolved)


def binary_label_array(ages: np.ndarray, head: ResolvedHead) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized labels for one head: (labels in {0,1}, valid mask)."""
    below, above = gap_bounds(head.threshold, head.gap)
    ages = np.asarray(ages, dtype=np.int64)
    under = ages < head.threshold - below
    adult = ages >= head.threshold + above
    labels = under.astype(np.float64)
    return labels, under | adult


def batch_head_terms(
    bin_logits: np.ndarray, ages: np.ndarray, heads: Sequence[ResolvedHead],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample focal losses and logit gradients for every binary head.

    Returns (losses, grads, mask), each of shape (n, num_heads). Masked
    entries are exactly zero in both losses and grads. ``grads`` is w.r.t.
    the over-threshold logit u; the loss itself reads the underage
    orientation sigmoid(-u), so the chain rule flips the sign.
    """
    u = np.asarray(bin_logits, dtype=np.float64)
    n, k = u.shape
    if k != len(heads):
        raise ValueError(f"got {k} logit columns for {len(heads)} heads")
    losses = np.zeros((n, k))
    grads = np.zeros((n, k))
    mask = np.zeros((n, k), dtype=bool)
    for j, head in enumerate(heads):
        labels, valid = binary_label_array(ages, head)
        p_under = sigmoid(-u[:, j])
        alpha = np.where(labels == 1.0, head.alpha_pos, head.alpha_neg)
        l, dldv = focal_loss(p_under, labels, alpha, head.gamma)
        losses[valid, j] = np.asarray(l)[valid]
        grads[valid, j] = -np.asarray(dldv)[valid]
        mask[:, j] = valid
    return losses, grads, mask


def total_loss(
    trace, age: int, heads: Sequence[ResolvedHead], weights: Sequence[float],
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted multi-task loss for one sample.

    ``weights`` holds the age-head weight followed by one weight per binary
    head. Returns (value, d_age_logits, d_bin_logits); a head whose label is
    masked contributes bitwise-zero gradient.
    """
    if len(weights) != 1 + len(heads):
        raise ValueError(
            f"need {1 + len(heads)} weights (age head plus {len(heads)} binary), got {len(weights)}"
        )
    ce, d_age = age_ce_loss(trace.age_probs, age)
    value = weights[0] * ce
    d_age = weights[0] * d_age

    ages = np.asarray([age])
    losses, grads, _ = batch_head_terms(trace.bin_logits[None, :], ages, heads)
    w = np.asarray(weights[1:], dtype=np.float64)
    value += float(np.sum(w * losses[0]))
    d_bin = w * grads[0]
    return value, d_age, d_bin
