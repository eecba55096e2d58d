"""Scalar training objectives.

Every function takes the probability assigned to the true class. Inputs are
clamped below at ``PROB_FLOOR`` before any logarithm; the gradient code in
:mod:`calibfair.model` applies the same clamp.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


def _as_probs(p_true):
    p = np.asarray(p_true, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite")
    if np.any(p > 1.0 + 1e-12):
        raise ValueError("probabilities must not exceed 1")
    return np.clip(p, PROB_FLOOR, 1.0)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def cross_entropy(p_true):
    """Negative log-likelihood of the true class, elementwise."""
    return _scalar(-np.log(_as_probs(p_true)))


def focal(p_true, gamma: float):
    """Focal loss ``(1 - p)^gamma * -log(p)``, elementwise."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    p = _as_probs(p_true)
    return _scalar((1.0 - p) ** gamma * -np.log(p))


def per_group_focal(p_true, group_ids, num_groups: int, gamma: float):
    """Mean focal loss of each group and the group sizes.

    Empty groups get a mean of 0.
    """
    per_sample = np.atleast_1d(focal(p_true, gamma))
    ids = np.asarray(group_ids, dtype=np.int64)
    if per_sample.size == 0:
        raise ValueError("need at least one sample")
    if ids.shape != per_sample.shape:
        raise ValueError("group ids must align with p_true")
    if ids.min() < 0 or ids.max() >= num_groups:
        raise ValueError(f"group ids must lie in [0, {num_groups - 1}]")
    counts = np.bincount(ids, minlength=num_groups)
    sums = np.bincount(ids, weights=per_sample, minlength=num_groups)
    means = np.divide(sums, counts, out=np.zeros(num_groups), where=counts > 0)
    return means, counts


def group_wise_focal(p_true, cluster_ids, num_clusters: int, gamma: float) -> float:
    """Unweighted mean over represented clusters of the per-cluster mean focal loss.

    Clusters with no samples in the input are left out of the average.
    """
    means, counts = per_group_focal(p_true, cluster_ids, num_clusters, gamma)
    return float(np.mean(means[counts > 0]))


def groupdro_objective(p_true, group_ids, q, gamma: float = 0.0) -> float:
    """``sum_k q_k * mean loss of group k`` for fixed weights ``q``."""
    q = np.asarray(q, dtype=np.float64)
    means, _ = per_group_focal(p_true, group_ids, q.size, gamma)
    return float(np.dot(q, means))


def weighted_cross_entropy(p_true, weights) -> float:
    """``sum(w * -log p) / sum(w)``; used for up-weighting hard samples."""
    losses = np.atleast_1d(cross_entropy(p_true))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != losses.shape:
        raise ValueError("weights must align with p_true")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ValueError("weights must not all be zero")
    return float(np.dot(w, losses) / total)


@dataclass(frozen=True)
class GroupWeights:
    q: np.ndarray
    eta: float = 0.1

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 1 or q.size < 1 or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
            raise ValueError("q must be a probability vector")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        object.__setattr__(self, "q", q)

    @classmethod
    def uniform(cls, k: int, eta: float = 0.1) -> "GroupWeights":
        return cls(np.full(k, 1.0 / k), eta)


def groupdro_step(group_losses, weights: GroupWeights):
    """Exponentiated-gradient update of the group weights.

    Returns ``(q_new, objective)`` with ``q_new ~ q * exp(eta * loss)`` and the
    objective ``sum(q_new * loss)``.
    """
    losses = np.asarray(group_losses, dtype=np.float64)
    if losses.shape != weights.q.shape:
        raise ValueError("one loss per group is required")
    if not np.all(np.isfinite(losses)):
        raise ValueError("group losses must be finite")
    # log-space keeps large eta * loss from overflowing
    logits = np.log(np.maximum(weights.q, 1e-300)) + weights.eta * losses
    logits[weights.q == 0] = -np.inf
    logits -= logits.max()
    q_new = np.exp(logits)
    q_new /= q_new.sum()
    return q_new, float(np.dot(q_new, losses))
