"""Adaptive per-sample loss weights: (rarest class count / own class count) ** alpha.

The ratio form makes weights scale-invariant in the counts and pins the rarest
class at weight 1. The minimum is taken over all classes rather than assuming
a sorted ordering, so the same formula works for live estimated counts.
"""

import numpy as np


def _ratio_weight(counts: np.ndarray, cls: int, alpha: float) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 1).any():
        raise ValueError("class counts must be >= 1 (clamp before weighting)")
    if not 0 <= cls < len(counts):
        raise ValueError(f"class index {cls} out of range")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return float((counts.min() / counts[cls]) ** alpha)


def labeled_weight(labeled_counts: np.ndarray, y: int, alpha: float) -> float:
    """Weight for a labeled sample of class y, from the labeled class sizes."""
    return _ratio_weight(labeled_counts, y, alpha)


def unlabeled_weight(estimated_counts: np.ndarray, q_hat: int, alpha: float) -> float:
    """Weight for an unlabeled sample pseudo-labeled q_hat, from clamped estimated counts."""
    return _ratio_weight(estimated_counts, q_hat, alpha)


def batch_weights(counts: np.ndarray, labels: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorized ratio weights for a batch of class labels."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 1).any():
        raise ValueError("class counts must be >= 1 (clamp before weighting)")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return (counts.min() / counts[np.asarray(labels)]) ** alpha
