"""Online estimate of the unlabeled class distribution from confident pseudo labels.

Each sample id keeps only its latest confident label; the per-class counts are
the histogram of those latest labels, so the estimate tracks a distribution
over the dataset rather than over time.
"""

import numpy as np


class PseudoLabelLedger:
    """Exclusive-access map sample id -> latest label, with incremental counts."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.latest: dict[int, int] = {}
        self.counts = np.zeros(num_classes, dtype=np.int64)

    def record(self, sample_id: int, label: int) -> None:
        """Replace the sample's previous label (if any) with the new one."""
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label} out of range")
        prev = self.latest.get(sample_id)
        if prev is not None:
            self.counts[prev] -= 1
        self.counts[label] += 1
        self.latest[sample_id] = label

    def estimated_counts(self, clamp_min: int = 1) -> np.ndarray:
        """Counts clamped from below, so downstream reciprocal weights stay finite."""
        return np.maximum(self.counts, clamp_min)

    def min_count(self, clamp_min: int = 1) -> int:
        """Estimated size of the rarest class (clamped)."""
        return int(self.estimated_counts(clamp_min).min())

    def total(self) -> int:
        return len(self.latest)
