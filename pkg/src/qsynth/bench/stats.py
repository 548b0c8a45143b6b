"""Confidence intervals for aggregating repetitions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

Z95 = 1.96


@dataclass(frozen=True)
class Interval:
    mean: float
    low: float
    high: float
    count: int

    @property
    def degenerate(self) -> bool:
        """A single repetition carries no spread information."""
        return self.count < 2


def mean_ci(values: Sequence[float], z: float = Z95) -> Interval:
    """Normal-approximation interval ``mean +- z * sem`` with sample std (ddof=1)."""
    xs = [float(v) for v in values]
    if not xs:
        raise ValueError("mean_ci needs at least one value")
    k = len(xs)
    mean = math.fsum(xs) / k
    if k == 1:
        return Interval(mean, mean, mean, 1)
    var = math.fsum((x - mean) ** 2 for x in xs) / (k - 1)
    half = z * math.sqrt(var / k)
    return Interval(mean, mean - half, mean + half, k)
