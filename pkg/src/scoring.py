# src/scoring.py

import math
import logging
import statistics
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import UndefinedMetricError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Summary:
    n: int
    mean: Fraction
    std: float
    median: Fraction
    minimum: Fraction
    maximum: Fraction


def describe(values: Sequence[Fraction]) -> Summary:
    """Exact mean and median, population std (divisor N).

    An even count takes the mean of the two middle values as median.
    """
    if not values:
        raise UndefinedMetricError("summary statistics are undefined for an empty sample")
    values = [Fraction(v) for v in values]
    variance = statistics.pvariance(values)
    return Summary(
        n=len(values),
        mean=statistics.mean(values),
        std=math.sqrt(variance),
        median=statistics.median(values),
        minimum=min(values),
        maximum=max(values),
    )


def exact_mean(values: Sequence[Fraction]) -> Fraction | None:
    """Mean in rational arithmetic, or None for an empty sample."""
    if not values:
        return None
    return sum((Fraction(v) for v in values), Fraction(0)) / len(values)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population std of float samples; (0.0, 0.0) when empty."""
    if not values:
        return 0.0, 0.0
    return statistics.fmean(values), statistics.pstdev(values)
