"""Two-way ANOVA mean squares, ICC and variance components.

The ICC here is the single-measure, absolute-agreement coefficient of the
two-way random effects model (Shrout & Fleiss ICC(2,1)), written in terms of
the subject, occasion and residual mean squares::

    ICC = n (MS_s - MS_e) / (n MS_s + k MS_o + (n k - n - k) MS_e)

Sums of squares are formed in two passes (means first, then deviations) and
accumulated with :func:`math.fsum`, so tables with 10^4 subjects keep full
precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateDataError, InvalidInputError


class Reliability(str, Enum):
    """Cicchetti & Sparrow rule-of-thumb reliability labels."""

    EXCELLENT = "Excellent"
    GOOD = "Good"
    FAIR = "Fair"
    POOR = "Poor"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class AnovaTable:
    ms_subjects: float
    ms_occasions: float
    ms_error: float
    n: int
    k: int
    grand_mean: float

    def __post_init__(self):
        if self.n < 2 or self.k < 2:
            raise InvalidInputError(f"need n >= 2 and k >= 2, got n={self.n}, k={self.k}")
        for name in ("ms_subjects", "ms_occasions", "ms_error"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and non-negative, got {v}")

    @property
    def ss_subjects(self) -> float:
        return self.ms_subjects * (self.n - 1)

    @property
    def ss_occasions(self) -> float:
        return self.ms_occasions * (self.k - 1)

    @property
    def ss_error(self) -> float:
        return self.ms_error * (self.n - 1) * (self.k - 1)


@dataclass(frozen=True)
class VarianceComponents:
    """Method-of-moments variance components (unclipped)."""

    sigma2_subject: float
    sigma2_occasion: float
    sigma2_error: float

    def clipped(self) -> "VarianceComponents":
        """Same components with negative moment estimates set to zero."""
        return VarianceComponents(
            max(self.sigma2_subject, 0.0),
            max(self.sigma2_occasion, 0.0),
            max(self.sigma2_error, 0.0),
        )

    @property
    def subject_fraction(self) -> float:
        c = self.clipped()
        total = c.sigma2_subject + c.sigma2_occasion + c.sigma2_error
        if total <= 0:
            raise DegenerateDataError("all variance components are zero")
        return c.sigma2_subject / total


@dataclass(frozen=True)
class IccEstimate:
    icc: float
    raw_icc: float
    anova: AnovaTable
    label: Reliability


def _as_grid(data) -> np.ndarray:
    try:
        x = np.asarray(data, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"data is not a rectangular numeric grid: {exc}") from None
    if x.ndim != 2:
        raise InvalidInputError(f"expected a 2-D subjects x sessions grid, got shape {x.shape}")
    n, k = x.shape
    if n < 2 or k < 2:
        raise InvalidInputError(f"need at least 2 subjects and 2 sessions, got {n}x{k}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("grid contains non-finite values (missing cells?)")
    return x


def anova_mean_squares(data) -> AnovaTable:
    """Mean squares of a subjects x sessions table (one observation per cell).

    Parameters
    ----------
    data : array_like, shape (n, k)
        Rows are subjects, columns are sessions.

    Returns
    -------
    AnovaTable
    """
    x = _as_grid(data)
    n, k = x.shape
    grand = math.fsum(x.ravel()) / (n * k)
    # k is small (2 in practice): a plain row sum is exact enough
    row_means = x.sum(axis=1) / k
    col_means = np.array([math.fsum(c) for c in x.T]) / n

    ss_s = k * math.fsum((row_means - grand) ** 2)
    ss_o = n * math.fsum((col_means - grand) ** 2)
    resid = x - row_means[:, None] - col_means[None, :] + grand
    ss_e = math.fsum((resid**2).ravel())

    return AnovaTable(
        ms_subjects=ss_s / (n - 1),
        ms_occasions=ss_o / (k - 1),
        ms_error=ss_e / ((n - 1) * (k - 1)),
        n=n,
        k=k,
        grand_mean=grand,
    )


def raw_icc(anova: AnovaTable) -> float:
    """Unclamped agreement ICC; may be negative when MS_error exceeds MS_subjects."""
    n, k = anova.n, anova.k
    num = n * (anova.ms_subjects - anova.ms_error)
    den = n * anova.ms_subjects + k * anova.ms_occasions + (n * k - n - k) * anova.ms_error
    if den <= 0:
        raise DegenerateDataError("ICC undefined: denominator is zero (e.g. constant data)")
    return num / den


def icc(anova: AnovaTable) -> IccEstimate:
    r = raw_icc(anova)
    clamped = min(max(r, 0.0), 1.0)
    return IccEstimate(icc=clamped, raw_icc=r, anova=anova, label=classify_reliability(clamped))


def icc_of(data) -> float:
    """Shortcut: clamped ICC of a subjects x sessions grid."""
    return icc(anova_mean_squares(data)).icc


def variance_components(anova: AnovaTable) -> VarianceComponents:
    return VarianceComponents(
        sigma2_subject=(anova.ms_subjects - anova.ms_error) / anova.k,
        sigma2_occasion=(anova.ms_occasions - anova.ms_error) / anova.n,
        sigma2_error=anova.ms_error,
    )


def classify_reliability(icc_value: float) -> Reliability:
    if not (0.0 <= icc_value <= 1.0):
        raise InvalidInputError(f"ICC must lie in [0, 1], got {icc_value}")
    if icc_value >= 0.75:
        return Reliability.EXCELLENT
    if icc_value >= 0.60:
        return Reliability.GOOD
    if icc_value >= 0.40:
        return Reliability.FAIR
    return Reliability.POOR
