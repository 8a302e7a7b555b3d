"""Verification scoring: similarity scores, EER and score statistics.

Similarity is oriented so that larger means more alike for every metric:
negated Euclidean or Manhattan distance, or plain cosine similarity.

Genuine comparisons pair subject ``i`` session 1 with subject ``i`` session 2.
Impostor comparisons pair subject ``i`` session 1 with subject ``j`` session 2
for ordered pairs ``i != j``.

EER convention. For a threshold ``t``::

    FRR(t) = #(genuine < t) / G        FAR(t) = #(impostor >= t) / I

evaluated on the sorted union of all scores plus -inf and +inf. The EER is
the common value where FAR = FRR at a threshold, or otherwise the crossing of
the two linearly interpolated curves between the bracketing thresholds.

Quantiles (median, IQR, percentiles) use linear interpolation between order
statistics (NumPy's default ``"linear"`` method, Hyndman & Fan type 7).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    ConfigError,
    DegenerateDataError,
    InvalidInputError,
    UndefinedSimilarityError,
)
from .rng import NS_IMPOSTOR, RngStream, substream_id

QUANTILE_METHOD = "linear"
SAMPLED_PAIR_CAP = 2_000_000
_CHUNK = 65_536


class Metric(str, Enum):
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"
    COSINE = "cosine"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, value) -> "Metric":
        try:
            return value if isinstance(value, Metric) else cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown metric {value!r}") from None


class SessionPolicy(str, Enum):
    SESSION1 = "session1"
    POOLED = "pooled"


@dataclass(frozen=True)
class ImpostorPolicy:
    """``ImpostorPolicy()`` is exhaustive; ``ImpostorPolicy.sampled(count, seed)`` samples."""

    count: int | None = None
    seed: int = 0

    @classmethod
    def sampled(cls, count: int, seed: int) -> "ImpostorPolicy":
        if count < 1:
            raise ConfigError("sampled impostor count must be positive")
        return cls(int(count), int(seed))

    @property
    def exhaustive(self) -> bool:
        return self.count is None

    def to_dict(self) -> dict:
        if self.exhaustive:
            return {"kind": "exhaustive"}
        return {"kind": "sampled", "count": self.count, "seed": self.seed}


EXHAUSTIVE = ImpostorPolicy()


@dataclass(frozen=True)
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    metric: Metric = Metric.EUCLIDEAN


@dataclass(frozen=True)
class EvalResult:
    eer: float
    threshold_at_eer: float
    genuine_median: float
    genuine_iqr: float
    impostor_median: float
    impostor_iqr: float
    n_genuine: int = 0
    n_impostor: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class CorrSummary:
    median_abs_r: float
    p95_abs_r: float
    histogram: tuple[tuple[float, float, int], ...]
    n_pairs: int


# -- pairwise scores ---------------------------------------------------------


def score_pair(a, b, metric=Metric.EUCLIDEAN) -> float:
    metric = Metric.parse(metric)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or a.shape != b.shape or a.size < 1:
        raise InvalidInputError(f"vectors must be 1-D with equal non-zero length, got {a.shape} and {b.shape}")
    if metric is Metric.EUCLIDEAN:
        return -float(np.sqrt(np.sum((a - b) ** 2)))
    if metric is Metric.MANHATTAN:
        return -float(np.sum(np.abs(a - b)))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    return x / norms[:, None]


def _row_scores(a: np.ndarray, b: np.ndarray, metric: Metric) -> np.ndarray:
    """Similarity between matching rows of ``a`` and ``b``."""
    if metric is Metric.EUCLIDEAN:
        return -np.sqrt(np.sum((a - b) ** 2, axis=1))
    if metric is Metric.MANHATTAN:
        return -np.sum(np.abs(a - b), axis=1)
    return np.sum(_unit_rows(a) * _unit_rows(b), axis=1)


def similarity_matrix(s1: np.ndarray, s2: np.ndarray, metric=Metric.EUCLIDEAN) -> np.ndarray:
    """``S[i, j]`` = similarity of row ``i`` of ``s1`` to row ``j`` of ``s2``.

    The diagonal is computed directly from row differences so that identical
    rows score exactly 0 under the distance metrics.
    """
    metric = Metric.parse(metric)
    if metric is Metric.EUCLIDEAN:
        sq = s1 @ s2.T
        sq *= -2.0
        sq += np.einsum("ij,ij->i", s1, s1)[:, None]
        sq += np.einsum("ij,ij->i", s2, s2)[None, :]
        np.maximum(sq, 0.0, out=sq)
        np.sqrt(sq, out=sq)
        out = np.negative(sq, out=sq)
    elif metric is Metric.MANHATTAN:
        from scipy.spatial.distance import cdist

        out = -cdist(s1, s2, metric="cityblock")
    else:
        out = _unit_rows(s1) @ _unit_rows(s2).T
    np.fill_diagonal(out, _row_scores(s1, s2, metric))
    return out


def _pair_indices(flat: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map flat ids in ``[0, n(n-1))`` to ordered pairs ``(i, j)``, ``i != j``, row-major."""
    i = flat // (n - 1)
    r = flat % (n - 1)
    j = r + (r >= i)
    return i, j


def _check_subset(db, subset) -> np.ndarray:
    idx = np.asarray(subset, dtype=int).ravel()
    if idx.size == 0:
        raise InvalidInputError("feature subset is empty")
    if np.unique(idx).size != idx.size:
        raise InvalidInputError("feature subset has repeated indices")
    if idx.min() < 0 or idx.max() >= db.n_features:
        raise InvalidInputError(f"feature index out of range [0, {db.n_features})")
    return idx


def score_database(db, subset=None, metric=Metric.EUCLIDEAN, impostor_policy: ImpostorPolicy = EXHAUSTIVE) -> ScoreSet:
    """Genuine and impostor scores for a feature subset of ``db`` (all features if ``None``)."""
    metric = Metric.parse(metric)
    n = db.n_subjects
    if n < 2:
        raise InvalidInputError("need at least 2 subjects")
    idx = np.arange(db.n_features) if subset is None else _check_subset(db, subset)
    if idx.size == 0:
        raise InvalidInputError("database has no features")
    s1 = np.ascontiguousarray(db.session(1, idx))
    s2 = np.ascontiguousarray(db.session(2, idx))
    genuine = _row_scores(s1, s2, metric)

    n_pairs = n * (n - 1)
    if impostor_policy.exhaustive:
        mat = similarity_matrix(s1, s2, metric)
        impostor = mat[~np.eye(n, dtype=bool)]
    else:
        if impostor_policy.count > n_pairs:
            raise ConfigError(f"cannot sample {impostor_policy.count} impostor pairs from {n_pairs}")
        gen = RngStream(impostor_policy.seed, substream_id(NS_IMPOSTOR)).generator()
        flat = np.sort(gen.choice(n_pairs, size=impostor_policy.count, replace=False))
        impostor = np.empty(flat.size)
        for start in range(0, flat.size, _CHUNK):
            i, j = _pair_indices(flat[start : start + _CHUNK], n)
            impostor[start : start + i.size] = _row_scores(s1[i], s2[j], metric)
    return ScoreSet(genuine, impostor, metric)


# -- EER ---------------------------------------------------------------------


def _stats(x: np.ndarray) -> tuple[float, float]:
    q25, q50, q75 = np.quantile(x, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    return float(q50), float(q75 - q25)


def _eer_core(genuine: np.ndarray, impostor: np.ndarray) -> tuple[float, float]:
    g = np.sort(genuine)
    gmin = g[0]
    # Below min(genuine) FRR is 0, so only the largest impostor score under
    # gmin can open the bracket; smaller ones only enter through the counts.
    above = np.sort(impostor[impostor >= gmin])
    below = impostor[impostor < gmin]
    if below.size:
        t0 = float(below.max())
        far0 = above.size + int(np.count_nonzero(below == t0))
    else:
        t0, far0 = -math.inf, impostor.size
    return _eer_sweep(g, above, t0, far0, impostor.size)


def _eer_sweep(g: np.ndarray, above: np.ndarray, t0: float, far0: int, I: int) -> tuple[float, float]:
    """Threshold sweep given sorted genuine scores and the impostors >= min(genuine).

    ``t0`` is the largest impostor score below ``min(genuine)`` (or -inf) and
    ``far0`` the number of impostors >= ``t0``.
    """
    G = g.size
    t = np.concatenate([[t0], np.unique(np.concatenate([g, above])), [math.inf]])
    frr_c = np.searchsorted(g, t, side="left").astype(np.int64)
    far_c = above.size - np.searchsorted(above, t, side="left").astype(np.int64)
    frr_c[0], far_c[0] = 0, far0
    frr_c[-1], far_c[-1] = G, 0

    # D = FAR - FRR in exact integer form (scaled by G * I).
    d = far_c * G - frr_c * I
    j = int(np.argmax(d <= 0))
    if d[j] == 0:
        return float(far_c[j] / I), float(t[j])
    a = j - 1
    lam = d[a] / (d[a] - d[j])
    far_a, far_j = far_c[a] / I, far_c[j] / I
    eer = far_a + lam * (far_j - far_a)
    ta, tj = t[a], t[j]
    if math.isinf(ta):
        thr = float(tj)
    elif math.isinf(tj):
        thr = float(ta)
    else:
        thr = float(ta + lam * (tj - ta))
    return float(eer), thr


def _matrix_eer(sim: np.ndarray) -> float:
    """EER from an exhaustive similarity matrix (genuine on the diagonal).

    Overwrites the diagonal of ``sim``.
    """
    n = sim.shape[0]
    g = np.sort(np.diag(sim).copy())
    np.fill_diagonal(sim, -math.inf)
    gmin = g[0]
    mask = sim >= gmin
    above = np.sort(sim[mask])
    np.logical_not(mask, out=mask)
    np.fill_diagonal(mask, False)
    if n * (n - 1) > above.size:
        t0 = float(np.max(sim, where=mask, initial=-math.inf))
        far0 = above.size + int(np.count_nonzero(sim == t0))
    else:
        t0, far0 = -math.inf, above.size
    return _eer_sweep(g, above, t0, far0, n * (n - 1))[0]


def eer(scores: ScoreSet) -> EvalResult:
    g = np.asarray(scores.genuine, dtype=float).ravel()
    i = np.asarray(scores.impostor, dtype=float).ravel()
    if g.size == 0 or i.size == 0:
        raise InvalidInputError("both genuine and impostor scores are required")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(i))):
        raise InvalidInputError("scores must be finite")
    e, thr = _eer_core(g, i)
    gm, giqr = _stats(g)
    im, iiqr = _stats(i)
    return EvalResult(e, thr, gm, giqr, im, iiqr, g.size, i.size)


def equal_error_rate(genuine, impostor) -> float:
    """EER alone, skipping the distribution statistics."""
    g = np.asarray(genuine, dtype=float).ravel()
    i = np.asarray(impostor, dtype=float).ravel()
    if g.size == 0 or i.size == 0:
        raise InvalidInputError("both genuine and impostor scores are required")
    return _eer_core(g, i)[0]


def subset_eer(db, subset=None, metric=Metric.EUCLIDEAN, impostor_policy: ImpostorPolicy = EXHAUSTIVE) -> float:
    """EER of a feature subset; same value as ``eer(score_database(...)).eer``.

    The exhaustive case works on the similarity matrix in place instead of
    materialising the impostor vector.
    """
    if not impostor_policy.exhaustive:
        scores = score_database(db, subset, metric, impostor_policy)
        return _eer_core(scores.genuine, scores.impostor)[0]
    n = db.n_subjects
    if n < 2:
        raise InvalidInputError("need at least 2 subjects")
    idx = np.arange(db.n_features) if subset is None else _check_subset(db, subset)
    s1 = np.ascontiguousarray(db.session(1, idx))
    s2 = np.ascontiguousarray(db.session(2, idx))
    return _matrix_eer(similarity_matrix(s1, s2, metric))


def evaluate(db, subset=None, metric=Metric.EUCLIDEAN, impostor_policy: ImpostorPolicy = EXHAUSTIVE) -> EvalResult:
    return eer(score_database(db, subset, metric, impostor_policy))


# -- correlation -------------------------------------------------------------


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape or x.size < 3:
        raise InvalidInputError("pearson_r needs two 1-D vectors of equal length >= 3")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(math.fsum(dx * dx))
    sy = math.sqrt(math.fsum(dy * dy))
    if sx / math.sqrt(x.size - 1) <= 1e-12 or sy / math.sqrt(y.size - 1) <= 1e-12:
        raise DegenerateDataError("correlation undefined for a constant vector")
    r = math.fsum(dx * dy) / (sx * sy)
    return min(1.0, max(-1.0, r))


def correlation_matrix(x: np.ndarray) -> np.ndarray:
    """Pearson correlations between the columns of ``x`` (observations in rows)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 3:
        raise InvalidInputError("need a 2-D matrix with at least 3 observations")
    dev = x - x.mean(axis=0)
    sd = np.sqrt(np.einsum("ij,ij->j", dev, dev) / (x.shape[0] - 1))
    if np.any(sd <= 1e-12):
        bad = int(np.flatnonzero(sd <= 1e-12)[0])
        raise DegenerateDataError(f"feature {bad} is constant; correlation undefined")
    z = dev / sd
    r = (z.T @ z) / (x.shape[0] - 1)
    np.clip(r, -1.0, 1.0, out=r)
    return r


def summarize_abs_r(abs_r: np.ndarray, bin_width: float = 0.01) -> CorrSummary:
    nbins = int(round(1.0 / bin_width))
    edges = np.linspace(0.0, 1.0, nbins + 1)
    counts, _ = np.histogram(abs_r, bins=edges)
    med, p95 = np.quantile(abs_r, [0.5, 0.95], method=QUANTILE_METHOD)
    hist = tuple((float(edges[b]), float(edges[b + 1]), int(counts[b])) for b in range(nbins))
    return CorrSummary(float(med), float(p95), hist, int(abs_r.size))


def intercorr_summary(db, session_policy=SessionPolicy.SESSION1) -> CorrSummary:
    """Median, 95th percentile and histogram of |r| over all unordered feature pairs."""
    policy = SessionPolicy(session_policy)
    m = db.n_features
    if m < 2:
        raise InvalidInputError("need at least 2 features")
    if policy is SessionPolicy.SESSION1:
        x = db.session(1)
    else:
        x = np.concatenate([db.session(1), db.session(2)], axis=0)
    r = correlation_matrix(x)
    iu = np.triu_indices(m, k=1)
    return summarize_abs_r(np.abs(r[iu]))
