"""Synthetic session-paired features with controlled ICC.

A feature for ``n`` subjects and two sessions is built as::

    base      ~ N(0, 1)                     (one value per subject)
    session_j = base + mult * N(0, 1)       (independent noise per session)

then z-scored over the pooled ``2n`` values. The model ICC of such a feature
is ``1 / (1 + mult**2)``; larger multipliers give less persistent features.

Databases are assembled band by band: a multiplier is drawn from the band's
0.01-step grid, the feature is generated, its achieved ICC is measured and
the feature is filed under whichever band interval contains that ICC, as long
as that band still needs features. Everything else is discarded.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import reliability
from .errors import ConfigError, DegenerateDataError, InvalidInputError, QuotaUnreachableError
from .rng import MAX_ATTEMPT_STREAM, RngStream, as_generator

N_SESSIONS = 2
DEFAULT_MAX_ATTEMPTS = 50
_BATCH = 256


class Band(str, Enum):
    BAND1 = "Band1"
    BAND2 = "Band2"
    BAND3 = "Band3"
    BAND4 = "Band4"

    def __str__(self):
        return self.value

    @property
    def number(self) -> int:
        return int(self.value[-1])

    @classmethod
    def parse(cls, value) -> "Band":
        if isinstance(value, Band):
            return value
        text = str(value).strip()
        if text.isdigit():
            text = f"Band{text}"
        for b in cls:
            if b.value.lower() == text.lower():
                return b
        raise ConfigError(f"unknown band {value!r}")


@dataclass(frozen=True)
class BandSpec:
    band: Band
    icc_low: float
    icc_high: float
    mult_low: float
    mult_high: float
    quota: int = 0
    closed_high: bool = False

    def __post_init__(self):
        if not self.icc_low < self.icc_high:
            raise ConfigError(f"{self.band}: icc_low must be below icc_high")
        if self.mult_low > self.mult_high or self.mult_low < 0:
            raise ConfigError(f"{self.band}: need 0 <= mult_low <= mult_high")
        if self.quota < 0:
            raise ConfigError(f"{self.band}: quota must be non-negative")

    def contains(self, icc_value: float) -> bool:
        if self.closed_high:
            return self.icc_low <= icc_value <= self.icc_high
        return self.icc_low <= icc_value < self.icc_high

    def mult_grid(self) -> np.ndarray:
        """Multipliers on the 0.01 grid inside ``[mult_low, mult_high]``."""
        lo = math.ceil(round(self.mult_low * 100, 9))
        hi = math.floor(round(self.mult_high * 100, 9))
        return np.arange(lo, hi + 1) / 100.0

    def with_quota(self, quota: int) -> "BandSpec":
        return replace(self, quota=int(quota))


DEFAULT_BANDS: tuple[BandSpec, ...] = (
    BandSpec(Band.BAND1, 0.1, 0.3, 1.4, 2.8),
    BandSpec(Band.BAND2, 0.3, 0.5, 0.9, 1.7),
    BandSpec(Band.BAND3, 0.5, 0.7, 0.6, 1.0),
    BandSpec(Band.BAND4, 0.7, 0.9, 0.3, 0.7, closed_high=True),
)


def band_spec(band, quota: int = 0) -> BandSpec:
    band = Band.parse(band)
    return DEFAULT_BANDS[band.number - 1].with_quota(quota)


def band_specs(quotas) -> list[BandSpec]:
    """Default band specs with quotas from a ``{band: quota}`` mapping or a 4-sequence."""
    if isinstance(quotas, dict):
        q = {Band.parse(k): int(v) for k, v in quotas.items()}
        return [s.with_quota(q.get(s.band, 0)) for s in DEFAULT_BANDS]
    quotas = list(quotas)
    if len(quotas) != len(DEFAULT_BANDS):
        raise ConfigError("expected one quota per band")
    return [s.with_quota(q) for s, q in zip(DEFAULT_BANDS, quotas)]


@dataclass(frozen=True)
class FeaturePair:
    session1: np.ndarray
    session2: np.ndarray
    mult: float


@dataclass(frozen=True)
class FeatureMeta:
    mult: float
    achieved_icc: float
    band: Band | None
    feature_index: int
    stream_id: int = 0
    ms_subjects: float = float("nan")
    ms_occasions: float = float("nan")
    ms_error: float = float("nan")
    # band whose multiplier range produced the feature; may differ from
    # ``band`` because features are filed by achieved ICC
    source_band: Band | None = None

    def to_dict(self) -> dict:
        return {
            "feature_index": self.feature_index,
            "band": None if self.band is None else self.band.value,
            "source_band": None if self.source_band is None else self.source_band.value,
            "mult": self.mult,
            "achieved_icc": self.achieved_icc,
            "stream_id": self.stream_id,
            "ms_subjects": self.ms_subjects,
            "ms_occasions": self.ms_occasions,
            "ms_error": self.ms_error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMeta":
        return cls(
            mult=float(d["mult"]),
            achieved_icc=float(d["achieved_icc"]),
            band=None if d.get("band") is None else Band.parse(d["band"]),
            feature_index=int(d["feature_index"]),
            stream_id=int(d.get("stream_id", 0)),
            ms_subjects=float(d.get("ms_subjects", "nan")),
            ms_occasions=float(d.get("ms_occasions", "nan")),
            ms_error=float(d.get("ms_error", "nan")),
            source_band=None if d.get("source_band") is None else Band.parse(d["source_band"]),
        )


@dataclass(frozen=True, eq=False)
class SyntheticDatabase:
    """Feature values ``values[subject, session, feature]`` plus per-feature metadata.

    ``values`` is made read-only on construction.
    """

    values: np.ndarray
    meta: tuple[FeatureMeta, ...]
    master_seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 3 or v.shape[1] != N_SESSIONS:
            raise InvalidInputError(f"values must have shape (n, 2, m), got {v.shape}")
        if v.shape[2] != len(self.meta):
            raise InvalidInputError(f"{v.shape[2]} feature columns but {len(self.meta)} meta records")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "meta", tuple(self.meta))

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_sessions(self) -> int:
        return N_SESSIONS

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def session(self, j: int, features=None) -> np.ndarray:
        """``(n, c)`` matrix for session ``j`` (1-based) and the chosen feature indices."""
        if j not in (1, 2):
            raise InvalidInputError(f"session must be 1 or 2, got {j}")
        block = self.values[:, j - 1, :]
        return block if features is None else block[:, np.asarray(features)]

    def feature_grid(self, index: int) -> np.ndarray:
        """Subjects x sessions grid for a single feature."""
        return self.values[:, :, index]

    def band_indices(self, band) -> np.ndarray:
        band = Band.parse(band)
        return np.array([m.feature_index for m in self.meta if m.band is band], dtype=int)

    def subset(self, features) -> "SyntheticDatabase":
        features = np.asarray(features, dtype=int)
        meta = [replace(self.meta[i], feature_index=k) for k, i in enumerate(features)]
        return SyntheticDatabase(self.values[:, :, features], tuple(meta), self.master_seed, dict(self.config))


def sample_mult(spec: BandSpec, rng) -> float:
    """Uniform draw from ``{mult_low, mult_low + 0.01, ..., mult_high}``."""
    grid = spec.mult_grid()
    if grid.size == 0:
        raise ConfigError(f"{spec.band}: no 0.01 grid point in [{spec.mult_low}, {spec.mult_high}]")
    gen = as_generator(rng)
    return float(grid[gen.integers(grid.size)])


def zscore(values) -> np.ndarray:
    """Standardise to mean 0 and sample SD (ddof=1) of 1."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InvalidInputError("zscore needs a 1-D vector with at least 2 values")
    mean = math.fsum(x) / x.size
    dev = x - mean
    sd = math.sqrt(math.fsum(dev * dev) / (x.size - 1))
    if not sd > 1e-12:
        raise DegenerateDataError("cannot z-score a constant vector")
    return dev / sd


def generate_feature_pair(n: int, mult: float, rng) -> FeaturePair:
    if n < 2:
        raise InvalidInputError(f"need at least 2 subjects, got {n}")
    if not mult >= 0:
        raise InvalidInputError(f"mult must be non-negative, got {mult}")
    gen = as_generator(rng)
    base = gen.standard_normal(n)
    s1 = base + gen.standard_normal(n) * mult
    s2 = base + gen.standard_normal(n) * mult
    pooled = zscore(np.concatenate([s1, s2]))
    return FeaturePair(pooled[:n], pooled[n:], float(mult))


def bin_band(icc_value: float, specs: Iterable[BandSpec] = DEFAULT_BANDS) -> Band | None:
    for spec in specs:
        if spec.contains(icc_value):
            return spec.band
    return None


@dataclass(frozen=True)
class _Attempt:
    stream_id: int
    source: Band
    mult: float
    pair: FeaturePair
    anova: reliability.AnovaTable
    icc: float


def _run_attempt(n: int, seed: int, stream_id: int, spec: BandSpec) -> _Attempt:
    gen = RngStream(seed, stream_id).generator()
    mult = sample_mult(spec, gen)
    pair = generate_feature_pair(n, mult, gen)
    anova = reliability.anova_mean_squares(np.column_stack([pair.session1, pair.session2]))
    return _Attempt(stream_id, spec.band, mult, pair, anova, reliability.icc(anova).icc)


def assemble_banded_db(
    n: int,
    specs: Sequence[BandSpec],
    seed: int,
    max_attempts_per_feature: int = DEFAULT_MAX_ATTEMPTS,
    workers: int = 1,
) -> SyntheticDatabase:
    """Fill each band's quota with features whose achieved ICC falls in that band.

    Attempt ``a`` uses substream ``(seed, a)``. Attempts are planned in fixed
    batches from the state at the start of the batch and accepted strictly in
    attempt order, so the output does not depend on ``workers``.

    Raises
    ------
    QuotaUnreachableError
        If more than ``m * max_attempts_per_feature`` attempts are needed.
    """
    specs = list(specs)
    if len({s.band for s in specs}) != len(specs):
        raise ConfigError("duplicate band in specs")
    if n < 2:
        raise InvalidInputError(f"need at least 2 subjects, got {n}")
    if max_attempts_per_feature < 1:
        raise ConfigError("max_attempts_per_feature must be positive")
    for s in specs:
        if s.quota > 0 and s.mult_grid().size == 0:
            raise ConfigError(f"{s.band}: empty multiplier grid")

    quota = {s.band: s.quota for s in specs}
    m = sum(quota.values())
    config = {
        "n_subjects": n,
        "bands": [
            {
                "band": s.band.value,
                "icc_low": s.icc_low,
                "icc_high": s.icc_high,
                "mult_low": s.mult_low,
                "mult_high": s.mult_high,
                "quota": s.quota,
            }
            for s in specs
        ],
        "max_attempts_per_feature": max_attempts_per_feature,
    }
    if m == 0:
        return SyntheticDatabase(np.empty((n, N_SESSIONS, 0)), (), seed, config)

    limit = m * max_attempts_per_feature
    if limit > MAX_ATTEMPT_STREAM:
        raise ConfigError("attempt budget exceeds the feature stream id range")
    filled = {b: 0 for b in quota}
    accepted: list[_Attempt] = []
    accepted_band: list[Band] = []
    attempt = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while len(accepted) < m:
            if attempt >= limit:
                shortfall = {b.value: quota[b] - filled[b] for b in quota if filled[b] < quota[b]}
                raise QuotaUnreachableError(
                    f"gave up after {attempt} attempts; missing features per band: {shortfall}",
                    shortfall,
                )
            open_specs = [s for s in specs if filled[s.band] < s.quota]
            size = min(_BATCH, limit - attempt, max(16, 2 * (m - len(accepted))))
            plan = [(attempt + i, open_specs[(attempt + i) % len(open_specs)]) for i in range(size)]
            if pool is None:
                results = [_run_attempt(n, seed, a, s) for a, s in plan]
            else:
                results = list(pool.map(lambda p: _run_attempt(n, seed, *p), plan))
            for res in results:
                band = bin_band(res.icc, specs)
                if band is None or filled[band] >= quota[band]:
                    continue
                filled[band] += 1
                accepted.append(res)
                accepted_band.append(band)
                if len(accepted) == m:
                    break
            attempt += size
    finally:
        if pool is not None:
            pool.shutdown()

    values = np.empty((n, N_SESSIONS, m))
    meta = []
    for idx, (res, band) in enumerate(zip(accepted, accepted_band)):
        values[:, 0, idx] = res.pair.session1
        values[:, 1, idx] = res.pair.session2
        meta.append(
            FeatureMeta(
                mult=res.mult,
                achieved_icc=res.icc,
                band=band,
                feature_index=idx,
                stream_id=res.stream_id,
                ms_subjects=res.anova.ms_subjects,
                ms_occasions=res.anova.ms_occasions,
                ms_error=res.anova.ms_error,
                source_band=res.source,
            )
        )
    config["attempts"] = attempt
    return SyntheticDatabase(values, tuple(meta), seed, config)


def generate_fixed_mult(n: int, mult: float, count: int, seed: int) -> list[FeaturePair]:
    """``count`` independent features at one multiplier (streams 0..count-1)."""
    return [generate_feature_pair(n, mult, RngStream(seed, i)) for i in range(count)]
