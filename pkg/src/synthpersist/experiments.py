"""Monte Carlo protocols over banded synthetic databases.

Each protocol takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentResult` holding a flat table of rows. All randomness is
derived from ``config.seed`` through keyed seed sequences, so any row can be
regenerated on its own and replicate execution order has no effect.

Random feature subsets are keyed by ``(seed, band, n_subjects, count,
replicate)`` and do not depend on the protocol, so a feature sweep and a band
comparison with the same seed look at the same subsets.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import __version__, matcher, synthgen
from .errors import ConfigError
from .matcher import EXHAUSTIVE, ImpostorPolicy, Metric, SessionPolicy
from .rng import RngStream
from .synthgen import Band, SyntheticDatabase

DESK_MAX_SUBJECTS = 2000
SAMPLED_FROM_SUBJECTS = 4000
EXACT_ZERO = 0.0

_TAG_POOL = 1
_TAG_SUBSET = 2
_TAG_IMPOSTOR = 3


class Protocol(str, Enum):
    ICC_HISTOGRAM = "icc_histogram"
    INTERCORR_HISTOGRAM = "intercorr_histogram"
    FEATURE_SWEEP = "feature_sweep"
    BAND_COMPARISON = "band_comparison"
    SUBJECT_SCALING = "subject_scaling"


def derive_seed(seed: int, *key: int) -> int:
    """64-bit seed for a keyed sub-task of an experiment."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in key]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class ExperimentConfig:
    protocol: Protocol
    seed: int
    n_subjects: list[int] = field(default_factory=lambda: [500])
    bands: list[Band] = field(default_factory=lambda: list(Band))
    pool_size: int = 3000
    feature_counts: list[int] = field(default_factory=lambda: list(range(2, 101)))
    replicates: int = 25
    metric: Metric = Metric.EUCLIDEAN
    impostor_sample: int | None = None
    eer_targets: list[float] = field(default_factory=lambda: [0.02, 0.003, 0.0015, EXACT_ZERO])
    quotas: dict | None = None
    session_policy: SessionPolicy = SessionPolicy.SESSION1
    allow_large: bool = False
    max_attempts_per_feature: int = synthgen.DEFAULT_MAX_ATTEMPTS
    workers: int = 1

    def __post_init__(self):
        self.protocol = Protocol(self.protocol)
        if isinstance(self.n_subjects, int):
            self.n_subjects = [self.n_subjects]
        self.n_subjects = [int(n) for n in self.n_subjects]
        self.bands = [Band.parse(b) for b in self.bands]
        self.feature_counts = [int(c) for c in self.feature_counts]
        self.metric = Metric.parse(self.metric)
        self.session_policy = SessionPolicy(self.session_policy)
        self.eer_targets = [float(t) for t in self.eer_targets]
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an explicit unsigned 64-bit integer")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if not self.n_subjects or min(self.n_subjects) < 2:
            raise ConfigError("n_subjects must list values >= 2")
        if not self.bands:
            raise ConfigError("select at least one band")
        if not self.feature_counts or min(self.feature_counts) < 1:
            raise ConfigError("feature_counts must be positive")
        if self.feature_counts != sorted(set(self.feature_counts)):
            raise ConfigError("feature_counts must be strictly ascending")
        if any(not 0.0 <= t <= 1.0 for t in self.eer_targets):
            raise ConfigError("EER targets must lie in [0, 1] (0 means exactly zero)")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be positive")
        subsets = (Protocol.FEATURE_SWEEP, Protocol.BAND_COMPARISON, Protocol.SUBJECT_SCALING)
        if self.protocol in subsets and max(self.feature_counts) > self.pool_size:
            raise ConfigError(f"feature count {max(self.feature_counts)} exceeds pool size {self.pool_size}")
        if max(self.n_subjects) > DESK_MAX_SUBJECTS and not self.allow_large:
            raise ConfigError(
                f"n_subjects above {DESK_MAX_SUBJECTS} needs allow_large=true (runs use sampled impostor pairs)"
            )
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    def impostor_policy(self, n: int, seed: int) -> ImpostorPolicy:
        """Exhaustive below 4000 subjects unless a sample size is forced."""
        if self.impostor_sample is not None:
            return ImpostorPolicy.sampled(min(self.impostor_sample, n * (n - 1)), seed)
        if n >= SAMPLED_FROM_SUBJECTS:
            return ImpostorPolicy.sampled(min(matcher.SAMPLED_PAIR_CAP, n * (n - 1)), seed)
        return EXHAUSTIVE

    def band_quotas(self) -> dict[Band, int]:
        if self.quotas is not None:
            return {Band.parse(k): int(v) for k, v in self.quotas.items()}
        return {b: self.pool_size for b in self.bands}

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif f.name == "bands":
                v = [b.value for b in v]
            elif f.name == "quotas" and v is not None:
                v = {Band.parse(k).value: int(q) for k, q in v.items()}
            out[f.name] = v
        return out

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ExperimentResult:
    protocol: Protocol
    columns: list[str]
    rows: list[dict]
    summary: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    database: SyntheticDatabase | None = field(default=None, repr=False)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def lookup(self, **key) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in key.items()):
                return r
        raise KeyError(key)


def provenance(config: ExperimentConfig) -> dict:
    return {
        "tool": "synthpersist",
        "tool_version": __version__,
        "numpy_version": np.__version__,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
    }


# -- shared machinery --------------------------------------------------------


def build_pool(n: int, band, size: int, seed: int, max_attempts_per_feature=synthgen.DEFAULT_MAX_ATTEMPTS, workers=1) -> SyntheticDatabase:
    """Single-band pool database for ``n`` subjects, keyed by ``(seed, band, n)``."""
    band = Band.parse(band)
    pool_seed = derive_seed(seed, _TAG_POOL, band.number, n)
    return synthgen.assemble_banded_db(
        n, [synthgen.band_spec(band, size)], pool_seed, max_attempts_per_feature, workers=workers
    )


def draw_subset(pool_size: int, count: int, seed: int) -> np.ndarray:
    """``count`` distinct feature indices out of ``pool_size``."""
    if count > pool_size:
        raise ConfigError(f"cannot draw {count} features from a pool of {pool_size}")
    gen = RngStream(seed).generator()
    return np.sort(gen.choice(pool_size, size=count, replace=False))


def _subset_seed(seed: int, band_no: int, n: int, count: int, replicate: int) -> int:
    return derive_seed(seed, _TAG_SUBSET, band_no, n, count, replicate)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _replicate_eers(
    db: SyntheticDatabase,
    count: int,
    replicates: int,
    seed: int,
    band_no: int,
    metric: Metric,
    policy_for: Callable[[int], ImpostorPolicy],
    workers: int = 1,
) -> list[float]:
    n = db.n_subjects

    def one(r):
        subset = draw_subset(db.n_features, count, _subset_seed(seed, band_no, n, count, r))
        return matcher.subset_eer(db, subset, metric, policy_for(r))

    return _map(one, range(replicates), workers)


def median(values) -> float:
    return float(np.quantile(np.asarray(values, dtype=float), 0.5, method=matcher.QUANTILE_METHOD))


def _policy_factory(config: ExperimentConfig, n: int, band_no: int, count: int):
    return lambda r: config.impostor_policy(n, derive_seed(config.seed, _TAG_IMPOSTOR, band_no, n, count, r))


# -- protocols ---------------------------------------------------------------


def run_feature_sweep(config: ExperimentConfig, pools: dict | None = None) -> ExperimentResult:
    """Median EER over random feature subsets, per band and feature count."""
    pools = {} if pools is None else pools
    rows = []
    for n in config.n_subjects:
        for band in config.bands:
            db = pools.get((band, n))
            if db is None:
                db = pools[(band, n)] = build_pool(
                    n, band, config.pool_size, config.seed, config.max_attempts_per_feature, config.workers
                )
            if max(config.feature_counts) > db.n_features:
                raise ConfigError(f"feature count exceeds pool of {db.n_features}")
            for c in config.feature_counts:
                eers = _replicate_eers(
                    db, c, config.replicates, config.seed, band.number, config.metric,
                    _policy_factory(config, n, band.number, c), config.workers,
                )
                rows.append(
                    {
                        "band": band.value,
                        "n_subjects": n,
                        "feature_count": c,
                        "median_eer": median(eers),
                        "q25_eer": float(np.quantile(eers, 0.25, method=matcher.QUANTILE_METHOD)),
                        "q75_eer": float(np.quantile(eers, 0.75, method=matcher.QUANTILE_METHOD)),
                        "n_nonzero": int(np.count_nonzero(eers)),
                        "replicates": config.replicates,
                    }
                )
    cols = ["band", "n_subjects", "feature_count", "median_eer", "q25_eer", "q75_eer", "n_nonzero", "replicates"]
    return ExperimentResult(config.protocol, cols, rows, {}, provenance(config))


def run_band_comparison(config: ExperimentConfig, pools: dict | None = None) -> ExperimentResult:
    """Genuine/impostor median and IQR per band at one feature count.

    Uses ``feature_counts[0]`` as the subset size. Per band, reports the
    median over replicates of each replicate's median and IQR.
    """
    pools = {} if pools is None else pools
    c = config.feature_counts[0]
    rows = []
    for n in config.n_subjects:
        for band in config.bands:
            db = pools.get((band, n))
            if db is None:
                db = pools[(band, n)] = build_pool(
                    n, band, config.pool_size, config.seed, config.max_attempts_per_feature, config.workers
                )
            policy_for = _policy_factory(config, n, band.number, c)

            def one(r, db=db, band=band, policy_for=policy_for):
                subset = draw_subset(db.n_features, c, _subset_seed(config.seed, band.number, n, c, r))
                return matcher.evaluate(db, subset, config.metric, policy_for(r))

            results = _map(one, range(config.replicates), config.workers)
            eer_med = median([e.eer for e in results])
            for cls in ("genuine", "impostor"):
                rows.append(
                    {
                        "band": band.value,
                        "n_subjects": n,
                        "class": cls,
                        "feature_count": c,
                        "median": median([getattr(e, f"{cls}_median") for e in results]),
                        "iqr": median([getattr(e, f"{cls}_iqr") for e in results]),
                        "median_eer": eer_med,
                        "replicates": config.replicates,
                    }
                )
    cols = ["band", "n_subjects", "class", "feature_count", "median", "iqr", "median_eer", "replicates"]
    return ExperimentResult(config.protocol, cols, rows, {}, provenance(config))


@dataclass(frozen=True)
class MinFeatures:
    """Outcome of a minimal-feature-count search.

    ``count`` is ``None`` when no candidate met the target; ``curve`` maps each
    evaluated candidate count to its replicate-median EER.
    """

    target: float
    count: int | None
    curve: dict

    @property
    def reached(self) -> bool:
        return self.count is not None


def _meets(value: float, target: float) -> bool:
    return value == 0.0 if target == EXACT_ZERO else value <= target


def eer_curve(
    db: SyntheticDatabase,
    candidate_counts: Sequence[int],
    replicates: int,
    seed: int,
    metric=Metric.EUCLIDEAN,
    policy_for: Callable[[int, int], ImpostorPolicy] | None = None,
    stop: Callable[[int, float], bool] | None = None,
    workers: int = 1,
    band_no: int = 0,
):
    """Yield ``(count, median EER)`` for ascending candidate counts.

    Stops early once ``stop(count, median)`` returns true.
    """
    metric = Metric.parse(metric)
    counts = list(candidate_counts)
    if counts != sorted(counts):
        raise ConfigError("candidate counts must be ascending")
    for c in counts:
        if c > db.n_features:
            raise ConfigError(f"candidate count {c} exceeds pool of {db.n_features}")
        pf = (lambda r, c=c: policy_for(c, r)) if policy_for else (lambda r: EXHAUSTIVE)
        med = median(_replicate_eers(db, c, replicates, seed, band_no, metric, pf, workers))
        yield c, med
        if stop is not None and stop(c, med):
            return


def min_features_for_eer(
    db: SyntheticDatabase,
    target: float,
    replicates: int = 100,
    candidate_counts: Sequence[int] | None = None,
    seed: int = 0,
    metric=Metric.EUCLIDEAN,
    policy_for: Callable[[int, int], ImpostorPolicy] | None = None,
    workers: int = 1,
) -> MinFeatures:
    """Smallest candidate count whose replicate-median EER meets ``target``.

    A target of exactly 0 asks for a median EER of exactly zero. The search
    takes the first qualifying count in ascending order and does not check
    that larger counts keep meeting the target.
    """
    if candidate_counts is None:
        candidate_counts = range(2, db.n_features + 1)
    curve = {}
    for c, med in eer_curve(
        db, candidate_counts, replicates, seed, metric, policy_for,
        stop=lambda c, m: _meets(m, target), workers=workers,
    ):
        curve[c] = med
        if _meets(med, target):
            return MinFeatures(target, c, curve)
    return MinFeatures(target, None, curve)


def run_subject_scaling(config: ExperimentConfig, pools: dict | None = None) -> ExperimentResult:
    """Minimal feature counts per EER target as the subject count grows.

    One pool per subject count and band (Band 4 unless configured otherwise);
    the median-EER curve is computed once per pool and read off for every
    target, which gives the same answer as separate searches.
    """
    pools = {} if pools is None else pools
    band = config.bands[0]
    rows = []
    curves = {}
    for n in config.n_subjects:
        db = pools.get((band, n))
        if db is None:
            db = pools[(band, n)] = build_pool(
                n, band, config.pool_size, config.seed, config.max_attempts_per_feature, config.workers
            )
        pending = list(config.eer_targets)
        found: dict[float, int] = {}
        curve = {}

        def stop(c, med):
            for t in list(pending):
                if _meets(med, t):
                    found[t] = c
                    pending.remove(t)
            return not pending

        n_seed = derive_seed(config.seed, _TAG_SUBSET, n)

        def policy_for(c, r, n=n):
            return config.impostor_policy(n, derive_seed(config.seed, _TAG_IMPOSTOR, band.number, n, c, r))

        for c, med in eer_curve(
            db, config.feature_counts, config.replicates, n_seed, config.metric, policy_for, stop, config.workers
        ):
            curve[c] = med
        curves[n] = curve
        for t in config.eer_targets:
            rows.append(
                {
                    "n_subjects": n,
                    "target": "zero" if t == EXACT_ZERO else t,
                    "min_features": found.get(t),
                    "reached": t in found,
                    "band": band.value,
                    "replicates": config.replicates,
                }
            )
    cols = ["n_subjects", "target", "min_features", "reached", "band", "replicates"]
    summary = {"curves": {str(n): {str(c): v for c, v in cv.items()} for n, cv in curves.items()}}
    return ExperimentResult(config.protocol, cols, rows, summary, provenance(config))


def subject_scaling_seed(config_seed: int, n: int) -> int:
    """Subset seed that :func:`run_subject_scaling` passes to the curve for ``n`` subjects."""
    return derive_seed(config_seed, _TAG_SUBSET, n)


def run_icc_histogram(config: ExperimentConfig) -> ExperimentResult:
    """Achieved-ICC histogram (0.01 bins over [0, 1]) of a quota-assembled database."""
    quotas = config.band_quotas()
    n = config.n_subjects[0]
    db = synthgen.assemble_banded_db(
        n,
        synthgen.band_specs(quotas),
        derive_seed(config.seed, _TAG_POOL, 0, n),
        config.max_attempts_per_feature,
        workers=config.workers,
    )
    iccs = np.array([m.achieved_icc for m in db.meta])
    edges = np.linspace(0.0, 1.0, 101)
    counts, _ = np.histogram(iccs, bins=edges)
    rows = [
        {"bin_low": round(float(edges[b]), 2), "bin_high": round(float(edges[b + 1]), 2), "count": int(counts[b])}
        for b in range(100)
    ]
    per_band = {b.value: sum(1 for m in db.meta if m.band is b) for b in Band}
    summary = {"per_band": per_band, "total": int(iccs.size), "attempts": db.config.get("attempts", 0)}
    return ExperimentResult(config.protocol, ["bin_low", "bin_high", "count"], rows, summary,
                            provenance(config), database=db)


def run_intercorr_histogram(config: ExperimentConfig, pools: dict | None = None) -> ExperimentResult:
    """|r| histogram between all feature pairs of one band pool."""
    pools = {} if pools is None else pools
    band = config.bands[0]
    n = config.n_subjects[0]
    db = pools.get((band, n))
    if db is None:
        db = pools[(band, n)] = build_pool(
            n, band, config.pool_size, config.seed, config.max_attempts_per_feature, config.workers
        )
    s = matcher.intercorr_summary(db, config.session_policy)
    rows = [{"bin_low": round(lo, 2), "bin_high": round(hi, 2), "count": c} for lo, hi, c in s.histogram]
    summary = {"median_abs_r": s.median_abs_r, "p95_abs_r": s.p95_abs_r, "n_pairs": s.n_pairs, "band": band.value}
    return ExperimentResult(config.protocol, ["bin_low", "bin_high", "count"], rows, summary,
                            provenance(config))


RUNNERS = {
    Protocol.ICC_HISTOGRAM: run_icc_histogram,
    Protocol.INTERCORR_HISTOGRAM: run_intercorr_histogram,
    Protocol.FEATURE_SWEEP: run_feature_sweep,
    Protocol.BAND_COMPARISON: run_band_comparison,
    Protocol.SUBJECT_SCALING: run_subject_scaling,
}


def run(config: ExperimentConfig) -> ExperimentResult:
    return RUNNERS[config.protocol](config)


# -- presets -----------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "fig1": dict(protocol="icc_histogram", n_subjects=[500], quotas={"Band1": 3000, "Band2": 3000, "Band3": 3000, "Band4": 3000}),
    "fig2": dict(protocol="intercorr_histogram", n_subjects=[500], bands=["Band3"], pool_size=3000),
    "fig4": dict(protocol="feature_sweep", n_subjects=[500], bands=["Band3"], feature_counts=list(range(2, 20)), replicates=10),
    "fig5": dict(protocol="feature_sweep", n_subjects=[500], feature_counts=list(range(2, 101)), replicates=25),
    "fig6_7": dict(protocol="band_comparison", n_subjects=[500], feature_counts=[25], replicates=25),
    "fig8": dict(
        protocol="subject_scaling",
        n_subjects=[100, 500, 1000, 2000],
        bands=["Band4"],
        feature_counts=list(range(2, 101)),
        replicates=100,
    ),
    "fig8_full": dict(
        protocol="subject_scaling",
        n_subjects=[100, 500, 1000, 2000, 4000, 6000, 8000, 10000],
        bands=["Band4"],
        feature_counts=list(range(2, 101)),
        replicates=100,
        allow_large=True,
    ),
}


def preset(name: str, seed: int, **overrides) -> ExperimentConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return ExperimentConfig(seed=seed, **base)
