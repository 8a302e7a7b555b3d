"""End-to-end acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``ACCEPTANCE <id> PASS|FAIL`` line with the
measured values, then asserts. Criterion 6 is the long one (several minutes
on one core).
"""

import time

import numpy as np
import pytest

from synthpersist import experiments, matcher, reliability, synthgen
from synthpersist.cli import main as cli_main
from synthpersist.experiments import ExperimentConfig
from synthpersist.synthgen import Band

from oracles import eer_sweep, icc_exact, quantile_type7, ss_total_exact

SEED = 20240601


@pytest.fixture
def report(capsys):
    def _report(criterion, ok, detail, started=None):
        took = "" if started is None else f" [{time.perf_counter() - started:.1f}s]"
        with capsys.disabled():
            print(f"\nACCEPTANCE {criterion} {'PASS' if ok else 'FAIL'}: {detail}{took}")
        assert ok, f"criterion {criterion}: {detail}"

    return _report


def _rel_spread(values):
    values = np.asarray(values, dtype=float)
    return float((values.max() - values.min()) / np.mean(np.abs(values)))


# 1 -------------------------------------------------------------------------


def test_c1_icc_targeting_law(report):
    t0 = time.perf_counter()
    rows, ok = [], True
    for mult in (0.3, 0.7, 1.0, 1.7, 2.8):
        pairs = synthgen.generate_fixed_mult(2000, mult, 200, SEED)
        mean_icc = np.mean([reliability.icc_of(np.column_stack([p.session1, p.session2])) for p in pairs])
        model = 1 / (1 + mult**2)
        ok &= abs(mean_icc - model) <= 0.03
        rows.append(f"mult={mult}: {mean_icc:.4f} vs {model:.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    report(1, ok, "; ".join(rows), t0)


# 2 -------------------------------------------------------------------------


def test_c2_band_histogram(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        protocol="icc_histogram", seed=SEED, n_subjects=[500],
        quotas={"Band1": 750, "Band2": 750, "Band3": 750, "Band4": 750},
    )
    res = experiments.run_icc_histogram(cfg)
    elapsed = time.perf_counter() - t0
    db = res.database
    counts = {b: 0 for b in Band}
    misplaced = 0
    for f, m in enumerate(db.meta):
        counts[m.band] += 1
        exact = float(icc_exact(db.feature_grid(f).tolist()))
        if not synthgen.band_spec(m.band).contains(exact):
            misplaced += 1
    ok = misplaced == 0 and all(c == 750 for c in counts.values()) and sum(res.column("count")) == 3000
    ok &= elapsed < 120
    detail = f"per-band {[counts[b] for b in Band]}, oracle misplacements {misplaced}, attempts {res.summary['attempts']}, assembly {elapsed:.1f}s"
    report(2, ok, detail, t0)


# 3 -------------------------------------------------------------------------


def test_c3_intercorrelation(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(protocol="intercorr_histogram", seed=SEED, n_subjects=[500], bands=["Band3"], pool_size=1000)
    s = experiments.run_intercorr_histogram(cfg).summary
    elapsed = time.perf_counter() - t0
    ok = 0.02 <= s["median_abs_r"] <= 0.045 and 0.06 <= s["p95_abs_r"] <= 0.12 and elapsed < 120
    report(3, ok, f"median |r| {s['median_abs_r']:.4f}, p95 {s['p95_abs_r']:.4f}, pairs {s['n_pairs']}", t0)


# 4 and 5 share one set of pools -------------------------------------------


@pytest.fixture(scope="module")
def band_pools():
    t0 = time.perf_counter()
    pools = {}
    sweep = ExperimentConfig(protocol="feature_sweep", seed=SEED, n_subjects=[500], feature_counts=[25, 35], replicates=25)
    sweep_res = experiments.run_feature_sweep(sweep, pools)
    comp = ExperimentConfig(protocol="band_comparison", seed=SEED, n_subjects=[500], feature_counts=[25], replicates=25)
    comp_res = experiments.run_band_comparison(comp, pools)
    return sweep_res, comp_res, time.perf_counter() - t0


def test_c4_band_ordering(report, band_pools):
    sweep, _, elapsed = band_pools
    med25 = [sweep.lookup(band=b.value, feature_count=25)["median_eer"] for b in Band]
    b4_35 = sweep.lookup(band="Band4", feature_count=35)
    ordered = all(a > b for a, b in zip(med25, med25[1:]))
    zero35 = b4_35["median_eer"] == 0.0 and b4_35["n_nonzero"] <= 1
    ok = ordered and zero35 and elapsed < 300
    detail = (
        f"c=25 median EER {[f'{v:.4%}' for v in med25]} (strictly decreasing: {ordered}); "
        f"Band4 c=35 median EER {b4_35['median_eer']:.5%} with {b4_35['n_nonzero']}/25 replicates nonzero "
        f"(needs 0 and <=1 nonzero); pools+runs {elapsed:.0f}s"
    )
    report(4, ok, detail)


def test_c5_distribution_shape(report, band_pools):
    _, comp, _ = band_pools
    g_med = [comp.lookup(band=b.value, **{"class": "genuine"})["median"] for b in Band]
    g_iqr = [comp.lookup(band=b.value, **{"class": "genuine"})["iqr"] for b in Band]
    i_med = [comp.lookup(band=b.value, **{"class": "impostor"})["median"] for b in Band]
    i_iqr = [comp.lookup(band=b.value, **{"class": "impostor"})["iqr"] for b in Band]
    inc = all(a < b for a, b in zip(g_med, g_med[1:]))
    dec = all(a > b for a, b in zip(g_iqr, g_iqr[1:]))
    flat_med, flat_iqr = _rel_spread(i_med), _rel_spread(i_iqr)
    ok = inc and dec and flat_med < 0.2 and flat_iqr < 0.2
    detail = (
        f"genuine median {[round(v, 3) for v in g_med]} increasing={inc}; "
        f"genuine IQR {[round(v, 3) for v in g_iqr]} decreasing={dec}; "
        f"impostor median spread {flat_med:.1%}, IQR spread {flat_iqr:.1%}"
    )
    report(5, ok, detail)


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c6_subject_scaling(report):
    t0 = time.perf_counter()
    cfg = experiments.preset("fig8", seed=SEED)
    res = experiments.run_subject_scaling(cfg)
    got = {(r["n_subjects"], r["target"]): r["min_features"] for r in res.rows}
    ns = cfg.n_subjects
    checks = []

    def within(value, centre, tol):
        return value is not None and abs(value - centre) <= tol

    for target, centre, tol in ((0.02, 15, 2), (0.003, 26, 3), (0.0015, 36, 4)):
        values = [got[(n, target)] for n in ns if n >= 500]
        ok_centre = all(within(v, centre, tol) for v in values)
        ok_const = None not in values and max(values) - min(values) <= 2
        checks.append((ok_centre and ok_const, f"<= {target:.2%}: {[got[(n, target)] for n in ns]} (want {centre}+-{tol}, constant +-2 for n>=500)"))
    zero = [got[(n, "zero")] for n in ns]
    nondecreasing = None not in zero and all(a <= b for a, b in zip(zero, zero[1:]))
    checks.append((nondecreasing and within(zero[0], 25, 4), f"exact zero: {zero} (want non-decreasing, {25}+-4 at n=100)"))
    ok = all(c for c, _ in checks)
    report(6, ok, f"n={ns}; " + "; ".join(d for _, d in checks), t0)


# 7 -------------------------------------------------------------------------


def test_c7_oracle_suites(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    failures = []

    # ICC against exact ANOVA on 1000 random tables
    worst_icc = 0.0
    tested = 0
    while tested < 1000:
        n = int(rng.integers(2, 31))
        table = (rng.normal(size=(n, 2)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)).tolist()
        try:
            exact = float(icc_exact(table))
        except ZeroDivisionError:
            continue
        worst_icc = max(worst_icc, abs(reliability.raw_icc(reliability.anova_mean_squares(table)) - exact))
        tested += 1
    if worst_icc > 1e-10:
        failures.append(f"icc {worst_icc:.2e}")

    # EER against brute-force sweep on 500 random score sets
    worst_eer = 0.0
    for _ in range(500):
        ng, ni = rng.integers(1, 51, size=2)
        digits = int(rng.integers(0, 4))
        g = np.round(rng.normal(rng.uniform(0, 3), 1, ng), digits)
        i = np.round(rng.normal(0, 1, ni), digits)
        worst_eer = max(worst_eer, abs(matcher.equal_error_rate(g, i) - eer_sweep(g.tolist(), i.tolist())))
    if worst_eer > 1e-9:
        failures.append(f"eer {worst_eer:.2e}")

    # z-score: pooled mean 0, sample SD 1, idempotent
    worst_z = 0.0
    for _ in range(200):
        x = rng.normal(rng.uniform(-10, 10), rng.uniform(0.1, 10), int(rng.integers(2, 200)))
        z = synthgen.zscore(x)
        worst_z = max(worst_z, abs(z.mean()), abs(z.std(ddof=1) - 1), float(np.max(np.abs(synthgen.zscore(z) - z))))
    if worst_z > 1e-9:
        failures.append(f"zscore {worst_z:.2e}")

    # SS identity and scale invariance
    worst_ss = worst_scale = 0.0
    for _ in range(300):
        x = rng.normal(size=(int(rng.integers(3, 40)), 2))
        a = reliability.anova_mean_squares(x)
        total = float(ss_total_exact(x.tolist()))
        worst_ss = max(worst_ss, abs(a.ss_subjects + a.ss_occasions + a.ss_error - total) / max(1.0, total))
        c = rng.uniform(0.01, 100) * rng.choice([-1, 1])
        moved = reliability.raw_icc(reliability.anova_mean_squares(c * x + rng.uniform(-100, 100)))
        worst_scale = max(worst_scale, abs(moved - reliability.raw_icc(a)))
    if worst_ss > 1e-10:
        failures.append(f"ss identity {worst_ss:.2e}")
    if worst_scale > 1e-9:
        failures.append(f"scale invariance {worst_scale:.2e}")

    # quantile convention (linear / type 7) in EER statistics
    worst_q = 0.0
    for _ in range(200):
        g = rng.normal(size=int(rng.integers(1, 60)))
        i = rng.normal(size=int(rng.integers(1, 60)))
        r = matcher.eer(matcher.ScoreSet(g, i))
        gq = [quantile_type7(g.tolist(), q) for q in (0.25, 0.5, 0.75)]
        iq = [quantile_type7(i.tolist(), q) for q in (0.25, 0.5, 0.75)]
        worst_q = max(
            worst_q,
            abs(r.genuine_median - gq[1]), abs(r.genuine_iqr - (gq[2] - gq[0])),
            abs(r.impostor_median - iq[1]), abs(r.impostor_iqr - (iq[2] - iq[0])),
        )
    if worst_q > 1e-12:
        failures.append(f"quantiles {worst_q:.2e}")

    detail = (
        f"max |err|: icc {worst_icc:.1e} (1000 tables), eer {worst_eer:.1e} (500 sets), zscore {worst_z:.1e}, "
        f"ss identity {worst_ss:.1e}, scale {worst_scale:.1e}, quantiles {worst_q:.1e}"
    )
    report(7, not failures, detail + ("" if not failures else f"; failing: {failures}"), t0)


# 8 -------------------------------------------------------------------------


def test_c8_generate_determinism_across_workers(report, tmp_path):
    t0 = time.perf_counter()
    args = ["generate", "--subjects", "500", "--band1", "60", "--band2", "60", "--band3", "60", "--band4", "60",
            "--seed", str(SEED)]
    blobs = {}
    for w in (1, 4, 16):
        out = tmp_path / f"w{w}.csv"
        assert cli_main([*args, "--workers", str(w), "--out", str(out)]) == 0
        blobs[w] = (out.read_bytes(), (tmp_path / f"w{w}.meta.json").read_bytes())
    same = blobs[1] == blobs[4] == blobs[16]
    size = len(blobs[1][0])
    report(8, same, f"1/4/16 workers byte-identical={same} ({size} bytes, 240 features)", t0)
