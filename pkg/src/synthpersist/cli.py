"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, experiments, matcher, reliability
from . import io as dbio
from .errors import SynthPersistError
from .experiments import Protocol
from .matcher import ImpostorPolicy, Metric, SessionPolicy
from .synthgen import Band, DEFAULT_BANDS, assemble_banded_db, band_specs

log = logging.getLogger("synthpersist")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
VERIFY_TOL = 1e-9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synthpersist", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="assemble a banded synthetic database")
    g.add_argument("--subjects", type=_positive, required=True)
    for b in Band:
        g.add_argument(f"--band{b.number}", type=_non_negative, default=0, metavar="QUOTA",
                       help=f"number of {b.value} features")
    g.add_argument("--seed", type=_seed, required=True)
    g.add_argument("--out", required=True, help="database path (.csv); sidecar goes next to it")
    g.add_argument("--max-attempts", type=_positive, default=50, help="attempt budget per requested feature")
    g.add_argument("--workers", type=_positive, default=1)

    i = sub.add_parser("icc", help="per-feature ICC table with reliability labels")
    i.add_argument("db")
    i.add_argument("--out", help="write the table here instead of stdout")

    e = sub.add_parser("evaluate", help="EER and score statistics for a feature subset")
    e.add_argument("db")
    sel = e.add_mutually_exclusive_group()
    sel.add_argument("--features", help="comma-separated feature names (f0001) or 1-based indices")
    sel.add_argument("--count", type=_positive, help="draw this many random features")
    e.add_argument("--band", help="restrict the feature pool to one band")
    e.add_argument("--subset-seed", type=_seed, default=0)
    e.add_argument("--metric", choices=[m.value for m in Metric], default="euclidean")
    e.add_argument("--impostor-sample", type=_positive, help="sample this many impostor pairs")
    e.add_argument("--impostor-seed", type=_seed, default=0)
    e.add_argument("--out", help="output prefix for <prefix>.json and <prefix>.csv")

    c = sub.add_parser("intercorr", help="feature intercorrelation summary and histogram")
    c.add_argument("db")
    c.add_argument("--session-policy", choices=[s.value for s in SessionPolicy], default="session1")
    c.add_argument("--out", help="output prefix for <prefix>.json and <prefix>.csv")

    x = sub.add_parser("experiment", help="run an experiment protocol")
    x.add_argument("config", nargs="?", help="JSON or INI experiment config")
    x.add_argument("--preset", choices=sorted(experiments.PRESETS))
    x.add_argument("--seed", type=_seed, help="seed for --preset runs")
    x.add_argument("--out", help="output prefix (default: next to the config, or ./<preset>)")
    x.add_argument("--workers", type=_positive)

    v = sub.add_parser("verify", help="re-derive ICCs and cross-check the metadata sidecar")
    v.add_argument("db")
    return p


# -- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    quotas = {b: getattr(args, f"band{b.number}") for b in Band}
    t0 = time.perf_counter()
    db = assemble_banded_db(args.subjects, band_specs(quotas), args.seed, args.max_attempts, workers=args.workers)
    meta = dbio.write_db(db, args.out)
    log.info("generated %d features for %d subjects in %.1fs", db.n_features, db.n_subjects, time.perf_counter() - t0)
    print(f"wrote {args.out} and {meta}")
    return EXIT_OK


def cmd_icc(args) -> int:
    db = dbio.read_db(args.db)
    cols = ["feature", "icc", "raw_icc", "label", "band", "ms_subjects", "ms_occasions", "ms_error"]
    rows = []
    for f in range(db.n_features):
        est = reliability.icc(reliability.anova_mean_squares(db.feature_grid(f)))
        band = db.meta[f].band
        rows.append({
            "feature": dbio.feature_name(f),
            "icc": est.icc,
            "raw_icc": est.raw_icc,
            "label": est.label.value,
            "band": "" if band is None else band.value,
            "ms_subjects": est.anova.ms_subjects,
            "ms_occasions": est.anova.ms_occasions,
            "ms_error": est.anova.ms_error,
        })
    if args.out:
        dbio.write_table(args.out, cols, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([dbio.format_cell(r[k]) for k in cols])
    return EXIT_OK


def _parse_features(text: str, m: int) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        idx = int(part[1:]) if part.lower().startswith("f") else int(part)
        if not 1 <= idx <= m:
            raise UsageError(f"feature {part!r} out of range 1..{m}")
        out.append(idx - 1)
    return out


def cmd_evaluate(args) -> int:
    db = dbio.read_db(args.db)
    pool = np.arange(db.n_features) if args.band is None else db.band_indices(args.band)
    if args.features:
        subset = _parse_features(args.features, db.n_features)
    elif args.count:
        if args.count > pool.size:
            raise UsageError(f"--count {args.count} exceeds the {pool.size} available features")
        subset = list(pool[experiments.draw_subset(pool.size, args.count, args.subset_seed)])
    else:
        subset = list(pool)
    if not subset:
        raise UsageError("no features selected")
    n = db.n_subjects
    policy = (
        ImpostorPolicy.sampled(args.impostor_sample, args.impostor_seed)
        if args.impostor_sample
        else matcher.EXHAUSTIVE
    )
    res = matcher.evaluate(db, subset, Metric.parse(args.metric), policy)
    payload = {
        "format_version": dbio.FORMAT_VERSION,
        "database": str(args.db),
        "metric": args.metric,
        "impostor_policy": policy.to_dict(),
        "features": [dbio.feature_name(i) for i in subset],
        "n_subjects": n,
        **res.to_dict(),
    }
    print(json.dumps(payload, indent=1, sort_keys=True))
    if args.out:
        prefix = Path(args.out)
        dbio.write_json(prefix.with_name(prefix.name + ".json"), payload)
        cols = ["eer", "threshold_at_eer", "genuine_median", "genuine_iqr", "impostor_median",
                "impostor_iqr", "n_genuine", "n_impostor", "n_features", "metric"]
        row = {**res.to_dict(), "n_features": len(subset), "metric": args.metric}
        dbio.write_table(prefix.with_name(prefix.name + ".csv"), cols, [row])
    return EXIT_OK


def cmd_intercorr(args) -> int:
    db = dbio.read_db(args.db)
    s = matcher.intercorr_summary(db, args.session_policy)
    payload = {
        "format_version": dbio.FORMAT_VERSION,
        "database": str(args.db),
        "session_policy": args.session_policy,
        "median_abs_r": s.median_abs_r,
        "p95_abs_r": s.p95_abs_r,
        "n_pairs": s.n_pairs,
    }
    print(json.dumps(payload, indent=1, sort_keys=True))
    if args.out:
        prefix = Path(args.out)
        payload["histogram"] = [list(h) for h in s.histogram]
        dbio.write_json(prefix.with_name(prefix.name + ".json"), payload)
        rows = [{"bin_low": round(lo, 2), "bin_high": round(hi, 2), "count": c} for lo, hi, c in s.histogram]
        dbio.write_table(prefix.with_name(prefix.name + ".csv"), ["bin_low", "bin_high", "count"], rows)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if (args.config is None) == (args.preset is None):
        raise UsageError("give either a config file or --preset")
    if args.preset:
        if args.seed is None:
            raise UsageError("--preset needs an explicit --seed")
        overrides = {"workers": args.workers} if args.workers else {}
        config = experiments.preset(args.preset, args.seed, **overrides)
        default_prefix = Path(args.preset)
    else:
        config = dbio.load_config(args.config)
        if args.workers:
            config.workers = args.workers
        cfg = Path(args.config)
        default_prefix = cfg.with_name(cfg.stem + ".result")
    prefix = Path(args.out) if args.out else default_prefix
    t0 = time.perf_counter()
    result = experiments.run(config)
    log.info("%s finished in %.1fs", config.protocol.value, time.perf_counter() - t0)
    csv_path, json_path = dbio.write_result(result, prefix)
    if config.protocol is Protocol.ICC_HISTOGRAM and result.database is not None:
        dbio.write_db(result.database, prefix.with_name(prefix.name + ".db.csv"))
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def verify_database(db) -> list[str]:
    """Problems found when re-deriving each feature's metadata from its values."""
    problems = []
    specs = {s.band: s for s in DEFAULT_BANDS}
    for f, meta in enumerate(db.meta):
        name = dbio.feature_name(f)
        if meta.feature_index != f:
            problems.append(f"{name}: sidecar feature_index {meta.feature_index} != {f}")
        try:
            anova = reliability.anova_mean_squares(db.feature_grid(f))
            value = reliability.icc(anova).icc
        except SynthPersistError as exc:
            problems.append(f"{name}: {exc}")
            continue
        if not abs(value - meta.achieved_icc) <= VERIFY_TOL:
            problems.append(f"{name}: recomputed ICC {value:.12g} != sidecar {meta.achieved_icc!r}")
        for field in ("ms_subjects", "ms_occasions", "ms_error"):
            stored = getattr(meta, field)
            if math.isnan(stored):
                continue
            fresh = getattr(anova, field)
            if not abs(fresh - stored) <= VERIFY_TOL * max(1.0, abs(fresh)):
                problems.append(f"{name}: recomputed {field} {fresh:.12g} != sidecar {stored!r}")
        if meta.band is not None:
            spec = specs[meta.band]
            if not spec.contains(value):
                problems.append(f"{name}: ICC {value:.6f} outside {meta.band.value} interval")
        source = meta.source_band or meta.band
        if source is not None and not math.isnan(meta.mult):
            grid = specs[source].mult_grid()
            if not np.any(np.abs(grid - meta.mult) < 1e-9):
                problems.append(f"{name}: mult {meta.mult} not on the {source.value} 0.01 grid")
    return problems


def cmd_verify(args) -> int:
    if not dbio.sidecar_path(args.db).exists():
        print(f"{args.db}: no metadata sidecar to verify against", file=sys.stderr)
        return EXIT_DATA
    db = dbio.read_db(args.db, require_meta=True)
    problems = verify_database(db)
    for msg in problems:
        print(msg, file=sys.stderr)
    if problems:
        print(f"FAILED: {len(problems)} problem(s) in {db.n_features} features")
        return EXIT_DATA
    print(f"OK: {db.n_features} features verified")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "icc": cmd_icc,
    "evaluate": cmd_evaluate,
    "intercorr": cmd_intercorr,
    "experiment": cmd_experiment,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"synthpersist {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SynthPersistError as exc:
        print(f"synthpersist {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
