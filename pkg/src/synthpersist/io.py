"""Files: feature databases, metadata sidecars, experiment configs, result tables.

Database layout (delimited text, one row per subject and session)::

    subject_id,session,f0001,f0002,...
    1,1,0.12...,...
    1,2,...

Subject ids are 1-based integers, sessions are 1 and 2, values are written
with 17 significant digits so they read back bit-exact. Per-feature
metadata and the generation config live in ``<stem>.meta.json`` next to the
database file.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
import warnings
from pathlib import Path

import numpy as np

from . import __version__, reliability
from .errors import ConfigError, ParseError, PersistenceError
from .experiments import EXACT_ZERO, ExperimentConfig, ExperimentResult, PRESETS
from .synthgen import N_SESSIONS, FeatureMeta, SyntheticDatabase, bin_band

FORMAT_VERSION = 1
ZSCORE_WARN_TOL = 1e-6


class ZScoreWarning(UserWarning):
    """A stored feature column is no longer exactly z-scored."""


def feature_name(index: int) -> str:
    return f"f{index + 1:04d}"


def fmt_float(x) -> str:
    return format(float(x), ".17g")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json") if path.suffix else path.with_name(path.name + ".meta.json")


# -- databases ---------------------------------------------------------------


def write_db(db: SyntheticDatabase, path) -> Path:
    """Write ``db`` as delimited text plus its JSON sidecar; returns the sidecar path."""
    path = Path(path)
    header = ["subject_id", "session"] + [feature_name(i) for i in range(db.n_features)]
    meta_path = sidecar_path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(db.n_subjects):
                for j in range(N_SESSIONS):
                    w.writerow([i + 1, j + 1, *[fmt_float(v) for v in db.values[i, j]]])
        sidecar = {
            "format_version": FORMAT_VERSION,
            "tool_version": __version__,
            "master_seed": int(db.master_seed),
            "n_subjects": db.n_subjects,
            "n_sessions": N_SESSIONS,
            "n_features": db.n_features,
            "config": db.config,
            "features": [m.to_dict() for m in db.meta],
        }
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write database to {path}: {exc}") from exc
    return meta_path


def _derived_meta(values: np.ndarray) -> list[FeatureMeta]:
    out = []
    for f in range(values.shape[2]):
        an = reliability.anova_mean_squares(values[:, :, f])
        value = reliability.icc(an).icc
        out.append(FeatureMeta(float("nan"), value, bin_band(value), f, 0,
                               an.ms_subjects, an.ms_occasions, an.ms_error))
    return out


def read_db(path, require_meta: bool = False) -> SyntheticDatabase:
    """Parse and validate a database file.

    Without a sidecar (and ``require_meta`` false) the metadata is rebuilt from
    the values: achieved ICC and band are recomputed, ``mult`` is NaN.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ParseError("empty file: header missing", row=1)
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["subject_id", "session"]:
        raise ParseError("header must start with 'subject_id,session'", row=1)
    for k, name in enumerate(header[2:]):
        if name != feature_name(k):
            raise ParseError(f"expected feature column {feature_name(k)!r}, found {name!r}", row=1, column=name)
    m = len(header) - 2

    cells: dict[tuple[int, int], np.ndarray] = {}
    order: list[int] = []
    seen: set[int] = set()
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", row=r)
        try:
            sid = int(row[0])
        except ValueError:
            raise ParseError(f"subject id {row[0]!r} is not an integer", row=r, column="subject_id") from None
        try:
            ses = int(row[1])
        except ValueError:
            raise ParseError(f"session {row[1]!r} is not an integer", row=r, column="session") from None
        if ses not in (1, 2):
            raise ParseError(f"session must be 1 or 2, got {ses}", row=r, column="session")
        if (sid, ses) in cells:
            raise ParseError(f"duplicate row for subject {sid} session {ses}", row=r)
        vals = np.empty(m)
        for k, text in enumerate(row[2:]):
            try:
                vals[k] = float(text)
            except ValueError:
                raise ParseError(f"non-numeric value {text!r}", row=r, column=header[k + 2]) from None
            if not math.isfinite(vals[k]):
                raise ParseError(f"non-finite value {text!r}", row=r, column=header[k + 2])
        if sid not in seen:
            seen.add(sid)
            order.append(sid)
        cells[(sid, ses)] = vals
    for sid in order:
        for ses in (1, 2):
            if (sid, ses) not in cells:
                raise ParseError(f"subject {sid} is missing session {ses}")
    if len(order) < 2:
        raise ParseError("need at least 2 subjects")

    values = np.empty((len(order), N_SESSIONS, m))
    for i, sid in enumerate(order):
        values[i, 0] = cells[(sid, 1)]
        values[i, 1] = cells[(sid, 2)]

    meta_path = sidecar_path(path)
    master_seed, config = 0, {}
    if meta_path.exists():
        try:
            side = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"unreadable sidecar {meta_path}: {exc}") from None
        if side.get("format_version") != FORMAT_VERSION:
            raise ParseError(f"unsupported sidecar format_version {side.get('format_version')!r}")
        try:
            meta = [FeatureMeta.from_dict(d) for d in side["features"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed feature record in sidecar: {exc}") from None
        if len(meta) != m:
            raise ParseError(f"sidecar lists {len(meta)} features, file has {m}")
        master_seed = int(side.get("master_seed", 0))
        config = side.get("config", {})
    elif require_meta:
        raise ParseError(f"metadata sidecar {meta_path.name} not found")
    else:
        meta = _derived_meta(values)

    _check_zscores(values)
    return SyntheticDatabase(values, tuple(meta), master_seed, config)


def _check_zscores(values: np.ndarray) -> None:
    if values.shape[2] == 0:
        return
    pooled = values.reshape(-1, values.shape[2])
    means = pooled.mean(axis=0)
    sds = pooled.std(axis=0, ddof=1)
    bad = np.flatnonzero((np.abs(means) > ZSCORE_WARN_TOL) | (np.abs(sds - 1) > ZSCORE_WARN_TOL))
    if bad.size:
        names = ", ".join(feature_name(i) for i in bad[:5])
        warnings.warn(f"{bad.size} feature(s) not z-scored within {ZSCORE_WARN_TOL}: {names}", ZScoreWarning, stacklevel=3)


# -- experiment configs ------------------------------------------------------

_CONFIG_KEYS = {
    "protocol", "seed", "n_subjects", "bands", "pool_size", "feature_counts", "replicates", "metric",
    "impostor_sample", "eer_targets", "quotas", "session_policy", "allow_large",
    "max_attempts_per_feature", "workers",
}
_META_KEYS = {"preset", "format_version"}
_INT_LISTS = {"n_subjects", "feature_counts"}
_INTS = {"seed", "pool_size", "replicates", "impostor_sample", "max_attempts_per_feature", "workers"}


def _parse_int_list(text: str) -> list[int]:
    out = []
    for part in str(text).replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _parse_target(value) -> float:
    if isinstance(value, str) and value.strip().lower() in ("zero", "0", "exact0", "exact_zero"):
        return EXACT_ZERO
    return float(value)


def _from_ini(text: str) -> dict:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if cp.sections() != ["experiment"]:
        raise ConfigError("INI config needs exactly one [experiment] section")
    sec = cp["experiment"]
    raw: dict = {}
    for key, value in sec.items():
        if key in _INT_LISTS:
            raw[key] = _parse_int_list(value)
        elif key == "bands":
            raw[key] = [b.strip() for b in value.split(",") if b.strip()]
        elif key == "eer_targets":
            raw[key] = [v.strip() for v in value.split(",") if v.strip()]
        elif key == "quotas":
            q = {}
            for item in value.split(","):
                if item.strip():
                    band, _, count = item.partition(":")
                    q[band.strip()] = int(count)
            raw[key] = q
        elif key == "allow_large":
            raw[key] = sec.getboolean(key)
        else:
            raw[key] = value.strip()
    return raw


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a config mapping; unknown keys and missing seeds are errors."""
    unknown = set(raw) - _CONFIG_KEYS - _META_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "format_version" in raw and int(raw["format_version"]) != FORMAT_VERSION:
        raise ConfigError(f"unsupported config format_version {raw['format_version']!r}")
    if "seed" not in raw:
        raise ConfigError("config must set an explicit seed")
    base: dict = {}
    if "preset" in raw:
        try:
            base = dict(PRESETS[str(raw["preset"])])
        except KeyError:
            raise ConfigError(f"unknown preset {raw['preset']!r}; choose from {sorted(PRESETS)}") from None
    for key, value in raw.items():
        if key in _META_KEYS:
            continue
        if key in _INT_LISTS and not isinstance(value, list):
            value = _parse_int_list(value)
        elif key in _INTS and value is not None:
            value = int(value)
        elif key == "eer_targets":
            value = [_parse_target(v) for v in value]
        elif key == "allow_large" and isinstance(value, str):
            value = value.strip().lower() in ("1", "true", "yes", "on")
        base[key] = value
    if "protocol" not in base:
        raise ConfigError("config must name a protocol (or a preset)")
    try:
        return ExperimentConfig(**base)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from None


def load_config(path) -> ExperimentConfig:
    """Read an experiment config (JSON object, or INI with an ``[experiment]`` section)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from None
    else:
        raw = _from_ini(text)
    return config_from_dict(raw)


# -- result tables -----------------------------------------------------------


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def write_table(path, columns, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([format_cell(row.get(c)) for c in columns])
    except OSError as exc:
        raise PersistenceError(f"cannot write table {path}: {exc}") from exc


def write_json(path, payload) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True, default=_json_default)
            fh.write("\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_result(result: ExperimentResult, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (rows) and ``<prefix>.json`` (rows, summary, provenance)."""
    prefix = Path(prefix)
    csv_path = prefix.with_name(prefix.name + ".csv")
    json_path = prefix.with_name(prefix.name + ".json")
    write_table(csv_path, result.columns, result.rows)
    write_json(
        json_path,
        {
            "format_version": FORMAT_VERSION,
            "protocol": result.protocol.value,
            "columns": result.columns,
            "rows": result.rows,
            "summary": result.summary,
            "provenance": result.provenance,
        },
    )
    return csv_path, json_path


def read_result(json_path) -> dict:
    try:
        payload = json.loads(Path(json_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read result {json_path}: {exc}") from None
    if payload.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported result format_version {payload.get('format_version')!r}")
    return payload
