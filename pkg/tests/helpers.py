"""Small builders shared by several test modules."""

import numpy as np

from synthpersist.synthgen import FeatureMeta, SyntheticDatabase


def make_db(values, seed=0):
    """Wrap a hand-written ``(n, 2, m)`` grid in a SyntheticDatabase."""
    v = np.asarray(values, dtype=float)
    meta = [FeatureMeta(mult=0.0, achieved_icc=float("nan"), band=None, feature_index=f) for f in range(v.shape[2])]
    return SyntheticDatabase(v, meta, seed)


def db_from_sessions(s1, s2, seed=0):
    return make_db(np.stack([np.asarray(s1, float), np.asarray(s2, float)], axis=1), seed)
