"""Synthetic particle datasets for tests and benchmarks."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .ingest import write_dataset

DISTRIBUTIONS = ("gaussian", "uniform")


def make_particles(count, seed=0, distribution="gaussian", extent=1.0, radius=(0.01, 0.05), ptypes=1):
    """Random particle fields as a dict of arrays (x, y, z, r, q, ptype).

    Positions are centred on the origin; q is positive and spans a few
    decades so the log transform has something to do.
    """
    if count < 0:
        raise ConfigError("count must be >= 0")
    if distribution not in DISTRIBUTIONS:
        raise ConfigError(f"distribution must be one of {DISTRIBUTIONS}, not {distribution!r}")
    rng = np.random.default_rng(seed)
    if distribution == "gaussian":
        pos = rng.normal(0.0, extent / 3.0, size=(count, 3))
    else:
        pos = rng.uniform(-extent, extent, size=(count, 3))
    lo, hi = radius
    return {
        "x": pos[:, 0].astype(np.float32),
        "y": pos[:, 1].astype(np.float32),
        "z": pos[:, 2].astype(np.float32),
        "r": rng.uniform(lo, hi, count).astype(np.float32),
        "q": (10.0 ** rng.uniform(-1.0, 2.0, count)).astype(np.float32),
        "ptype": rng.integers(0, ptypes, count).astype(np.int32),
    }


def write_fixture(path, count, seed=0, distribution="gaussian", ptypes=1, **kw):
    p = make_particles(count, seed, distribution, ptypes=ptypes, **kw)
    write_dataset(path, p["x"], p["y"], p["z"], p["r"], p["q"], p["ptype"], ptype_count=ptypes)
    return p
