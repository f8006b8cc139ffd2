"""Ranging, optional log transform and normalisation of the scalar field q."""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InvariantError

log = logging.getLogger(__name__)


class FieldRange(NamedTuple):
    min: np.float32
    max: np.float32

    def fold(self, other):
        if other is None:
            return self
        return FieldRange(min(self.min, other.min), max(self.max, other.max))


def _check_finite(q, offset=0):
    bad = ~np.isfinite(q)
    if bad.any():
        i = int(np.argmax(bad))
        raise InvariantError(f"non-finite q={q[i]} at particle {offset + i}")


def _log10(q):
    # float32 log10 in numpy is off by an ulp at exact powers of ten
    return np.log10(q.astype(np.float64)).astype(np.float32)


def compute_range(chunk, running=None, offset=0):
    """Fold the min/max of ``chunk.q`` into ``running`` (``None`` = empty).

    ``offset`` only labels particle indices in error messages.
    """
    q = chunk.q
    if len(q) == 0:
        return running
    _check_finite(q, offset)
    here = FieldRange(np.float32(q.min()), np.float32(q.max()))
    return here.fold(running)


def log_range(chunk, running=None, offset=0):
    """Fold the range of ``log10(q)`` over the positive entries of a chunk.

    Nonpositive entries are ignored: under the log transform they are
    clamped to the smallest positive value's log, which never widens the
    range.  The values are produced by the same ufunc call that
    :func:`apply_transform` uses, so the folded range agrees bitwise with
    one computed after transforming.
    """
    q = chunk.q
    if len(q) == 0:
        return running
    _check_finite(q, offset)
    pos = q[q > 0]
    if len(pos) == 0:
        return running
    lq = _log10(pos)
    return FieldRange(np.float32(lq.min()), np.float32(lq.max())).fold(running)


def apply_transform(chunk, use_log, floor=None):
    """In place ``q <- log10(q)`` when ``use_log``.

    Entries with ``q <= 0`` receive ``floor``, the log of the dataset's
    smallest positive q (the chunk's own when ``floor`` is None).  Returns
    the number of clamped entries.
    """
    if not use_log:
        return 0
    q = chunk.q
    bad = q <= 0
    nbad = int(np.count_nonzero(bad))
    if nbad == len(q) and nbad:
        if floor is None:
            raise ConfigError("log transform requested but no positive q values")
    if nbad:
        if floor is None:
            floor = _log10(q[~bad]).min()
        log.warning("log transform: %d nonpositive q values clamped to %g", nbad, floor)
        q[~bad] = _log10(q[~bad])
        q[bad] = floor
    else:
        q[:] = _log10(q)
    return nbad


def normalize(chunk, rng):
    """In place ``q <- clamp((q - min) / (max - min), 0, 1)``.

    A degenerate range maps every particle to 0.
    """
    q = chunk.q
    lo, hi = np.float32(rng.min), np.float32(rng.max)
    if hi == lo:
        q[:] = 0
        return
    q -= lo
    q /= hi - lo
    np.clip(q, 0, 1, out=q)
