"""Tile decomposition, particle-to-tile assignment and gaussian splatting.

Footprint model: a particle of image-space radius ``r`` adds
``color * exp(-s**2 / (2 sigma**2))`` to every pixel whose centre lies at
distance ``s < cutoff * r`` from it, with ``sigma = sigma_factor * r``.
Accumulation is purely additive and, for each pixel, follows ascending
particle index, so the tiled renderer and the brute-force reference agree
bit for bit.
"""

from __future__ import annotations

import itertools
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ConfigError
from .mempool import (
    H_CAPACITY,
    H_COUNT,
    H_NBYTES,
    H_OFFSET,
    H_ORIGIN,
    INITIAL_INDEX_CAPACITY,
    ORIGIN_POOL,
    IndexArrays,
    Pool,
    index_grow_nb,
    system_bytes_nb,
)
from .model import Image

DEFAULT_TILE_SIZE = 40
DEFAULT_SIGMA_FACTOR = 1.0 / 3.0
DEFAULT_CUTOFF_FACTOR = 0.75
#: pixels accumulated per packed multiply-add step (5 x RGB = 15 lanes of 16)
PACK_WIDTH = 5
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class TileGrid:
    width: int
    height: int
    tile_size: int
    nx: int
    ny: int

    @property
    def ntiles(self):
        return self.nx * self.ny

    def rect(self, tile):
        """``(x0, x1, y0, y1)`` half-open pixel bounds of ``tile``."""
        ty, tx = divmod(tile, self.nx)
        ts = self.tile_size
        return tx * ts, min((tx + 1) * ts, self.width), ty * ts, min((ty + 1) * ts, self.height)

    def center(self, tile):
        x0, x1, y0, y1 = self.rect(tile)
        return 0.5 * (x0 + x1), 0.5 * (y0 + y1)

    def rects(self):
        return np.array([self.rect(t) for t in range(self.ntiles)], dtype=np.int64).reshape(-1, 4)


def decompose(width, height, tile_size):
    if min(width, height, tile_size) < 1:
        raise ConfigError(f"invalid tiling {width}x{height} / {tile_size}")
    return TileGrid(
        int(width), int(height), int(tile_size),
        -(-int(width) // int(tile_size)), -(-int(height) // int(tile_size)),
    )


# -- assignment -------------------------------------------------------------


@nb.njit(nogil=True, cache=True)
def _assign_kernel(x, y, r, active, lo, hi, nx, ny, ts, width, height, cutoff,
                   hdr, region, words, free_list, meta, fb_table):
    half_diag = SQRT2 * ts / 2.0
    for p in range(lo, hi):
        if not active[p]:
            continue
        px = np.float64(x[p])
        py = np.float64(y[p])
        c = cutoff * np.float64(r[p])
        tx0 = int(max(math.floor((px - c) / ts), 0.0))
        tx1 = int(min(math.floor((px + c) / ts), nx - 1))
        ty0 = int(max(math.floor((py - c) / ts), 0.0))
        ty1 = int(min(math.floor((py + c) / ts), ny - 1))
        threshold = c + half_diag
        for tx in range(tx0, tx1 + 1):
            cx = 0.5 * (tx * ts + min((tx + 1) * ts, width))
            for ty in range(ty0, ty1 + 1):
                cy = 0.5 * (ty * ts + min((ty + 1) * ts, height))
                if math.sqrt((px - cx) ** 2 + (py - cy) ** 2) < threshold:
                    t = ty * nx + tx
                    # inline push; see mempool.index_push_nb
                    count = hdr[t, H_COUNT]
                    if count == hdr[t, H_CAPACITY]:
                        index_grow_nb(hdr, t, max(2 * count, INITIAL_INDEX_CAPACITY),
                                      region, free_list, meta, fb_table)
                    if hdr[t, H_ORIGIN] == ORIGIN_POOL:
                        words[(hdr[t, H_OFFSET] >> 2) + count] = p
                    else:
                        system_bytes_nb(hdr[t, H_OFFSET], hdr[t, H_NBYTES]).view(np.int32)[count] = p
                    hdr[t, H_COUNT] = count + 1


class TileLists:
    """One worker's per-tile particle index lists (the tile work items)."""

    def __init__(self, grid, pool, worker=0):
        self.grid = grid
        self.pool = pool
        self.worker = worker
        self.arrays = IndexArrays(pool, grid.ntiles)

    def indices(self, tile):
        return self.arrays.get(tile)

    def counts(self):
        return self.arrays.hdr[:, H_COUNT].copy()

    def clear(self):
        self.arrays.clear()

    def release(self):
        self.arrays.release()

    def assign(self, chunk, lo, hi, cutoff_factor=DEFAULT_CUTOFF_FACTOR):
        g = self.grid
        _assign_kernel(
            chunk.x, chunk.y, chunk.r, chunk.active, lo, hi,
            g.nx, g.ny, g.tile_size, g.width, g.height, float(cutoff_factor),
            *self.arrays.args(),
        )


def partition(n, workers):
    """Contiguous ``[lo, hi)`` particle ranges, one per worker."""
    edges = np.linspace(0, n, workers + 1).round().astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def make_worker_pools(workers, pool_bytes, alignment=64, debug=True):
    return [Pool(pool_bytes, alignment, debug=debug, owner=w) for w in range(workers)]


def assign_particles_to_tiles(chunk, grid, workers=1, lists=None, executor=None,
                              cutoff_factor=DEFAULT_CUTOFF_FACTOR, pool_bytes=8 << 20):
    """Build per-worker per-tile index lists for the active particles.

    Worker ``w`` handles the ``w``-th contiguous slice of the chunk and
    pushes into its own pool.  Pass ``lists`` to reuse existing
    :class:`TileLists` (they are cleared first); otherwise fresh ones with
    ``pool_bytes`` pools are created.
    """
    if lists is None:
        lists = [TileLists(grid, p, w) for w, p in enumerate(make_worker_pools(workers, pool_bytes))]
    else:
        for tl in lists:
            tl.clear()
    ranges = partition(chunk.count, len(lists))
    jobs = [(tl.assign, chunk, lo, hi, cutoff_factor) for tl, (lo, hi) in zip(lists, ranges)]
    _run_jobs(jobs, executor)
    return lists


def _run_jobs(jobs, executor):
    if executor is None or len(jobs) == 1:
        for fn, *args in jobs:
            fn(*args)
    else:
        for fut in [executor.submit(fn, *args) for fn, *args in jobs]:
            fut.result()


# -- splatting ----------------------------------------------------------------


@nb.njit(nogil=True, cache=True, inline="always")
def _footprint(rr, sigma_factor, cutoff):
    c = cutoff * rr
    sigma = sigma_factor * rr
    return c * c, 2.0 * sigma * sigma


@nb.njit(nogil=True, cache=True)
def _splat_scalar(idx, x, y, r, red, green, blue, pix, x0, x1, y0, y1, sigma_factor, cutoff):
    for k in range(idx.shape[0]):
        p = idx[k]
        px = np.float64(x[p])
        py = np.float64(y[p])
        rr = np.float64(r[p])
        c2, denom = _footprint(rr, sigma_factor, cutoff)
        c = math.sqrt(c2)
        i0 = int(max(x0, math.floor(px - c - 0.5)))
        i1 = int(min(x1 - 1, math.ceil(px + c - 0.5)))
        j0 = int(max(y0, math.floor(py - c - 0.5)))
        j1 = int(min(y1 - 1, math.ceil(py + c - 0.5)))
        cr = red[p]
        cg = green[p]
        cb = blue[p]
        for j in range(j0, j1 + 1):
            dy = (j + 0.5) - py
            dy2 = dy * dy
            for i in range(i0, i1 + 1):
                dx = (i + 0.5) - px
                s2 = dx * dx + dy2
                if s2 < c2:
                    w = math.exp(-s2 / denom)
                    pix[j, i, 0] += np.float32(cr * w)
                    pix[j, i, 1] += np.float32(cg * w)
                    pix[j, i, 2] += np.float32(cb * w)


@nb.njit(nogil=True, cache=True)
def _splat_packed(idx, x, y, r, red, green, blue, pix, x0, x1, y0, y1, sigma_factor, cutoff):
    # colour and weight registers for PACK_WIDTH pixels, then one masked
    # multiply-add sweep over the packed lanes
    wv = np.zeros(PACK_WIDTH, np.float64)
    cv = np.zeros(3 * PACK_WIDTH, np.float32)
    for k in range(idx.shape[0]):
        p = idx[k]
        px = np.float64(x[p])
        py = np.float64(y[p])
        rr = np.float64(r[p])
        c2, denom = _footprint(rr, sigma_factor, cutoff)
        c = math.sqrt(c2)
        i0 = int(max(x0, math.floor(px - c - 0.5)))
        i1 = int(min(x1 - 1, math.ceil(px + c - 0.5)))
        j0 = int(max(y0, math.floor(py - c - 0.5)))
        j1 = int(min(y1 - 1, math.ceil(py + c - 0.5)))
        for lane in range(PACK_WIDTH):
            cv[3 * lane] = red[p]
            cv[3 * lane + 1] = green[p]
            cv[3 * lane + 2] = blue[p]
        for j in range(j0, j1 + 1):
            dy = (j + 0.5) - py
            dy2 = dy * dy
            i = i0
            while i <= i1:
                n = min(PACK_WIDTH, i1 + 1 - i)
                hit = False
                for lane in range(n):
                    dx = (i + lane + 0.5) - px
                    s2 = dx * dx + dy2
                    if s2 < c2:
                        wv[lane] = math.exp(-s2 / denom)
                        hit = True
                    else:
                        wv[lane] = -1.0
                if hit:
                    for lane in range(n):
                        if wv[lane] >= 0.0:
                            w = wv[lane]
                            pix[j, i + lane, 0] += np.float32(cv[3 * lane] * w)
                            pix[j, i + lane, 1] += np.float32(cv[3 * lane + 1] * w)
                            pix[j, i + lane, 2] += np.float32(cv[3 * lane + 2] * w)
                i += n


def render_tile(tile, lists, chunk, img, grid, blocked=True,
                sigma_factor=DEFAULT_SIGMA_FACTOR, cutoff_factor=DEFAULT_CUTOFF_FACTOR):
    """Splat every listed particle into the pixels of one tile.

    Lists are visited in worker order; since workers own ascending
    contiguous slices this is ascending particle order.
    """
    x0, x1, y0, y1 = grid.rect(tile)
    kernel = _splat_packed if blocked else _splat_scalar
    for tl in lists:
        idx = tl.indices(tile)
        if len(idx):
            kernel(idx, chunk.x, chunk.y, chunk.r, chunk.red, chunk.green, chunk.blue,
                   img.pixels, x0, x1, y0, y1, float(sigma_factor), float(cutoff_factor))


class TileQueue:
    """Shared cursor over a fixed tile order; the only mutable shared state."""

    def __init__(self, ntiles):
        self.ntiles = ntiles
        self._counter = itertools.count()
        self._lock = threading.Lock()

    def next(self):
        with self._lock:
            t = next(self._counter)
        return t if t < self.ntiles else None


def render_tiles(lists, chunk, img, grid, workers=1, executor=None, blocked=True,
                 sigma_factor=DEFAULT_SIGMA_FACTOR, cutoff_factor=DEFAULT_CUTOFF_FACTOR):
    """Render all tiles into ``img``; each worker repeatedly takes the next
    tile from a shared queue, so only one worker ever writes a given pixel."""
    if img.pixels.shape != (grid.height, grid.width, 3):
        raise ConfigError("image does not match tile grid")
    queue = TileQueue(grid.ntiles)

    def drain():
        while (t := queue.next()) is not None:
            render_tile(t, lists, chunk, img, grid, blocked, sigma_factor, cutoff_factor)

    if workers <= 1:
        drain()
        return
    own = executor is None
    if own:
        executor = ThreadPoolExecutor(workers)
    try:
        for fut in [executor.submit(drain) for _ in range(workers)]:
            fut.result()
    finally:
        if own:
            executor.shutdown()


# -- oracle and compositing ---------------------------------------------------


@nb.njit(nogil=True, cache=True)
def _reference_kernel(x, y, r, red, green, blue, active, pix, width, height, sigma_factor, cutoff):
    for p in range(x.shape[0]):
        if not active[p]:
            continue
        px = np.float64(x[p])
        py = np.float64(y[p])
        rr = np.float64(r[p])
        c2, denom = _footprint(rr, sigma_factor, cutoff)
        c = math.sqrt(c2)
        # generous window; membership is decided by the distance test alone
        i0 = int(max(0.0, math.floor(px - c) - 2))
        i1 = int(min(width - 1, math.ceil(px + c) + 2))
        j0 = int(max(0.0, math.floor(py - c) - 2))
        j1 = int(min(height - 1, math.ceil(py + c) + 2))
        for j in range(j0, j1 + 1):
            dy = (j + 0.5) - py
            for i in range(i0, i1 + 1):
                dx = (i + 0.5) - px
                s2 = dx * dx + dy * dy
                if s2 < c2:
                    w = math.exp(-s2 / denom)
                    pix[j, i, 0] += np.float32(red[p] * w)
                    pix[j, i, 1] += np.float32(green[p] * w)
                    pix[j, i, 2] += np.float32(blue[p] * w)


def reference_render(chunk, width, height, sigma_factor=DEFAULT_SIGMA_FACTOR,
                     cutoff_factor=DEFAULT_CUTOFF_FACTOR, img=None):
    """Single-threaded brute-force render of all active particles."""
    img = Image.blank(width, height) if img is None else img
    _reference_kernel(chunk.x, chunk.y, chunk.r, chunk.red, chunk.green, chunk.blue, chunk.active,
                      img.pixels, int(width), int(height), float(sigma_factor), float(cutoff_factor))
    return img


def composite(dst, src):
    if (dst.width, dst.height) != (src.width, src.height):
        raise ConfigError(
            f"cannot composite {src.width}x{src.height} onto {dst.width}x{dst.height}"
        )
    dst.pixels += src.pixels
    return dst


def footprint_mass(px, py, r, width, height, sigma_factor=DEFAULT_SIGMA_FACTOR,
                   cutoff_factor=DEFAULT_CUTOFF_FACTOR):
    """Sum of footprint weights over pixel centres (float64, numpy)."""
    c = cutoff_factor * r
    sigma = sigma_factor * r
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    s2 = (xs[None, :] - px) ** 2 + (ys[:, None] - py) ** 2
    w = np.exp(-s2 / (2 * sigma * sigma))
    return float(w[s2 < c * c].sum())
