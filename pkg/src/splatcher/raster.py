"""Rasterisation: camera transform, perspective projection, clipping and
colour assignment.

Positions and radii are overwritten in place with image-space values.
Image space puts pixel ``(i, j)`` at the unit square ``[i, i+1) x [j, j+1)``
with its centre at ``(i + 0.5, j + 0.5)``; row 0 is the top of the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ConfigError
from .model import Camera, pack_colormaps

DEFAULT_BLOCK_WIDTH = 16
DEFAULT_CUTOFF_FACTOR = 0.75
NEAR_FRACTION = 1e-4


@dataclass(frozen=True)
class TransformParams:
    rotation: np.ndarray  # rows: right, down, forward
    translation: np.ndarray  # camera position; p' = R (p - t)
    focal: float
    cx: float
    cy: float
    near: float
    width: int
    height: int
    radius_scale: float = 1.0


def build_transform(camera, width, height, fov_deg=None):
    """Camera basis and projection constants for a ``width`` x ``height`` image."""
    if fov_deg is not None:
        camera = Camera(camera.position, camera.lookat, camera.sky, fov_deg)
    camera.validate()
    pos = np.asarray(camera.position, dtype=np.float64)
    look = np.asarray(camera.lookat, dtype=np.float64)
    sky = np.asarray(camera.sky, dtype=np.float64)
    view = look - pos
    dist = np.linalg.norm(view)
    forward = view / dist
    right = np.cross(forward, sky)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.array([right, down, forward])
    focal = (height / 2.0) / math.tan(math.radians(camera.fov_deg) / 2.0)
    return TransformParams(
        rotation=rot,
        translation=pos,
        focal=focal,
        cx=width / 2.0,
        cy=height / 2.0,
        near=NEAR_FRACTION * dist,
        width=int(width),
        height=int(height),
    )


def project_point(params, point):
    """Image-space ``(x, y, depth)`` of one world point (float64)."""
    p = params.rotation @ (np.asarray(point, dtype=np.float64) - params.translation)
    d = p[2]
    return params.cx + params.focal * p[0] / d, params.cy + params.focal * p[1] / d, d


@nb.njit(nogil=True, cache=True)
def _transform_kernel(x, y, z, r, active, rot, t, focal, cx, cy, near, rscale, width, height, cutoff, lo, hi):
    for i in range(lo, hi):
        px = x[i] - t[0]
        py = y[i] - t[1]
        pz = z[i] - t[2]
        ex = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz
        ey = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz
        d = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz
        rr = np.float64(r[i])
        ok = active[i] and d > near and rr > 0.0 and np.isfinite(rr)
        if d > near:
            sx = cx + focal * ex / d
            sy = cy + focal * ey / d
            sr = rr * rscale * focal / d
        else:
            sx = -1.0
            sy = -1.0
            sr = 0.0
        if ok:
            # footprint disk against the closed image rectangle
            c = cutoff * sr
            nx = min(max(sx, 0.0), width)
            ny = min(max(sy, 0.0), height)
            ok = (sx - nx) ** 2 + (sy - ny) ** 2 < c * c and np.isfinite(sx) and np.isfinite(sy)
        x[i] = sx
        y[i] = sy
        z[i] = d
        r[i] = sr
        active[i] = ok


def transform_particles(chunk, params, cutoff_factor=DEFAULT_CUTOFF_FACTOR, start=0, stop=None):
    """Roto-translate, project and clip ``chunk[start:stop]`` in place.

    After the call ``x, y`` are image coordinates, ``z`` is camera depth and
    ``r`` the projected radius in pixels.
    """
    stop = chunk.count if stop is None else stop
    _transform_kernel(
        chunk.x, chunk.y, chunk.z, chunk.r, chunk.active,
        params.rotation, params.translation, params.focal, params.cx, params.cy,
        params.near, params.radius_scale, float(params.width), float(params.height),
        float(cutoff_factor), start, stop,
    )


# -- colorize ---------------------------------------------------------------


@nb.njit(nogil=True, cache=True, inline="always")
def _segment(tpos, n, q):
    k = 0
    while k < n - 2 and tpos[k + 1] <= q:
        k += 1
    return k


@nb.njit(nogil=True, cache=True)
def _colorize_scalar(q, ptype, active, red, green, blue, mpos, mcol, msize, bright, weight_by_q, lo, hi):
    one = np.float32(1.0)
    zero = np.float32(0.0)
    for i in range(lo, hi):
        if not active[i]:
            continue
        m = ptype[i]
        qi = q[i]
        k = _segment(mpos[m], msize[m], qi)
        f = (qi - mpos[m, k]) / (mpos[m, k + 1] - mpos[m, k])
        f = min(max(f, zero), one)
        g = one - f
        scale = bright[m]
        if weight_by_q:
            scale = qi * bright[m]
        red[i] = (mcol[m, k, 0] * g + mcol[m, k + 1, 0] * f) * scale
        green[i] = (mcol[m, k, 1] * g + mcol[m, k + 1, 1] * f) * scale
        blue[i] = (mcol[m, k, 2] * g + mcol[m, k + 1, 2] * f) * scale


@nb.njit(nogil=True, cache=True)
def _colorize_blocked(q, ptype, active, red, green, blue, mpos, mcol, msize, bright, weight_by_q, lo, hi, width):
    one = np.float32(1.0)
    zero = np.float32(0.0)
    seg = np.empty(width, np.int64)
    frac = np.empty(width, np.float32)
    scale = np.empty(width, np.float32)
    lane_r = np.empty(width, np.float32)
    lane_g = np.empty(width, np.float32)
    lane_b = np.empty(width, np.float32)
    nfull = (hi - lo) // width
    for b in range(nfull):
        base = lo + b * width
        # lane-wise lookup
        for j in range(width):
            m = ptype[base + j]
            qi = q[base + j]
            k = _segment(mpos[m], msize[m], qi)
            seg[j] = k
            f = (qi - mpos[m, k]) / (mpos[m, k + 1] - mpos[m, k])
            frac[j] = min(max(f, zero), one)
            scale[j] = qi * bright[m] if weight_by_q else bright[m]
        # lane-wise blend
        for j in range(width):
            m = ptype[base + j]
            k = seg[j]
            f = frac[j]
            g = one - f
            lane_r[j] = (mcol[m, k, 0] * g + mcol[m, k + 1, 0] * f) * scale[j]
            lane_g[j] = (mcol[m, k, 1] * g + mcol[m, k + 1, 1] * f) * scale[j]
            lane_b[j] = (mcol[m, k, 2] * g + mcol[m, k + 1, 2] * f) * scale[j]
        # masked store
        for j in range(width):
            if active[base + j]:
                red[base + j] = lane_r[j]
                green[base + j] = lane_g[j]
                blue[base + j] = lane_b[j]
    _colorize_scalar(q, ptype, active, red, green, blue, mpos, mcol, msize, bright, weight_by_q, lo + nfull * width, hi)


class ColorTable:
    """Per-ptype colormaps and brightness packed for the kernels."""

    def __init__(self, maps, brightness):
        self.maps = list(maps)
        self.positions, self.colors, self.sizes = pack_colormaps(self.maps)
        b = np.atleast_1d(np.asarray(brightness, dtype=np.float32))
        if len(b) == 1 and len(self.maps) > 1:
            b = np.repeat(b, len(self.maps))
        if len(b) < len(self.maps):
            raise ConfigError(f"{len(self.maps)} colormaps but only {len(b)} brightness values")
        if not np.all(np.isfinite(b)) or np.any(b < 0):
            raise ConfigError("brightness must be finite and nonnegative")
        self.brightness = np.ascontiguousarray(b[: len(self.maps)])

    def __len__(self):
        return len(self.maps)

    def require(self, ntypes):
        """Raise :class:`ConfigError` unless ptypes ``0..ntypes-1`` have maps."""
        if ntypes > len(self.maps):
            raise ConfigError(f"dataset has {ntypes} particle types but only {len(self.maps)} colormaps")


def colorize(chunk, table, weight_by_q=True, block_width=DEFAULT_BLOCK_WIDTH, start=0, stop=None):
    """Assign RGB to active particles of ``chunk[start:stop]``.

    ``block_width <= 1`` selects the scalar kernel; otherwise particles are
    processed ``block_width`` at a time with a scalar remainder loop.  The
    two paths produce bitwise-identical colours.
    """
    stop = chunk.count if stop is None else stop
    if stop > start:
        ptype = chunk.ptype[start:stop]
        if ptype.min() < 0 or ptype.max() >= len(table):
            bad = int(ptype.max() if ptype.max() >= len(table) else ptype.min())
            raise ConfigError(f"no colormap for particle type {bad}")
    args = (
        chunk.q, chunk.ptype, chunk.active, chunk.red, chunk.green, chunk.blue,
        table.positions, table.colors, table.sizes, table.brightness, bool(weight_by_q), start, stop,
    )
    if block_width <= 1:
        _colorize_scalar(*args)
    else:
        _colorize_blocked(*args, int(block_width))


def colorize_scalar(chunk, table, weight_by_q=True):
    colorize(chunk, table, weight_by_q, block_width=1)


def colorize_blocked(chunk, table, weight_by_q=True, block_width=DEFAULT_BLOCK_WIDTH):
    colorize(chunk, table, weight_by_q, block_width=block_width)
