"""Shared domain types: particles, chunks, images, cameras and colormaps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

#: Byte alignment of every chunk field array (16 single-precision lanes).
SIMD_ALIGNMENT = 64

FLOAT_FIELDS = ("x", "y", "z", "r", "q", "red", "green", "blue")
FIELDS = FLOAT_FIELDS + ("ptype", "active")
FIELD_DTYPES = {name: np.float32 for name in FLOAT_FIELDS}
FIELD_DTYPES["ptype"] = np.int32
FIELD_DTYPES["active"] = np.bool_


def aligned_empty(n, dtype, alignment=SIMD_ALIGNMENT):
    """Uninitialised 1-d array of ``n`` elements whose base address is a
    multiple of ``alignment`` bytes."""
    dtype = np.dtype(dtype)
    nbytes = max(n, 1) * dtype.itemsize
    raw = np.empty(nbytes + alignment, dtype=np.uint8)
    pad = (-raw.ctypes.data) % alignment
    return raw[pad:pad + n * dtype.itemsize].view(dtype)


class Particle(NamedTuple):
    x: float
    y: float
    z: float
    r: float
    q: float
    red: float = 0.0
    green: float = 0.0
    blue: float = 0.0
    ptype: int = 0
    active: bool = True


class ParticleChunk:
    """Bounded structure-of-arrays particle batch.

    Field attributes (``chunk.x``, ``chunk.q``...) are views of length
    ``count``; the backing storage always has ``capacity`` slots.
    """

    def __init__(self, capacity, alignment=SIMD_ALIGNMENT):
        capacity = int(capacity)
        if capacity <= 0:
            raise ConfigError(f"chunk capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.alignment = alignment
        self.count = 0
        try:
            self._store = {
                name: aligned_empty(capacity, FIELD_DTYPES[name], alignment)
                for name in FIELDS
            }
        except MemoryError as exc:
            raise MemoryError(f"cannot allocate chunk of {capacity} particles") from exc

    def __len__(self):
        return self.count

    def __getattr__(self, name):
        store = self.__dict__.get("_store")
        if store is not None and name in store:
            return store[name][: self.count]
        raise AttributeError(name)

    def storage(self, name):
        """Full-capacity backing array of field ``name``."""
        return self._store[name]

    def resize(self, count):
        if not 0 <= count <= self.capacity:
            raise ValueError(f"count {count} outside [0, {self.capacity}]")
        self.count = count

    def clear(self):
        self.count = 0

    def get(self, i):
        if not 0 <= i < self.count:
            raise IndexError(i)
        s = self._store
        return Particle(
            *(s[name][i].item() for name in FLOAT_FIELDS),
            ptype=int(s["ptype"][i]),
            active=bool(s["active"][i]),
        )

    def set(self, i, p):
        if not 0 <= i < self.count:
            raise IndexError(i)
        for name, value in zip(FIELDS, p):
            self._store[name][i] = value

    def copy(self):
        out = ParticleChunk(self.capacity, self.alignment)
        out.count = self.count
        for name in FIELDS:
            out._store[name][: self.count] = self._store[name][: self.count]
        return out

    @classmethod
    def from_arrays(cls, capacity=None, **arrays):
        """Build a chunk from equal-length field arrays.

        Missing colour fields default to zero, ``ptype`` to 0 and
        ``active`` to True.
        """
        n = len(next(iter(arrays.values())))
        chunk = cls(capacity or max(n, 1))
        chunk.resize(n)
        for name in FIELDS:
            dest = chunk._store[name][:n]
            if name in arrays:
                dest[:] = arrays[name]
            elif name == "active":
                dest[:] = True
            else:
                dest[:] = 0
        return chunk


def chunk_create(capacity, alignment=SIMD_ALIGNMENT):
    return ParticleChunk(capacity, alignment)


@dataclass
class Image:
    width: int
    height: int
    pixels: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.pixels is None:
            self.pixels = np.zeros((self.height, self.width, 3), dtype=np.float32)
        elif self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixel array shape {self.pixels.shape} does not match "
                f"{self.width}x{self.height}"
            )

    @classmethod
    def blank(cls, width, height):
        return cls(width, height)

    def clear(self):
        self.pixels.fill(0.0)

    def copy(self):
        return Image(self.width, self.height, self.pixels.copy())


@dataclass(frozen=True)
class Camera:
    position: tuple = (0.0, 0.0, -10.0)
    lookat: tuple = (0.0, 0.0, 0.0)
    sky: tuple = (0.0, 1.0, 0.0)
    fov_deg: float = 45.0

    def validate(self):
        pos = np.asarray(self.position, dtype=np.float64)
        look = np.asarray(self.lookat, dtype=np.float64)
        sky = np.asarray(self.sky, dtype=np.float64)
        view = look - pos
        norm = np.linalg.norm(view)
        if not np.all(np.isfinite(np.concatenate([pos, look, sky]))):
            raise ConfigError("camera vectors must be finite")
        if norm == 0.0:
            raise ConfigError("camera position equals lookat")
        if np.linalg.norm(np.cross(view / norm, sky)) < 1e-9 * max(np.linalg.norm(sky), 1e-300):
            raise ConfigError("camera sky vector is parallel to the view direction")
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigError(f"fov must lie in (0, 180) degrees, got {self.fov_deg}")
        return self


class ColorMap:
    """Piecewise-linear map from [0, 1] to RGB."""

    def __init__(self, positions, colors):
        t = np.asarray(positions, dtype=np.float32)
        c = np.asarray(colors, dtype=np.float32).reshape(-1, 3)
        if t.ndim != 1 or len(t) != len(c):
            raise ConfigError("colormap positions and colors differ in length")
        if len(t) < 2:
            raise ConfigError("colormap needs at least two entries")
        if np.any(np.diff(t) <= 0):
            raise ConfigError("colormap positions must be strictly ascending")
        t = t.copy()
        t[0], t[-1] = 0.0, 1.0
        if np.any(np.diff(t) <= 0):
            raise ConfigError("colormap positions must be strictly ascending")
        self.positions = t
        self.colors = np.ascontiguousarray(c)

    def __len__(self):
        return len(self.positions)

    @property
    def entries(self):
        return [(float(t), *map(float, rgb)) for t, rgb in zip(self.positions, self.colors)]

    def lookup(self, q):
        """Scalar reference lookup in float32, same arithmetic as the kernels."""
        q = np.float32(q)
        t = self.positions
        k = int(np.searchsorted(t, q, side="right")) - 1
        k = min(max(k, 0), len(t) - 2)
        f = (q - t[k]) / (t[k + 1] - t[k])
        f = np.float32(min(max(f, np.float32(0)), np.float32(1)))
        one = np.float32(1)
        return self.colors[k] * (one - f) + self.colors[k + 1] * f

    @classmethod
    def grayscale(cls):
        return cls([0.0, 1.0], [[0, 0, 0], [1, 1, 1]])


def pack_colormaps(maps):
    """Stack per-ptype maps into padded arrays for the kernels.

    Returns ``(positions[P, M], colors[P, M, 3], sizes[P])``.
    """
    if not maps:
        raise ConfigError("at least one colormap is required")
    m = max(len(cm) for cm in maps)
    pos = np.ones((len(maps), m), dtype=np.float32)
    col = np.zeros((len(maps), m, 3), dtype=np.float32)
    sizes = np.zeros(len(maps), dtype=np.int64)
    for i, cm in enumerate(maps):
        n = len(cm)
        pos[i, :n] = cm.positions
        col[i, :n] = cm.colors
        sizes[i] = n
    return pos, col, sizes
