"""File input and output.

Particle files are little-endian::

    b"SPLT" | u32 version=1 | u64 count | u32 ptype_count
    count x { f32 x, y, z, r, q, reserved, reserved | u32 ptype }

Colormaps are text lines ``t r g b``; scene files are lines
``frame key mode value...``; parameter files are ``key=value`` lines.
``#`` starts a comment everywhere.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    IngestError,
    MissingFileError,
    ParseError,
    TruncatedError,
    VersionError,
)
from .model import Camera, ColorMap

MAGIC = b"SPLT"
VERSION = 1
HEADER = struct.Struct("<4sIQI")
RECORD_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "<f4"), ("q", "<f4"),
        ("reserved0", "<f4"), ("reserved1", "<f4"), ("ptype", "<u4"),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize  # 32


# -- particle datasets -------------------------------------------------------


class DatasetHandle:
    """Sequential reader over one particle file. Not thread-safe."""

    def __init__(self, path, total_count, ptype_count, fh):
        self.path = Path(path)
        self.total_count = total_count
        self.ptype_count = ptype_count
        self.cursor = 0
        self.record_dtype = RECORD_DTYPE
        self._fh = fh
        self._scratch = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def rewind(self):
        self.cursor = 0

    @property
    def remaining(self):
        return self.total_count - self.cursor

    def _records(self, start, n):
        if self._scratch is None or len(self._scratch) < n:
            self._scratch = np.empty(n, dtype=RECORD_DTYPE)
        buf = self._scratch[:n]
        self._fh.seek(HEADER.size + start * RECORD_SIZE)
        got = self._fh.readinto(memoryview(buf).cast("B"))
        if got != n * RECORD_SIZE:
            raise TruncatedError(
                f"{self.path}: short read at particle {start} ({got} of {n * RECORD_SIZE} bytes)"
            )
        return buf


def open_dataset(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: no such file")
    fh = open(path, "rb")
    try:
        raw = fh.read(HEADER.size)
        if len(raw) < 4 or raw[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
        if len(raw) < HEADER.size:
            raise TruncatedError(f"{path}: truncated header ({len(raw)} bytes)")
        _, version, count, ptypes = HEADER.unpack(raw)
        if version != VERSION:
            raise VersionError(f"{path}: unsupported version {version}")
        size = os.fstat(fh.fileno()).st_size
        if size - HEADER.size < count * RECORD_SIZE:
            raise TruncatedError(
                f"{path}: header declares {count} particles but payload holds "
                f"{(size - HEADER.size) // RECORD_SIZE}"
            )
    except BaseException:
        fh.close()
        raise
    return DatasetHandle(path, count, ptypes, fh)


def read_chunk(handle, dest):
    """Fill ``dest`` with the next particles; return how many (0 at end).

    Colours are zeroed and ``active`` set.  On a read error the cursor does
    not move and ``dest`` contents are undefined.
    """
    n = min(dest.capacity, handle.remaining)
    if n <= 0:
        dest.resize(0)
        return 0
    try:
        rec = handle._records(handle.cursor, n)
    except OSError as exc:
        raise IngestError(f"{handle.path}: {exc}") from exc
    dest.resize(n)
    for name in ("x", "y", "z", "r", "q"):
        dest.storage(name)[:n] = rec[name]
    dest.storage("ptype")[:n] = rec["ptype"]
    for name in ("red", "green", "blue"):
        dest.storage(name)[:n] = 0
    dest.storage("active")[:n] = True
    handle.cursor += n
    return n


def read_all(path):
    """One-shot reader returning the raw record array (test reference)."""
    with open(path, "rb") as fh:
        _, _, count, _ = HEADER.unpack(fh.read(HEADER.size))
        return np.frombuffer(fh.read(count * RECORD_SIZE), dtype=RECORD_DTYPE).copy()


def write_dataset(path, x, y, z, r, q, ptype=None, ptype_count=None):
    n = len(x)
    rec = np.zeros(n, dtype=RECORD_DTYPE)
    rec["x"], rec["y"], rec["z"], rec["r"], rec["q"] = x, y, z, r, q
    if ptype is not None:
        rec["ptype"] = ptype
    if ptype_count is None:
        ptype_count = int(rec["ptype"].max()) + 1 if n else 1
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, ptype_count))
        fh.write(rec.tobytes())


# -- colormaps ----------------------------------------------------------------


def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if text:
                yield lineno, text


def load_colormap(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: no such file")
    positions, colors = [], []
    last = 0
    for lineno, text in _data_lines(path):
        last = lineno
        parts = text.split()
        if len(parts) != 4:
            raise ParseError(path, lineno, f"expected 't r g b', got {text!r}")
        try:
            t, r, g, b = map(float, parts)
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric entry {text!r}") from None
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in (t, r, g, b)):
            raise ParseError(path, lineno, "values must lie in [0, 1]")
        if positions and t <= positions[-1]:
            raise ParseError(path, lineno, f"position {t} not above previous {positions[-1]}")
        positions.append(t)
        colors.append((r, g, b))
    if len(positions) < 2:
        raise ParseError(path, last, f"colormap needs at least 2 entries, found {len(positions)}")
    return ColorMap(positions, colors)


def write_colormap(path, cmap):
    with open(path, "w") as fh:
        for t, r, g, b in cmap.entries:
            fh.write(f"{t!r} {r!r} {g!r} {b!r}\n")


# -- frame configuration ---------------------------------------------------------


def _vec3(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ValueError(f"expected 3 components, got {text!r}")
    return tuple(float(p) for p in parts)


def _floats(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _paths(text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class FrameConfig:
    """Everything needed to render one frame."""

    infile: str = ""
    outfile: str = "frame.ppm"
    width: int = 512
    height: int = 512
    camera_position: tuple = (0.0, 0.0, -10.0)
    camera_lookat: tuple = (0.0, 0.0, 0.0)
    camera_sky: tuple = (0.0, 1.0, 0.0)
    fov: float = 45.0
    brightness: tuple = (1.0,)
    colormap: tuple = ()
    log_q: bool = False
    weight_by_q: bool = True
    tile_size: int = 40
    chunk_capacity: int = 1 << 20
    workers: int = 1
    block_width: int = 16
    blocked: bool = True
    sigma_factor: float = 1.0 / 3.0
    cutoff_factor: float = 0.75
    pool_mb: float = 64.0
    pool_alignment: int = 64
    accumulate: str = "inplace"
    timing_csv: str = ""

    @property
    def camera(self):
        return Camera(self.camera_position, self.camera_lookat, self.camera_sky, self.fov)

    def validate(self):
        if self.tile_size < 1 or self.width < 1 or self.height < 1:
            raise ConfigError("width, height and tile_size must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.chunk_capacity < 1:
            raise ConfigError("chunk_capacity must be >= 1")
        if self.block_width < 1:
            raise ConfigError("block_width must be >= 1")
        if self.sigma_factor <= 0 or self.cutoff_factor <= 0:
            raise ConfigError("sigma_factor and cutoff_factor must be positive")
        if self.pool_mb <= 0:
            raise ConfigError("pool_mb must be positive")
        if self.accumulate not in ("inplace", "composite"):
            raise ConfigError(f"accumulate must be 'inplace' or 'composite', not {self.accumulate!r}")
        self.camera.validate()
        return self

    def with_overrides(self, values):
        return replace(self, **values)


PARSERS = {
    "infile": str,
    "outfile": str,
    "width": int,
    "height": int,
    "camera_position": _vec3,
    "camera_lookat": _vec3,
    "camera_sky": _vec3,
    "fov": float,
    "brightness": _floats,
    "colormap": _paths,
    "log_q": _bool,
    "weight_by_q": _bool,
    "tile_size": int,
    "chunk_capacity": int,
    "workers": int,
    "block_width": int,
    "blocked": _bool,
    "sigma_factor": float,
    "cutoff_factor": float,
    "pool_mb": float,
    "pool_alignment": int,
    "accumulate": str,
    "timing_csv": str,
}
assert set(PARSERS) == {f.name for f in fields(FrameConfig)}

#: keys that may be interpolated linearly in a scene
NUMERIC_KEYS = {
    "camera_position", "camera_lookat", "camera_sky", "fov", "brightness",
    "sigma_factor", "cutoff_factor",
}


def parse_value(key, text):
    if key not in PARSERS:
        raise ConfigError(f"unknown parameter {key!r}")
    try:
        return PARSERS[key](text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_overrides(items):
    """``["key=value", ...]`` -> dict of parsed values."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(key.strip(), value)
    return out


def load_params(path):
    """Parse a ``key=value`` parameter file into a dict of parsed values.

    Relative file paths in the file are resolved against its directory.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: no such file")
    values = {}
    for lineno, text in _data_lines(path):
        if "=" not in text:
            raise ParseError(path, lineno, f"expected key=value, got {text!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    base = path.parent
    for key in ("infile", "outfile", "timing_csv"):
        if values.get(key) and not os.path.isabs(values[key]):
            values[key] = str(base / values[key])
    if "colormap" in values:
        values["colormap"] = tuple(p if os.path.isabs(p) else str(base / p) for p in values["colormap"])
    return values


ENV_WORKERS = "SPLATCHER_WORKERS"


def build_config(params=None, scene_values=None, cli=None, env=None):
    """Merge layers, lowest precedence first: built-in defaults, the
    ``SPLATCHER_WORKERS`` environment variable, parameter file, scene, CLI."""
    env = os.environ if env is None else env
    merged = {}
    if env.get(ENV_WORKERS):
        merged["workers"] = parse_value("workers", env[ENV_WORKERS])
    for layer in (params, scene_values, cli):
        if layer:
            merged.update(layer)
    return FrameConfig(**merged).validate()


# -- scenes -------------------------------------------------------------------


@dataclass
class SceneSequence:
    """Keyframed overrides. ``tracks[key]`` is a frame-sorted list of
    ``(frame, value)``; ``modes[key]`` is ``"step"`` or ``"linear"``."""

    tracks: dict = field(default_factory=dict)
    modes: dict = field(default_factory=dict)

    @property
    def frames(self):
        return sorted({f for track in self.tracks.values() for f, _ in track})

    def add(self, frame, key, mode, value):
        if key not in PARSERS:
            raise ConfigError(f"unknown scene key {key!r}")
        if mode not in ("step", "linear"):
            raise ConfigError(f"unknown interpolation mode {mode!r}")
        if mode == "linear" and key not in NUMERIC_KEYS:
            raise ConfigError(f"key {key!r} cannot be interpolated linearly")
        if self.modes.setdefault(key, mode) != mode:
            raise ConfigError(f"key {key!r} mixes interpolation modes")
        track = self.tracks.setdefault(key, [])
        if track and frame <= track[-1][0]:
            raise ConfigError(f"frames for {key!r} must be strictly increasing ({frame} after {track[-1][0]})")
        track.append((frame, value))


def load_scene(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: no such file")
    scene = SceneSequence()
    for lineno, text in _data_lines(path):
        parts = text.split(None, 3)
        if len(parts) < 4:
            raise ParseError(path, lineno, f"expected 'frame key mode value', got {text!r}")
        frame_s, key, mode, value_s = parts
        try:
            frame = int(frame_s)
        except ValueError:
            raise ParseError(path, lineno, f"bad frame index {frame_s!r}") from None
        if frame < 0:
            raise ParseError(path, lineno, "frame index must be >= 0")
        try:
            if mode == "linear" and key not in NUMERIC_KEYS:
                raise ConfigError(f"non-numeric key {key!r} cannot be interpolated linearly")
            value = parse_value(key, value_s)
            scene.add(frame, key, mode, value)
        except ConfigError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return scene


def _lerp(a, b, t):
    if isinstance(a, tuple):
        if len(a) != len(b):
            raise ConfigError("cannot interpolate vectors of different lengths")
        return tuple((1.0 - t) * u + t * v for u, v in zip(a, b))
    return (1.0 - t) * a + t * b


def scene_values(scene, frame):
    """Override values in effect at ``frame``."""
    if frame < 0:
        raise ConfigError(f"frame must be >= 0, got {frame}")
    out = {}
    for key, track in scene.tracks.items():
        # latest keyframe <= frame, clamped to the first
        k = 0
        while k + 1 < len(track) and track[k + 1][0] <= frame:
            k += 1
        f0, v0 = track[k]
        if scene.modes[key] == "linear" and frame > f0 and k + 1 < len(track):
            f1, v1 = track[k + 1]
            out[key] = _lerp(v0, v1, (frame - f0) / (f1 - f0))
        else:
            out[key] = v0
    return out


def resolve_frame(scene, base, frame):
    return base.with_overrides(scene_values(scene, frame)).validate()


# -- images -----------------------------------------------------------------------


def ppm_bytes(buf):
    buf = np.ascontiguousarray(buf, dtype=np.uint8)
    if buf.ndim != 3 or buf.shape[2] != 3:
        raise ValueError(f"expected HxWx3 uint8 buffer, got shape {buf.shape}")
    h, w, _ = buf.shape
    return b"P6\n%d %d\n255\n" % (w, h) + buf.tobytes()


def write_image(img, buf, path):
    """Write an 8-bit ``buf`` (from :func:`splatcher.pipeline.tonemap`) as
    binary PPM; ``img`` supplies the expected dimensions."""
    if img is not None and buf.shape[:2] != (img.height, img.width):
        raise ValueError(f"buffer {buf.shape[:2]} does not match image {img.height}x{img.width}")
    data = ppm_bytes(buf)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise IngestError(f"{path}: truncated PPM header")
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise IngestError(f"{path}: not a maxval-255 P6 file")
    w, h = int(tokens[1]), int(tokens[2])
    payload = data[pos + 1:]
    if len(payload) != w * h * 3:
        raise IngestError(f"{path}: expected {w * h * 3} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()
