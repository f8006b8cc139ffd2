"""Frame orchestration: range pass, double-buffered render pass, tone
mapping, animation loop and the parameter-sweep benchmark."""

from __future__ import annotations

import csv
import math
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ingest
from .errors import ConfigError, IngestError, InvariantError, SplatError
from .ingest import open_dataset, read_chunk, resolve_frame, write_image
from .mempool import Pool
from .model import ColorMap, Image, ParticleChunk
from .preprocess import apply_transform, compute_range, log_range, normalize
from .raster import ColorTable, build_transform, colorize, transform_particles
from .render import TileLists, composite, decompose, partition, render_tiles

FAMILIES = (ConfigError, IngestError, InvariantError, SplatError)

KERNELS = ("read", "transform", "colorize", "assign", "render", "composite", "tonemap", "write")


@dataclass
class PipelineStats:
    kernel_times: dict = field(default_factory=lambda: dict.fromkeys(KERNELS, 0.0))
    particles: int = 0
    chunks: int = 0
    frames: int = 0
    read_busy: float = 0.0
    overlap: float = 0.0
    max_wait: float = 0.0
    wall: float = 0.0
    clamped: int = 0
    allocator: list = field(default_factory=list)
    per_frame: list = field(default_factory=list)

    def add(self, kernel, seconds):
        self.kernel_times[kernel] += seconds

    @property
    def overlap_ratio(self):
        """Fraction of reader busy time that ran concurrently with compute."""
        return self.overlap / self.read_busy if self.read_busy > 0 else 0.0

    def merge(self, other):
        for k, v in other.kernel_times.items():
            self.kernel_times[k] += v
        self.particles += other.particles
        self.chunks += other.chunks
        self.frames += other.frames
        self.read_busy += other.read_busy
        self.overlap += other.overlap
        self.max_wait = max(self.max_wait, other.max_wait)
        self.wall += other.wall
        self.clamped += other.clamped
        self.allocator = other.allocator or self.allocator
        self.per_frame.extend(other.per_frame)

    def average(self):
        n = max(self.frames, 1)
        return {k: v / n for k, v in self.kernel_times.items()}


# -- double buffering -------------------------------------------------------------

FILLING, READY, PROCESSING, DRAINED = "filling", "ready", "processing", "drained"


class ChunkSlot:
    def __init__(self, capacity):
        self.chunk = ParticleChunk(capacity)
        self.state = DRAINED
        self.end = False


def _interval_overlap(a, b):
    total = 0.0
    for s0, e0 in a:
        for s1, e1 in b:
            lo, hi = max(s0, s1), min(e0, e1)
            if hi > lo:
                total += hi - lo
    return total


class DoubleBuffer:
    """Two chunk slots; a reader thread fills one while the caller
    processes the other.

    Iterating yields filled chunks in file order.  Each slot cycles
    drained -> filling -> ready -> processing -> drained, and a slot is
    never read into while it is being processed.
    """

    def __init__(self, capacity, reader=read_chunk):
        self.slots = [ChunkSlot(capacity), ChunkSlot(capacity)]
        self.reader = reader
        self._cond = threading.Condition()
        self._error = None
        self._stop = False
        self.read_intervals = []
        self.compute_intervals = []
        self.waits = []

    def stream(self, handle):
        self._stop = False
        self._error = None
        for s in self.slots:
            s.state, s.end = DRAINED, False
        thread = threading.Thread(target=self._read_loop, args=(handle,), daemon=True)
        thread.start()
        i = 0
        try:
            while True:
                slot = self.slots[i % 2]
                t0 = time.perf_counter()
                with self._cond:
                    while slot.state != READY and self._error is None:
                        self._cond.wait()
                    if self._error is not None:
                        raise self._error
                    slot.state = PROCESSING
                t1 = time.perf_counter()
                self.waits.append(t1 - t0)
                if slot.end:
                    break
                yield slot.chunk
                self.compute_intervals.append((t1, time.perf_counter()))
                with self._cond:
                    slot.state = DRAINED
                    self._cond.notify_all()
                i += 1
        finally:
            with self._cond:
                self._stop = True
                for s in self.slots:
                    if s.state == PROCESSING:
                        s.state = DRAINED
                self._cond.notify_all()
            thread.join()

    def _read_loop(self, handle):
        i = 0
        try:
            while True:
                slot = self.slots[i % 2]
                with self._cond:
                    while slot.state != DRAINED and not self._stop:
                        self._cond.wait()
                    if self._stop:
                        return
                    slot.state = FILLING
                t0 = time.perf_counter()
                n = self.reader(handle, slot.chunk)
                self.read_intervals.append((t0, time.perf_counter()))
                with self._cond:
                    slot.end = n == 0
                    slot.state = READY
                    self._cond.notify_all()
                if n == 0:
                    return
                i += 1
        except BaseException as exc:  # surfaced in the consumer
            with self._cond:
                self._error = exc
                self._cond.notify_all()

    def account(self, stats):
        busy = sum(e - s for s, e in self.read_intervals)
        stats.read_busy += busy
        stats.overlap += _interval_overlap(self.read_intervals, self.compute_intervals)
        stats.add("read", sum(self.waits))
        stats.max_wait = max([stats.max_wait, *self.waits])
        self.read_intervals, self.compute_intervals, self.waits = [], [], []


# -- passes -------------------------------------------------------------------------


def range_pass(handle, config, capacity=None, reader=read_chunk):
    """Full-dataset range of q (after the optional log); rewinds ``handle``."""
    handle.rewind()
    buf = DoubleBuffer(capacity or config.chunk_capacity, reader)
    rng = None
    seen = 0
    fold = log_range if config.log_q else compute_range
    for chunk in buf.stream(handle):
        rng = fold(chunk, rng, offset=seen)
        seen += chunk.count
    handle.rewind()
    if seen == 0:
        raise ConfigError(f"{handle.path}: no particles")
    if rng is None:
        raise ConfigError(f"{handle.path}: log transform requested but no positive q values")
    return rng


def tonemap(img):
    """Clamp to [0, 1] and quantise to 8 bits, rounding halves up."""
    v = np.clip(img.pixels.astype(np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def load_color_table(config, ntypes):
    if config.colormap:
        maps = [ingest.load_colormap(p) for p in config.colormap]
    else:
        maps = [ColorMap.grayscale()]
    if len(maps) == 1 and ntypes > 1:
        maps = maps * ntypes
    table = ColorTable(maps, config.brightness)
    table.require(ntypes)
    return table


class Renderer:
    """Long-lived per-run state: worker pools, tile lists, chunk slots and
    the worker threads.  Reused across chunks and frames."""

    def __init__(self, workers=1, pool_mb=64.0, pool_alignment=64, reader=read_chunk):
        self.workers = workers
        self.pools = [
            Pool(int(pool_mb * 1024 * 1024), pool_alignment, debug=False, owner=w)
            for w in range(workers)
        ]
        self.executor = ThreadPoolExecutor(workers) if workers > 1 else None
        self.reader = reader
        self._lists = None
        self._grid = None
        self._buffer = None
        self._scratch = None

    def close(self):
        if self._lists:
            for tl in self._lists:
                tl.release()
        if self.executor is not None:
            self.executor.shutdown()
            self.executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def lists_for(self, grid):
        if grid != self._grid:
            if self._lists:
                for tl in self._lists:
                    tl.release()
            self._lists = [TileLists(grid, p, w) for w, p in enumerate(self.pools)]
            self._grid = grid
        return self._lists

    def buffer_for(self, capacity):
        if self._buffer is None or self._buffer.slots[0].chunk.capacity != capacity:
            self._buffer = DoubleBuffer(capacity, self.reader)
        return self._buffer

    def _parallel(self, fn, ranges):
        """Run ``fn(worker, lo, hi)`` for every worker's particle range."""
        if self.executor is None or len(ranges) == 1:
            for w, (lo, hi) in enumerate(ranges):
                fn(w, lo, hi)
        else:
            for fut in [self.executor.submit(fn, w, lo, hi) for w, (lo, hi) in enumerate(ranges)]:
                fut.result()

    def frame(self, config, handle, rng, stats=None):
        """Render one frame; returns ``(Image, PipelineStats)``."""
        if config.workers != self.workers:
            raise ConfigError("renderer was built for a different worker count")
        config.validate()
        stats = stats or PipelineStats()
        t_start = time.perf_counter()
        table = load_color_table(config, max(handle.ptype_count, 1))
        params = build_transform(config.camera, config.width, config.height)
        grid = decompose(config.width, config.height, config.tile_size)
        lists = self.lists_for(grid)
        img = Image.blank(config.width, config.height)
        target = img
        if config.accumulate == "composite":
            if self._scratch is None or self._scratch.pixels.shape != img.pixels.shape:
                self._scratch = Image.blank(config.width, config.height)
            target = self._scratch
        buf = self.buffer_for(config.chunk_capacity)
        handle.rewind()
        clamped = 0
        try:
            for chunk in buf.stream(handle):
                ranges = partition(chunk.count, self.workers)
                t = time.perf_counter()
                clamped += apply_transform(chunk, config.log_q, floor=rng.min)
                normalize(chunk, rng)
                self._parallel(lambda w, lo, hi: transform_particles(chunk, params, config.cutoff_factor, lo, hi), ranges)
                stats.add("transform", time.perf_counter() - t)
                t = time.perf_counter()
                bw = config.block_width if config.blocked else 1
                self._parallel(lambda w, lo, hi: colorize(chunk, table, config.weight_by_q, bw, lo, hi), ranges)
                stats.add("colorize", time.perf_counter() - t)
                t = time.perf_counter()
                for tl in lists:
                    tl.clear()
                self._parallel(lambda w, lo, hi: lists[w].assign(chunk, lo, hi, config.cutoff_factor), ranges)
                stats.add("assign", time.perf_counter() - t)
                t = time.perf_counter()
                if target is not img:
                    target.clear()
                render_tiles(lists, chunk, target, grid, self.workers, self.executor, config.blocked,
                             config.sigma_factor, config.cutoff_factor)
                stats.add("render", time.perf_counter() - t)
                if target is not img:
                    t = time.perf_counter()
                    composite(img, target)
                    stats.add("composite", time.perf_counter() - t)
                stats.particles += chunk.count
                stats.chunks += 1
        except SplatError as exc:
            # the caller gets whatever was measured before the failure
            buf.account(stats)
            exc.partial_stats = stats
            raise
        buf.account(stats)
        stats.clamped += clamped
        stats.frames += 1
        stats.wall += time.perf_counter() - t_start
        stats.allocator = [p.stats for p in self.pools]
        return img, stats


def run_frame(config, handle, rng, renderer=None):
    own = renderer is None
    renderer = renderer or Renderer(config.workers, config.pool_mb, config.pool_alignment)
    try:
        return renderer.frame(config, handle, rng)
    finally:
        if own:
            renderer.close()


def run_multiworker(config, handle, rng, workers):
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return run_frame(replace(config, workers=workers), handle, rng)


def render_to_file(config, handle, rng, path, renderer=None, stats=None, frame_index=0):
    """Render, tone-map and write one PPM; timings are merged into ``stats``."""
    stats = stats if stats is not None else PipelineStats()
    if renderer is None:
        img, frame_stats = run_frame(config, handle, rng)
    else:
        img, frame_stats = renderer.frame(config, handle, rng, PipelineStats())
    t = time.perf_counter()
    buf = tonemap(img)
    frame_stats.add("tonemap", time.perf_counter() - t)
    t = time.perf_counter()
    write_image(img, buf, path)
    frame_stats.add("write", time.perf_counter() - t)
    frame_stats.wall += frame_stats.kernel_times["tonemap"] + frame_stats.kernel_times["write"]
    frame_stats.per_frame.append((frame_index, dict(frame_stats.kernel_times), frame_stats.particles))
    stats.merge(frame_stats)
    return img, stats


def frame_path(prefix, index):
    return f"{prefix}_{index:05d}.ppm"


def run_animation(base, scene, frames, prefix=None, keep_images=False):
    """Render ``frames`` frames of ``scene`` applied over ``base``.

    Writes ``<prefix>_%05d.ppm`` when ``prefix`` is given.  Returns the list
    of images (or output paths) and aggregate stats.
    """
    if frames < 1:
        raise ConfigError("frames must be >= 1")
    stats = PipelineStats()
    outputs = []
    ranges = {}
    handle = None
    renderer = Renderer(base.workers, base.pool_mb, base.pool_alignment)
    try:
        for f in range(frames):
            try:
                cfg = resolve_frame(scene, base, f) if scene is not None else base
                if cfg.workers != renderer.workers:
                    renderer.close()
                    renderer = Renderer(cfg.workers, cfg.pool_mb, cfg.pool_alignment)
                if handle is None or str(handle.path) != str(Path(cfg.infile)):
                    if handle is not None:
                        handle.close()
                    handle = open_dataset(cfg.infile)
                key = (str(handle.path), cfg.log_q)
                if key not in ranges:
                    ranges[key] = range_pass(handle, cfg)
                if prefix is None:
                    img, fs = renderer.frame(cfg, handle, ranges[key])
                    stats.merge(fs)
                    outputs.append(img)
                else:
                    path = frame_path(prefix, f)
                    img, _ = render_to_file(cfg, handle, ranges[key], path, renderer, stats, f)
                    outputs.append(img if keep_images else path)
            except SplatError as exc:
                family = next(c for c in FAMILIES if isinstance(exc, c))
                raise family(f"frame {f}: {exc}") from exc
    finally:
        renderer.close()
        if handle is not None:
            handle.close()
    return outputs, stats


# -- reports ---------------------------------------------------------------------------


def timing_rows(stats):
    """``(frame, kernel, seconds, particles)`` rows for the timing report."""
    rows = []
    if stats.per_frame:
        for frame, times, particles in stats.per_frame:
            rows.extend((frame, k, times[k], particles) for k in KERNELS)
    else:
        rows.extend((0, k, stats.kernel_times[k], stats.particles) for k in KERNELS)
    return rows


def write_timing_csv(stats, out):
    own = isinstance(out, (str, os.PathLike))
    fh = open(out, "w", newline="") if own else out
    try:
        w = csv.writer(fh)
        w.writerow(["frame", "kernel", "seconds", "particles"])
        for frame, kernel, seconds, particles in timing_rows(stats):
            w.writerow([frame, kernel, f"{seconds:.6f}", particles])
    finally:
        if own:
            fh.close()


ALLOCATOR_COLUMNS = ("worker", "allocs", "frees", "fallbacks", "peak_usage", "in_use", "grows", "bad_frees")


def write_allocator_csv(stats, out):
    """One row per worker pool from the latest allocator snapshot."""
    own = isinstance(out, (str, os.PathLike))
    fh = open(out, "w", newline="") if own else out
    try:
        w = csv.writer(fh)
        w.writerow(ALLOCATOR_COLUMNS)
        for worker, ps in enumerate(stats.allocator):
            w.writerow([worker, *(getattr(ps, c) for c in ALLOCATOR_COLUMNS[1:])])
    finally:
        if own:
            fh.close()


BENCH_COLUMNS = ("tile_size", "workers", *KERNELS, "total", "best")


def bench(config, handle, tiles=(20, 40, 80), workers=(1, 2, 4), repeats=1):
    """Sweep tile size x worker count and time every kernel.

    Returns a list of row dicts (``BENCH_COLUMNS``); the row with the
    smallest total wall time has ``best = 1``.
    """
    rng = range_pass(handle, config)
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "bench.ppm")
        for w in workers:
            with Renderer(w, config.pool_mb, config.pool_alignment) as renderer:
                cfg_w = replace(config, workers=w)
                # first call absorbs jit compilation and pool warm-up
                renderer.frame(replace(cfg_w, tile_size=tiles[0]), handle, rng)
                for ts in tiles:
                    cfg = replace(cfg_w, tile_size=ts).validate()
                    best = None
                    for _ in range(repeats):
                        st = PipelineStats()
                        render_to_file(cfg, handle, rng, out, renderer, st)
                        if best is None or st.wall < best.wall:
                            best = st
                    row = {"tile_size": ts, "workers": w}
                    row.update(best.kernel_times)
                    row["total"] = best.wall
                    rows.append(row)
    i_best = min(range(len(rows)), key=lambda i: rows[i]["total"])
    for i, row in enumerate(rows):
        row["best"] = int(i == i_best)
    return rows


def write_bench_csv(rows, out):
    own = isinstance(out, (str, os.PathLike))
    fh = open(out, "w", newline="") if own else out
    try:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if own:
            fh.close()


def orbit_scene(frames, radius, height=0.0, center=(0.0, 0.0, 0.0)):
    """Scene with one linear camera keyframe per frame on a circular orbit."""
    scene = ingest.SceneSequence()
    cx, cy, cz = center
    for f in range(frames):
        a = 2.0 * math.pi * f / frames
        pos = (cx + radius * math.sin(a), cy + height, cz - radius * math.cos(a))
        scene.add(f, "camera_position", "linear", pos)
    scene.add(0, "camera_lookat", "step", tuple(center))
    return scene


def write_scene(scene, path):
    with open(path, "w") as fh:
        for key, track in scene.tracks.items():
            for frame, value in track:
                text = " ".join(repr(float(v)) for v in value) if isinstance(value, tuple) else str(value)
                fh.write(f"{frame} {key} {scene.modes[key]} {text}\n")
