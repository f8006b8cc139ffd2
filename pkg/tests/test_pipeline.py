import csv
import io
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rel_close
from oracles import tonemap_oracle
from splatcher.errors import ConfigError, IngestError
from splatcher.ingest import FrameConfig, SceneSequence, open_dataset, read_chunk, write_dataset
from splatcher.model import Image, ParticleChunk
from splatcher.pipeline import (
    BENCH_COLUMNS,
    KERNELS,
    DoubleBuffer,
    PipelineStats,
    bench,
    load_color_table,
    orbit_scene,
    range_pass,
    run_animation,
    run_frame,
    run_multiworker,
    tonemap,
    write_bench_csv,
    write_timing_csv,
)
from splatcher.preprocess import FieldRange, apply_transform, normalize
from splatcher.raster import build_transform, colorize, transform_particles
from splatcher.render import reference_render
from splatcher.synth import write_fixture


@pytest.fixture
def fixture_path(tmp_path):
    path = tmp_path / "fx.splt"
    write_fixture(path, 6000, seed=4, radius=(0.02, 0.2), ptypes=2)
    return path


def config_for(path, **kw):
    base = dict(infile=str(path), width=96, height=72, camera_position=(0.3, 0.2, -3.0), tile_size=16)
    base.update(kw)
    return FrameConfig(**base).validate()


def oracle_frame(config):
    """Whole dataset in one chunk, then the brute-force reference render."""
    with open_dataset(config.infile) as h:
        chunk = ParticleChunk(max(h.total_count, 1))
        read_chunk(h, chunk)
        ntypes = h.ptype_count
        rng = range_pass(h, config)
    apply_transform(chunk, config.log_q, floor=rng.min)
    normalize(chunk, rng)
    transform_particles(chunk, build_transform(config.camera, config.width, config.height))
    colorize(chunk, load_color_table(config, ntypes), config.weight_by_q, block_width=1)
    return reference_render(chunk, config.width, config.height)


def frame(config, workers=None):
    if workers is not None:
        config = config.with_overrides({"workers": workers})
    with open_dataset(config.infile) as h:
        return run_frame(config, h, range_pass(h, config))


@pytest.mark.parametrize("log_q", [False, True])
def test_single_chunk_matches_reference(fixture_path, log_q):
    cfg = config_for(fixture_path, log_q=log_q)
    img, stats = frame(cfg)
    assert img.pixels.any()
    assert rel_close(img.pixels, oracle_frame(cfg).pixels, 1e-5).all()
    assert stats.particles == 6000 and stats.chunks == 1 and stats.frames == 1


def test_chunk_capacity_invariance(fixture_path):
    a, _ = frame(config_for(fixture_path))
    b, stats = frame(config_for(fixture_path, chunk_capacity=2000))
    assert stats.chunks == 3
    assert rel_close(a.pixels, b.pixels, 1e-5).all()


def test_composite_mode(fixture_path):
    a, _ = frame(config_for(fixture_path, chunk_capacity=1000))
    b, stats = frame(config_for(fixture_path, chunk_capacity=1000, accumulate="composite"))
    assert rel_close(a.pixels, b.pixels, 1e-5).all()
    assert stats.kernel_times["composite"] > 0


def test_empty_dataset(tmp_path):
    path = tmp_path / "empty.splt"
    write_dataset(path, *([np.empty(0, np.float32)] * 5))
    cfg = config_for(path)
    with open_dataset(path) as h:
        with pytest.raises(ConfigError, match="no particles"):
            range_pass(h, cfg)
        img, stats = run_frame(cfg, h, FieldRange(np.float32(0), np.float32(1)))
    assert not img.pixels.any() and stats.particles == 0


def test_range_log_endpoints(tmp_path):
    path = tmp_path / "q.splt"
    q = np.arange(1, 101, dtype=np.float32)
    write_dataset(path, q, q, q, q, q)
    with open_dataset(path) as h:
        assert range_pass(h, FrameConfig(log_q=True)) == (0.0, 2.0)
        assert h.cursor == 0


@given(st.integers(1, 700))
def test_range_chunked_bitwise(tmp_path_factory, capacity):
    path = tmp_path_factory.mktemp("r") / "r.splt"
    write_fixture(path, 700, seed=capacity)
    with open_dataset(path) as h:
        whole = range_pass(h, FrameConfig(chunk_capacity=700))
        part = range_pass(h, FrameConfig(chunk_capacity=capacity))
    assert np.float32(whole.min).tobytes() == np.float32(part.min).tobytes()
    assert np.float32(whole.max).tobytes() == np.float32(part.max).tobytes()


@pytest.mark.parametrize("v,want", [(0, 0), (1, 255), (7.3, 255), (0.5, 128), (-1, 0)])
def test_tonemap_cases(v, want):
    img = Image(1, 1, np.full((1, 1, 3), v, np.float32))
    assert tonemap(img)[0, 0, 0] == want


def test_tonemap_oracle():
    rng = np.random.default_rng(0)
    px = rng.uniform(0, 1.2, (20, 30, 3)).astype(np.float32)
    px[0, :3, 0] = [k / 255 + 0.5 / 255 for k in (0, 10, 254)]
    got = tonemap(Image(30, 20, px))
    want = np.vectorize(tonemap_oracle)(px).astype(np.uint8)
    assert np.array_equal(got, want)


def test_multiworker_equivalence(fixture_path):
    cfg = config_for(fixture_path, chunk_capacity=2500)
    one, _ = frame(cfg, 1)
    with open_dataset(cfg.infile) as h:
        rng = range_pass(h, cfg)
        again, _ = run_multiworker(cfg, h, rng, 1)
        eight, _ = run_multiworker(cfg, h, rng, 8)
    assert one.pixels.tobytes() == again.pixels.tobytes()
    assert rel_close(one.pixels, eight.pixels, 1e-6).all()


def test_animation_single_frame_identity(fixture_path):
    cfg = config_for(fixture_path)
    images, stats = run_animation(cfg, SceneSequence(), 1)
    img, _ = frame(cfg)
    assert images[0].pixels.tobytes() == img.pixels.tobytes()


def test_orbit_smoke_and_stats(fixture_path, tmp_path):
    frames = 100
    cfg = config_for(fixture_path, width=32, height=32, tile_size=8)
    images, stats = run_animation(cfg, orbit_scene(frames, 3.0), frames)
    for img in images:
        assert np.isfinite(img.pixels).all() and img.pixels.any()
    assert stats.frames == frames and stats.particles == 6000 * frames
    assert all(v >= 0 for v in stats.kernel_times.values())


def test_animation_files(fixture_path, tmp_path):
    cfg = config_for(fixture_path, width=24, height=24)
    paths, stats = run_animation(cfg, orbit_scene(3, 3.0), 3, prefix=str(tmp_path / "orbit"))
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["orbit_00000.ppm", "orbit_00001.ppm", "orbit_00002.ppm"]
    assert len(stats.per_frame) == 3
    buf = io.StringIO()
    write_timing_csv(stats, buf)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == ["frame", "kernel", "seconds", "particles"]
    assert len(rows) == 1 + 3 * len(KERNELS)


def test_animation_reports_frame(fixture_path):
    scene = SceneSequence()
    scene.add(0, "fov", "step", 45.0)
    scene.add(2, "fov", "step", 200.0)
    with pytest.raises(ConfigError, match="frame 2"):
        run_animation(config_for(fixture_path), scene, 3)


def test_bench_grid(fixture_path):
    cfg = config_for(fixture_path)
    with open_dataset(cfg.infile) as h:
        rows = bench(cfg, h, (20, 40, 80), (1, 2, 4))
    assert len(rows) == 9
    for row in rows:
        times = [row[k] for k in KERNELS]
        assert len(times) == 8 and min(times) >= 0
        assert sum(times) <= row["total"] * 1.05
    best = [r for r in rows if r["best"]]
    assert len(best) == 1 and best[0]["total"] == min(r["total"] for r in rows)
    buf = io.StringIO()
    write_bench_csv(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",") == list(BENCH_COLUMNS) and len(lines) == 10


class SlowReader:
    def __init__(self, delay):
        self.delay = delay

    def __call__(self, handle, chunk):
        time.sleep(self.delay)
        return read_chunk(handle, chunk)


def test_double_buffer_overlap(fixture_path):
    delay, work = 0.03, 0.02
    buf = DoubleBuffer(1000, SlowReader(delay))
    seen = []
    with open_dataset(fixture_path) as h:
        for chunk in buf.stream(h):
            seen.append(chunk.x.copy())
            time.sleep(work)
    stats = PipelineStats()
    buf.account(stats)
    assert len(seen) == 6
    assert stats.overlap_ratio > 0
    # the compute side never waits longer than one read
    assert stats.max_wait <= delay * 1.5 + 0.01
    assert np.array_equal(np.concatenate(seen), __import__("splatcher").ingest.read_all(fixture_path)["x"])


def test_double_buffer_slot_states(fixture_path):
    buf = DoubleBuffer(500)
    with open_dataset(fixture_path) as h:
        for chunk in buf.stream(h):
            states = [s.state for s in buf.slots]
            assert states.count("processing") == 1
            assert states.count("filling") <= 1


def test_reader_error_aborts(fixture_path):
    calls = []

    def failing(handle, chunk):
        calls.append(1)
        if len(calls) == 3:
            raise IngestError("disk on fire")
        return read_chunk(handle, chunk)

    buf = DoubleBuffer(1000, failing)
    with open_dataset(fixture_path) as h, pytest.raises(IngestError, match="disk on fire"):
        for _ in buf.stream(h):
            pass


def test_frame_error_carries_partial_stats(fixture_path):
    from splatcher.pipeline import Renderer

    calls = []

    def failing(handle, chunk):
        calls.append(1)
        if len(calls) == 4:
            raise IngestError("short read")
        return read_chunk(handle, chunk)

    cfg = config_for(fixture_path, chunk_capacity=1000)
    with open_dataset(fixture_path) as h:
        rng = range_pass(h, cfg)
        with Renderer(1, reader=failing) as renderer, pytest.raises(IngestError) as err:
            renderer.frame(cfg, h, rng)
    assert err.value.partial_stats.chunks == 3
    assert err.value.partial_stats.particles == 3000


def test_abandoned_stream_stops_reader(fixture_path):
    buf = DoubleBuffer(100)
    with open_dataset(fixture_path) as h:
        for _ in buf.stream(h):
            break
        h.rewind()
        assert sum(1 for _ in buf.stream(h)) == 60
