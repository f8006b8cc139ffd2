import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from oracles import lerp_color, project_oracle
from splatcher.errors import ConfigError
from splatcher.model import Camera, ColorMap, ParticleChunk
from splatcher.raster import ColorTable, build_transform, colorize, project_point, transform_particles

vec = st.tuples(*[st.floats(-50, 50)] * 3)


def world_chunk(points, r=1.0):
    p = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = len(p)
    return ParticleChunk.from_arrays(x=p[:, 0], y=p[:, 1], z=p[:, 2], r=np.full(n, r, np.float32))


def test_axis_camera_fov90():
    params = build_transform(Camera((0, 0, -10), (0, 0, 0), (0, 1, 0), 90), 100, 100)
    assert params.focal == pytest.approx(50.0)
    x, y, d = project_point(params, (0, 0, 0))
    assert (x, y) == pytest.approx((50, 50)) and d > 0


def test_focal_fov60():
    params = build_transform(Camera((0, 0, -10), (0, 0, 0), (0, 1, 0), 60), 1024, 1024)
    assert params.focal == pytest.approx(886.81, abs=5e-3)


def _camera(pos, look, sky, fov=45.0):
    cam = Camera(pos, look, sky, fov)
    try:
        cam.validate()
    except ConfigError:
        assume(False)
    view = np.subtract(look, pos)
    assume(np.linalg.norm(view) > 1e-3)
    s = np.asarray(sky, float)
    assume(np.linalg.norm(np.cross(view / np.linalg.norm(view), s)) > 1e-3 * max(np.linalg.norm(s), 1e-300))
    return cam


@given(vec, vec, vec)
def test_rotation_orthonormal(pos, look, sky):
    params = build_transform(_camera(pos, look, sky), 64, 64)
    R = params.rotation
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-5
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@given(vec, vec, vec, vec)
def test_projection_matches_oracle(pos, look, sky, point):
    cam = _camera(pos, look, sky)
    params = build_transform(cam, 80, 60)
    x, y, d = project_point(params, point)
    ox, oy, od, _ = project_oracle(pos, look, sky, 45.0, 80, 60, point)
    assume(abs(od) > 1e-3)
    assert d == pytest.approx(od, rel=1e-9, abs=1e-9)
    assert (x, y) == pytest.approx((ox, oy), rel=1e-6, abs=1e-6)


def test_lookat_lands_on_centre():
    params = build_transform(Camera((3, -2, 7), (1, 1, 1), (0, 0, 1), 50), 320, 200)
    c = world_chunk([(1, 1, 1)])
    transform_particles(c, params)
    assert (c.x[0], c.y[0]) == pytest.approx((160, 100), abs=1e-4)
    assert c.active[0] and c.z[0] > 0


def test_behind_camera_inactive():
    params = build_transform(Camera((0, 0, -10), (0, 0, 0), (0, 1, 0), 45), 100, 100)
    c = world_chunk([(0, 0, -20), (0, 0, -10)])
    transform_particles(c, params)
    assert not c.active.any()


def test_off_axis_clipped():
    cam = Camera((0, 0, -10), (0, 0, 0), (0, 1, 0), 90)
    params = build_transform(cam, 100, 100)
    # looking down +z with +y up, world +x is image left: x = 50 - 5 X;
    # radius 1 -> 5 px at depth 10, cutoff 3.75 px
    inside = 50 - 5 * 2.0
    just_out = (50 + 3.76) / 5
    just_in = (50 + 3.74) / 5
    c = world_chunk([(just_out, 0, 0), (just_in, 0, 0), (2.0, 0, 0)])
    transform_particles(c, params)
    assert c.active.tolist() == [False, True, True]
    assert c.x[2] == pytest.approx(inside)
    assert c.r[0] == pytest.approx(5.0)


def test_inactive_input_stays_inactive():
    params = build_transform(Camera((0, 0, -10), (0, 0, 0), (0, 1, 0), 45), 100, 100)
    c = world_chunk([(0, 0, 0)])
    c.active[0] = False
    transform_particles(c, params)
    assert not c.active[0]


def _rotation(a, b, g):
    ca, sa, cb, sb, cg, sg = map(float, (np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(g), np.sin(g)))
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cg, -sg], [0, sg, cg]])
    return rz @ ry @ rx


@given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.integers(0, 1000))
def test_rigid_motion_consistency(a, b, g, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-2, 2, (50, 3))
    cam = Camera((0.5, 1.0, -8.0), (0.0, 0.2, 0.0), (0, 1, 0), 40)
    Q = _rotation(a, b, g)
    cam2 = Camera(tuple(Q @ cam.position), tuple(Q @ cam.lookat), tuple(Q @ cam.sky), 40)
    out = []
    for c, p in ((cam, pts), (cam2, pts @ Q.T)):
        # float64 positions so the only difference is the rotation itself
        params = build_transform(c, 200, 150)
        proj = np.array([project_point(params, q) for q in p])
        out.append(proj)
    assert np.abs(out[0] - out[1]).max() < 1e-4


@given(st.floats(1, 40), st.floats(1, 40))
def test_depth_monotonic(d1, d2):
    assume(abs(d1 - d2) > 1e-3)
    params = build_transform(Camera((0, 0, -50), (0, 0, 0), (0, 1, 0), 45), 100, 100)
    c = world_chunk([(0, 0, -50 + d1), (0, 0, -50 + d2)])
    transform_particles(c, params)
    nearer = 0 if d1 < d2 else 1
    assert c.r[nearer] > c.r[1 - nearer]


def colour_chunk(q, ptype=None, active=None):
    q = np.asarray(q, np.float32)
    n = len(q)
    kw = dict(q=q)
    if ptype is not None:
        kw["ptype"] = np.asarray(ptype, np.int32)
    if active is not None:
        kw["active"] = np.asarray(active, bool)
    return ParticleChunk.from_arrays(capacity=max(n, 1), **kw) if n else ParticleChunk(1)


GRAY = ColorMap.grayscale()


def test_colour_q_zero():
    c = colour_chunk([0])
    colorize(c, ColorTable([GRAY], 3.0))
    assert (c.red[0], c.green[0], c.blue[0]) == (0, 0, 0)


def test_colour_q_one():
    c = colour_chunk([1])
    colorize(c, ColorTable([GRAY], 1.0))
    assert (c.red[0], c.green[0], c.blue[0]) == (1, 1, 1)


def test_colour_half_brightness_two():
    c = colour_chunk([0.5])
    colorize(c, ColorTable([GRAY], 2.0))
    expected = np.float32(lerp_color([0, 1], [[0] * 3, [1] * 3], 0.5)[0] * 0.5 * 2.0)
    assert c.red[0] == expected == np.float32(0.5)


def test_unweighted_lookup():
    c = colour_chunk([0.5])
    colorize(c, ColorTable([GRAY], 2.0), weight_by_q=False)
    assert c.red[0] == 1.0


def test_inactive_untouched():
    c = colour_chunk([1, 1], active=[True, False])
    colorize(c, ColorTable([GRAY], 1.0))
    assert c.red.tolist() == [1, 0]


def test_missing_map_is_config_error():
    c = colour_chunk([0.3, 0.4], ptype=[0, 1])
    with pytest.raises(ConfigError):
        colorize(c, ColorTable([GRAY], 1.0))
    with pytest.raises(ConfigError):
        ColorTable([GRAY], 1.0).require(2)


def _maps(seed):
    rng = np.random.default_rng(seed)
    maps = []
    for size in (2, 5, 9):
        t = np.concatenate([[0], np.sort(rng.uniform(0.01, 0.99, size - 2)), [1]])
        maps.append(ColorMap(t, rng.random((size, 3))))
    return ColorTable(maps, rng.uniform(0.5, 3, 3))


@given(st.integers(0, 3 * 16 + 1), st.integers(0, 10_000), st.sampled_from([4, 8, 16]))
def test_blocked_equals_scalar(n, seed, width):
    rng = np.random.default_rng(seed)
    table = _maps(seed)
    c = colour_chunk(rng.random(n), ptype=rng.integers(0, 3, n), active=rng.random(n) < 0.8)
    a, b = c.copy(), c.copy()
    colorize(a, table, block_width=1)
    colorize(b, table, block_width=width)
    for f in ("red", "green", "blue"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


@given(st.integers(0, 10_000))
def test_colour_matches_lerp_oracle(seed):
    rng = np.random.default_rng(seed)
    table = _maps(seed)
    n = 40
    c = colour_chunk(rng.random(n), ptype=rng.integers(0, 3, n))
    colorize(c, table)
    for i in range(n):
        m = table.maps[c.ptype[i]]
        q = float(c.q[i])
        want = np.array(lerp_color(m.positions, m.colors, q)) * q * float(table.brightness[c.ptype[i]])
        got = (c.red[i], c.green[i], c.blue[i])
        assert got == pytest.approx(want, rel=1e-5, abs=1e-6)
        assert np.isfinite(got).all() and min(got) >= 0


def test_lookup_exact_at_entries_in_kernel():
    table = _maps(1)
    m = table.maps[2]
    c = colour_chunk(m.positions, ptype=np.full(len(m), 2))
    colorize(c, ColorTable([m, m, m], 1.0), weight_by_q=False)
    assert np.array_equal(np.stack([c.red, c.green, c.blue], 1), m.colors)


def test_brightness_shortfall():
    with pytest.raises(ConfigError):
        ColorTable([GRAY, GRAY, GRAY], [1.0, 2.0])
