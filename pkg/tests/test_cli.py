import csv
import io

import numpy as np
import pytest

from splatcher.cli import main
from splatcher.ingest import read_ppm


@pytest.fixture
def workdir(tmp_path):
    out = io.StringIO()
    assert main(["mkfixture", str(tmp_path / "d.splt"), "--count", "3000", "--seed", "2"], out) == 0
    (tmp_path / "p.txt").write_text(
        "infile = d.splt\noutfile = img.ppm\nwidth = 48\nheight = 40\ncamera_position = 0 0 -3\n"
    )
    return tmp_path


def run(args):
    out = io.StringIO()
    return main([str(a) for a in args], out), out.getvalue()


def test_render_writes_ppm_and_timings(workdir):
    code, text = run(["render", workdir / "p.txt", "tile_size=8", "workers=2"])
    assert code == 0
    img = read_ppm(workdir / "img.ppm")
    assert img.shape == (40, 48, 3) and img.any()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert {r["kernel"] for r in rows} == {"read", "transform", "colorize", "assign", "render",
                                           "composite", "tonemap", "write"}
    assert all(r["particles"] == "3000" for r in rows)


def test_timing_file_and_figure(workdir):
    code, _ = run(["render", workdir / "p.txt", f"timing_csv={workdir / 't.csv'}"])
    assert code == 0
    assert (workdir / "t.csv").read_text().startswith("frame,kernel,seconds,particles")
    assert (workdir / "t.png").stat().st_size > 0
    pools = list(csv.DictReader(open(workdir / "t_pools.csv")))
    assert len(pools) == 1 and int(pools[0]["allocs"]) > 0


def test_animate(workdir):
    (workdir / "s.txt").write_text("0 camera_position linear 0 0 -3\n2 camera_position linear 1 0 -3\n")
    code, _ = run(["animate", workdir / "p.txt", workdir / "s.txt", "width=16", "height=16"])
    assert code == 0
    names = sorted(p.name for p in workdir.glob("img_*.ppm"))
    assert names == ["img_00000.ppm", "img_00001.ppm", "img_00002.ppm"]
    assert read_ppm(workdir / "img_00000.ppm").shape == (16, 16, 3)


def test_cli_override_beats_scene(workdir):
    (workdir / "s.txt").write_text("0 fov step 20\n")
    code, _ = run(["animate", workdir / "p.txt", workdir / "s.txt", "--frames", "1", "fov=60"])
    assert code == 0
    wide = read_ppm(workdir / "img_00000.ppm")
    code, _ = run(["animate", workdir / "p.txt", workdir / "s.txt", "--frames", "1"])
    narrow = read_ppm(workdir / "img_00000.ppm")
    assert not np.array_equal(wide, narrow)


def test_bench(workdir):
    code, text = run(["bench", workdir / "p.txt", "--tiles", "8,16", "--workers", "1,2",
                      "--figure", workdir / "b.png", "width=32", "height=32"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 4 and sum(int(r["best"]) for r in rows) == 1
    assert (workdir / "b.png").stat().st_size > 0


@pytest.mark.parametrize("args,code", [
    (["render", "missing.txt"], 2),
    (["render", "{p}", "width=0"], 1),
    (["render", "{p}", "nonsense=1"], 1),
    (["render", "{p}", "infile=nowhere.splt"], 2),
    (["render", "{p}", "--bogus"], 1),
    (["mkfixture", "{d}/x.splt", "--count", "-1"], 1),
])
def test_exit_codes(workdir, args, code):
    args = [a.format(p=workdir / "p.txt", d=workdir) for a in args]
    try:
        got, _ = run(args)
    except SystemExit as exc:
        got = exc.code
    assert got == code


def test_env_workers(workdir, monkeypatch):
    monkeypatch.setenv("SPLATCHER_WORKERS", "3")
    code, _ = run(["render", workdir / "p.txt"])
    assert code == 0


def test_nan_quantity_is_invariant_failure(workdir):
    from splatcher.ingest import write_dataset

    q = np.float32([1.0, np.nan, 2.0])
    write_dataset(workdir / "nan.splt", q * 0, q * 0, q * 0, q * 0 + 0.1, q)
    code, _ = run(["render", workdir / "p.txt", f"infile={workdir / 'nan.splt'}"])
    assert code == 3
