"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 internal
invariant failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, IngestError, InvariantError
from .ingest import build_config, load_params, load_scene, open_dataset, parse_overrides
from .pipeline import (
    bench,
    range_pass,
    render_to_file,
    run_animation,
    write_allocator_csv,
    write_bench_csv,
    write_timing_csv,
)

EXIT_CODES = ((ConfigError, 1), (IngestError, 2), (InvariantError, 3))


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _config(args, scene_values=None):
    return build_config(load_params(args.params), scene_values, parse_overrides(args.overrides))


def _report(stats, config, out):
    """Timing CSV to ``timing_csv`` (plus allocator CSV and a PNG beside
    it) or to stdout."""
    if config.timing_csv:
        path = Path(config.timing_csv)
        write_timing_csv(stats, path)
        write_allocator_csv(stats, path.with_name(path.stem + "_pools.csv"))
        from .plotting import plot_timings

        plot_timings(stats, str(path.with_suffix(".png")))
    else:
        write_timing_csv(stats, out)
    if stats.clamped:
        logging.getLogger("splatcher").warning("%d nonpositive q values clamped under log transform", stats.clamped)
    for worker, ps in enumerate(stats.allocator):
        logging.getLogger("splatcher").info("pool %d: %s", worker, ps)


def cmd_render(args, out):
    config = _config(args)
    with open_dataset(config.infile) as handle:
        rng = range_pass(handle, config)
        _, stats = render_to_file(config, handle, rng, config.outfile)
    _report(stats, config, out)


def cmd_animate(args, out):
    base = _config(args)
    scene = load_scene(args.scene)
    frames = args.frames if args.frames is not None else (max(scene.frames, default=0) + 1)
    # CLI overrides beat scene values, so re-apply them on top of each frame
    overrides = parse_overrides(args.overrides)
    if overrides:
        for key in overrides:
            scene.tracks.pop(key, None)
            scene.modes.pop(key, None)
    prefix = str(Path(base.outfile).with_suffix(""))
    _, stats = run_animation(base, scene, frames, prefix=prefix)
    _report(stats, base, out)


def cmd_bench(args, out):
    config = _config(args)
    with open_dataset(config.infile) as handle:
        rows = bench(config, handle, tuple(args.tiles), tuple(args.workers), repeats=args.repeats)
    if args.csv:
        write_bench_csv(rows, args.csv)
    else:
        write_bench_csv(rows, out)
    if args.figure:
        from .plotting import plot_bench

        plot_bench(rows, args.figure)


def cmd_mkfixture(args, out):
    from .synth import write_fixture

    write_fixture(args.out, args.count, args.seed, args.distribution, ptypes=args.ptypes)
    print(f"wrote {args.count} particles to {args.out}", file=out)


def build_parser():
    ap = _Parser(prog="splatcher", description="Gaussian particle splatting renderer.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", help="render one frame to a PPM file")
    p.add_argument("params")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("animate", help="render a keyframed frame sequence")
    p.add_argument("params")
    p.add_argument("scene")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.add_argument("--frames", type=int, help="frame count (default: last keyframe + 1)")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("bench", help="sweep tile size and worker count")
    p.add_argument("params")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.add_argument("--tiles", type=_int_list, default=[20, 40, 80])
    p.add_argument("--workers", type=_int_list, default=[1, 2, 4])
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--csv", help="write the table here instead of stdout")
    p.add_argument("--figure", help="write a stacked-bar PNG of the table")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("mkfixture", help="write a synthetic dataset")
    p.add_argument("out")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distribution", choices=("gaussian", "uniform"), default="gaussian")
    p.add_argument("--ptypes", type=int, default=1)
    p.set_defaults(func=cmd_mkfixture)
    return ap


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # key=value overrides may follow options; argparse leaves those behind
    stray = [e for e in extra if e.startswith("-") or "=" not in e or not hasattr(args, "overrides")]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    if extra:
        args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args, out)
    except Exception as exc:
        for family, code in EXIT_CODES:
            if isinstance(exc, family):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
