"""Command-line front end.

Three subcommands: ``analyze`` runs the monitoring pipeline over a
frames directory (or a ``synth:<spec>`` closed loop) and writes the
report files; ``synth`` renders a fixture directory from G-code with
optional failure injections; ``report`` pretty-prints a previous run.

Exit codes: 0 run completed, 2 print suspended (a pause was issued),
1 fatal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import ConfigError, RunConfig, run_pipeline, write_report

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_SUSPENDED = 2


def _parse_layer_range(text: str) -> tuple:
    lo, sep, hi = text.partition("..")
    try:
        if sep:
            return (int(lo), int(hi))
        return (int(lo), int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer range {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerwatch",
        description="Layer-wise print monitoring: height, outline, texture.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    an = sub.add_parser("analyze", help="run the pipeline over frames + G-code")
    an.add_argument("--gcode", required=True, help="G-code file of the print")
    an.add_argument("--frames", required=True,
                    help="frames directory, or synth:<injection spec> for a "
                         "rendered closed loop")
    an.add_argument("--camera", default=None, help="camera config file")
    an.add_argument("--out", required=True, help="output directory for reports")
    an.add_argument("--printer", choices=["sim"], default=None,
                    help="stream corrective commands to a printer target")
    an.add_argument("--seed", type=int, default=0)
    an.add_argument("--every", type=int, default=1, metavar="N",
                    help="analyze every Nth layer")
    an.add_argument("--layers", type=_parse_layer_range, default=None,
                    metavar="a..b", help="restrict to layer indices a..b")
    an.add_argument("--print-time", type=float, default=None, metavar="SECONDS",
                    help="total print run time; enables the overhead figure")

    sy = sub.add_parser("synth", help="render a synthetic fixture directory")
    sy.add_argument("--gcode", required=True, help="G-code file to render")
    sy.add_argument("--inject", default="", metavar="SPEC",
                    help="failure injection spec, e.g. 'shift:4,0@5'")
    sy.add_argument("--out", required=True, help="fixture directory to create")
    sy.add_argument("--camera", default=None, help="camera config file")
    sy.add_argument("--seed", type=int, default=0)

    rp = sub.add_parser("report", help="pretty-print a run's report files")
    rp.add_argument("--in", dest="run_dir", required=True,
                    help="output directory of a previous analyze run")
    return parser


def _cmd_analyze(args) -> int:
    config = RunConfig(
        gcode=args.gcode,
        frames=args.frames,
        camera=args.camera,
        out_dir=args.out,
        printer=args.printer,
        seed=args.seed,
        every=args.every,
        layers=args.layers,
        print_time_s=args.print_time,
    )
    summary = run_pipeline(config)
    write_report(summary, args.out)
    print(f"analyzed {summary.analyzed_layers} layers -> {args.out}")
    if summary.suspended:
        print("print suspended: a pause was issued; see report.jsonl")
        return EXIT_SUSPENDED
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .projection import load_camera_config
    from .synth import CameraRig, parse_injections, write_fixture_dir

    gcode_text = Path(args.gcode).read_text(encoding="ascii")
    camera = None
    if args.camera is not None:
        K, pose, ppm = load_camera_config(args.camera)
        if pose is None:
            print("camera config lacks a pose", file=sys.stderr)
            return EXIT_FATAL
        camera = CameraRig(K=K, pose=pose, px_per_mm=ppm or 5.26)
    injections = parse_injections(args.inject) if args.inject else ()
    out = write_fixture_dir(args.out, gcode_text, camera, injections, seed=args.seed)
    frames = len(list(Path(out).glob("layer_*.png")))
    print(f"wrote {frames} frames to {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    report_path = run_dir / "report.jsonl"
    if not summary_path.is_file():
        print(f"no summary.json under {run_dir}", file=sys.stderr)
        return EXIT_FATAL
    doc = json.loads(summary_path.read_text(encoding="ascii"))
    print(f"run {doc.get('run_id')}: {doc.get('analyzed_layers')} layers analyzed"
          f"{' (suspended)' if doc.get('suspended') else ''}")
    if doc.get("overhead_percent") is not None:
        print(f"overhead: {doc['overhead_percent']:.1f}% of print time")
    stages = doc.get("stages", {})
    if stages:
        print("stage timings (mean s):")
        for name, st in stages.items():
            print(f"  {name:<8} {st['mean_s']:.3f}  (min {st['min_s']:.3f}, "
                  f"max {st['max_s']:.3f})")
    if report_path.is_file():
        for line in report_path.read_text(encoding="ascii").splitlines():
            rec = json.loads(line)
            state = rec.get("height_state") or "-"
            reg = rec.get("registration") or {}
            tex = rec.get("texture") or {}
            marks = []
            if rec.get("failures"):
                marks.append("failures=" + ",".join(rec["failures"]))
            if rec.get("notes"):
                marks.append("; ".join(rec["notes"]))
            print(f"  layer {rec['layer']:>4}: height={state:<8}"
                  f" outline={reg.get('state', '-'):<10}"
                  f" defective={tex.get('defective', '-')!s:<5}"
                  f" {' '.join(marks)}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "analyze":
            return _cmd_analyze(args)
        if args.command == "synth":
            return _cmd_synth(args)
        return _cmd_report(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
