"""Command line entry point: ``uts track | synth | eval``.

Exit codes: 0 success, 1 runtime failure, 2 bad or missing inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .detection import SceneMask
from .errors import InputError, UTSError
from .evaluation import DEFAULT_THRESHOLDS, evaluate_files, format_table
from .geometry import CameraModel
from .pipeline import PipelineConfig, run_sequence
from .scenarios import BUILTIN, builtin
from .synth import Scenario, write_outputs

logger = logging.getLogger("uts")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


def _cmd_track(args) -> int:
    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    calib = args.calib or config.calibration_path
    if calib is None:
        raise InputError("no calibration file given (--calib)")
    cam = CameraModel.from_json(calib)
    mask_path = args.mask or config.mask_path
    mask = SceneMask.from_json(mask_path) if mask_path else None
    if not Path(args.detections).is_file():
        raise InputError(f"detections file {args.detections} not found")
    summary = run_sequence(config, args.detections, args.out, cam=cam, mask=mask)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _load_scenario(spec: str) -> Scenario:
    if spec in BUILTIN:
        return builtin(spec)
    if not Path(spec).is_file():
        raise InputError(f"{spec!r} is neither a scenario file nor one of {sorted(BUILTIN)}")
    return Scenario.from_json(spec)


def _cmd_synth(args) -> int:
    scenario = _load_scenario(args.scenario)
    counts = write_outputs(scenario, args.seed, args.out_detections, args.out_truth,
                           args.out_calib, args.out_mask)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    for p in (args.tracks, args.truth):
        if not Path(p).is_file():
            raise InputError(f"{p} not found")
    cam = CameraModel.from_json(args.calib) if args.calib else None
    mask = SceneMask.from_json(args.mask) if args.mask else None
    if args.no_area_filter:
        cam = mask = None
    thresholds = tuple(args.iou_threshold) if args.iou_threshold else DEFAULT_THRESHOLDS
    reports = evaluate_files(args.tracks, args.truth, thresholds, cam, mask)
    table = format_table(reports)
    out = Path(args.out)
    out.write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    out.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="run the tracker on a detections file")
    p.add_argument("--calib", help="camera calibration JSON (K, P, image_size)")
    p.add_argument("--detections", required=True, help="detections JSON Lines")
    p.add_argument("--mask", help="scene mask JSON (detection area and occluders)")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out", required=True, help="output tracks JSON Lines")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--scenario", required=True,
                   help=f"scenario JSON file or built-in name ({', '.join(sorted(BUILTIN))})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-detections", required=True)
    p.add_argument("--out-truth", required=True)
    p.add_argument("--out-calib", help="also write the camera calibration here")
    p.add_argument("--out-mask", help="also write the scene mask here")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="score tracks against ground truth")
    p.add_argument("--tracks", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--iou-threshold", type=float, action="append",
                   help="3D IoU threshold (repeatable; default 0.5, 0.25, 0.1)")
    p.add_argument("--out", required=True, help="JSON report; the table goes next to it as .txt")
    p.add_argument("--calib", help="with --mask: count only boxes inside the detection area")
    p.add_argument("--mask")
    p.add_argument("--no-area-filter", action="store_true",
                   help="score every box even when --calib and --mask are given")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (UTSError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
