"""Command line entry point: ``tissuescan {track,servo,ncc} [options]``.

Exit codes: 0 success, 1 configuration error, 2 tracking failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

from tissuescan.errors import TissueScanError
from tissuescan.harness import (SERVO_AXES, TRACKING_AXES, ExperimentConfig, load_config, run_ncc_stability,
                                run_servo_accuracy, run_tracking_accuracy, write_report)

EXIT_OK, EXIT_CONFIG, EXIT_TRACKING, EXIT_IO = 0, 1, 2, 3
KIND_BY_COMMAND = {"track": "tracking-accuracy", "servo": "servo-accuracy", "ncc": "ncc-stability"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tissuescan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("track", "tissue tracking accuracy against ground truth"),
                            ("servo", "closed-loop probe servoing accuracy"),
                            ("ncc", "ultrasound NCC stability with and without motion compensation")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--profile", default=None, choices=["0", "1", "2", "3", "all"],
                       help="motion profile (0 = static)")
        p.add_argument("--axis", default=None, help="x, y, z, free or all")
        p.add_argument("--seed", type=int)
        p.add_argument("--duration", type=float, help="seconds of simulated motion")
        p.add_argument("--noise", type=float, help="depth noise sigma in mm")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        p.add_argument("--table", action="store_true", help="print a summary table")
        p.add_argument("--log", action="store_true", help="write the tracker JSON-lines log (track only)")
        p.add_argument("--dump-frames", action="store_true", help="dump simulator frames (track only)")
    return parser


def _trials(command: str, profile: str | None, axis: str | None, base: ExperimentConfig) -> list[tuple[int, str]]:
    profiles = [1, 2, 3] if profile == "all" else [int(profile) if profile is not None else base.profile]
    valid_axes = TRACKING_AXES if command == "track" else SERVO_AXES + ("free",)
    if axis == "all":
        axes = list(TRACKING_AXES) if command == "track" else list(SERVO_AXES)
    else:
        a = axis if axis is not None else base.axis
        if a not in valid_axes:
            raise ValueError(f"axis must be one of {valid_axes} or 'all'")
        axes = [a]
    trials = [(p, a) for p in profiles for a in axes]
    if command == "servo" and profile == "all" and axis == "all":
        trials.append((base.profile if base.profile else 1, "free"))  # one free-form trial
    return trials


def _config(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig(kind=KIND_BY_COMMAND[args.command])
    if args.config is not None:
        base = load_config(args.config, base)
        base = dataclasses.replace(base, kind=KIND_BY_COMMAND[args.command])
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.noise is not None:
        overrides["noise_sigma_mm"] = args.noise
    return dataclasses.replace(base, **overrides)


def _row(label: str, summary: dict) -> str:
    return (f"{label:<14} {summary['translation_mm_mean']:.3f} ± {summary['translation_mm_std']:.3f} mm   "
            f"{summary['rotation_deg_mean']:.3f} ± {summary['rotation_deg_std']:.3f} deg")


def run(args: argparse.Namespace) -> int:
    try:
        base = _config(args)
        trials = _trials(args.command, args.profile, args.axis, base)
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

    rows = []
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        for profile, axis in trials:
            cfg = dataclasses.replace(base, profile=profile, axis=axis)
            stem = f"{args.command}_p{profile}_{axis}_s{cfg.seed}"
            if args.command == "track":
                log_fh = open(args.out / f"{stem}.jsonl", "w") if args.log else None
                try:
                    dump = args.out / f"{stem}_frames" if args.dump_frames else None
                    record = run_tracking_accuracy(cfg, log=log_fh, dump_dir=dump)
                finally:
                    if log_fh is not None:
                        log_fh.close()
                write_report(record, args.out / f"{stem}.csv")
                rows.append((f"P{profile} {axis}", record.summary()))
            elif args.command == "servo":
                record = run_servo_accuracy(cfg)
                write_report(record, args.out / f"{stem}.csv")
                rows.append((f"P{profile} {axis}", record.summary()))
            else:
                on, off = run_ncc_stability(cfg)
                write_report(on, args.out / f"{stem}_mc_on.csv")
                write_report(off, args.out / f"{stem}_mc_off.csv")
                rows.append((f"P{profile} {axis}", {"on": on.mean, "off": off.mean}))
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TissueScanError as exc:
        print(f"tracking failure: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

    if args.table:
        if args.command == "ncc":
            print(f"{'trial':<14} NCC on   NCC off")
            for label, s in rows:
                print(f"{label:<14} {s['on']:.3f}    {s['off']:.3f}")
        else:
            print(f"{'trial':<14} translation            rotation")
            for label, s in rows:
                print(_row(label, s))
            if len(rows) > 1:
                print(_row("mean of trials", {
                    "translation_mm_mean": sum(s["translation_mm_mean"] for _, s in rows) / len(rows),
                    "translation_mm_std": sum(s["translation_mm_std"] for _, s in rows) / len(rows),
                    "rotation_deg_mean": sum(s["rotation_deg_mean"] for _, s in rows) / len(rows),
                    "rotation_deg_std": sum(s["rotation_deg_std"] for _, s in rows) / len(rows),
                }))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
