"""Command line entry point: run, eval, synth, dump-grid."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .classes import read_label_map
from .errors import ConfigError, DataError, EmptyScan, TooShort
from .grid import dump_grid
from .io import (
    list_frames,
    load_frame,
    read_trajectory_kitti,
    write_labels,
    write_point_cloud_bin,
    write_times,
    write_trajectory_kitti,
)
from .metrics import eval_ape_rpe, eval_rte_rre
from .pipeline import DEFAULTS, OdometryState, load_config, process_scan
from .synth import read_scene, render_scene

log = logging.getLogger("semocc")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _key_values(items, prefix: str = "") -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        key = prefix + k.strip()
        if key not in DEFAULTS:
            raise UsageError(f"unknown setting {key!r}")
        out[key] = v.strip()
    return out


def _run_pipeline(args) -> OdometryState:
    overrides = _key_values(args.set)
    overrides.update(_key_values(args.ablate, "ablation."))
    cfg = load_config(args.config, overrides)
    label_map = read_label_map(args.label_map) if args.label_map else None
    label_dir = None if args.labels in (None, "none") else Path(args.labels)
    if label_dir is not None and not label_dir.is_dir():
        raise DataError(f"{label_dir}: label directory not found")
    frames = list_frames(args.data)
    state = OdometryState.initial(cfg)
    for i, path in enumerate(frames):
        scan = load_frame(path, label_dir, label_map)
        process_scan(state, scan, cfg)
        log.info("frame %d/%d  tau=%.3f", i + 1, len(frames), state.reports[-1].tau_corr)
    return state


def cmd_run(args) -> int:
    state = _run_pipeline(args)
    write_trajectory_kitti(state.trajectory, args.out)
    n_fallback = sum(r.fallback is not None for r in state.reports)
    n_degenerate = sum(r.degenerate for r in state.reports)
    print(f"frames = {len(state.trajectory)}")
    print(f"fallback_frames = {n_fallback}")
    print(f"degenerate_frames = {n_degenerate}")
    return EXIT_OK


def cmd_dump_grid(args) -> int:
    state = _run_pipeline(args)
    dump_grid(state.grid, args.out)
    print(f"voxels = {len(state.grid)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est = read_trajectory_kitti(args.est)
    gt = read_trajectory_kitti(args.gt)
    if args.protocol == "kitti":
        rte, rre = eval_rte_rre(est, gt)
        print(f"rte_percent = {rte:.6f}")
        print(f"rre_deg_per_100m = {rre:.6f}")
    else:
        ape, rpe = eval_ape_rpe(est, gt, args.rpe_delta)
        for name, stats in (("ape", ape), ("rpe", rpe)):
            for k, v in stats.items():
                print(f"{name}_{k} = {v:.6f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = read_scene(args.scene)
    out = Path(args.out)
    for sub in ("velodyne", "labels") + (("times",) if spec.sensor.skew else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    poses = []
    for frame in range(len(spec.trajectory)):
        scan, gt = render_scene(spec, frame)
        stem = f"{frame:06d}"
        write_point_cloud_bin(out / "velodyne" / f"{stem}.bin", scan.points)
        write_labels(out / "labels" / f"{stem}.label", scan.classes)
        if scan.rel_time is not None:
            write_times(out / "times" / f"{stem}.bin", scan.rel_time)
        poses.append(gt)
    write_trajectory_kitti(poses, out / "poses.txt")
    print(f"frames = {len(poses)}")
    return EXIT_OK


def _add_data_args(p):
    p.add_argument("--data", required=True, help="sequence directory (velodyne/ or *.bin)")
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--labels", default="none", help="label directory, or 'none'")
    p.add_argument("--label-map", help="file of 'raw_id class_id' lines")
    p.add_argument("--ablate", action="append", metavar="FLAG=BOOL", help="ablation switch")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semocc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="batch odometry over a sequence")
    _add_data_args(p)
    p.add_argument("--out", required=True, help="output KITTI pose file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="trajectory metrics")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", choices=("kitti", "ape"), default="kitti")
    p.add_argument("--rpe-delta", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a scene file to a sequence directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dump-grid", help="run a sequence and write the final grid")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_grid)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EmptyScan, TooShort, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
