"""Command line entry point: ``fg3dmot {track,eval,simulate}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import kitti
from .core import ConfigError, Mode, TrackerParams, default_params, normalize_detections
from .metrics import EvaluationInputError, MatchMode, evaluate
from .simulate import S1, generate, load_config, write_scenario
from .solver import SolverDivergedError
from .tracker import Tracker, _frames

log = logging.getLogger("fg3dmot")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _class_id(name: str) -> int:
    if name.isdigit():
        return int(name)
    try:
        return kitti.TYPE_IDS[name.lower()]
    except KeyError:
        raise UsageError(f"unknown class {name!r}") from None


def track_sequence(
    detections_path, out_path, mode="offline", poses_path=None, calib_path=None, config_path=None,
    class_name="Car", window=None, dump_traj=None, dump_config=None,
) -> dict:
    """Full pipeline for one sequence; returns run statistics."""
    params = TrackerParams.load(config_path) if config_path else default_params()
    params = params.replace(mode=Mode(mode))
    if dump_config:
        params.save(dump_config)
    cls = _class_id(class_name)
    raw = kitti.parse_detections(detections_path)
    raw = {t: [d for d in ds if d.type_id == cls] for t, ds in raw.items()}
    poses = kitti.parse_poses(poses_path) if poses_path else None
    calib = kitti.parse_calib(calib_path) if calib_path else None
    dets, offset = normalize_detections(raw, params.confidence_offset)
    dets = kitti.prepare_detections(dets, poses)
    type_name = kitti.TYPE_NAMES.get(cls, class_name)

    tracker = Tracker(params, window=window, type_name=type_name)
    frame_range = _frames(dets)
    if poses is not None and len(frame_range) and frame_range[-1] >= len(poses):
        raise KeyError(f"no ego pose for frame {frame_range[-1]}")
    for t in frame_range:
        tracker.step(t, dets.get(t, []))
    tracks = tracker.finalize() if params.mode is Mode.OFFLINE else dict(sorted(tracker.emitted.items()))

    if dump_traj:
        _dump_traj(tracks, dump_traj)
    cam = kitti.boxes_to_camera(tracks, poses)
    cam = kitti.attach_bbox2d(cam, calib)
    lines = kitti.write_labels(cam, out_path)
    s = tracker.stats
    return {
        "mode": params.mode.value,
        "frames": len(frame_range),
        "confidence_offset": offset,
        "tracks_created": s.created,
        "tracks_deleted": s.deleted,
        "tracks_terminated": s.terminated,
        "tracks_emitted": len(cam),
        "label_lines": lines,
        "solves": s.solves,
        "solver_iterations": s.iterations,
        "component_switches": s.component_switches,
    }


def _dump_traj(tracks, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "track_id", "x", "y", "z", "confidence"])
        for tid in sorted(tracks):
            for b in tracks[tid]:
                w.writerow([b.frame, tid, *(f"{v:.6f}" for v in b.position), f"{b.confidence:.6f}"])


def _run_manifest_entry(entry):
    det, poses, calib, out, kwargs = entry
    return out, track_sequence(det, out, poses_path=poses, calib_path=calib, **kwargs)


def cmd_track(args) -> int:
    kwargs = dict(mode=args.mode, config_path=args.config, class_name=args.cls, window=args.window)
    if args.manifest:
        entries = []
        for line in Path(args.manifest).read_text().splitlines():
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            if len(parts) != 4:
                raise UsageError(f"manifest line needs 'detections poses calib out': {line!r}")
            det, poses, calib, out = (None if p == "-" else p for p in parts)
            entries.append((det, poses, calib, out, kwargs))
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                results = list(pool.map(_run_manifest_entry, entries))
        else:
            results = [_run_manifest_entry(e) for e in entries]
        for out, stats in results:
            _summary(stats, out)
        return EXIT_OK
    if not args.detections or not args.out:
        raise UsageError("--detections and --out are required (or --manifest)")
    stats = track_sequence(
        args.detections, args.out, poses_path=args.poses, calib_path=args.calib,
        dump_traj=args.dump_traj, dump_config=args.dump_config, **kwargs,
    )
    _summary(stats, args.out)
    return EXIT_OK


def _summary(stats, out):
    print(f"# {out}", file=sys.stderr)
    for k, v in stats.items():
        print(f"{k} = {v}", file=sys.stderr)


def cmd_eval(args) -> int:
    gt = kitti.parse_labels(args.gt)
    hyp = kitti.parse_labels(args.hyp)
    threshold = args.threshold
    if threshold is None:
        threshold = 1.0 if args.mode == "center3d" else 0.5
    report = evaluate(gt, hyp, MatchMode(args.mode, threshold))
    print(report.as_table(), end="")
    print(report.as_text(), end="")
    return EXIT_OK


def cmd_simulate(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    cfg = load_config(
        text,
        seed=args.seed,
        n_objects=args.n_objects,
        n_frames=args.n_frames,
        clutter_rate=args.clutter_rate,
        miss_prob=args.miss_prob,
        det_noise_sigma=args.noise,
    )
    sc = generate(cfg)
    paths = write_scenario(sc, cfg, args.out_dir)
    n_true = sc.n_true_detections
    print(
        f"scenario: {len(sc.gt)} objects, {cfg.n_frames} frames, seed {cfg.seed}, "
        f"{n_true} true detections, {sc.clutter_count} clutter"
    )
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fg3dmot", description="Factor-graph 3D multi-object tracking")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("track", help="track one sequence (or a manifest of sequences)")
    t.add_argument("--mode", choices=["offline", "online"], default="offline")
    t.add_argument("--detections")
    t.add_argument("--poses")
    t.add_argument("--calib")
    t.add_argument("--out")
    t.add_argument("--config")
    t.add_argument("--class", dest="cls", default="Car")
    t.add_argument("--window", type=int, default=None, help="optimize only the last N frames")
    t.add_argument("--dump-traj", help="CSV of optimized positions")
    t.add_argument("--dump-config", help="write the effective parameters")
    t.add_argument("--manifest", help="lines of 'detections poses calib out' ('-' for none)")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--log-level", default=None)
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="CLEAR-MOT metrics of a hypothesis against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--hyp", required=True)
    e.add_argument("--mode", choices=["center3d", "iou2d"], default="center3d")
    e.add_argument("--threshold", type=float, default=None)
    e.add_argument("--log-level", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="write a synthetic scenario")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-objects", type=int, default=None)
    s.add_argument("--n-frames", type=int, default=None)
    s.add_argument("--clutter-rate", type=float, default=None)
    s.add_argument("--miss-prob", type=float, default=None)
    s.add_argument("--noise", type=float, default=None)
    s.add_argument("--log-level", default=None)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (getattr(args, "log_level", None) or os.environ.get("FG3DMOT_LOG", "WARNING")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SolverDivergedError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError, ConfigError, UsageError, EvaluationInputError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
