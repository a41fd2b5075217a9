"""KITTI-style file formats: detections, poses, calibration and tracking labels.

Detection rows are comma separated::

    frame, type_id, left, top, right, bottom, score, h, w, l, x, y, z, rot_y

Positions are camera coordinates (x right, y down, z forward). The tracker
works in a z-up frame anchored at the first camera pose; ``to_tracking`` and
``to_camera`` convert between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .core import Detection, wrap_angle
from .postprocess import CameraCalib, OutputBox, project_and_clip

TYPE_NAMES = {1: "Pedestrian", 2: "Car", 3: "Cyclist"}
TYPE_IDS = {v.lower(): k for k, v in TYPE_NAMES.items()}

# camera (x right, y down, z forward) -> tracking (x right, y forward, z up)
CAM_TO_TRACK = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class EgoPose:
    frame: int
    transform: np.ndarray  # 4x4, ego frame -> global frame

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.transform[:3, 3]

    @property
    def heading(self) -> float:
        """Rotation angle about the camera's vertical (y) axis."""
        R = self.rotation
        return math.atan2(R[0, 2], R[0, 0])


def _floats(fields, path, lineno):
    try:
        return [float(f) for f in fields]
    except ValueError as exc:
        raise ParseError(f"{path}, line {lineno}: non-numeric field ({exc})") from None


def parse_detections(path) -> dict:
    """Detections grouped by frame, file order preserved within a frame."""
    frames: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) != 14:
                raise ParseError(f"{path}, line {lineno}: expected 14 columns, got {len(fields)}")
            v = _floats(fields, path, lineno)
            if v[0] != int(v[0]) or v[0] < 0:
                raise ParseError(f"{path}, line {lineno}: bad frame index {fields[0]}")
            frame, type_id = int(v[0]), int(v[1])
            try:
                det = Detection(
                    frame=frame,
                    position=v[10:13],
                    dimensions=v[7:10],
                    yaw=v[13],
                    confidence=v[6],
                    type_id=type_id,
                    bbox2d=tuple(v[2:6]),
                )
            except ValueError as exc:
                raise ParseError(f"{path}, line {lineno}: {exc}") from None
            frames.setdefault(frame, []).append(det)
    return {t: frames[t] for t in sorted(frames)}


def format_detection(d: Detection) -> str:
    bbox = d.bbox2d if d.bbox2d is not None else (-1.0, -1.0, -1.0, -1.0)
    vals = [*bbox, d.confidence, *d.dimensions, *d.position, d.yaw]
    return f"{d.frame},{d.type_id}," + ",".join(f"{x:.6f}" for x in vals)


def write_detections(frames: Mapping[int, list], path) -> None:
    with open(path, "w") as fh:
        for t in sorted(frames):
            for d in frames[t]:
                fh.write(format_detection(d) + "\n")


def _check_rotation(R, where):
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ParseError(f"{where}: rotation block is not orthonormal")


def parse_poses(path) -> list:
    """One 3x4 row-major matrix per line; re-anchored so frame 0 is the identity."""
    raw = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 12:
                raise ParseError(f"{path}, line {lineno}: expected 12 values, got {len(fields)}")
            T = np.eye(4)
            T[:3, :] = np.array(_floats(fields, path, lineno)).reshape(3, 4)
            _check_rotation(T[:3, :3], f"{path}, line {lineno}")
            raw.append(T)
    return anchor_poses(raw)


def anchor_poses(transforms) -> list:
    if not transforms:
        return []
    inv0 = np.linalg.inv(transforms[0])
    return [EgoPose(i, inv0 @ T) for i, T in enumerate(transforms)]


def write_poses(poses, path) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(" ".join(f"{x:.9e}" for x in p.transform[:3, :].ravel()) + "\n")


def identity_poses(n: int) -> list:
    return [EgoPose(i, np.eye(4)) for i in range(n)]


def parse_calib(path) -> CameraCalib:
    """``P2:`` (or ``P:``) 3x4 projection plus optional ``image_size: w h``."""
    P = None
    size = (1242.0, 375.0)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            key = key.strip()
            if key in ("P2", "P", "P_rect_02"):
                vals = _floats(rest.split(), path, lineno)
                if len(vals) != 12:
                    raise ParseError(f"{path}, line {lineno}: projection needs 12 values")
                P = np.array(vals).reshape(3, 4)
            elif key == "image_size":
                vals = _floats(rest.split(), path, lineno)
                if len(vals) != 2:
                    raise ParseError(f"{path}, line {lineno}: image_size needs 2 values")
                size = (vals[0], vals[1])
    if P is None:
        raise ParseError(f"{path}: no P2 projection matrix")
    try:
        return CameraCalib(P, size)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def apply_ego_motion(frames: Mapping[int, list], poses) -> dict:
    """Map camera-frame detections into the frame-0 camera frame."""
    by_frame = {p.frame: p for p in poses}
    out = {}
    for t, dets in frames.items():
        if t not in by_frame:
            raise KeyError(f"no ego pose for frame {t}")
        pose = by_frame[t]
        R, trans, dyaw = pose.rotation, pose.translation, pose.heading
        out[t] = [d.replace(position=R @ d.position + trans, yaw=wrap_angle(d.yaw + dyaw)) for d in dets]
    return out


def to_tracking(frames: Mapping[int, list]) -> dict:
    return {t: [d.replace(position=CAM_TO_TRACK @ d.position) for d in dets] for t, dets in frames.items()}


def to_camera_position(p) -> np.ndarray:
    return CAM_TO_TRACK.T @ np.asarray(p, float)


def prepare_detections(frames: Mapping[int, list], poses=None) -> dict:
    """Camera-frame detections -> global tracking frame."""
    if poses is not None:
        frames = apply_ego_motion(frames, poses)
    return to_tracking(frames)


def boxes_to_camera(tracks: Mapping[int, list], poses=None) -> dict:
    """Global tracking-frame boxes -> the camera frame of their own frame."""
    by_frame = {p.frame: p for p in poses} if poses is not None else {}
    out = {}
    for tid, boxes in tracks.items():
        conv = []
        for b in boxes:
            pos = to_camera_position(b.position)
            yaw = b.yaw
            pose = by_frame.get(b.frame)
            if pose is not None:
                Rinv = pose.rotation.T
                pos = Rinv @ (pos - pose.translation)
                yaw = wrap_angle(yaw - pose.heading)
            conv.append(b.replace(position=pos, yaw=yaw))
        out[tid] = conv
    return out


def attach_bbox2d(tracks: Mapping[int, list], calib: Optional[CameraCalib]) -> dict:
    """Fill ``bbox2d`` from the projection; boxes failing the image filter are dropped."""
    if calib is None:
        return {tid: list(boxes) for tid, boxes in tracks.items()}
    out = {}
    for tid, boxes in tracks.items():
        kept = []
        for b in boxes:
            bb = project_and_clip(b, calib)
            if bb is not None:
                kept.append(b.replace(bbox2d=bb))
        if kept:
            out[tid] = kept
    return out


def format_label(b: OutputBox) -> str:
    bbox = b.bbox2d if b.bbox2d is not None else (-1.0, -1.0, -1.0, -1.0)
    h, w, l = b.dimensions
    x, y, z = b.position
    return (
        f"{b.frame} {b.track_id} {b.type} -1 -1 -10 "
        f"{bbox[0]:.2f} {bbox[1]:.2f} {bbox[2]:.2f} {bbox[3]:.2f} "
        f"{h:.2f} {w:.2f} {l:.2f} {x:.2f} {y:.2f} {z:.2f} {b.yaw:.2f} {b.confidence:.6f}"
    )


def write_labels(tracks: Mapping[int, list], path) -> int:
    """KITTI tracking labels sorted by frame then track id; returns the line count.

    Boxes are written as given (camera frame, bbox already attached).
    """
    boxes = sorted((b for bs in tracks.values() for b in bs), key=lambda b: (b.frame, b.track_id))
    Path(path).write_text("".join(format_label(b) + "\n" for b in boxes))
    return len(boxes)


def parse_labels(path) -> dict:
    """KITTI tracking labels -> track id -> list[OutputBox] (camera frame)."""
    tracks: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) not in (17, 18):
                raise ParseError(f"{path}, line {lineno}: expected 17 or 18 fields, got {len(fields)}")
            try:
                frame, tid = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError(f"{path}, line {lineno}: bad frame/track id") from None
            if fields[2] == "DontCare":
                continue
            v = _floats(fields[3:], path, lineno)
            bbox = tuple(v[3:7])
            score = v[14] if len(v) > 14 else 1.0
            box = OutputBox(
                frame, tid, np.array(v[10:13]), np.array(v[7:10]), v[13], score,
                None if bbox == (-1.0, -1.0, -1.0, -1.0) else bbox, fields[2],
            )
            tracks.setdefault(tid, []).append(box)
    for boxes in tracks.values():
        boxes.sort(key=lambda b: b.frame)
    return {tid: tracks[tid] for tid in sorted(tracks)}
