"""Box reconstruction, confidence filtering and image-plane flattening."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional

import numpy as np

from .core import NULL, Track

log = logging.getLogger(__name__)

MIN_IMAGE_OVERLAP = 0.25


@dataclass(frozen=True)
class OutputBox:
    frame: int
    track_id: int
    position: np.ndarray
    dimensions: np.ndarray  # h, w, l
    yaw: float
    confidence: float
    bbox2d: Optional[tuple] = None
    type: str = "Car"

    def replace(self, **changes) -> "OutputBox":
        return replace(self, **changes)


# track id -> boxes sorted by frame
TrackSet = dict


def boxes_by_frame(tracks: Mapping[int, list]) -> dict:
    out: dict = {}
    for tid in sorted(tracks):
        for box in tracks[tid]:
            out.setdefault(box.frame, []).append(box)
    return {t: out[t] for t in sorted(out)}


def carry_forward(associations, detections_at) -> tuple[list, list]:
    """Per-frame (h, w, l, yaw) and confidence from the associated detections.

    ``detections_at(k)`` returns the detection list of the k-th frame of the
    track. Null-hypothesis frames repeat the previous frame's box with
    confidence 0. Leading null frames take the first matched box.
    """
    dims, conf = [], []
    last = None
    for k, a in enumerate(associations):
        if a is not None and a != NULL:
            det = detections_at(k)[a - 1]
            last = np.append(det.dimensions, det.yaw)
            dims.append(last)
            conf.append(det.confidence)
        else:
            dims.append(last)
            conf.append(0.0)
    if dims and dims[0] is None:
        first = next((d for d in dims if d is not None), None)
        if first is None:
            first = np.array([np.nan, np.nan, np.nan, 0.0])
        log.debug("track starts on the null hypothesis; back-filling its box")
        dims = [first if d is None else d for d in dims]
    return dims, conf


def attach_boxes(track: Track, detections_by_frame: Mapping[int, list], type_name: str = "Car") -> list:
    """Combine optimized positions with the associated detection boxes."""
    frames = list(track.frames)
    dims, conf = carry_forward(track.associations, lambda k: detections_by_frame.get(frames[k], []))
    return [
        OutputBox(t, track.id, np.asarray(s.position, float).copy(), d[:3].copy(), float(d[3]), c, None, type_name)
        for t, s, d, c in zip(frames, track.states, dims, conf)
    ]


def mean_confidence_filter(tracks: Iterable[Track], c_min: float) -> list:
    """Drop tracks whose lifetime mean confidence is below ``c_min``."""
    return [tr for tr in tracks if tr.mean_confidence() >= c_min]


@dataclass(frozen=True)
class CameraCalib:
    projection: np.ndarray  # 3x4
    image_size: tuple = (1242, 375)  # width, height

    def __post_init__(self):
        P = np.asarray(self.projection, dtype=float).reshape(3, 4)
        if np.linalg.matrix_rank(P) < 3:
            raise ValueError("projection matrix must have full row rank")
        w, h = self.image_size
        if not (w > 0 and h > 0):
            raise ValueError("image size must be positive")
        object.__setattr__(self, "projection", P)
        object.__setattr__(self, "image_size", (float(w), float(h)))


def box_corners(position, dimensions, yaw) -> np.ndarray:
    """8x3 corners of a camera-frame box; ``position`` is the bottom-face center."""
    h, w, l = dimensions
    x = np.array([l, l, -l, -l, l, l, -l, -l]) / 2
    y = np.array([0, 0, 0, 0, -h, -h, -h, -h], dtype=float)
    z = np.array([w, -w, -w, w, w, -w, -w, w]) / 2
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return (R @ np.vstack([x, y, z])).T + np.asarray(position, float)


def image_overlap(bbox, image_size) -> float:
    left, top, right, bottom = bbox
    area = (right - left) * (bottom - top)
    if area <= 0:
        return 0.0
    w, h = image_size
    iw = max(0.0, min(right, w) - max(left, 0.0))
    ih = max(0.0, min(bottom, h) - max(top, 0.0))
    return iw * ih / area


def project_bbox(position, dimensions, yaw, calib: CameraCalib) -> Optional[tuple]:
    """Unclipped 2D box of the projected corners, or None if any corner is behind the camera."""
    corners = box_corners(position, dimensions, yaw)
    uvw = calib.projection @ np.hstack([corners, np.ones((8, 1))]).T
    if np.any(corners[:, 2] <= 0) or np.any(uvw[2] <= 0):
        return None
    u = uvw[0] / uvw[2]
    v = uvw[1] / uvw[2]
    return float(u.min()), float(v.min()), float(u.max()), float(v.max())


def project_and_clip(box: OutputBox, calib: CameraCalib) -> Optional[tuple]:
    """Image-clipped 2D box if at least 25% of the projected box lies in the image."""
    bbox = project_bbox(box.position, box.dimensions, box.yaw, calib)
    if bbox is None or image_overlap(bbox, calib.image_size) < MIN_IMAGE_OVERLAP:
        return None
    w, h = calib.image_size
    left, top, right, bottom = bbox
    return max(left, 0.0), max(top, 0.0), min(right, w), min(bottom, h)
