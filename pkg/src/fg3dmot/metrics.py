"""CLEAR-MOT evaluation (MOTA, MOTP, MT, ML, IDS, FRAG).

Correspondences are made frame by frame: pairs matched in the previous
frame are kept while they stay within the threshold, the rest are matched
greedily by distance. Don't-Care regions are not modelled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from .postprocess import boxes_by_frame


class EvaluationInputError(ValueError):
    pass


@dataclass(frozen=True)
class MatchMode:
    kind: str = "center3d"  # or "iou2d"
    threshold: float = 1.0

    def __post_init__(self):
        if self.kind not in ("center3d", "iou2d"):
            raise ValueError(f"unknown match mode {self.kind!r}")

    @classmethod
    def center3d(cls, threshold: float = 1.0) -> "MatchMode":
        return cls("center3d", threshold)

    @classmethod
    def iou2d(cls, threshold: float = 0.5) -> "MatchMode":
        return cls("iou2d", threshold)


@dataclass
class MotReport:
    mota: float
    motp: float
    mostly_tracked: float
    mostly_lost: float
    id_switches: int
    fragmentations: int
    false_positives: int
    misses: int
    matches: int
    gt_boxes: int
    gt_tracks: int
    rmse: float = float("nan")  # per-axis position RMSE of matches (center3d only)

    def as_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def as_table(self) -> str:
        head = f"{'MOTA':>8} {'MOTP':>8} {'MT':>7} {'ML':>7} {'IDS':>5} {'FRAG':>5} {'FP':>6} {'FN':>6}"
        row = (
            f"{self.mota:8.4f} {self.motp:8.4f} {self.mostly_tracked:7.3f} {self.mostly_lost:7.3f} "
            f"{self.id_switches:5d} {self.fragmentations:5d} {self.false_positives:6d} {self.misses:6d}"
        )
        return head + "\n" + row + "\n"


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _index(tracks: Mapping[int, list], what: str) -> dict:
    out: dict = {}
    for t, boxes in boxes_by_frame(tracks).items():
        frame = {}
        for b in boxes:
            if b.track_id in frame:
                if what == "gt":
                    raise EvaluationInputError(f"duplicate ground-truth id {b.track_id} in frame {t}")
                continue
            frame[b.track_id] = b
        out[t] = frame
    return out


def evaluate(gt: Mapping[int, list], hyp: Mapping[int, list], mode: MatchMode = MatchMode()) -> MotReport:
    G = _index(gt, "gt")
    H = _index(hyp, "hyp")
    center = mode.kind == "center3d"

    def score(g, h):
        # distance-like score (lower is better) and whether it passes the threshold
        if center:
            d = float(np.linalg.norm(np.asarray(g.position) - np.asarray(h.position)))
            return d, d <= mode.threshold
        if g.bbox2d is None or h.bbox2d is None:
            return math.inf, False
        o = iou(g.bbox2d, h.bbox2d)
        return 1.0 - o, o >= mode.threshold

    prev: dict = {}
    last_id: dict = {}
    history: dict = {}
    matches = fp = fn = ids = 0
    total_score = sq_dist = 0.0
    n_gt = 0
    for t in sorted(set(G) | set(H)):
        g_boxes = G.get(t, {})
        h_boxes = H.get(t, {})
        n_gt += len(g_boxes)
        pairs: dict = {}
        used_h: set = set()
        for gid in sorted(g_boxes):
            hid = prev.get(gid)
            if hid is not None and hid in h_boxes and hid not in used_h:
                s, ok = score(g_boxes[gid], h_boxes[hid])
                if ok:
                    pairs[gid] = (hid, s)
                    used_h.add(hid)
        cand = []
        for gid in sorted(g_boxes):
            if gid in pairs:
                continue
            for hid in sorted(h_boxes):
                if hid in used_h:
                    continue
                s, ok = score(g_boxes[gid], h_boxes[hid])
                if ok:
                    cand.append((s, gid, hid))
        cand.sort()
        for s, gid, hid in cand:
            if gid in pairs or hid in used_h:
                continue
            pairs[gid] = (hid, s)
            used_h.add(hid)
        for gid in sorted(g_boxes):
            seq = history.setdefault(gid, [])
            if gid in pairs:
                hid, s = pairs[gid]
                matches += 1
                if center:
                    total_score += s
                    sq_dist += s * s
                else:
                    total_score += 1.0 - s
                if gid in last_id and last_id[gid] != hid:
                    ids += 1
                last_id[gid] = hid
                seq.append(hid)
            else:
                fn += 1
                seq.append(None)
        fp += len(h_boxes) - len(used_h)
        prev = {gid: pairs[gid][0] for gid in pairs}

    frag = mt = ml = 0
    for gid, seq in history.items():
        seen = False
        for f, hid in enumerate(seq):
            if hid is not None:
                if seen and f > 0 and seq[f - 1] != hid:
                    frag += 1
                seen = True
        ratio = sum(h is not None for h in seq) / len(seq)
        mt += ratio >= 0.8
        ml += ratio <= 0.2
    n_tracks = len(history)
    mota = 1.0 - (fn + fp + ids) / n_gt if n_gt else float("nan")
    motp = total_score / matches if matches else float("nan")
    # per-axis RMS error, comparable with a per-axis detection noise sigma
    rmse = math.sqrt(sq_dist / (3 * matches)) if (matches and center) else float("nan")
    return MotReport(
        mota=mota,
        motp=motp,
        mostly_tracked=mt / n_tracks if n_tracks else 0.0,
        mostly_lost=ml / n_tracks if n_tracks else 0.0,
        id_switches=ids,
        fragmentations=frag,
        false_positives=fp,
        misses=fn,
        matches=matches,
        gt_boxes=n_gt,
        gt_tracks=n_tracks,
        rmse=rmse,
    )
