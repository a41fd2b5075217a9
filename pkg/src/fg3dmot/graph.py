"""Factor graph over a sequence window.

Each (track, frame) owns a position and a velocity variable plus one
max-mixture detection factor. Consecutive frames of a track are chained by a
constant-velocity factor; nearby tracks at the same frame get repelling
factors.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .core import GaussianMixture, TrackerParams
from .factors import CvFactor, DetectionFactor, RepellingFactor


class GraphStructureError(KeyError):
    pass


class Kind(str, enum.Enum):
    POSITION = "pos"
    VELOCITY = "vel"


@dataclass(frozen=True, order=True)
class VariableId:
    track_id: int
    frame: int
    kind: Kind

    def __str__(self):
        return f"{self.kind.value}[{self.track_id}@{self.frame}]"


def _pos(track_id, frame):
    return VariableId(track_id, frame, Kind.POSITION)


def _vel(track_id, frame):
    return VariableId(track_id, frame, Kind.VELOCITY)


class FactorGraph:
    """Variables are stored per (track, frame) as a 6-vector ``(pos, vel)``."""

    def __init__(self, sigma_cv=(0.25,) * 6, dt: float = 0.1, sigma_rep: float = 0.5):
        self.dt = float(dt)
        self.cv = CvFactor.from_sigmas(sigma_cv, dt)
        self.rep = RepellingFactor.from_variance(sigma_rep)
        self.states: dict[tuple[int, int], np.ndarray] = {}
        self.detection: dict[tuple[int, int], DetectionFactor] = {}
        self.track_frames: dict[int, list[int]] = {}
        self.repelling: dict[int, list[tuple[int, int]]] = {}
        self.selection: dict[tuple[int, int], int] = {}
        self.frozen: set[tuple[int, int]] = set()
        self.keep_last: Optional[int] = None

    @classmethod
    def from_params(cls, params: TrackerParams) -> "FactorGraph":
        return cls(params.sigma_cv, params.dt, params.sigma_rep)

    # structure

    @property
    def variables(self) -> dict:
        out = {}
        for (tid, t), x in sorted(self.states.items()):
            out[_pos(tid, t)] = x[:3]
            out[_vel(tid, t)] = x[3:]
        return out

    @property
    def frame_range(self) -> Optional[tuple[int, int]]:
        if not self.states:
            return None
        frames = [t for _, t in self.states]
        return min(frames), max(frames)

    def has(self, track_id: int, frame: int) -> bool:
        return (track_id, frame) in self.states

    def position(self, track_id: int, frame: int) -> np.ndarray:
        return self.states[(track_id, frame)][:3]

    def velocity(self, track_id: int, frame: int) -> np.ndarray:
        return self.states[(track_id, frame)][3:]

    def tracks_at(self, frame: int) -> list[int]:
        return sorted(tid for tid, frames in self.track_frames.items() if frames and frames[0] <= frame <= frames[-1])

    def add_track_frame(self, track_id: int, frame: int, init_pos, init_vel, mixture: GaussianMixture):
        key = (track_id, frame)
        if key in self.states:
            raise GraphStructureError(f"track {track_id} already has frame {frame}")
        frames = self.track_frames.setdefault(track_id, [])
        if frames and frame != frames[-1] + 1:
            raise GraphStructureError(f"track {track_id}: frame {frame} does not extend {frames[-1]}")
        x = np.empty(6)
        x[:3] = init_pos
        x[3:] = init_vel
        self.states[key] = x
        self.detection[key] = DetectionFactor(mixture, frame)
        frames.append(frame)
        return _pos(track_id, frame), _vel(track_id, frame)

    def remove_track(self, track_id: int) -> None:
        for t in self.track_frames.pop(track_id, []):
            self._drop(track_id, t)
        self._prune_repelling(track_id)

    def truncate_track(self, track_id: int, n: int) -> None:
        """Delete the last ``n`` frames of a track."""
        frames = self.track_frames[track_id]
        for _ in range(min(n, len(frames))):
            self._drop(track_id, frames.pop())
        if not frames:
            del self.track_frames[track_id]
        self._prune_repelling(track_id)

    def _drop(self, track_id, frame):
        key = (track_id, frame)
        del self.states[key]
        del self.detection[key]
        self.selection.pop(key, None)
        self.frozen.discard(key)

    def _prune_repelling(self, track_id):
        for t, pairs in self.repelling.items():
            self.repelling[t] = [p for p in pairs if self.has(p[0], t) and self.has(p[1], t)]

    def add_repelling_pairs(self, frame: int, d_min: float) -> int:
        """Replace the repelling set at ``frame`` from the current estimates."""
        tids = self.tracks_at(frame)
        pairs = []
        if len(tids) > 1:
            P = np.stack([self.position(tid, frame) for tid in tids])
            D = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=2)
            ii, jj = np.nonzero(np.triu(D < d_min, k=1))
            pairs = [(tids[i], tids[j]) for i, j in zip(ii, jj)]
        if pairs:
            self.repelling[frame] = pairs
        else:
            self.repelling.pop(frame, None)
        return len(pairs)

    def refresh_repelling(self, d_min: float) -> int:
        """Recompute repelling pairs on every non-frozen frame."""
        fr = self.frame_range
        if fr is None:
            return 0
        lo = fr[0] if self.keep_last is None else max(fr[0], fr[1] - self.keep_last + 1)
        for t in list(self.repelling):
            if t < lo:
                continue
            self.repelling.pop(t)
        return sum(self.add_repelling_pairs(t, d_min) for t in range(lo, fr[1] + 1))

    def propagate(self, track_id: int, from_frame: int) -> tuple[np.ndarray, np.ndarray]:
        key = (track_id, from_frame)
        if key not in self.states:
            raise GraphStructureError(f"track {track_id} has no variables at frame {from_frame}")
        x = self.states[key]
        return x[:3] + x[3:] * self.dt, x[3:].copy()

    def marginal_window(self, keep_last: Optional[int]) -> "FactorGraph":
        """Freeze every variable older than the last ``keep_last`` frames (in place)."""
        if keep_last is not None and keep_last < 2:
            raise ValueError("keep_last must be >= 2 or None")
        self.keep_last = keep_last
        self.frozen.clear()
        fr = self.frame_range
        if keep_last is not None and fr is not None:
            cutoff = fr[1] - keep_last
            self.frozen.update(k for k in self.states if k[1] <= cutoff)
        return self

    def free_variable_count(self) -> int:
        return 2 * (len(self.states) - len(self.frozen))

    # factor listing

    def iter_factors(self) -> Iterator[tuple[object, tuple]]:
        for tid in sorted(self.track_frames):
            frames = self.track_frames[tid]
            for t in frames:
                yield self.detection[(tid, t)], (_pos(tid, t),)
            for t in frames[:-1]:
                yield self.cv, (_pos(tid, t), _vel(tid, t), _pos(tid, t + 1), _vel(tid, t + 1))
        for t in sorted(self.repelling):
            for a, b in self.repelling[t]:
                yield self.rep, (_pos(a, t), _pos(b, t))

    @property
    def factors(self) -> list:
        return list(self.iter_factors())

    def dump(self) -> str:
        """One factor per line: kind, frame, connected variable ids."""
        lines = []
        for factor, ids in self.iter_factors():
            kind = {DetectionFactor: "det", CvFactor: "cv", RepellingFactor: "rep"}[type(factor)]
            lines.append(f"{kind} {ids[0].frame} " + " ".join(str(v) for v in ids))
        return "\n".join(lines) + ("\n" if lines else "")

    def check(self) -> None:
        """Structural validation; raises GraphStructureError."""
        for tid, frames in self.track_frames.items():
            if frames != list(range(frames[0], frames[0] + len(frames))):
                raise GraphStructureError(f"track {tid} frames are not contiguous")
            for t in frames:
                if (tid, t) not in self.states or (tid, t) not in self.detection:
                    raise GraphStructureError(f"missing variables for track {tid} frame {t}")
        if len(self.states) != sum(len(f) for f in self.track_frames.values()):
            raise GraphStructureError("orphan variables")
        for t, pairs in self.repelling.items():
            for a, b in pairs:
                if a == b or not (self.has(a, t) and self.has(b, t)):
                    raise GraphStructureError(f"bad repelling pair {a},{b} at frame {t}")
