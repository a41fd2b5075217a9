"""Offline and online tracking loops built on the max-mixture factor graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    NULL,
    Detection,
    GaussianComponent,
    GaussianMixture,
    Mode,
    ObjectState,
    Track,
    TrackerParams,
)
from .graph import FactorGraph
from .postprocess import OutputBox, attach_boxes, carry_forward, mean_confidence_filter
from .solver import SolveReport, SolverOptions, optimize

log = logging.getLogger(__name__)


class SequencingError(ValueError):
    pass


def build_mixture(
    detections: Sequence[Detection], params: TrackerParams, null_mean=None
) -> GaussianMixture:
    """Null hypothesis (component 0) plus one component per detection, equal weights.

    With no detections the null mean falls back to ``null_mean`` (the previous
    frame's), or the origin.
    """
    n = len(detections)
    w = 1.0 / (n + 1)
    if n:
        mu0 = np.mean([d.position for d in detections], axis=0)
    else:
        mu0 = np.zeros(3) if null_mean is None else np.asarray(null_mean, float)
    comps = [GaussianComponent.from_sigmas(mu0, params.sigma_det_null, w)]
    comps += [GaussianComponent.from_sigmas(d.position, params.sigma_det, w) for d in detections]
    return GaussianMixture(tuple(comps))


@dataclass
class SimilarityMatrix:
    """Rows: null hypothesis then detections; columns: predicted tracks."""

    values: np.ndarray
    track_ids: list

    @property
    def n_detections(self) -> int:
        return self.values.shape[0] - 1


@dataclass
class AssignmentResult:
    matched: list = field(default_factory=list)  # (track_id, detection_index)
    lost_tracks: list = field(default_factory=list)
    unmatched_detections: list = field(default_factory=list)


def similarity_matrix(mixture: GaussianMixture, predicted: Mapping[int, np.ndarray]) -> SimilarityMatrix:
    """``-log`` of each component's weighted, unnormalized likelihood at each prediction."""
    tids = sorted(predicted)
    K = len(mixture)
    if not tids:
        return SimilarityMatrix(np.zeros((K, 0)), [])
    X = np.stack([predicted[t] for t in tids])
    diff = X[None, :, :] - mixture.means[:, None, :]
    white = np.einsum("kab,knb->kna", mixture.sqrt_infos, diff)
    vals = 0.5 * np.einsum("kna,kna->kn", white, white) - np.log(mixture.scaled_weights)[:, None]
    return SimilarityMatrix(vals, tids)


def greedy_assign(matrix: SimilarityMatrix) -> AssignmentResult:
    """Repeatedly take the global minimum; the null row is never consumed."""
    M = np.array(matrix.values, dtype=float, copy=True)
    if not np.all(np.isfinite(M)):
        raise ValueError("similarity matrix must be finite")
    result = AssignmentResult()
    n_rows, n_cols = M.shape
    for _ in range(n_cols):
        r, c = np.unravel_index(np.argmin(M), M.shape)
        tid = matrix.track_ids[c]
        M[:, c] = np.inf
        if r == 0:
            result.lost_tracks.append(tid)
        else:
            result.matched.append((tid, int(r) - 1))
            M[r, :] = np.inf
    used = {d for _, d in result.matched}
    result.unmatched_detections = [j for j in range(n_rows - 1) if j not in used]
    return result


@dataclass
class FrameOutput:
    frame: int
    boxes: list
    report: Optional[SolveReport] = None


@dataclass
class TrackerStats:
    created: int = 0
    deleted: int = 0
    terminated: int = 0
    emitted: int = 0
    solves: int = 0
    iterations: int = 0
    component_switches: int = 0


class Tracker:
    """Frame-by-frame driver shared by the offline and online modes."""

    def __init__(
        self,
        params: TrackerParams,
        solver_options: Optional[SolverOptions] = None,
        window: Optional[int] = None,
        type_name: str = "Car",
    ):
        self.params = params
        self.solver_options = solver_options or SolverOptions()
        self.window = window
        self.type_name = type_name
        self.graph = FactorGraph.from_params(params)
        self.tracks: dict[int, Track] = {}
        self.finished: list[Track] = []
        self.detections: dict[int, list] = {}
        self.emitted: dict[int, list] = {}
        self.stats = TrackerStats()
        self.last_frame: Optional[int] = None
        self._null_mean = None
        self._next_id = 0

    # lifecycle helpers

    def _spawn(self, frame: int, det_index: int, det: Detection, mixture) -> None:
        tid = self._next_id
        self._next_id += 1
        self.tracks[tid] = Track(tid, frame)
        self.graph.add_track_frame(tid, frame, det.position, np.zeros(3), mixture)
        self.stats.created += 1

    def _delete(self, tid: int) -> None:
        self.graph.remove_track(tid)
        del self.tracks[tid]
        self.stats.deleted += 1

    def _terminate(self, tid: int) -> None:
        tr = self.tracks.pop(tid)
        k = tr.trailing_nulls()
        if k:
            self.graph.truncate_track(tid, k)
            del tr.states[-k:], tr.associations[-k:], tr.dims_history[-k:], tr.confidence_history[-k:]
        # finished tracks no longer take part in the optimization
        if tid in self.graph.track_frames:
            self.graph.remove_track(tid)
        tr.terminated = True
        self.finished.append(tr)
        self.stats.terminated += 1

    def _sync(self, tr: Track) -> None:
        frames = self.graph.track_frames.get(tr.id, [])
        sel = self.graph.selection
        tr.states = [ObjectState(self.graph.states[(tr.id, t)][:3], self.graph.states[(tr.id, t)][3:]) for t in frames]
        tr.associations = [sel.get((tr.id, t)) for t in frames]
        dims, conf = carry_forward(tr.associations, lambda k: self.detections.get(frames[k], []))
        tr.dims_history, tr.confidence_history = dims, conf

    # main loop body

    def step(self, frame: int, detections: Sequence[Detection]) -> FrameOutput:
        if self.last_frame is not None and frame <= self.last_frame:
            raise SequencingError(f"frame {frame} after {self.last_frame}")
        out = FrameOutput(frame, [])
        if self.last_frame is not None:
            for t in range(self.last_frame + 1, frame):
                out.boxes.extend(self._step(t, []).boxes)
        res = self._step(frame, list(detections))
        out.boxes.extend(res.boxes)
        out.report = res.report
        return out

    def _step(self, frame: int, detections: list) -> FrameOutput:
        p = self.params
        self.last_frame = frame
        self.detections[frame] = detections
        mixture = build_mixture(detections, p, self._null_mean)
        self._null_mean = mixture.null_mean

        live = sorted(self.tracks)
        predicted = {tid: self.graph.propagate(tid, frame - 1) for tid in live}
        sim = similarity_matrix(mixture, {tid: pv[0] for tid, pv in predicted.items()})
        assignment = greedy_assign(sim)

        for tid, _ in assignment.matched:
            pos, vel = predicted[tid]
            self.graph.add_track_frame(tid, frame, pos, vel, mixture)
        for tid in assignment.lost_tracks:
            tr = self.tracks[tid]
            if not tr.promoted:
                self._delete(tid)
            elif tr.trailing_nulls() + 1 > p.n_lost:
                self._terminate(tid)
            else:
                pos, vel = predicted[tid]
                self.graph.add_track_frame(tid, frame, pos, vel, mixture)
        for j in assignment.unmatched_detections:
            self._spawn(frame, j, detections[j], mixture)

        report = None
        if self.graph.states:
            self.graph.marginal_window(self.window)
            self.graph.refresh_repelling(p.d_min)
            if self.graph.free_variable_count():
                report = optimize(self.graph, self.solver_options)
                self.stats.solves += 1
                self.stats.iterations += report.iterations
                self.stats.component_switches += report.component_switches

        for tid in sorted(self.tracks):
            tr = self.tracks[tid]
            self._sync(tr)
            if not tr.promoted:
                if any(a == NULL for a in tr.associations):
                    self._delete(tid)
                    continue
                if tr.trailing_detections() >= p.n_det:
                    tr.promoted = True
            if tr.promoted and tr.trailing_nulls() > p.n_lost:
                self._terminate(tid)

        boxes = self._emit(frame) if p.mode is Mode.ONLINE else []
        return FrameOutput(frame, boxes, report)

    def _emit(self, frame: int) -> list:
        p = self.params
        boxes = []
        for tid in sorted(self.tracks):
            tr = self.tracks[tid]
            if not tr.promoted or tr.last_frame != frame:
                continue
            if tr.trailing_nulls() > p.n_perm or tr.mean_confidence() < p.c_min_online:
                continue
            d = tr.dims_history[-1]
            box = OutputBox(frame, tid, tr.states[-1].position.copy(), d[:3].copy(), float(d[3]),
                            tr.confidence_history[-1], None, self.type_name)
            boxes.append(box)
            self.emitted.setdefault(tid, []).append(box)
            self.stats.emitted += 1
        return boxes

    def finalize(self) -> dict:
        """Offline postprocessing: drop candidates, attach boxes, confidence filter."""
        for tid in sorted(self.tracks):
            if not self.tracks[tid].promoted:
                self._delete(tid)
        survivors = list(self.finished) + [self.tracks[t] for t in sorted(self.tracks)]
        survivors = [tr for tr in survivors if any(a not in (None, NULL) for a in tr.associations)]
        kept = mean_confidence_filter(survivors, self.params.c_min_offline)
        self.stats.emitted = sum(len(tr.states) for tr in kept)
        return {tr.id: attach_boxes(tr, self.detections, self.type_name) for tr in sorted(kept, key=lambda t: t.id)}

    def all_tracks(self) -> list:
        return list(self.finished) + [self.tracks[t] for t in sorted(self.tracks)]


def _frames(all_frames: Mapping[int, Sequence[Detection]]):
    if not all_frames:
        return []
    return range(min(all_frames), max(all_frames) + 1)


def run_offline(all_frames: Mapping[int, Sequence[Detection]], params: TrackerParams, **kwargs) -> dict:
    """Whole-sequence tracking; returns track id -> list of OutputBox."""
    params = params.replace(mode=Mode.OFFLINE)
    tracker = Tracker(params, **kwargs)
    for t in _frames(all_frames):
        tracker.step(t, all_frames.get(t, []))
    return tracker.finalize()


def run_online(all_frames: Mapping[int, Sequence[Detection]], params: TrackerParams, **kwargs) -> dict:
    """Incremental tracking; returns the boxes emitted frame by frame."""
    params = params.replace(mode=Mode.ONLINE)
    tracker = Tracker(params, **kwargs)
    for t in _frames(all_frames):
        tracker.step(t, all_frames.get(t, []))
    return {tid: tracker.emitted[tid] for tid in sorted(tracker.emitted)}


def run(all_frames, params: TrackerParams, **kwargs) -> dict:
    if params.mode is Mode.ONLINE:
        return run_online(all_frames, params, **kwargs)
    return run_offline(all_frames, params, **kwargs)
