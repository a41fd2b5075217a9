"""Synthetic ground truth and corrupted detection streams."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import ConfigError, Detection, read_kv
from .kitti import CAM_TO_TRACK, boxes_to_camera, identity_poses, write_detections, write_labels, write_poses
from .postprocess import OutputBox


@dataclass(frozen=True)
class ScenarioConfig:
    n_objects: int = 5
    n_frames: int = 100
    dt: float = 0.1
    speed_range: tuple = (0.0, 15.0)  # m/s
    motion: str = "cv"  # "cv" or "piecewise"
    turn_rate: float = 0.02  # turn events per frame ("piecewise" only)
    max_turn: float = math.pi / 4
    det_noise_sigma: float = 0.2
    miss_prob: float = 0.1
    clutter_rate: float = 2.0
    clutter_region: tuple = ((-100.0, 100.0), (-100.0, 100.0), (-1.0, 1.0))
    spawn_region: tuple = ((-40.0, 40.0), (-40.0, 40.0), (0.0, 0.0))
    min_separation: float = 6.0
    confidence_model: tuple = (8.0, 2.0, 0.5)  # true mean, clutter mean, sigma
    dimensions: tuple = (1.5, 1.6, 3.9)
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be >= 0")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ConfigError("miss_prob must be in [0, 1]")
        if self.clutter_rate < 0 or self.det_noise_sigma < 0:
            raise ConfigError("clutter_rate and det_noise_sigma must be non-negative")
        if self.clutter_rate > 0 and any(hi <= lo for lo, hi in self.clutter_region):
            raise ConfigError("clutter region is degenerate")
        if self.motion not in ("cv", "piecewise"):
            raise ConfigError(f"unknown motion model {self.motion!r}")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ConfigError("bad speed range")


S1 = ScenarioConfig()


@dataclass
class Scenario:
    gt: dict  # track id -> list[OutputBox]
    detections: dict  # frame -> list[Detection]
    velocities: dict = field(default_factory=dict)  # track id -> (n_frames, 3)
    clutter_count: int = 0

    @property
    def n_true_detections(self) -> int:
        return sum(len(v) for v in self.detections.values()) - self.clutter_count


def _initial_positions(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    lo = np.array([r[0] for r in cfg.spawn_region])
    hi = np.array([r[1] for r in cfg.spawn_region])
    pts: list = []
    for _ in range(10000 * max(cfg.n_objects, 1)):
        if len(pts) == cfg.n_objects:
            break
        p = rng.uniform(lo, hi)
        if all(np.linalg.norm(p - q) >= cfg.min_separation for q in pts):
            pts.append(p)
    if len(pts) < cfg.n_objects:
        raise ConfigError("cannot place objects with the requested separation")
    return np.array(pts).reshape(cfg.n_objects, 3)


def _trajectory(cfg, rng, p0):
    speed = rng.uniform(*cfg.speed_range)
    heading = rng.uniform(-math.pi, math.pi)
    v = speed * np.array([math.cos(heading), math.sin(heading), 0.0])
    P = np.empty((cfg.n_frames, 3))
    V = np.empty((cfg.n_frames, 3))
    p = p0.astype(float)
    for t in range(cfg.n_frames):
        if t and cfg.motion == "piecewise" and rng.random() < cfg.turn_rate:
            a = rng.uniform(-cfg.max_turn, cfg.max_turn)
            c, s = math.cos(a), math.sin(a)
            v = np.array([c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])
        P[t] = p
        V[t] = v
        p = p + v * cfg.dt
    return P, V


def generate(cfg: ScenarioConfig = S1) -> Scenario:
    """Deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    starts = _initial_positions(cfg, rng)
    true_mu, clutter_mu, conf_sigma = cfg.confidence_model
    gt, vels = {}, {}
    frames: dict = {t: [] for t in range(cfg.n_frames)}
    dims = np.asarray(cfg.dimensions, float)
    for i in range(cfg.n_objects):
        P, V = _trajectory(cfg, rng, starts[i])
        vels[i] = V
        boxes = []
        for t in range(cfg.n_frames):
            # camera rot_y convention: heading phi in the ground plane is rot_y = -phi
            yaw = -math.atan2(V[t, 1], V[t, 0]) if np.any(V[t, :2]) else 0.0
            boxes.append(OutputBox(t, i, P[t].copy(), dims.copy(), yaw, 1.0))
        gt[i] = boxes
    clutter_lo = np.array([r[0] for r in cfg.clutter_region])
    clutter_hi = np.array([r[1] for r in cfg.clutter_region])
    n_clutter = 0
    for t in range(cfg.n_frames):
        for i in range(cfg.n_objects):
            noise = rng.normal(0.0, 1.0, 3) * cfg.det_noise_sigma
            miss = rng.random() < cfg.miss_prob
            conf = rng.normal(true_mu, conf_sigma)
            if miss:
                continue
            box = gt[i][t]
            frames[t].append(Detection(t, box.position + noise, dims, box.yaw, conf))
        k = rng.poisson(cfg.clutter_rate)
        n_clutter += k
        for _ in range(k):
            pos = rng.uniform(clutter_lo, clutter_hi)
            frames[t].append(
                Detection(t, pos, dims, rng.uniform(-math.pi, math.pi), rng.normal(clutter_mu, conf_sigma))
            )
    return Scenario(gt, frames, vels, n_clutter)


def scenario_to_camera(sc: Scenario) -> tuple[dict, dict]:
    """Detections and ground truth in camera coordinates (identity ego poses)."""
    dets = {
        t: [d.replace(position=CAM_TO_TRACK.T @ d.position) for d in ds] for t, ds in sc.detections.items()
    }
    return dets, boxes_to_camera(sc.gt)


def write_scenario(sc: Scenario, cfg: ScenarioConfig, out_dir) -> dict:
    """Write detections, ground-truth labels and identity poses; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "detections": out / "detections.txt",
        "gt": out / "gt.txt",
        "poses": out / "poses.txt",
    }
    dets, gt = scenario_to_camera(sc)
    write_detections(dets, paths["detections"])
    write_labels(gt, paths["gt"])
    write_poses(identity_poses(cfg.n_frames), paths["poses"])
    return paths


_TUPLE_KEYS = {"speed_range", "confidence_model", "dimensions"}
_REGION_KEYS = {"clutter_region", "spawn_region"}


def load_config(text: str, **overrides) -> ScenarioConfig:
    """Parse ``key = value`` lines into a ScenarioConfig; regions are 6 comma-separated bounds."""
    names = {f.name: f for f in fields(ScenarioConfig)}
    values: dict = {}
    for lineno, key, val in read_kv(text):
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = getattr(S1, key)
        try:
            if key in _REGION_KEYS:
                b = [float(x) for x in val.split(",")]
                if len(b) != 6:
                    raise ValueError
                values[key] = ((b[0], b[1]), (b[2], b[3]), (b[4], b[5]))
            elif key in _TUPLE_KEYS:
                values[key] = tuple(float(x) for x in val.split(","))
            elif key == "motion":
                values[key] = val
            elif isinstance(default, int):
                values[key] = int(val)
            else:
                values[key] = float(val)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**values)
