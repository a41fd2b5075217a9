"""Shared domain vocabulary: detections, states, mixtures, tracks and parameters."""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid parameter value or malformed config file."""


class Mode(str, enum.Enum):
    ONLINE = "online"
    OFFLINE = "offline"


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi]; values already in range are returned unchanged."""
    if -math.pi <= a <= math.pi:
        return a
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w < 0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class Detection:
    frame: int
    position: np.ndarray
    dimensions: np.ndarray  # h, w, l
    yaw: float
    confidence: float
    type_id: int = 2
    bbox2d: Optional[tuple] = None

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        dims = np.asarray(self.dimensions, dtype=float).reshape(3)
        if np.any(dims <= 0):
            raise ValueError(f"detection dimensions must be positive, got {dims}")
        if not np.all(np.isfinite(pos)):
            raise ValueError(f"detection position not finite: {pos}")
        pos.setflags(write=False)
        dims.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "confidence", float(self.confidence))

    def replace(self, **changes) -> "Detection":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ObjectState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        vel = np.asarray(self.velocity, dtype=float).reshape(3)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("object state must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture component with square-root information ``sqrt_info``."""

    mean: np.ndarray
    sqrt_info: np.ndarray
    weight: float

    @classmethod
    def from_sigmas(cls, mean, sigmas, weight: float) -> "GaussianComponent":
        return cls(np.asarray(mean, float), np.diag(1.0 / np.asarray(sigmas, float)), weight)

    @classmethod
    def from_covariance(cls, mean, cov, weight: float) -> "GaussianComponent":
        # cov = L L^T, S = L^-1 so that S^T S = cov^-1
        L = np.linalg.cholesky(np.asarray(cov, float))
        S = np.linalg.inv(L)
        return cls(np.asarray(mean, float), S, weight)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        S = np.asarray(self.sqrt_info, dtype=float).reshape(3, 3)
        if np.linalg.det(S) <= 0:
            raise ValueError("sqrt_info must have positive determinant")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sqrt_info", S)
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def scaled_weight(self) -> float:
        return self.weight * float(np.linalg.det(self.sqrt_info))


@dataclass(frozen=True)
class GaussianMixture:
    """Equally weighted mixture; component 0 is the null hypothesis."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture needs at least the null-hypothesis component")
        object.__setattr__(self, "components", comps)

    def __len__(self):
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def sqrt_infos(self) -> np.ndarray:
        return np.stack([c.sqrt_info for c in self.components])

    @property
    def scaled_weights(self) -> np.ndarray:
        return np.array([c.scaled_weight for c in self.components])

    @property
    def null_mean(self) -> np.ndarray:
        return self.components[0].mean


class Status(str, enum.Enum):
    CANDIDATE = "candidate"
    ACTIVE = "active"
    LOST = "lost"
    TERMINATED = "terminated"


NULL = 0  # association code for the null hypothesis


@dataclass
class Track:
    """Identity plus per-frame history.

    ``associations[k]`` is ``None`` before the frame has been solved, ``NULL``
    (0) for the null hypothesis, or ``j >= 1`` for detection ``j - 1`` of that
    frame (i.e. the mixture component index).
    """

    id: int
    birth_frame: int
    states: list = field(default_factory=list)
    associations: list = field(default_factory=list)
    dims_history: list = field(default_factory=list)
    confidence_history: list = field(default_factory=list)
    promoted: bool = False
    terminated: bool = False

    @property
    def frames(self) -> range:
        return range(self.birth_frame, self.birth_frame + len(self.states))

    @property
    def last_frame(self) -> int:
        return self.birth_frame + len(self.states) - 1

    def trailing_nulls(self) -> int:
        k = 0
        for a in reversed(self.associations):
            if a != NULL:
                break
            k += 1
        return k

    def trailing_detections(self) -> int:
        k = 0
        for a in reversed(self.associations):
            if a is None or a == NULL:
                break
            k += 1
        return k

    def longest_detection_run(self) -> int:
        best = run = 0
        for a in self.associations:
            run = run + 1 if (a is not None and a != NULL) else 0
            best = max(best, run)
        return best

    @property
    def status(self) -> Status:
        if self.terminated:
            return Status.TERMINATED
        if not self.promoted:
            return Status.CANDIDATE
        return Status.LOST if self.trailing_nulls() else Status.ACTIVE

    @property
    def lost_count(self) -> int:
        return self.trailing_nulls()

    def mean_confidence(self) -> float:
        if not self.confidence_history:
            return 0.0
        return float(np.mean(self.confidence_history))

    def check_invariants(self, n_det: int) -> None:
        n = len(self.states)
        assert len(self.associations) == n == len(self.dims_history) == len(self.confidence_history), (
            f"track {self.id}: history lengths differ"
        )
        if self.status is Status.CANDIDATE:
            assert self.longest_detection_run() < n_det, f"track {self.id}: unpromoted with {n_det} detections"
        if self.status is Status.LOST:
            assert all(a == NULL for a in self.associations[-self.lost_count:])


def read_kv(text: str):
    """Yield ``(lineno, key, value)`` from ``key = value`` lines; ``#`` starts a comment."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        yield lineno, key, val


@dataclass
class TrackerParams:
    sigma_det: tuple = (0.2, 0.2, 0.2)
    sigma_det_null: tuple = (100.0, 100.0, 1.0)
    sigma_cv: tuple = (0.25, 0.25, 0.25, 0.25, 0.25, 0.25)
    sigma_rep: float = 0.5  # variance, m^2
    d_min: float = 4.0
    c_min_offline: float = 3.9
    c_min_online: float = 3.5
    n_det: int = 2
    n_lost: int = 5
    n_perm: int = 1
    dt: float = 0.1
    confidence_offset: Optional[float] = None  # None: derived from the data
    mode: Mode = Mode.OFFLINE

    def __post_init__(self):
        self.sigma_det = tuple(float(v) for v in self.sigma_det)
        self.sigma_det_null = tuple(float(v) for v in self.sigma_det_null)
        self.sigma_cv = tuple(float(v) for v in self.sigma_cv)
        self.mode = Mode(self.mode)
        self.validate()

    def validate(self) -> None:
        if len(self.sigma_det) != 3 or len(self.sigma_det_null) != 3 or len(self.sigma_cv) != 6:
            raise ConfigError("sigma_det/sigma_det_null need 3 entries, sigma_cv needs 6")
        for name in ("sigma_det", "sigma_det_null", "sigma_cv"):
            if any(not (v > 0 and math.isfinite(v)) for v in getattr(self, name)):
                raise ConfigError(f"{name} entries must be positive")
        if not self.sigma_rep > 0:
            raise ConfigError("sigma_rep must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.d_min < 0:
            raise ConfigError("d_min must be non-negative")
        if self.n_det < 1 or self.n_lost < 1 or self.n_perm < 0:
            raise ConfigError("need n_det >= 1, n_lost >= 1, n_perm >= 0")

    @property
    def c_min(self) -> float:
        return self.c_min_online if self.mode is Mode.ONLINE else self.c_min_offline

    # flat ``key = value`` config files
    def dumps(self) -> str:
        lines = ["# tracker parameters (SI units)"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                s = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, Mode):
                s = v.value
            elif v is None:
                s = "auto"
            else:
                s = repr(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, base: Optional["TrackerParams"] = None) -> "TrackerParams":
        base = base or default_params()
        types = {f.name: f for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base)
        for lineno, key, val in read_kv(text):
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            default = getattr(base, key)
            try:
                if isinstance(default, tuple):
                    values[key] = tuple(float(x) for x in val.split(","))
                elif key == "mode":
                    values[key] = Mode(val.lower())
                elif key == "confidence_offset":
                    values[key] = None if val.lower() in ("auto", "none") else float(val)
                elif isinstance(default, bool):
                    values[key] = val.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    values[key] = int(val)
                else:
                    values[key] = float(val)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path, base: Optional["TrackerParams"] = None) -> "TrackerParams":
        return cls.loads(Path(path).read_text(), base)

    def replace(self, **changes) -> "TrackerParams":
        return dataclasses.replace(self, **changes)


def default_params(mode: Mode | str = Mode.OFFLINE) -> TrackerParams:
    return TrackerParams(mode=Mode(mode))


def normalize_confidence(raw: float, offset: float) -> float:
    out = raw + offset
    if out < 0:
        raise ValueError(f"confidence offset {offset} leaves {raw} negative")
    return out


def auto_confidence_offset(confidences: Sequence[float]) -> float:
    """Magnitude of the most negative raw confidence (0 if none are negative)."""
    if len(confidences) == 0:
        return 0.0
    lo = float(min(confidences))
    return -lo if lo < 0 else 0.0


def normalize_detections(frames: dict, offset: Optional[float] = None) -> tuple[dict, float]:
    """Shift every confidence by ``offset`` (derived from the data when None)."""
    if offset is None:
        offset = auto_confidence_offset([d.confidence for dets in frames.values() for d in dets])
    out = {
        t: [d.replace(confidence=normalize_confidence(d.confidence, offset)) for d in dets]
        for t, dets in frames.items()
    }
    return out, offset
