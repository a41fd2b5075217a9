"""Residuals and analytic Jacobians for the three factor types.

Every residual is already whitened, so its squared norm is the factor's
negative log-likelihood (up to a constant). Single-factor evaluators live
here; the solver uses the batched versions at the bottom of the module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import GaussianMixture

REPELLING_EPS = 1e-3  # m, guard against the 1/d singularity


class InvalidComponentError(ValueError):
    pass


@dataclass
class Residual:
    values: np.ndarray
    jacobians: list  # one (len(values), dim) matrix per connected variable
    clamped: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        for J in self.jacobians:
            assert J.shape[0] == self.values.shape[0]

    @property
    def squared_norm(self) -> float:
        return float(self.values @ self.values)


@dataclass
class DetectionFactor:
    mixture: GaussianMixture
    frame: int
    weight_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weight_rows = mixture_weight_rows(self.mixture.scaled_weights)

    dim = 4


@dataclass
class CvFactor:
    sqrt_info: np.ndarray  # 6x6
    dt: float

    dim = 6

    @classmethod
    def from_sigmas(cls, sigma_cv: Sequence[float], dt: float) -> "CvFactor":
        return cls(np.diag(1.0 / np.asarray(sigma_cv, float)), dt)


@dataclass
class RepellingFactor:
    sqrt_info: float

    dim = 1

    @classmethod
    def from_variance(cls, variance: float) -> "RepellingFactor":
        return cls(1.0 / np.sqrt(variance))


def mixture_weight_rows(scaled_weights: np.ndarray) -> np.ndarray:
    """``sqrt(-2 ln(c_j / max c))`` for each component."""
    c = np.asarray(scaled_weights, dtype=float)
    if np.any(c <= 0) or not np.all(np.isfinite(c)):
        raise InvalidComponentError("scaled component weights must be positive and finite")
    ratio = -2.0 * np.log(c / c.max())
    return np.sqrt(np.maximum(ratio, 0.0))


def eval_detection(factor: DetectionFactor, pos) -> tuple[Residual, int]:
    """Max-mixture residual at ``pos``; returns the residual and selected component.

    Ties go to the lowest component index.
    """
    pos = np.asarray(pos, dtype=float)
    best = None
    best_sq = np.inf
    for j, comp in enumerate(factor.mixture.components):
        r = np.empty(4)
        r[0] = factor.weight_rows[j]
        r[1:] = comp.sqrt_info @ (pos - comp.mean)
        sq = r @ r
        if sq < best_sq:
            best, best_sq = (j, r, comp.sqrt_info), sq
    j, r, S = best
    return Residual(r, [np.vstack([np.zeros((1, 3)), S])]), j


def eval_detection_fixed(factor: DetectionFactor, pos, component: int) -> Residual:
    comp = factor.mixture.components[component]
    r = np.empty(4)
    r[0] = factor.weight_rows[component]
    r[1:] = comp.sqrt_info @ (np.asarray(pos, float) - comp.mean)
    return Residual(r, [np.vstack([np.zeros((1, 3)), comp.sqrt_info])])


def cv_error(pos_t, vel_t, pos_t1, vel_t1, dt: float) -> np.ndarray:
    """Unwhitened constant-velocity error, zero when ``pos_t1 = pos_t + vel_t*dt``."""
    e = np.empty(6)
    e[:3] = (np.asarray(pos_t) - np.asarray(pos_t1)) + np.asarray(vel_t) * dt
    e[3:] = np.asarray(vel_t) - np.asarray(vel_t1)
    return e


def cv_blocks(dt: float) -> list:
    """Unwhitened Jacobian blocks wrt (pos_t, vel_t, pos_t1, vel_t1)."""
    I, Z = np.eye(3), np.zeros((3, 3))
    return [
        np.vstack([I, Z]),
        np.vstack([dt * I, I]),
        np.vstack([-I, Z]),
        np.vstack([Z, -I]),
    ]


def eval_cv(factor: CvFactor, pos_t, vel_t, pos_t1, vel_t1) -> Residual:
    if not factor.dt > 0:
        raise ValueError("dt must be positive")
    e = cv_error(pos_t, vel_t, pos_t1, vel_t1, factor.dt)
    r = factor.sqrt_info @ e
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite constant-velocity residual")
    return Residual(r, [factor.sqrt_info @ B for B in cv_blocks(factor.dt)])


def eval_repelling(factor: RepellingFactor, pos_n, pos_m) -> Residual:
    diff = np.asarray(pos_n, float) - np.asarray(pos_m, float)
    d = float(np.linalg.norm(diff))
    if d <= REPELLING_EPS:
        r = np.array([factor.sqrt_info / REPELLING_EPS])
        Z = np.zeros((1, 3))
        return Residual(r, [Z, Z.copy()], clamped=True)
    r = np.array([factor.sqrt_info / d])
    Jn = (-factor.sqrt_info / d**3 * diff).reshape(1, 3)
    return Residual(r, [Jn, -Jn])


def _evaluate(factor, states, component=None) -> Residual:
    if isinstance(factor, DetectionFactor):
        if component is None:
            return eval_detection(factor, states[0])[0]
        return eval_detection_fixed(factor, states[0], component)
    if isinstance(factor, CvFactor):
        return eval_cv(factor, *states)
    if isinstance(factor, RepellingFactor):
        return eval_repelling(factor, *states)
    raise TypeError(f"unknown factor {type(factor).__name__}")


def jacobian_check(factor, states, step: float = 1e-6) -> float:
    """Max of ``|analytic - central difference| / max(1, |analytic|)`` over all entries.

    For detection factors the component selected at ``states`` is held fixed.
    """
    states = [np.asarray(s, dtype=float).copy() for s in states]
    component = None
    if isinstance(factor, DetectionFactor):
        component = eval_detection(factor, states[0])[1]
    analytic = _evaluate(factor, states, component).jacobians
    worst = 0.0
    for k, x in enumerate(states):
        numeric = np.empty_like(analytic[k])
        for i in range(x.size):
            plus = [s.copy() for s in states]
            minus = [s.copy() for s in states]
            plus[k][i] += step
            minus[k][i] -= step
            rp = _evaluate(factor, plus, component).values
            rm = _evaluate(factor, minus, component).values
            numeric[:, i] = (rp - rm) / (2 * step)
        err = np.abs(analytic[k] - numeric) / np.maximum(1.0, np.abs(analytic[k]))
        worst = max(worst, float(err.max()))
    return worst


# batched evaluation used by the solver

def batch_detection(pos, means, sqrt_infos, weight_rows, valid):
    """Evaluate F detection factors at once.

    pos (F,3); means (F,K,3); sqrt_infos (F,K,3,3); weight_rows (F,K); valid (F,K) bool.
    Returns residuals (F,4), position Jacobians (F,4,3) and selected indices (F,).
    """
    diff = pos[:, None, :] - means
    white = np.einsum("fkab,fkb->fka", sqrt_infos, diff)
    sq = weight_rows**2 + np.einsum("fka,fka->fk", white, white)
    sq = np.where(valid, sq, np.inf)
    sel = np.argmin(sq, axis=1)
    idx = np.arange(len(pos))
    res = np.empty((len(pos), 4))
    res[:, 0] = weight_rows[idx, sel]
    res[:, 1:] = white[idx, sel]
    jac = np.zeros((len(pos), 4, 3))
    jac[:, 1:, :] = sqrt_infos[idx, sel]
    return res, jac, sel


def batch_cv(x_t, x_t1, sqrt_info, dt):
    """x_t, x_t1 (C,6) stacked (pos, vel). Returns residuals (C,6)."""
    e = np.empty_like(x_t)
    e[:, :3] = x_t[:, :3] - x_t1[:, :3] + x_t[:, 3:] * dt
    e[:, 3:] = x_t[:, 3:] - x_t1[:, 3:]
    return e @ sqrt_info.T


def batch_repelling(pos_n, pos_m, sqrt_info):
    """Returns residuals (R,), Jacobians wrt pos_n (R,3) and a clamped mask."""
    diff = pos_n - pos_m
    d = np.linalg.norm(diff, axis=1)
    clamped = d <= REPELLING_EPS
    dd = np.where(clamped, REPELLING_EPS, d)
    res = sqrt_info / dd
    jac = -sqrt_info / dd[:, None] ** 3 * diff
    jac[clamped] = 0.0
    return res, jac, clamped
