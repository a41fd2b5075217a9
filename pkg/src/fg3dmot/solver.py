"""Dogleg trust-region least squares over a FactorGraph.

Max-mixture components are re-selected at every residual evaluation, so the
objective is the piecewise-quadratic envelope of all mixture choices.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .factors import batch_cv, batch_detection, batch_repelling, cv_blocks
from .graph import FactorGraph

log = logging.getLogger(__name__)


class SolverDivergedError(FloatingPointError):
    pass


class Termination(str, enum.Enum):
    GRADIENT_TOL = "gradient_tol"
    STEP_TOL = "step_tol"
    COST_TOL = "cost_tol"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 100
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    cost_tol: float = 1e-10
    initial_trust_radius: float = 1.0
    max_trust_radius: float = 1e4
    verbose: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("gradient_tol", "step_tol", "cost_tol", "initial_trust_radius", "max_trust_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: Termination
    component_switches: int
    gradient_norm: float = 0.0
    clamped_repelling: int = 0


class _Problem:
    """Array view of a graph: one 6-column block per (track, frame) slot."""

    def __init__(self, graph: FactorGraph):
        keys = sorted(graph.states)
        self.keys = keys
        slot = {k: i for i, k in enumerate(keys)}
        self.x = np.array([graph.states[k] for k in keys]).reshape(len(keys), 6)
        free = np.array([k not in graph.frozen for k in keys], dtype=bool)
        self.free = free
        self.col = np.full(len(keys), -1)
        self.col[free] = 6 * np.arange(free.sum())
        self.n = 6 * int(free.sum())

        # detection factors, mixtures padded to a common component count
        det_keys = [k for k in keys]
        self.det_slot = np.array([slot[k] for k in det_keys], dtype=int)
        mixtures, mix_index, index_of = [], [], {}
        for k in det_keys:
            f = graph.detection[k]
            mid = id(f.mixture)
            if mid not in index_of:
                index_of[mid] = len(mixtures)
                mixtures.append(f)
            mix_index.append(index_of[mid])
        kmax = max((len(f.mixture) for f in mixtures), default=1)
        M = len(mixtures)
        means = np.zeros((M, kmax, 3))
        S = np.tile(np.eye(3), (M, kmax, 1, 1))
        wr = np.zeros((M, kmax))
        valid = np.zeros((M, kmax), dtype=bool)
        for m, f in enumerate(mixtures):
            K = len(f.mixture)
            means[m, :K] = f.mixture.means
            S[m, :K] = f.mixture.sqrt_infos
            wr[m, :K] = f.weight_rows
            valid[m, :K] = True
        mi = np.array(mix_index, dtype=int)
        self.det_means, self.det_S, self.det_wr, self.det_valid = means[mi], S[mi], wr[mi], valid[mi]
        if len(det_keys) == 0:
            self.det_means = np.zeros((0, 1, 3))
            self.det_S = np.zeros((0, 1, 3, 3))
            self.det_wr = np.zeros((0, 1))
            self.det_valid = np.zeros((0, 1), dtype=bool)

        cv_a, cv_b = [], []
        for tid in sorted(graph.track_frames):
            frames = graph.track_frames[tid]
            for t in frames[:-1]:
                cv_a.append(slot[(tid, t)])
                cv_b.append(slot[(tid, t + 1)])
        self.cv_a = np.array(cv_a, dtype=int)
        self.cv_b = np.array(cv_b, dtype=int)
        self.cv_W = graph.cv.sqrt_info
        self.dt = graph.cv.dt

        rep_a, rep_b = [], []
        for t in sorted(graph.repelling):
            for a, b in graph.repelling[t]:
                rep_a.append(slot[(a, t)])
                rep_b.append(slot[(b, t)])
        self.rep_a = np.array(rep_a, dtype=int)
        self.rep_b = np.array(rep_b, dtype=int)
        self.rep_s = graph.rep.sqrt_info
        self._build_pattern()

    def _build_pattern(self):
        F, C, R = len(self.det_slot), len(self.cv_a), len(self.rep_a)
        self.n_rows = 4 * F + 6 * C + R
        rows, cols = [], []
        # detection rows 1..3 of each factor against the slot's position columns
        r0 = 4 * np.arange(F)
        rr = (r0[:, None, None] + np.arange(4)[None, :, None]) * np.ones((1, 1, 3), int)
        cc = self.col[self.det_slot][:, None, None] + np.arange(3)[None, None, :] + np.zeros((1, 4, 1), int)
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        self._det_keep = np.repeat(self.free[self.det_slot], 12)
        # cv: 6x6 block per endpoint
        base = 4 * F + 6 * np.arange(C)
        rr = base[:, None, None] + np.arange(6)[None, :, None] + np.zeros((1, 1, 6), int)
        for slots in (self.cv_a, self.cv_b):
            cc = self.col[slots][:, None, None] + np.arange(6)[None, None, :] + np.zeros((1, 6, 1), int)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
        self._cv_keep = np.concatenate([np.repeat(self.free[self.cv_a], 36), np.repeat(self.free[self.cv_b], 36)])
        blocks = cv_blocks(self.dt)
        self._cv_Ja = self.cv_W @ np.hstack([blocks[0], blocks[1]])
        self._cv_Jb = self.cv_W @ np.hstack([blocks[2], blocks[3]])
        # repelling: one row, 3 columns per endpoint
        base = 4 * F + 6 * C + np.arange(R)
        for slots in (self.rep_a, self.rep_b):
            rows.append(np.repeat(base, 3))
            cols.append((self.col[slots][:, None] + np.arange(3)[None, :]).ravel())
        self._rep_keep = np.concatenate([np.repeat(self.free[self.rep_a], 3), np.repeat(self.free[self.rep_b], 3)])
        self._keep = np.concatenate([self._det_keep, self._cv_keep, self._rep_keep])
        self._rows = np.concatenate(rows)[self._keep]
        self._cols = np.concatenate(cols)[self._keep]
        C = len(self.cv_a)
        self._cv_vals = np.concatenate([np.tile(self._cv_Ja.ravel(), C), np.tile(self._cv_Jb.ravel(), C)])

    def residuals(self, x):
        det_r, det_J, sel = batch_detection(
            x[self.det_slot, :3], self.det_means, self.det_S, self.det_wr, self.det_valid
        )
        cv_r = batch_cv(x[self.cv_a], x[self.cv_b], self.cv_W, self.dt)
        rep_r, rep_J, clamped = batch_repelling(x[self.rep_a, :3], x[self.rep_b, :3], self.rep_s)
        r = np.concatenate([det_r.ravel(), cv_r.ravel(), rep_r])
        return r, (det_J, rep_J), sel, int(clamped.sum())

    def cost(self, x):
        r = self.residuals(x)[0]
        return 0.5 * float(r @ r)

    def jacobian(self, jac_parts):
        det_J, rep_J = jac_parts
        vals = np.concatenate([det_J.ravel(), self._cv_vals, rep_J.ravel(), (-rep_J).ravel()])[self._keep]
        return sp.csr_matrix((vals, (self._rows, self._cols)), shape=(self.n_rows, self.n))

    def step(self, h):
        x = self.x.copy()
        x[self.free] += h.reshape(-1, 6)
        return x

    def write_back(self, graph: FactorGraph, sel):
        for i, k in enumerate(self.keys):
            graph.states[k] = self.x[i].copy()
            graph.selection[k] = int(sel[i])


def total_cost(graph: FactorGraph) -> float:
    """Half the summed squared residuals, max-mixture minimum per detection factor."""
    if not graph.states:
        return 0.0
    prob = _Problem(graph)
    return prob.cost(prob.x)


def select_components(graph: FactorGraph) -> dict:
    """Currently selected mixture component for each (track, frame)."""
    if not graph.states:
        return {}
    prob = _Problem(graph)
    sel = prob.residuals(prob.x)[2]
    return {k: int(s) for k, s in zip(prob.keys, sel)}


def _dogleg_step(h_gn, h_sd, radius):
    n_gn = np.linalg.norm(h_gn)
    if n_gn <= radius:
        return h_gn
    n_sd = np.linalg.norm(h_sd)
    if n_sd >= radius:
        return h_sd * (radius / n_sd)
    d = h_gn - h_sd
    a = d @ d
    b = 2.0 * (h_sd @ d)
    c = h_sd @ h_sd - radius**2
    disc = np.sqrt(max(b * b - 4 * a * c, 0.0))
    # numerically stable root in [0, 1]
    beta = (-b + disc) / (2 * a) if b <= 0 else (-2 * c) / (b + disc)
    return h_sd + beta * d


def _solve_normal(H, g):
    diag = H.diagonal()
    damp = 1e-12 * np.maximum(diag, 1.0)
    A = (H + sp.diags(damp)).tocsc()
    lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
    return lu.solve(-g)


def optimize(graph: FactorGraph, options: SolverOptions | None = None) -> SolveReport:
    """Minimize the graph cost in place with Powell's dogleg method."""
    options = options or SolverOptions()
    prob = _Problem(graph)
    if prob.n == 0:
        raise ValueError("graph has no free variables")
    with np.errstate(invalid="ignore", over="ignore"):
        r, jparts, sel, clamped = prob.residuals(prob.x)
    if not np.all(np.isfinite(r)):
        raise SolverDivergedError("non-finite residual at the initial point")
    cost = 0.5 * float(r @ r)
    report = SolveReport(cost, cost, 0, Termination.MAX_ITER, 0, clamped_repelling=clamped)
    radius = options.initial_trust_radius
    prev_sel = sel
    termination = Termination.MAX_ITER
    it = 0
    while it < options.max_iterations:
        it += 1
        J = prob.jacobian(jparts)
        g = J.T @ r
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        report.gradient_norm = gnorm
        if gnorm <= options.gradient_tol:
            termination = Termination.GRADIENT_TOL
            break
        H = (J.T @ J).tocsc()
        h_gn = _solve_normal(H, g)
        Jg = J @ g
        alpha = (g @ g) / (Jg @ Jg)
        h_sd = -alpha * g
        xnorm = float(np.linalg.norm(prob.x[prob.free]))
        accepted = False
        while True:
            h = _dogleg_step(h_gn, h_sd, radius)
            hnorm = float(np.linalg.norm(h))
            if hnorm <= options.step_tol * (xnorm + options.step_tol):
                termination = Termination.STEP_TOL
                break
            Jh = J @ h
            predicted = -(g @ h) - 0.5 * (Jh @ Jh)
            x_new = prob.step(h)
            r_new, jparts_new, sel_new, clamped = prob.residuals(x_new)
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
            if rho > 0.75 and hnorm >= 0.99 * radius:
                radius = min(max(radius, 3.0 * hnorm), options.max_trust_radius)
            elif rho < 0.25:
                radius = 0.5 * min(radius, hnorm)
            if rho > 0 and cost_new < cost:
                accepted = True
                break
        if not accepted:
            break
        switches = int(np.count_nonzero(sel_new != prev_sel))
        report.component_switches += switches
        decrease = cost - cost_new
        prob.x, r, jparts, prev_sel = x_new, r_new, jparts_new, sel_new
        report.clamped_repelling = clamped
        if options.verbose:
            log.info("iter %3d cost %.6e radius %.3e switches %d", it, cost_new, radius, switches)
        cost = cost_new
        if decrease <= options.cost_tol * max(cost + decrease, 1e-300):
            termination = Termination.COST_TOL
            break
    prob.write_back(graph, prev_sel)
    report.final_cost = cost
    report.iterations = it
    report.termination = termination
    return report
