import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fg3dmot.core import GaussianComponent, GaussianMixture, default_params
from fg3dmot.graph import FactorGraph
from fg3dmot.solver import SolverDivergedError, SolverOptions, Termination, optimize, select_components, total_cost
from fg3dmot.tracker import build_mixture

from conftest import det
from oracles import chain_least_squares, enumerate_assignments

P = default_params()
S_DET = np.eye(3) / 0.2


def single(mean):
    return GaussianMixture((GaussianComponent.from_sigmas(mean, P.sigma_det, 1.0),))


def chain_graph(tracks, mixtures_fn=single, init=None):
    """``tracks`` maps id -> (T,3) measurements; states start at the measurements with zero velocity."""
    g = FactorGraph.from_params(P)
    for tid, Z in tracks.items():
        for t, z in enumerate(Z):
            x0 = z if init is None else init[tid][t]
            g.add_track_frame(tid, t, x0, np.zeros(3), mixtures_fn(z))
    return g


def test_total_cost_trivial_cases():
    assert total_cost(FactorGraph()) == 0.0
    g = chain_graph({0: np.array([[1.0, 2.0, 3.0]])})
    assert total_cost(g) == 0.0


def test_total_cost_matches_per_factor_sum():
    g = FactorGraph.from_params(P)
    g.add_track_frame(0, 0, (0.1, 0, 0), (1, 0, 0), single((0, 0, 0)))
    g.add_track_frame(0, 1, (0.3, 0.1, 0), (0, 0, 0), single((0.2, 0, 0)))
    det_cost = 0.5 * ((0.1 / 0.2) ** 2 + (0.1 / 0.2) ** 2 + (0.1 / 0.2) ** 2)
    e = np.array([0.1 + 0.1 - 0.3, -0.1, 0, 1, 0, 0]) / 0.25
    assert total_cost(g) == pytest.approx(det_cost + 0.5 * e @ e, rel=1e-12)


def test_exact_cv_line_is_a_fixed_point():
    vel = np.array([3.0, -1.0, 0.2])
    Z = np.array([vel * 0.1 * t for t in range(15)])
    g = FactorGraph.from_params(P)
    for t, z in enumerate(Z):
        g.add_track_frame(0, t, z, vel, build_mixture([det(t, z)], P))
    rep = optimize(g)
    assert rep.final_cost == pytest.approx(0.0, abs=1e-20)
    for t, z in enumerate(Z):
        np.testing.assert_allclose(g.position(0, t), z, atol=1e-9)


def test_linear_chain_matches_dense_oracle():
    rng = np.random.default_rng(7)
    tracks = {}
    for i in range(5):
        v = rng.uniform(-5, 5, 3)
        tracks[i] = np.array([(20 * i, 0, 0) + v * 0.1 * t for t in range(50)]) + rng.normal(scale=0.2, size=(50, 3))
    g = chain_graph(tracks)
    rep = optimize(g, SolverOptions(max_iterations=200))
    assert rep.termination is Termination.GRADIENT_TOL
    assert rep.gradient_norm < 1e-8
    total = 0.0
    for tid, Z in tracks.items():
        x, cost = chain_least_squares(Z, np.repeat(S_DET[None], len(Z), 0), P.sigma_cv, P.dt)
        total += cost
        got = np.array([g.states[(tid, t)] for t in range(len(Z))])
        np.testing.assert_allclose(got, x, atol=1e-7)
    assert rep.final_cost == pytest.approx(total, rel=1e-9)


def test_stationary_smoothing_beats_raw_detections():
    raw_err, opt_err = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        truth = rng.uniform(-10, 10, 3)
        Z = truth + rng.normal(scale=0.2, size=(10, 3))
        g = FactorGraph.from_params(P)
        for t, z in enumerate(Z):
            g.add_track_frame(0, t, z, np.zeros(3), build_mixture([det(t, z)], P))
        optimize(g)
        got = np.array([g.position(0, t) for t in range(10)])
        ref, _ = chain_least_squares(Z, np.repeat(S_DET[None], 10, 0), P.sigma_cv, P.dt)
        np.testing.assert_allclose(got, ref[:, :3], atol=1e-6)
        raw_err.append(np.mean(np.sum((Z - truth) ** 2, axis=1)))
        opt_err.append(np.mean(np.sum((got - truth) ** 2, axis=1)))
    assert math.sqrt(np.mean(opt_err)) < math.sqrt(np.mean(raw_err))


def crossing_instance():
    T = 5
    t = np.arange(T)
    a = np.stack([t * 1.0, -1.25 + 0.5 * t, np.zeros(T)], axis=1)
    b = np.stack([t * 1.0, 1.25 - 0.5 * t, np.zeros(T)], axis=1)
    return a, b


def test_crossing_tracks_association_corrected():
    a, b = crossing_instance()
    T = len(a)
    mixtures = [build_mixture([det(t, a[t]), det(t, b[t])], P) for t in range(T)]
    g = FactorGraph.from_params(P)
    for tid, own, other in ((0, a, b), (1, b, a)):
        for t in range(T):
            # initial association swapped at frame 3
            x0 = other[t] if t == 3 else own[t]
            g.add_track_frame(tid, t, x0, np.zeros(3), mixtures[t])
    before = select_components(g)
    assert before[(0, 3)] == 2 and before[(1, 3)] == 1
    optimize(g)
    sel = select_components(g)

    table = enumerate_assignments([[a[t], b[t]] for t in range(T)], S_DET, P.sigma_cv, P.dt)
    assert len(table) == 2**T
    best_cost = min(c for _, _, c in table)
    winners = {choice: x for choice, x, c in table if c <= best_cost + 1e-9}
    # the straight-line hypotheses are the only optima
    assert set(winners) == {(0,) * T, (1,) * T}
    for tid in (0, 1):
        choice = tuple(sel[(tid, t)] - 1 for t in range(T))
        assert choice == (tid,) * T
        np.testing.assert_allclose([g.position(tid, t) for t in range(T)], winners[choice][:, :3], atol=1e-6)


def test_cost_never_increases_across_iterations():
    rng = np.random.default_rng(11)
    a, b = crossing_instance()
    pts = [[a[t] + rng.normal(scale=0.1, size=3), b[t] + rng.normal(scale=0.1, size=3)] for t in range(5)]
    mixtures = [build_mixture([det(t, p) for p in pts[t]], P) for t in range(5)]

    def build():
        g = FactorGraph.from_params(P)
        for tid in (0, 1):
            for t in range(5):
                g.add_track_frame(tid, t, pts[t][1 - tid if t == 2 else tid], np.zeros(3), mixtures[t])
        g.refresh_repelling(P.d_min)
        return g

    costs = [total_cost(build())]
    for k in range(1, 15):
        costs.append(optimize(build(), SolverOptions(max_iterations=k)).final_cost)
    assert all(c1 <= c0 + 1e-12 for c0, c1 in zip(costs, costs[1:]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_report_invariants(seed, T):
    rng = np.random.default_rng(seed)
    g = FactorGraph.from_params(P)
    for tid in range(2):
        for t in range(T):
            dets = [det(t, rng.uniform(-5, 5, 3)) for _ in range(rng.integers(0, 4))]
            g.add_track_frame(tid, t, rng.uniform(-5, 5, 3), np.zeros(3), build_mixture(dets, P))
    g.refresh_repelling(P.d_min)
    rep = optimize(g)
    assert np.isfinite(rep.final_cost) and rep.final_cost >= 0
    assert rep.final_cost <= rep.initial_cost + SolverOptions().cost_tol
    assert rep.final_cost == pytest.approx(total_cost(g), rel=1e-12, abs=1e-12)


def test_determinism():
    def run():
        rng = np.random.default_rng(5)
        g = FactorGraph.from_params(P)
        for tid in range(3):
            for t in range(20):
                dets = [det(t, (tid * 3.0 + 0.5 * t, 0, 0) + rng.normal(scale=0.2, size=3))]
                g.add_track_frame(tid, t, dets[0].position, np.zeros(3), build_mixture(dets, P))
        g.refresh_repelling(P.d_min)
        rep = optimize(g)
        return rep, np.array([g.states[k] for k in sorted(g.states)])

    (r1, x1), (r2, x2) = run(), run()
    assert r1 == r2
    assert x1.tobytes() == x2.tobytes()


def test_nonfinite_initial_state_diverges():
    g = chain_graph({0: np.zeros((3, 3))})
    g.states[(0, 1)][0] = np.inf
    with pytest.raises(SolverDivergedError):
        optimize(g)


def test_no_free_variables_is_an_error():
    with pytest.raises(ValueError):
        optimize(FactorGraph())
