import numpy as np
import pytest

from fg3dmot.core import default_params
from fg3dmot.factors import CvFactor, DetectionFactor, RepellingFactor
from fg3dmot.graph import FactorGraph, GraphStructureError
from fg3dmot.solver import optimize
from fg3dmot.tracker import build_mixture

from conftest import det

P = default_params()


def mix(*points):
    return build_mixture([det(0, p) for p in points], P)


def counts(g):
    out = {"det": 0, "cv": 0, "rep": 0}
    for f, _ in g.factors:
        out[{DetectionFactor: "det", CvFactor: "cv", RepellingFactor: "rep"}[type(f)]] += 1
    return out


def test_new_track_initialization():
    g = FactorGraph.from_params(P)
    g.add_track_frame(0, 0, (1, 2, 0.5), np.zeros(3), mix((1, 2, 0.5)))
    np.testing.assert_array_equal(g.position(0, 0), [1, 2, 0.5])
    np.testing.assert_array_equal(g.velocity(0, 0), [0, 0, 0])


def test_two_frames_counts():
    g = FactorGraph.from_params(P)
    g.add_track_frame(0, 0, (0, 0, 0), np.zeros(3), mix((0, 0, 0)))
    assert counts(g) == {"det": 1, "cv": 0, "rep": 0}
    g.add_track_frame(0, 1, (0, 0, 0), np.zeros(3), mix((0, 0, 0)))
    assert counts(g) == {"det": 2, "cv": 1, "rep": 0}
    assert len(g.variables) == 4
    g.check()


def test_t_frame_track_structure():
    g = FactorGraph.from_params(P)
    for t in range(12):
        g.add_track_frame(3, t, (t, 0, 0), np.zeros(3), mix((t, 0, 0)))
    g.refresh_repelling(P.d_min)
    assert counts(g) == {"det": 12, "cv": 11, "rep": 0}


def test_duplicate_and_gap_rejected():
    g = FactorGraph.from_params(P)
    g.add_track_frame(0, 0, (0, 0, 0), np.zeros(3), mix())
    with pytest.raises(GraphStructureError):
        g.add_track_frame(0, 0, (0, 0, 0), np.zeros(3), mix())
    with pytest.raises(GraphStructureError):
        g.add_track_frame(0, 2, (0, 0, 0), np.zeros(3), mix())


@pytest.mark.parametrize(
    "positions,expected",
    [([(0, 0, 0), (2, 0, 0)], 1), ([(0, 0, 0), (10, 0, 0)], 0), ([(0, 0, 0), (1, 0, 0), (0, 1, 0)], 3)],
)
def test_repelling_pairs(positions, expected):
    g = FactorGraph.from_params(P)
    for i, p in enumerate(positions):
        g.add_track_frame(i, 0, p, np.zeros(3), mix(*positions))
    assert g.add_repelling_pairs(0, 4.0) == expected
    # re-invocation replaces rather than appends
    assert g.add_repelling_pairs(0, 4.0) == expected
    assert counts(g)["rep"] == expected


def test_repelling_symmetric_under_track_order():
    pts = [(0, 0, 0), (1.5, 0, 0), (3.0, 1, 0), (20, 0, 0)]

    def pairs(order):
        g = FactorGraph.from_params(P)
        for i in order:
            g.add_track_frame(i, 0, pts[i], np.zeros(3), mix(*pts))
        g.add_repelling_pairs(0, 4.0)
        return {frozenset(p) for p in g.repelling.get(0, [])}

    assert pairs([0, 1, 2, 3]) == pairs([3, 1, 0, 2])


def test_propagate():
    g = FactorGraph(dt=0.1)
    g.add_track_frame(0, 0, (0, 0, 0), (10, 0, 0), mix())
    pos, vel = g.propagate(0, 0)
    np.testing.assert_allclose(pos, [1, 0, 0])
    np.testing.assert_array_equal(vel, [10, 0, 0])
    g.add_track_frame(1, 0, (0, 0, 0), (1, 1, 0), mix())
    p1, v1 = g.propagate(1, 0)
    g.add_track_frame(1, 1, p1, v1, mix())
    p2, v2 = g.propagate(1, 1)
    np.testing.assert_allclose(p2, [0.2, 0.2, 0], atol=1e-15)
    g.add_track_frame(2, 0, (5, 5, 5), (0, 0, 0), mix())
    np.testing.assert_array_equal(g.propagate(2, 0)[0], [5, 5, 5])
    with pytest.raises(GraphStructureError):
        g.propagate(2, 1)


def test_propagated_detection_keeps_zero_cv_residual():
    from fg3dmot.solver import total_cost

    g = FactorGraph.from_params(P)
    g.add_track_frame(0, 0, (0, 0, 0), (5, 0, 0), mix((0, 0, 0)))
    pos, vel = g.propagate(0, 0)
    g.add_track_frame(0, 1, pos, vel, mix(pos))
    assert total_cost(g) == pytest.approx(0.0, abs=1e-20)


def test_marginal_window_counts_and_freezes():
    g = FactorGraph.from_params(P)
    rng = np.random.default_rng(0)
    for t in range(10):
        p = (t, 0, 0) + rng.normal(scale=0.2, size=3)
        g.add_track_frame(0, t, p, np.zeros(3), mix(p))
    assert g.marginal_window(None).free_variable_count() == 20
    g.marginal_window(2)
    assert g.free_variable_count() == 4
    before = {k: v.copy() for k, v in g.states.items()}
    optimize(g)
    for k in before:
        if k in g.frozen:
            np.testing.assert_array_equal(g.states[k], before[k])
    assert any(not np.array_equal(g.states[k], before[k]) for k in before if k not in g.frozen)
    with pytest.raises(ValueError):
        g.marginal_window(1)


def test_remove_and_truncate():
    g = FactorGraph.from_params(P)
    for t in range(4):
        g.add_track_frame(0, t, (0, 0, 0), np.zeros(3), mix())
        g.add_track_frame(1, t, (1, 0, 0), np.zeros(3), mix())
    g.refresh_repelling(4.0)
    g.truncate_track(1, 2)
    g.check()
    assert g.track_frames[1] == [0, 1]
    assert counts(g) == {"det": 6, "cv": 4, "rep": 2}
    g.remove_track(0)
    g.check()
    assert counts(g) == {"det": 2, "cv": 1, "rep": 0}


GOLDEN = """\
det 0 pos[0@0]
det 1 pos[0@1]
cv 0 pos[0@0] vel[0@0] pos[0@1] vel[0@1]
det 0 pos[1@0]
det 1 pos[1@1]
cv 0 pos[1@0] vel[1@0] pos[1@1] vel[1@1]
rep 0 pos[0@0] pos[1@0]
rep 1 pos[0@1] pos[1@1]
"""


def test_dump_golden():
    g = FactorGraph.from_params(P)
    for t in range(2):
        for tid, x in ((0, 0.0), (1, 2.0)):
            g.add_track_frame(tid, t, (x, 0, 0), np.zeros(3), mix((0, 0, 0), (2, 0, 0)))
    g.refresh_repelling(4.0)
    assert g.dump() == GOLDEN
    assert FactorGraph().dump() == ""
