import math

import numpy as np
import pytest

from fg3dmot.core import ConfigError
from fg3dmot.factors import cv_error
from fg3dmot.simulate import S1, ScenarioConfig, generate, load_config


def test_noiseless_detections_equal_gt():
    sc = generate(ScenarioConfig(miss_prob=0.0, clutter_rate=0.0, det_noise_sigma=0.0, seed=3))
    for t, dets in sc.detections.items():
        assert len(dets) == 5
        for d, tid in zip(dets, sorted(sc.gt)):
            np.testing.assert_array_equal(d.position, sc.gt[tid][t].position)


def test_determinism():
    a, b = generate(ScenarioConfig(seed=9)), generate(ScenarioConfig(seed=9))
    for t in a.detections:
        assert [d.position.tobytes() for d in a.detections[t]] == [d.position.tobytes() for d in b.detections[t]]
        assert [d.confidence for d in a.detections[t]] == [d.confidence for d in b.detections[t]]


def test_clutter_count_concentration():
    sc = generate(ScenarioConfig(clutter_rate=2.0, n_frames=100, seed=21))
    assert abs(sc.clutter_count - 200) <= 3 * math.sqrt(200)
    assert sc.n_true_detections + sc.clutter_count == sum(len(v) for v in sc.detections.values())


@pytest.mark.parametrize("motion", ["cv", "piecewise"])
def test_gt_obeys_motion_model(motion):
    cfg = ScenarioConfig(motion=motion, turn_rate=0.1, seed=4)
    sc = generate(cfg)
    for tid, boxes in sc.gt.items():
        V = sc.velocities[tid]
        for t in range(cfg.n_frames - 1):
            e = cv_error(boxes[t].position, V[t], boxes[t + 1].position, V[t], cfg.dt)
            assert np.allclose(e, 0.0, atol=1e-9)
        if motion == "cv":
            assert np.allclose(V, V[0])


def test_per_frame_count_bound():
    sc = generate(ScenarioConfig(seed=2, clutter_rate=5.0))
    assert all(len(d) <= 5 + 40 for d in sc.detections.values())


def test_s1_defaults():
    assert (S1.n_objects, S1.n_frames, S1.det_noise_sigma, S1.miss_prob, S1.clutter_rate) == (5, 100, 0.2, 0.1, 2.0)
    assert S1.speed_range == (0.0, 15.0)
    assert len(generate(S1).gt) == 5


def test_confidence_separable_in_expectation():
    true_mu, clutter_mu, _ = S1.confidence_model
    assert clutter_mu < 3.5 < 3.9 < true_mu


def test_config_validation_and_parsing():
    with pytest.raises(ConfigError):
        ScenarioConfig(n_frames=1)
    with pytest.raises(ConfigError):
        ScenarioConfig(miss_prob=1.5)
    cfg = load_config("n_objects = 3\nclutter_region = -5,5,-5,5,0,1\nmotion = piecewise\n", seed=4)
    assert cfg.n_objects == 3 and cfg.seed == 4 and cfg.clutter_region[2] == (0.0, 1.0)
    with pytest.raises(ConfigError, match="unknown key"):
        load_config("speed = 3\n")
