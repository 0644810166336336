import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvtrack import motion
from mvtrack.core import BoundingBox


def test_initiate():
    s = motion.initiate(BoundingBox(0, 0, 10, 20))
    np.testing.assert_allclose(s.mean[:4], [5, 10, 0.5, 20])
    assert np.all(s.mean[4:] == 0)
    s2 = motion.initiate(BoundingBox(0, 0, 10, 20))
    assert np.array_equal(s.mean, s2.mean) and np.array_equal(s.covariance, s2.covariance)
    with pytest.raises(ValueError):
        motion.initiate(BoundingBox(0, 0, 0, 20))


def test_predict():
    s = motion.initiate(BoundingBox(0, 0, 10, 20))
    p = motion.predict(s)
    np.testing.assert_array_equal(p.mean[:4], s.mean[:4])
    assert np.trace(p.covariance) > np.trace(s.covariance)
    moving = motion.KalmanState(s.mean + np.r_[np.zeros(4), 1, 0, 0, 0], s.covariance)
    assert motion.predict(moving).mean[0] == pytest.approx(s.mean[0] + 1)


def test_update():
    s = motion.predict(motion.initiate(BoundingBox(0, 0, 10, 20)))
    u = motion.update(s, s.box())
    np.testing.assert_allclose(u.mean[:4], s.mean[:4], atol=1e-12)
    assert np.trace(u.covariance) <= np.trace(s.covariance)
    np.testing.assert_allclose(u.covariance, u.covariance.T, atol=1e-9)
    assert np.all(np.diag(u.covariance) >= 0)


def test_repeated_measurement_converges():
    s = motion.initiate(BoundingBox(0, 0, 10, 20))
    target = BoundingBox(8, 3, 10, 20)
    dists = []
    for _ in range(50):
        s = motion.update(s, target)
        dists.append(np.linalg.norm(s.mean[:2] - target.to_xyah()[:2]))
    assert all(b <= a for a, b in zip(dists, dists[1:]))
    assert dists[-1] < 0.05


def test_stationary_target_with_prediction_settles():
    # the velocity estimate overshoots once, then the error contracts
    s = motion.initiate(BoundingBox(0, 0, 10, 20))
    target = BoundingBox(8, 3, 10, 20)
    dists = []
    for _ in range(50):
        s = motion.update(motion.predict(s), target)
        dists.append(np.linalg.norm(s.mean[:2] - target.to_xyah()[:2]))
    tail = dists[3:]
    assert all(b <= a for a, b in zip(tail, tail[1:]))
    assert dists[-1] < 0.05


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(40, 150))
def test_tracking_constant_velocity_contracts(vx, vy, h):
    box = BoundingBox(100, 100, 0.4 * h, h)
    s = motion.initiate(box)
    errors = []
    for t in range(1, 51):
        s = motion.predict(s)
        truth = box.shifted(vx * t, vy * t)
        errors.append(np.linalg.norm(s.mean[:2] - truth.to_xyah()[:2]))
        s = motion.update(s, truth)
    # after the velocity locks on, prediction error keeps shrinking
    tail = errors[10:]
    assert all(b <= a + 1e-9 for a, b in zip(tail, tail[1:]))


def test_gate_cost_matrix():
    s = motion.initiate(BoundingBox(0, 0, 10, 20))
    near = BoundingBox(0, 0, 10, 20)
    far = BoundingBox(500, 500, 10, 20)
    costs = np.array([[0.2], [0.3]])
    out = motion.gate_cost_matrix(costs, [s], [near, far])
    assert out[0, 0] == 0.2 and np.isinf(out[1, 0])
    same = motion.gate_cost_matrix(costs, [s], [near, far], gate=np.inf)
    np.testing.assert_array_equal(same, costs)
    with pytest.raises(ValueError):
        motion.gate_cost_matrix(costs.T, [s], [near, far])


@given(st.lists(st.floats(0, 2), min_size=3, max_size=3), st.integers(0, 1000))
def test_gating_only_sets_inf(vals, seed):
    rng = np.random.default_rng(seed)
    s = motion.initiate(BoundingBox(50, 50, 20, 50))
    dets = [BoundingBox(*rng.uniform(0, 120, 2), 20, 50) for _ in vals]
    costs = np.array(vals)[:, None]
    out = motion.gate_cost_matrix(costs, [s], dets)
    keep = np.isfinite(out)
    np.testing.assert_array_equal(out[keep], costs[keep])
