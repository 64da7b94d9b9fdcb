import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2

from oracles import jpda_brute_force, kalman_filter
from scrubber.tracking import (
    TRACK_CSV_HEADER,
    Tracker,
    TrackerConfig,
    associate_nn,
    associate_nnjpda,
    chi2_threshold_2dof,
    gate,
    jpda_marginals,
    predict,
    process_noise,
    track_rows,
    ukf_predict,
    update_ekf,
    update_ukf,
)
from scrubber.types import Detection, Source, isotropic


def det(x, y, t, src=Source.LIDAR3D, sigma=0.1):
    return Detection([x, y], isotropic(sigma), src, 1.0, t)


# predict


def test_predict_noiseless():
    m, P = predict(np.array([0.0, 0, 1, 0]), np.eye(4), 1.0, 0.0)
    np.testing.assert_allclose(m, [1, 0, 1, 0])
    F = np.eye(4)
    F[0, 2] = F[1, 3] = 1
    np.testing.assert_allclose(P, F @ F.T)


def test_predict_zero_dt_identity():
    m0, P0 = np.array([1.0, 2, 3, 4]), np.diag([1.0, 2, 3, 4])
    m, P = predict(m0, P0, 0.0, 0.5)
    np.testing.assert_array_equal(m, m0)
    np.testing.assert_array_equal(P, P0)
    with pytest.raises(ValueError):
        predict(m0, P0, -0.1, 0.5)


def test_predict_hand_computed():
    _, P = predict(np.zeros(4), np.eye(4), 1.0, 0.5)
    # F I F^T: [[2,0,1,0],[0,2,0,1],[1,0,1,0],[0,1,0,1]]; Q(1) = 0.5*[[1/3,.,1/2,.],...]
    expected = np.array(
        [
            [2 + 0.5 / 3, 0, 1 + 0.25, 0],
            [0, 2 + 0.5 / 3, 0, 1 + 0.25],
            [1 + 0.25, 0, 1 + 0.5, 0],
            [0, 1 + 0.25, 0, 1 + 0.5],
        ]
    )
    np.testing.assert_allclose(P, expected, atol=1e-15)


# update


def test_perfect_measurement_limit():
    m, P = update_ekf(np.array([0.0, 0, 1, 1]), np.eye(4), [2.0, -1.0], np.eye(2) * 1e-12)
    np.testing.assert_allclose(m[:2], [2, -1], atol=1e-4)
    m, P = update_ukf(np.array([0.0, 0, 1, 1]), np.eye(4), [2.0, -1.0], np.eye(2) * 1e-12)
    np.testing.assert_allclose(m[:2], [2, -1], atol=1e-4)


def test_zero_innovation_shrinks_covariance():
    m0, P0 = np.array([1.0, 1, 0, 0]), np.eye(4)
    m, P = update_ekf(m0, P0, [1.0, 1.0], np.eye(2) * 0.01)
    np.testing.assert_allclose(m, m0)
    assert np.trace(P) < np.trace(P0)


def test_non_pd_innovation_rejected():
    with pytest.raises(np.linalg.LinAlgError):
        update_ekf(np.zeros(4), np.zeros((4, 4)), [0, 0], -np.eye(2))


def _random_pd(r, n=4):
    A = r.normal(size=(n, n))
    return A @ A.T + n * np.eye(n) * 0.1


@given(st.integers(0, 100_000))
def test_ukf_ekf_kf_agree(seed):
    r = np.random.default_rng(seed)
    x0, P0 = r.normal(size=4), _random_pd(r)
    steps = [(r.uniform(0.01, 0.5), r.normal(size=2) * 3, _random_pd(r, 2) * 0.1) for _ in range(8)]
    ref = kalman_filter(x0, P0, steps, 0.5)
    me, Pe = x0, P0
    mu, Pu = x0, P0
    for (dt, z, R), (xk, Pk) in zip(steps, ref):
        me, Pe = update_ekf(*predict(me, Pe, dt, 0.5), z, R)
        mu, Pu = update_ukf(*ukf_predict(mu, Pu, dt, 0.5), z, R)
        for m, P in ((me, Pe), (mu, Pu)):
            np.testing.assert_allclose(m, xk, atol=1e-6)
            np.testing.assert_allclose(P, Pk, atol=1e-5)
            np.testing.assert_array_equal(P, P.T)
            assert np.linalg.eigvalsh(P).min() > 0


# gating


def test_gate_threshold_value():
    assert chi2_threshold_2dof(0.95) == pytest.approx(chi2.ppf(0.95, 2), abs=1e-12)
    assert chi2_threshold_2dof(0.95) == pytest.approx(5.991, abs=1e-3)


def test_gate_examples():
    P = np.zeros((4, 4))
    P[:2, :2] = 0.5 * np.eye(2)
    R = 0.5 * np.eye(2)
    ok, d2 = gate(np.zeros(4), P, [0.0, 0.0], R)
    assert ok and d2 == 0
    ok, d2 = gate(np.zeros(4), P, [3.0, 0.0], R)
    assert not ok and d2 == pytest.approx(9.0)
    ok, d2 = gate(np.zeros(4), 4 * P, [3.0, 0.0], 4 * R)
    assert ok and d2 == pytest.approx(2.25)


def test_gate_singular():
    with pytest.raises(np.linalg.LinAlgError):
        gate(np.zeros(4), np.zeros((4, 4)), [1.0, 0.0], np.zeros((2, 2)))


# association


def test_nn_examples():
    assert associate_nn(np.array([[1.0]]), np.array([[True]])) == [(0, 0)]
    assert associate_nn(np.array([[1.0, 9], [9, 1]]), np.ones((2, 2), bool)) == [(0, 0), (1, 1)]
    # greedy takes the globally cheapest pair first, ending at total cost 101
    # where the optimal assignment (0,1),(1,0) would cost 4
    got = associate_nn(np.array([[1.0, 2], [2, 100]]), np.ones((2, 2), bool))
    assert got == [(0, 0), (1, 1)]


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_nn_is_greedy_one_to_one(seed, nt, nd):
    r = np.random.default_rng(seed)
    cost = r.random((nt, nd))
    gated = r.random((nt, nd)) < 0.7
    pairs = associate_nn(cost, gated)
    ts, ds = [p[0] for p in pairs], [p[1] for p in pairs]
    assert len(set(ts)) == len(ts) and len(set(ds)) == len(ds)
    assert all(gated[t, d] for t, d in pairs)
    # replay the greedy rule independently
    c = np.where(gated, cost, np.inf)
    expect = []
    while np.isfinite(c).any():
        t, d = np.unravel_index(np.argmin(c), c.shape)
        expect.append((int(t), int(d)))
        c[t, :] = np.inf
        c[:, d] = np.inf
    assert pairs == sorted(expect)


def test_jpda_single_pair():
    lik, gated = np.array([[5.0]]), np.array([[True]])
    pairs, beta = associate_nnjpda(lik, gated, np.array([[0.1]]), 0.9, 0.05)
    assert beta[0, 0] > 0.5 and pairs == [(0, 0)]


def test_jpda_separated_pairs_identity():
    lik = np.array([[10.0, 1e-12], [1e-12, 10.0]])
    gated = np.array([[True, False], [False, True]])
    pairs, beta = associate_nnjpda(lik, gated, np.array([[0.1, 9], [9, 0.1]]), 0.9, 0.05)
    assert pairs == [(0, 0), (1, 1)]
    # 1x1 components: beta = pd*L/lam / (pd*L/lam + 1 - pd)
    b = 0.9 * 10 / 0.05 / (0.9 * 10 / 0.05 + 0.1)
    np.testing.assert_allclose(beta[:, :2], np.diag([b, b]), atol=1e-12)


@given(st.integers(0, 100_000), st.integers(1, 4), st.integers(0, 4))
def test_jpda_matches_enumeration(seed, nt, nd):
    r = np.random.default_rng(seed)
    lik = r.uniform(0.01, 5, (nt, nd))
    gated = r.random((nt, nd)) < 0.7
    pd, lam = r.uniform(0.5, 0.99), r.uniform(0.01, 1)
    beta = jpda_marginals(lik, gated, pd, lam)
    ref = jpda_brute_force(lik, gated, pd, lam)
    np.testing.assert_allclose(beta, ref, atol=1e-9)
    np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-12)


def test_jpda_reduces_to_nn_for_singletons():
    r = np.random.default_rng(0)
    cost = r.random((3, 3))
    gated = np.eye(3, dtype=bool)
    lik = np.exp(-cost)
    pairs, _ = associate_nnjpda(lik, gated, cost)
    assert pairs == associate_nn(cost, gated)


def test_jpda_large_component_falls_back(caplog):
    n = 4
    gated = np.ones((n, n), bool)
    cost = np.random.default_rng(0).random((n, n))
    pairs, _ = associate_nnjpda(np.exp(-cost), gated, cost, max_component=3)
    assert pairs == associate_nn(cost, gated)
    assert "falling back" in caplog.text


# tracker lifecycle


def test_confirms_on_third_hit():
    tr = Tracker()
    assert tr.step([det(1, 1, 0.0)]) == []
    assert tr.step([det(1, 1, 0.1)]) == []
    out = tr.step([det(1, 1, 0.2)])
    assert len(out) == 1 and out[0].id == 1


def test_spurious_detection_never_confirms():
    tr = Tracker()
    tr.step([det(1, 1, 0.0)])
    for k in range(1, 40):
        assert tr.step([], t=k * 0.1) == []
    assert tr.tracks == []


def test_deletion_after_timeout():
    tr = Tracker()
    for k in range(3):
        tr.step([det(0, 0, k * 0.1)])
    assert len(tr.confirmed()) == 1
    tr.step([], t=0.2 + 2.0)
    assert len(tr.confirmed()) == 1
    tr.step([], t=0.2 + 2.01)
    assert tr.confirmed() == []


def test_time_regression():
    tr = Tracker()
    tr.step([det(0, 0, 1.0)])
    with pytest.raises(ValueError):
        tr.step([det(0, 0, 0.5)])
    with pytest.raises(ValueError):
        tr.step([])


@pytest.mark.parametrize("filt", ["ekf", "ukf"])
def test_velocity_converges(filt):
    tr = Tracker(TrackerConfig(filter=filt))
    for k in range(11):
        out = tr.step([det(1.2 * k * 0.1, 0.0, k * 0.1)])
    assert len(out) == 1
    np.testing.assert_allclose(out[0].velocity, [1.2, 0.0], atol=0.1)


def test_ids_increase_and_are_unique():
    tr = Tracker()
    seen = []
    for k in range(30):
        t = k * 0.1
        dets = [det(0, 0, t)] + ([det(5, 5, t)] if k >= 10 else []) + ([det(-5, 5, t)] if k >= 20 else [])
        for s in tr.step(dets):
            if s.id not in seen:
                seen.append(s.id)
    assert seen == [1, 2, 3]


def test_multi_source_order_invariance():
    r = np.random.default_rng(3)
    frames = []
    for k in range(15):
        t = k * 0.1
        ds = []
        for x in (0.0, 3.0):
            ds.append(det(x + r.normal(0, 0.05), r.normal(0, 0.05), t, Source.LIDAR3D, 0.1))
            ds.append(det(x + r.normal(0, 0.1), r.normal(0, 0.1), t, Source.LASER_LEGS, 0.2))
        frames.append(ds)

    def run(order_seed):
        tr = Tracker()
        rr = np.random.default_rng(order_seed)
        out = None
        for ds in frames:
            out = tr.step([ds[i] for i in rr.permutation(len(ds))])
        return [(s.id, s.mean.tolist()) for s in out]

    assert run(0) == run(1) == run(2)


def test_covariance_stays_pd():
    r = np.random.default_rng(0)
    for mode in ("nn", "nnjpda"):
        tr = Tracker(TrackerConfig(association=mode))
        for k in range(50):
            ds = [det(x + r.normal(0, 0.1), r.normal(0, 0.1), k * 0.1) for x in (0, 1.0) if r.random() < 0.9]
            tr.step(ds, t=k * 0.1)
            for t_ in tr.tracks:
                np.testing.assert_array_equal(t_.cov, t_.cov.T)
                assert np.linalg.eigvalsh(t_.cov).min() > 0


def test_track_rows_layout():
    tr = Tracker()
    for k in range(3):
        out = tr.step([det(1, 2, k * 0.1)])
    rows = track_rows(out)
    assert len(rows[0]) == len(TRACK_CSV_HEADER)
    assert rows[0][1] == 1 and rows[0][-1] == 1


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrackerConfig(association="hungarian")
    with pytest.raises(ValueError):
        TrackerConfig(init_hits=1)
    c = TrackerConfig(q=0.7, sigmas={"lidar3d": 0.05})
    assert TrackerConfig.from_dict(c.to_dict()) == c
    assert c.sigmas["laser_legs"] == 0.2


def test_process_noise_symmetric():
    Q = process_noise(0.3, 0.5)
    np.testing.assert_array_equal(Q, Q.T)
    assert np.linalg.eigvalsh(Q).min() > 0
    assert math.isclose(Q[0, 0], 0.5 * 0.3**3 / 3)
