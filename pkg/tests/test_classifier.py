import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import svm_dual_projected_gradient
from scrubber.classifier import (
    N_FEATURES,
    ScalingRanges,
    SvmModel,
    apply_scaling,
    dual_objective,
    extract_features,
    feature_slices,
    features_from_points,
    fit_scaling,
    fit_sigmoid,
    rbf_kernel,
    smo_solve,
    svm_predict,
    svm_train,
    detect_humans_3d,
)
from scrubber.clustering import ClusteringParams, adaptive_cluster, drop_ground, volumetric_filter
from scrubber.synth import Box, Walker, generate_synthetic_scene, human_cloud, render_lidar
from scrubber.types import LIDAR3D_HEIGHT, PointCloud3D, mounting_extrinsic

S = feature_slices()


# features


def test_feature_layout_is_71():
    assert N_FEATURES == 71
    assert [s.stop - s.start for s in S.values()] == [1, 1, 6, 6, 20, 27, 10]


def test_point_count_feature(rng):
    f = features_from_points(rng.normal(size=(150, 3)) + [5, 0, 0], rng.uniform(0, 255, 150))
    assert f[S["f1_point_count"]][0] == 150


def test_min_range_is_3d():
    f = features_from_points(np.array([[3.0, 4.0, 1.0]]), np.array([100.0]))
    assert f[S["f2_min_range"]][0] == pytest.approx(math.sqrt(26))
    assert np.all(np.isfinite(f))


def test_covariance_feature_matches_sample_covariance(rng):
    n = 4000
    pts = rng.normal(size=(n, 3)) + [6, 0, 0]
    f = features_from_points(pts, np.zeros(n))
    cov = f[S["f3_covariance"]]
    # upper triangle order: xx, xy, xz, yy, yz, zz
    diag, off = cov[[0, 3, 5]], cov[[1, 2, 4]]
    three_sigma = 3 * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(diag - 1) < three_sigma)
    assert np.all(np.abs(off) < 3 / math.sqrt(n))
    np.testing.assert_allclose(cov, np.cov(pts.T)[np.triu_indices(3)], rtol=1e-12)


def test_inertia_feature_normalized_by_count():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]]) + [4, 0, 0]
    inert = features_from_points(pts, np.zeros(2))[S["f4_inertia"]]
    # about the centroid: Iyy = Izz = mean(x^2) = 1, Ixx = 0
    np.testing.assert_allclose(inert, [0, 0, 0, 1, 0, 1], atol=1e-12)


def test_slices_and_histogram():
    z = np.linspace(0, 1.0, 11)
    pts = np.column_stack([np.full(11, 3.0), np.zeros(11), z])
    inten = np.full(11, 10.0)
    f = features_from_points(pts, inten)
    hist = f[S["f6_intensity"]][2:]
    assert hist.sum() == pytest.approx(1.0) and hist[0] == 1.0
    assert f[S["f6_intensity"]][0] == 10 and f[S["f6_intensity"]][1] == 0
    slice_range = f[S["f7_slice_range"]]
    assert np.all(slice_range > 0)
    np.testing.assert_allclose(f[S["f5_slices"]], 0.0)


def test_small_clusters_are_finite():
    for n in (1, 2):
        f = features_from_points(np.arange(3 * n, dtype=float).reshape(n, 3) + 1, np.ones(n))
        assert f.shape == (71,) and np.all(np.isfinite(f))


@given(st.integers(0, 100_000))
def test_features_finite_and_histogram_normalized(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 300))
    pts = r.normal(0, r.uniform(0.01, 1), (n, 3)) + r.uniform(-20, 20, 3)
    f = features_from_points(pts, r.uniform(0, 255, n))
    assert f.shape == (71,) and np.all(np.isfinite(f))
    assert f[S["f6_intensity"]][2:].sum() == pytest.approx(1.0)
    assert f[S["f1_point_count"]][0] >= 1 and f[S["f2_min_range"]][0] >= 0


# scaling


def test_scaling_examples():
    r = fit_scaling(np.array([[2.0, 7.0], [4.0, 7.0]]))
    np.testing.assert_allclose(apply_scaling([3.0, 7.0], r), [0.0, 0.0])
    np.testing.assert_allclose(apply_scaling([2.0, 7.0], r), [-1.0, 0.0])
    np.testing.assert_allclose(apply_scaling([4.0, 7.0], r), [1.0, 0.0])
    # no clamping outside the training range
    np.testing.assert_allclose(apply_scaling([6.0, 9.0], r), [3.0, 0.0])
    with pytest.raises(ValueError):
        ScalingRanges(np.array([1.0]), np.array([0.0]))


# SMO


def _smo_vs_qp(X, y, C, gamma):
    K = rbf_kernel(X, X, gamma)
    res = smo_solve(K, y, C, eps=1e-3)
    _, best = svm_dual_projected_gradient(K, y, C)
    got = -dual_objective(res.alpha, K, y)
    assert abs(got - best) <= 1e-4 * abs(best), (got, best)
    assert np.all(res.alpha >= 0) and np.all(res.alpha <= C + 1e-12)
    assert abs(res.alpha @ y) < 1e-9


@given(st.integers(0, 100_000), st.integers(4, 30), st.sampled_from([0.5, 1.0, 10.0]), st.sampled_from([0.1, 1.0]))
def test_smo_matches_brute_force_qp(seed, n, C, gamma):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 2))
    y = np.where(X[:, 0] + 0.5 * r.normal(size=n) > 0, 1.0, -1.0)
    if len(np.unique(y)) < 2:
        y[0] = -y[0]
    _smo_vs_qp(X, y, C, gamma)


def test_smo_agrees_with_sklearn(rng):
    svm = pytest.importorskip("sklearn.svm")
    X = rng.normal(size=(60, 3))
    y = np.where(X[:, 0] * X[:, 1] > 0, 1.0, -1.0)
    ref = svm.SVC(C=5.0, gamma=0.7, kernel="rbf", tol=1e-6).fit(X, y)
    model = svm_train(X, y, C_grid=(5.0,), gamma_grid=(0.7,), folds=2, scale=False, eps=1e-6)
    np.testing.assert_allclose(model.decision(X), ref.decision_function(X), atol=1e-4)


def test_two_points_separable():
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    y = np.array([-1, 1])
    model = svm_train(X, y, C_grid=(10.0,), gamma_grid=(1.0,), folds=2)
    assert [svm_predict(model, x)[0] for x in X] == [-1, 1]


def test_xor_with_rbf():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([1, 1, -1, -1])
    K = rbf_kernel(X, X, 1.0)
    res = smo_solve(K, y.astype(float), 100.0, eps=1e-6)
    dec = K @ (res.alpha * y) - res.rho
    assert np.all(np.sign(dec) == y)
    # by symmetry all four points are support vectors with equal weight
    np.testing.assert_allclose(res.alpha, res.alpha[0], rtol=1e-6)


def test_single_support_vector_model():
    m = SvmModel(gamma=0.5, C=1.0, support_vectors=[[1.0, 2.0]], dual_coef=[1.0], bias=0.0, prob_a=-1.0, prob_b=0.0)
    assert m.decision([[1.0, 2.0]])[0] == pytest.approx(1.0)
    assert svm_predict(m, [1.0, 2.0])[0] == 1
    far = m.decision([[1e3, 1e3]])[0]
    assert 0.0 <= far < 1e-12
    z = SvmModel(gamma=0.5, C=1.0, support_vectors=[[0.0]], dual_coef=[1.0], bias=-1.0, prob_a=-1.0, prob_b=0.0)
    assert svm_predict(z, [0.0])[1] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        m.decision([[1.0, 2.0, 3.0]])
    with pytest.raises(ValueError):
        SvmModel(gamma=0.0, C=1.0, support_vectors=[[0.0]], dual_coef=[1.0], bias=0.0)


def test_training_errors():
    with pytest.raises(ValueError):
        svm_train(np.zeros((4, 2)), [1, 1, 1, 1])
    with pytest.raises(ValueError):
        svm_train(np.zeros((3, 2)), [1, -1, 1], folds=5)
    with pytest.raises(ValueError):
        svm_train(np.zeros((4, 2)), [1, -1, 1, -1], folds=1)


def _two_gaussians(seed, n=200, dim=71):
    r = np.random.default_rng(seed)
    mu = np.zeros(dim)
    mu[0] = 4.0
    X = np.vstack([r.normal(size=(n // 2, dim)), r.normal(size=(n // 2, dim)) + mu])
    y = np.r_[-np.ones(n // 2), np.ones(n // 2)]
    return X, y


def test_cv_table_selection_rule():
    X, y = _two_gaussians(0, 120, 4)
    model = svm_train(X, y, C_grid=(0.1, 1.0, 10.0), gamma_grid=(0.01, 0.1, 1.0), folds=5)
    table = model.cv_table
    best = max(r["mean_accuracy"] for r in table)
    assert max(r["mean_accuracy"] for r in table if r["C"] == model.C and r["gamma"] == model.gamma) == best
    ties = sorted((r["C"], r["gamma"]) for r in table if r["mean_accuracy"] == best)
    assert (model.C, model.gamma) == ties[0]
    assert len(table) == 9 and all(len(r["fold_accuracy"]) == 5 for r in table)


def test_calibration_direction():
    X, y = _two_gaussians(1, 200, 3)
    model = svm_train(X, y, C_grid=(1.0,), gamma_grid=(0.1,))
    p_pos = [svm_predict(model, x)[1] for x in X[y > 0]]
    p_neg = [svm_predict(model, x)[1] for x in X[y < 0]]
    assert np.mean(p_pos) > 0.8 and np.mean(p_neg) < 0.2


def test_fit_sigmoid_recovers_logistic(rng):
    d = rng.normal(0, 2, 20000)
    p = 1 / (1 + np.exp(-1.5 * d + 0.3))
    y = np.where(rng.random(20000) < p, 1, -1)
    A, B = fit_sigmoid(d, y)
    assert A == pytest.approx(-1.5, abs=0.1) and B == pytest.approx(0.3, abs=0.1)


def test_model_json_roundtrip(tmp_path):
    X, y = _two_gaussians(2, 60, 3)
    m = svm_train(X, y, C_grid=(1.0,), gamma_grid=(0.5,), folds=3)
    m.save(tmp_path / "m.json")
    m2 = SvmModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(m.decision(X), m2.decision(X))


def test_prediction_repeatable():
    X, y = _two_gaussians(3, 60, 3)
    m = svm_train(X, y, C_grid=(1.0,), gamma_grid=(0.5,), folds=3)
    assert svm_predict(m, X[0]) == svm_predict(m, X[0])


# detector


def _candidates(cloud, params):
    c = drop_ground(cloud, params.sensor_height, params.ground_clearance)
    return [extract_features(k, c) for k in volumetric_filter(adaptive_cluster(c, params.rings, params.min_size))]


@pytest.fixture(scope="module")
def trained_model():
    rng = np.random.default_rng(99)
    params = ClusteringParams()
    T = mounting_extrinsic(LIDAR3D_HEIGHT)
    pos, neg = [], []
    for _ in range(40):
        pos += _candidates(human_cloud(rng), params)
    for _ in range(40):
        a = rng.uniform(-math.pi, math.pi)
        d = rng.uniform(2, 12)
        x, y = d * math.cos(a), d * math.sin(a)
        shapes = [
            Box.at(x, y, 0.4, 0.4, 1.8, intensity=rng.uniform(110, 170)),
            Box.at(-x, -y, 0.6, 0.6, 0.8, intensity=rng.uniform(110, 170)),
        ]
        neg += _candidates(render_lidar(T, shapes, rng, 0.01), params)
    X = np.array(pos + neg)
    y = np.r_[np.ones(len(pos)), -np.ones(len(neg))]
    return svm_train(X, y, C_grid=(1.0, 10.0), gamma_grid=(0.01, 0.1), folds=5)


def test_detect_empty_cloud(trained_model):
    assert detect_humans_3d(PointCloud3D(np.zeros((0, 4))), trained_model) == []


def test_detect_single_walker(trained_model):
    scene = generate_synthetic_scene(walkers=[Walker((4.0, 1.0))], n_frames=1, sensors=("lidar3d",), clutter=0, seed=3)
    fr = scene.frames[0]
    dets = detect_humans_3d(fr.data, trained_model, pose=scene.poses[0], extrinsic=scene.manifest.extrinsic("lidar3d"))
    assert len(dets) == 1
    assert np.linalg.norm(dets[0].position - [4.0, 1.0]) < 0.3
    assert dets[0].source.value == "lidar3d"


def test_detect_wall_only(trained_model):
    T = mounting_extrinsic(LIDAR3D_HEIGHT)
    cloud = render_lidar(T, [Box.at(4.0, 0.0, 0.2, 4.0, 2.5, intensity=30.0)], np.random.default_rng(0), 0.01)
    assert detect_humans_3d(cloud, trained_model) == []
