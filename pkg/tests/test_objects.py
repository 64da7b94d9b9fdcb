import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scrubber.objects import NoFloorError, NoiseModel, ObjectParams, detect_objects, fit_floor, mask_png, sigma
from scrubber.synth import Box, FloorCamera, render_floor_view
from scrubber.types import DepthFrame, Intrinsics, Pose2D


def render(cam=FloorCamera(), obstacles=(), seed=0, sag=0.0, noise=NoiseModel()):
    depth, _, _, om = render_floor_view(
        cam, Pose2D(0, 0, 0), list(obstacles), "plain", [], noise, np.random.default_rng(seed), sag=sag
    )
    return depth, om


def test_sigma_examples():
    assert sigma(0.4) == pytest.approx(0.0012)
    assert sigma(1.4) == pytest.approx(0.0031)
    assert sigma(2.0) > sigma(1.0)
    with pytest.raises(ValueError):
        sigma(0.0)
    assert 3 * sigma(1.2) == pytest.approx(0.0072, abs=1e-4)


@given(st.floats(0.01, 20.0))
def test_sigma_positive(z):
    assert sigma(z) > 0


def test_plane_fit_straight_down():
    cam = FloorCamera(mount_height=0.7, pitch=math.pi / 2, x=0.0)
    depth, _ = render(cam)
    floor, inliers = fit_floor(depth)
    # camera frame: looking straight down, the floor normal is the optical axis
    angle = math.degrees(math.acos(min(1.0, abs(floor.normal[2]))))
    assert angle < 0.5
    assert inliers.sum() / (depth.depth > 0).sum() > 0.99


def test_plane_fit_tilted_rig_is_level():
    cam = FloorCamera()
    depth, _ = render(cam)
    floor, inliers = fit_floor(depth)
    n_base = cam.extrinsic[:3, :3] @ floor.normal
    assert math.degrees(math.acos(min(1.0, abs(n_base[2])))) < 0.5
    assert inliers.mean() > 0.99 * (depth.depth > 0).mean()


def test_curvature_improves_inlier_fraction():
    cam = FloorCamera()
    depth, _ = render(cam, sag=0.03)
    _, flat = fit_floor(depth, params=ObjectParams(curvature=False))
    curved_floor, curved = fit_floor(depth)
    assert curved.sum() > flat.sum()
    bound = 0.05 / 1.0**2
    assert curved_floor.max_abs_coeff <= bound + 1e-12


def test_all_invalid_depth():
    with pytest.raises(NoFloorError):
        fit_floor(DepthFrame(np.zeros((50, 50)), Intrinsics(100, 100, 25, 25)))


def test_no_dominant_plane():
    r = np.random.default_rng(0)
    with pytest.raises(NoFloorError):
        fit_floor(DepthFrame(r.uniform(0.5, 5.0, (40, 40)), Intrinsics(50, 50, 20, 20)))


def test_flat_floor_empty_mask():
    depth, _ = render()
    floor, _ = fit_floor(depth)
    obstacle, floor_mask, boxes, _ = detect_objects(depth, floor)
    assert not obstacle.any() and boxes == []


def _box_at_depth(target_depth=1.2):
    # place a 2 cm box where the optical depth of its top is about target_depth
    cam = FloorCamera()
    x = cam.x + math.sqrt(max(target_depth**2 - cam.mount_height**2, 0.0)) * 0.9
    return Box.at(x, 0.0, 0.15, 0.15, 0.02)


def test_small_box_detected():
    depth, om = render(obstacles=[_box_at_depth(1.2)])
    floor, _ = fit_floor(depth)
    obstacle, _, boxes, counts = detect_objects(depth, floor)
    assert len(boxes) == 1
    assert (obstacle & om).sum() / om.sum() > 0.9
    assert not (obstacle & ~om).any()


def test_distant_box_threshold_limit():
    # at 3.5 m the 3-sigma threshold exceeds the box height
    assert NoiseModel().threshold(3.5) > 0.02


def test_masks_disjoint_and_within_valid():
    depth, _ = render(obstacles=[_box_at_depth(1.2), Box.at(1.5, 0.4, 0.2, 0.2, 0.1)], seed=3)
    floor, _ = fit_floor(depth)
    obstacle, floor_mask, _, _ = detect_objects(depth, floor)
    assert not (obstacle & floor_mask).any()
    assert not ((obstacle | floor_mask) & (depth.depth == 0)).any()
    png = mask_png(obstacle, floor_mask)
    assert set(np.unique(png)) <= {0, 128, 255}


@settings(max_examples=10)
@given(st.floats(1.0, 6.0), st.floats(1.0, 6.0))
def test_raising_k_never_adds_obstacles(k1, k2):
    lo, hi = sorted((k1, k2))
    depth, _ = render(obstacles=[_box_at_depth(1.2)], seed=1)
    floor, _ = fit_floor(depth)
    a = detect_objects(depth, floor, NoiseModel(k=lo), ObjectParams(min_component_px=1))[0]
    b = detect_objects(depth, floor, NoiseModel(k=hi), ObjectParams(min_component_px=1))[0]
    assert not (b & ~a).any()


def test_deterministic():
    depth, _ = render(seed=5)
    f1, m1 = fit_floor(depth)
    f2, m2 = fit_floor(depth)
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(f1.normal, f2.normal)


def test_small_components_suppressed():
    depth, _ = render()
    d = depth.depth.copy()
    # a 3x3 speckle 5 cm proud of the floor
    d[100:103, 100:103] -= 0.05
    depth2 = DepthFrame(d, depth.intrinsics)
    floor, _ = fit_floor(depth2)
    obstacle, _, boxes, _ = detect_objects(depth2, floor)
    assert not obstacle.any()
    obstacle, _, boxes, _ = detect_objects(depth2, floor, params=ObjectParams(min_component_px=5))
    assert obstacle.sum() == 9 and len(boxes) == 1
