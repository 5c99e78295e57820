import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from plantmot.errors import InvalidConfigError
from plantmot.geometry import Pose6DoF
from plantmot.preprocess import StructuredCloud, WorkspaceLimits, cloud_to_world, normalize_to_workspace


def random_cloud(rng, H=6, W=7, p_invalid=0.3):
    pts = rng.uniform(-1, 1, (H, W, 3))
    valid = rng.random((H, W)) > p_invalid
    pts[~valid] = np.nan
    return StructuredCloud(pts, valid)


def random_pose(rng):
    q = Rotation.random(random_state=rng).as_quat(scalar_first=True)
    return Pose6DoF(rng.normal(size=3), q)


def test_cloud_to_world_matches_homogeneous_matrix():
    rng = np.random.default_rng(0)
    cloud, pose = random_cloud(rng), random_pose(rng)
    out = cloud_to_world(cloud, pose)
    T = pose.matrix()
    hom = np.concatenate([cloud.points, np.ones(cloud.points.shape[:2] + (1,))], axis=-1)
    expected = hom @ T.T
    assert np.allclose(out.points[cloud.valid], expected[cloud.valid][:, :3], atol=1e-12)
    assert np.isnan(out.points[~cloud.valid]).all()
    assert np.array_equal(out.valid, cloud.valid)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_inverse_round_trip(seed):
    rng = np.random.default_rng(seed)
    cloud, pose = random_cloud(rng), random_pose(rng)
    back = cloud_to_world(cloud_to_world(cloud, pose), pose.inverse())
    assert np.allclose(back.points[cloud.valid], cloud.points[cloud.valid], atol=1e-9)


def test_identity_pose_is_noop():
    cloud = random_cloud(np.random.default_rng(1))
    out = cloud_to_world(cloud, Pose6DoF.identity())
    assert np.array_equal(out.points, cloud.points, equal_nan=True)


def test_normalize_corners_and_midpoint():
    lim = WorkspaceLimits()
    pts = np.array([[list(lim.lower), list(lim.upper), [0.0, 0.0, 1.0]]])
    out = normalize_to_workspace(StructuredCloud(pts, np.ones((1, 3), bool)), lim)
    assert np.allclose(out.values[0], [[0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5]])
    assert out.valid.all()


def test_out_of_bounds_invalidated():
    lim = WorkspaceLimits()
    pts = np.array([[[0.7, 0.0, 1.0], [0.0, 0.0, -0.01], [0.1, 0.1, 0.1]]])
    out = normalize_to_workspace(StructuredCloud(pts, np.ones((1, 3), bool)), lim)
    assert out.valid.tolist() == [[False, False, True]]
    assert np.isnan(out.values[0, :2]).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_valid_values_in_unit_cube(seed):
    out = normalize_to_workspace(random_cloud(np.random.default_rng(seed)))
    v = out.values[out.valid]
    assert ((v >= 0) & (v <= 1)).all()
    assert np.isnan(out.values[~out.valid]).all()


@pytest.mark.parametrize("lower,upper", [((0, 0, 0), (1, 1, 0)), ((0, 2, 0), (1, 1, 1))])
def test_invalid_limits(lower, upper):
    with pytest.raises(InvalidConfigError):
        WorkspaceLimits(lower, upper)
