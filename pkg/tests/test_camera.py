import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsdiff.camera import (
    CameraPose,
    RayGrid,
    ViewConstraints,
    angle_between,
    check_view_constraints,
    generate_rays,
    intrinsics_from_fov,
    look_at,
    plucker_embed,
    rppc_embed,
)
from gsdiff.errors import ContractError, DegeneratePoseError, InvalidCameraError

from conftest import random_pose
from oracles import rppc_triple



def grid_of(o, d):
    return RayGrid(np.asarray(o, float).reshape(1, 1, 3), np.asarray(d, float).reshape(1, 1, 3))


def test_principal_pixel_ray_is_optical_axis():
    # an odd image puts a pixel center exactly on (cx, cy)
    pose = CameraPose(np.eye(3), np.zeros(3), 20.0, 20.0, 4.5, 4.5, 9, 9)
    grid = generate_rays(pose)
    np.testing.assert_allclose(grid.directions[4, 4], [0, 0, 1], atol=1e-15)


def test_half_fov_at_leftmost_column():
    # odd height so a pixel row sits on the optical axis
    fx, fy, cx, cy = intrinsics_from_fov(50.0, 32, 33)
    pose = CameraPose(np.eye(3), np.zeros(3), fx, fy, cx, cy, 32, 33)
    d = generate_rays(pose).directions
    assert math.degrees(math.acos(d[16, 0] @ [0, 0, 1])) == pytest.approx(25.0, abs=1e-9)
    assert math.degrees(math.acos(d[16, -1] @ [0, 0, 1])) == pytest.approx(25.0, abs=1e-9)


def test_random_pose_unit_directions():
    rng = np.random.default_rng(0)
    for _ in range(20):
        grid = generate_rays(random_pose(rng))
        assert np.abs(np.linalg.norm(grid.directions, axis=-1) - 1).max() <= 1e-9
        assert np.all(grid.origins == grid.origins[0, 0])


def test_generate_rays_rejects_bad_intrinsics():
    with pytest.raises(InvalidCameraError):
        generate_rays(CameraPose(np.eye(3), np.zeros(3), 0.0, 10.0, 4, 4, 8, 8))
    with pytest.raises(InvalidCameraError):
        generate_rays(CameraPose(np.eye(3), np.zeros(3), 10.0, -1.0, 4, 4, 8, 8))


def test_pose_validation():
    with pytest.raises(InvalidCameraError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3), 10, 10, 4, 4, 8, 8).validate()
    with pytest.raises(InvalidCameraError):
        CameraPose(np.eye(3) * 1.01, np.zeros(3), 10, 10, 4, 4, 8, 8).validate()
    with pytest.raises(InvalidCameraError):
        CameraPose(np.eye(3), np.zeros(3), 10, 10, 2, 2, 4, 4).validate()


def test_pose_json_round_trip(tmp_path):
    pose = random_pose(np.random.default_rng(3))
    pose.save(tmp_path / "p.json")
    back = CameraPose.load(tmp_path / "p.json")
    assert np.array_equal(back.rotation, pose.rotation)
    assert np.array_equal(back.translation, pose.translation)
    assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == (
        pose.fx, pose.fy, pose.cx, pose.cy, pose.width, pose.height)
    with pytest.raises(ContractError):
        CameraPose.from_json({"r": [1, 0, 0]})


def test_unproject_reproject_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pose = random_pose(rng)
        d = generate_rays(pose)
        # the ray through (cx, cy) is the forward axis
        for z in (0.5, 3.0, 40.0):
            point = pose.center + z * pose.forward
            uv, depth = pose.project_points(point[None])
            np.testing.assert_allclose(uv[0], [pose.cx, pose.cy], atol=1e-6)
            assert depth[0] == pytest.approx(z)
        # every pixel center reprojects onto itself
        pts = d.origins + 2.0 * d.directions
        uv, _ = pose.project_points(pts.reshape(-1, 3))
        cols, rows = np.meshgrid(np.arange(32) + 0.5, np.arange(32) + 0.5)
        np.testing.assert_allclose(uv[:, 0], cols.reshape(-1), atol=1e-6)
        np.testing.assert_allclose(uv[:, 1], rows.reshape(-1), atol=1e-6)


def test_plucker_examples():
    emb = plucker_embed(grid_of([0, 0, 0], [0.6, 0, 0.8])).values[0, 0]
    np.testing.assert_array_equal(emb[:3], [0, 0, 0])
    emb = plucker_embed(grid_of([1, 0, 0], [0, 0, 1])).values[0, 0]
    np.testing.assert_allclose(emb[:3], [0, -1, 0])
    np.testing.assert_allclose(emb[3:], [0, 0, 1])


def test_plucker_shift_invariance():
    rng = np.random.default_rng(2)
    o = rng.standard_normal((100, 1, 3))
    d = rng.standard_normal((100, 1, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    a = plucker_embed(RayGrid(o, d)).values
    b = plucker_embed(RayGrid(o + 2.0 * d, d)).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_rppc_examples():
    np.testing.assert_allclose(rppc_embed(grid_of([0, 0, 2], [0, 0, 1])).values[0, 0, :3], [0, 0, 0])
    np.testing.assert_allclose(rppc_embed(grid_of([1, 1, 0], [1, 0, 0])).values[0, 0, :3], [0, 1, 0])


def test_rppc_matches_triple_product_oracle(frozen):
    o = np.array([0.3, -1.2, 2.0])
    d = np.array([0.6, 0.0, 0.8])
    p = rppc_embed(grid_of(o, d)).values[0, 0, :3]
    np.testing.assert_allclose(p, frozen["rppc_triple"], atol=1e-12)
    np.testing.assert_allclose(p, rppc_triple(o, d), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       st.floats(-20, 20))
def test_rppc_properties(o, d, s):
    d = np.asarray(d)
    if np.linalg.norm(d) < 1e-3:
        return
    d = d / np.linalg.norm(d)
    o = np.asarray(o)
    p = rppc_embed(grid_of(o, d)).values[0, 0]
    assert abs(p[:3] @ p[3:]) <= 1e-9 * max(1.0, np.abs(o).max())
    shifted = rppc_embed(grid_of(o + s * d, d)).values[0, 0]
    np.testing.assert_allclose(shifted, p, atol=1e-9 * max(1.0, np.abs(o).max() + abs(s)))


def test_pose_grid_rppc_orthogonal():
    rng = np.random.default_rng(5)
    emb = rppc_embed(generate_rays(random_pose(rng))).values
    assert np.abs(np.sum(emb[..., :3] * emb[..., 3:], axis=-1)).max() <= 1e-9
    assert np.abs(np.linalg.norm(emb[..., 3:], axis=-1) - 1).max() <= 1e-12


def test_constraints_identical_poses_pass():
    pose = look_at([0, -3, 0], [0, 0, 0])
    rep = check_view_constraints(pose, [pose, pose], [pose], ViewConstraints(1e-3, 1e-3, 1e-3, 1e-3))
    assert rep.passed
    assert rep.theta_cd == [0.0, 0.0]


def test_constraints_orthogonal_positions_fail():
    a = look_at([0, 0, 1], [0, 0, 0], up=(0, 1, 0))
    b = look_at([0, 1, 0], [0, 0, 0])
    rep = check_view_constraints(a, [b], [], ViewConstraints(theta1=45.0))
    assert not rep.passed
    assert rep.theta_cd[0] == pytest.approx(90.0)
    assert any(f.startswith("theta1") for f in rep.failures)


def test_constraints_zero_position_errors():
    origin = CameraPose(np.eye(3), np.zeros(3), 10, 10, 4, 4, 8, 8)
    other = look_at([0, -2, 0], [0, 0, 0])
    with pytest.raises(DegeneratePoseError):
        check_view_constraints(other, [origin], [])


def test_constraint_ranges():
    with pytest.raises(ContractError):
        ViewConstraints(theta1=0.0)
    with pytest.raises(ContractError):
        ViewConstraints(phi2=181.0)
    ViewConstraints(180.0, 180.0, 180.0, 180.0)


def test_angle_between_clamps():
    v = np.array([1e-3, 2.0, 3.0])
    assert angle_between(v, v * 7.0) == 0.0
    assert angle_between([1, 0, 0], [-1, 0, 0]) == pytest.approx(180.0)
