"""Geometry primitives: poses, projection, 6D rotations, perturbations, RNG.

Expected values are hand-derived or come from an independent quaternion
route (scipy Rotation); the matrix route under test never feeds its own
oracle.

Hand derivations used below:
  * compose((Rz90, (1,0,0)), (Rz90, 0)): R = Rz180, t = Rz90*0 + (1,0,0).
  * rotation_from_6d((1,1,0), (0,1,0)): b1 = (1,1,0)/sqrt(2);
    w = (0,1,0) - 0.5*(1,1,0) = (-.5,.5,0) -> b2 = (-1,1,0)/sqrt(2);
    b3 = b1 x b2 = (0,0,1).
  * geodesic(Rx90, Ry90): trace(Rx90^T Ry90) = 0 -> arccos(-1/2) = 120 deg.
  * mean geodesic angle of uniform SO(3) rotations: pi/2 + 2/pi ~ 2.20742.
"""
from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from megarefine.geometry import (
    CameraModel,
    Pose,
    RngStream,
    back_project,
    camera_lookat,
    compose,
    euler_xyz_matrix,
    project,
    rotation_about_z,
    rotation_from_6d,
    rotation_geodesic_angle,
    rotation_to_6d,
    sample_perturbation,
    uniform_rotation,
)

RAD = math.pi / 180.0

# First draws of the Philox stream keyed (1234, 0); frozen to catch any
# cross-version change in the bit-generator contract.
_PHILOX_FIRST_UNIFORM = 0.3347236812982095


def random_pose(gen, t_scale=1.0):
    return Pose(uniform_rotation(gen), gen.normal(0.0, t_scale, 3))


# ---------------------------------------------------------------------------
# Pose construction and composition
# ---------------------------------------------------------------------------

def test_pose_identity_and_inverse():
    gen = RngStream(7, 0).generator()
    for _ in range(20):
        p = random_pose(gen)
        ident = compose(p, p.inverse())
        assert np.abs(ident.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(ident.translation).max() < 1e-12
        assert np.allclose(compose(p, Pose.identity()).rotation, p.rotation)
        assert np.allclose(compose(Pose.identity(), p).translation, p.translation)


def test_compose_hand_case():
    a = Pose(rotation_about_z(90 * RAD), [1.0, 0.0, 0.0])
    b = Pose(rotation_about_z(90 * RAD), [0.0, 0.0, 0.0])
    c = compose(a, b)
    assert np.abs(c.rotation - rotation_about_z(180 * RAD)).max() < 1e-12
    assert np.abs(c.translation - np.array([1.0, 0.0, 0.0])).max() < 1e-12


def test_compose_order_is_b_first():
    # a applied after b: point at origin lands at a(b(0)) = a.t + a.R @ b.t
    gen = RngStream(8, 0).generator()
    a, b = random_pose(gen), random_pose(gen)
    p = compose(a, b).transform(np.zeros(3))
    assert np.allclose(p, a.transform(b.transform(np.zeros(3))))


def test_pose_rejects_non_orthonormal():
    bad = np.eye(3)
    bad[0, 0] = 1.001
    with pytest.raises(ValueError, match="orthonormal"):
        Pose(bad, np.zeros(3))
    with pytest.raises(ValueError, match="determinant"):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_matrix34_round_trip():
    gen = RngStream(9, 0).generator()
    p = random_pose(gen)
    flat = p.matrix34().ravel()
    assert flat.shape == (12,)
    # row-major [R | t]: row i is (R[i,0], R[i,1], R[i,2], t[i])
    assert flat[3] == p.translation[0] and flat[7] == p.translation[1]
    q = Pose.from_matrix34(flat)
    assert np.array_equal(q.rotation, p.rotation)
    assert np.array_equal(q.translation, p.translation)


def test_transform_shapes():
    p = Pose(rotation_about_z(90 * RAD), [0.0, 0.0, 1.0])
    one = p.transform([1.0, 0.0, 0.0])
    assert np.allclose(one, [0.0, 1.0, 1.0])
    many = p.transform(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    assert many.shape == (2, 3)
    assert np.allclose(many[1], [-1.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# 6D rotation encoding
# ---------------------------------------------------------------------------

def test_rotation_from_6d_identity_and_scale():
    assert np.allclose(rotation_from_6d([1, 0, 0], [0, 1, 0]), np.eye(3))
    # invariant to positive rescaling of either input
    assert np.allclose(rotation_from_6d([2, 0, 0], [0, 3, 0]), np.eye(3))


def test_rotation_from_6d_hand_case():
    r = rotation_from_6d([1.0, 1.0, 0.0], [0.0, 1.0, 0.0])
    s = 1.0 / math.sqrt(2.0)
    expected = np.array([[s, -s, 0.0], [s, s, 0.0], [0.0, 0.0, 1.0]])
    assert np.abs(r - expected).max() < 1e-12


def test_rotation_6d_round_trip_and_validity():
    gen = RngStream(10, 0).generator()
    for _ in range(200):
        r = uniform_rotation(gen)
        e1, e2 = rotation_to_6d(r)
        back = rotation_from_6d(e1, e2)
        assert np.abs(back - r).max() < 1e-12
        # arbitrary (non-degenerate) inputs still give a valid rotation
        m = rotation_from_6d(gen.normal(size=3), gen.normal(size=3))
        assert np.abs(m.T @ m - np.eye(3)).max() < 1e-12
        assert abs(np.linalg.det(m) - 1.0) < 1e-12


def test_rotation_from_6d_degenerate_raises():
    with pytest.raises(ValueError, match="e1"):
        rotation_from_6d([0.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    with pytest.raises(ValueError, match="parallel"):
        rotation_from_6d([1.0, 0.0, 0.0], [2.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def test_project_principal_point_and_offset():
    cam = CameraModel(500.0, 500.0, 250.0, 250.0, 500, 500)
    assert np.allclose(project(cam, [0.0, 0.0, 1.0]), [250.0, 250.0])
    # 0.1 m lateral at 1 m depth with fx = 500 -> 50 px offset
    assert np.allclose(project(cam, [0.1, 0.0, 1.0]), [300.0, 250.0])
    # depth scales the offset down
    assert np.allclose(project(cam, [0.1, 0.0, 2.0]), [275.0, 250.0])


def test_project_behind_camera_raises():
    cam = CameraModel(500.0, 500.0, 250.0, 250.0, 500, 500)
    with pytest.raises(ValueError, match="behind"):
        project(cam, [0.0, 0.0, -1.0])
    with pytest.raises(ValueError, match="behind"):
        project(cam, np.array([[0, 0, 1.0], [0, 0, 0.0]]))


def test_back_project_round_trip():
    cam = CameraModel(480.0, 510.0, 310.0, 240.0, 640, 480)
    gen = RngStream(11, 0).generator()
    pts = np.column_stack([gen.normal(0, 0.2, 50), gen.normal(0, 0.2, 50), gen.uniform(0.3, 2.0, 50)])
    uv = project(cam, pts)
    back = back_project(cam, uv, pts[:, 2])
    assert np.abs(back - pts).max() < 1e-12


def test_camera_model_validation():
    with pytest.raises(ValueError, match="positive"):
        CameraModel(-1.0, 500.0, 250.0, 250.0, 500, 500)
    with pytest.raises(ValueError, match=">= 1"):
        CameraModel(500.0, 500.0, 250.0, 250.0, 0, 500)
    # crop cameras may carry an out-of-frame principal point ...
    crop = CameraModel(500.0, 500.0, -30.0, 250.0, 160, 160)
    # ... but sensor validation rejects it
    with pytest.raises(ValueError, match="principal point"):
        crop.validate_sensor()


# ---------------------------------------------------------------------------
# Geodesic rotation distance (matrix route vs quaternion oracle)
# ---------------------------------------------------------------------------

def test_geodesic_angle_known_cases():
    assert rotation_geodesic_angle(np.eye(3), np.eye(3)) == 0.0
    r15 = rotation_about_z(15 * RAD)
    assert abs(rotation_geodesic_angle(np.eye(3), r15) - 15 * RAD) < 1e-12
    rx = euler_xyz_matrix([90 * RAD, 0.0, 0.0])
    ry = euler_xyz_matrix([0.0, 90 * RAD, 0.0])
    assert abs(rotation_geodesic_angle(rx, ry) - 120 * RAD) < 1e-12


def test_geodesic_angle_matches_quaternion_oracle():
    gen = RngStream(12, 0).generator()
    for _ in range(300):
        ra, rb = uniform_rotation(gen), uniform_rotation(gen)
        mine = rotation_geodesic_angle(ra, rb)
        oracle = (ScipyRotation.from_matrix(ra).inv() * ScipyRotation.from_matrix(rb)).magnitude()
        assert abs(mine - oracle) < 1e-9
        assert abs(mine - rotation_geodesic_angle(rb, ra)) < 1e-12  # symmetry


def test_geodesic_angle_clips_float_drift():
    # products of many rotations can push the trace a hair beyond +-3
    r = np.eye(3)
    for _ in range(60):
        r = r @ rotation_about_z(6 * RAD)
    angle = rotation_geodesic_angle(np.eye(3), r)  # 360 deg total -> 0
    assert angle < 1e-6


def test_euler_xyz_matches_scipy_intrinsic():
    gen = RngStream(13, 0).generator()
    for _ in range(100):
        ang = gen.normal(0.0, 0.5, 3)
        mine = euler_xyz_matrix(ang)
        oracle = ScipyRotation.from_euler("XYZ", ang).as_matrix()
        assert np.abs(mine - oracle).max() < 1e-12


# ---------------------------------------------------------------------------
# Perturbation sampling
# ---------------------------------------------------------------------------

def test_sample_perturbation_zero_noise_is_exact():
    gen = RngStream(14, 0).generator()
    base = random_pose(gen)
    out = sample_perturbation(RngStream(14, 1), base, t_std=0.0, rot_std_deg=0.0)
    assert np.array_equal(out.rotation, base.rotation)
    assert np.array_equal(out.translation, base.translation)


def test_sample_perturbation_reproducible():
    base = Pose.identity()
    a = sample_perturbation(RngStream(99, 3), base)
    b = sample_perturbation(RngStream(99, 3), base)
    assert np.array_equal(a.rotation, b.rotation)
    assert np.array_equal(a.translation, b.translation)
    c = sample_perturbation(RngStream(99, 4), base)
    assert not np.array_equal(a.translation, c.translation)


def test_sample_perturbation_empirical_stds():
    # 1e5 draws: sample std s.e. ~ 0.22%, so a 3% gate is comfortable
    base = Pose(euler_xyz_matrix([0.3, -0.2, 0.5]), [0.1, -0.2, 0.8])
    n = 100_000
    gen = RngStream(400, 0).generator()
    dts = np.empty((n, 3))
    angles = np.empty((n, 3))
    for i in range(n):
        p = sample_perturbation(gen, base)
        dts[i] = p.translation - base.translation
        rel = base.rotation.T @ p.rotation  # object-frame perturbation
        angles[i] = ScipyRotation.from_matrix(rel).as_euler("XYZ")
    t_std = dts.std(axis=0)
    assert np.abs(t_std - np.array([0.02, 0.02, 0.05])).max() / 0.02 < 0.03 * 2.5
    for axis in range(3):
        assert abs(t_std[axis] / (0.02, 0.02, 0.05)[axis] - 1.0) < 0.03
    ang_std = angles.std(axis=0) / RAD
    assert np.all(np.abs(ang_std / 15.0 - 1.0) < 0.03)
    assert np.abs(dts.mean(axis=0)).max() < 0.001
    assert np.abs(angles.mean(axis=0)).max() / RAD < 0.2


def test_sample_perturbation_scales_with_config():
    gen = RngStream(401, 0).generator()
    base = Pose.identity()
    dts = np.array([
        (sample_perturbation(gen, base, t_std=(0.04, 0.04, 0.10), rot_std_deg=30.0).translation)
        for _ in range(20_000)
    ])
    assert abs(dts[:, 2].std() / 0.10 - 1.0) < 0.05


# ---------------------------------------------------------------------------
# Uniform rotations
# ---------------------------------------------------------------------------

def test_uniform_rotation_validity_and_mean_angle():
    gen = RngStream(15, 0).generator()
    n = 20_000
    angles = np.empty(n)
    for i in range(n):
        r = uniform_rotation(gen)
        if i < 100:
            assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(r) - 1.0) < 1e-12
        angles[i] = rotation_geodesic_angle(np.eye(3), r)
    # uniform SO(3): E[angle] = pi/2 + 2/pi ~ 2.20742; s.e. ~ 0.004
    assert abs(angles.mean() - 2.20742) < 0.02


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def test_rng_stream_determinism_and_frozen_draw():
    s = RngStream(1234, 0)
    assert s.generator().random() == _PHILOX_FIRST_UNIFORM
    assert s.generator().random() == _PHILOX_FIRST_UNIFORM  # fresh each call
    a = s.generator().normal(size=8)
    b = RngStream(1234, 0).generator().normal(size=8)
    assert np.array_equal(a, b)


def test_rng_stream_children_are_independent():
    s = RngStream(5, 0)
    kids = s.split(16)
    ids = {k.stream for k in kids}
    assert len(ids) == 16 and s.stream not in ids
    draws = {k.generator().random() for k in kids}
    assert len(draws) == 16
    # child derivation is pure: same index, same stream
    assert s.child(3).stream == s.child(3).stream
    # nested children don't collide with the first generation
    nested = {s.child(i).child(j).stream for i in range(8) for j in range(8)}
    assert len(nested) == 64 and not (nested & ids)


def test_rng_stream_rejects_negative_child():
    with pytest.raises(ValueError):
        RngStream(1, 0).child(-1)


# ---------------------------------------------------------------------------
# Camera aiming
# ---------------------------------------------------------------------------

def test_camera_lookat_aims_z_axis():
    gen = RngStream(16, 0).generator()
    for _ in range(50):
        eye = gen.normal(0, 1.0, 3)
        target = gen.normal(0, 1.0, 3)
        if np.linalg.norm(target - eye) < 1e-3:
            continue
        cam_pose = camera_lookat(eye, target)
        # camera-frame view of the target lies on the +z axis
        local = cam_pose.inverse().transform(target)
        assert np.abs(local[:2]).max() < 1e-9
        assert local[2] > 0


def test_camera_lookat_up_convention():
    cam_pose = camera_lookat([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], up_hint=(0, 0, 1))
    # world +z should appear "up": its camera-frame image has negative y
    local_up = cam_pose.rotation.T @ np.array([0.0, 0.0, 1.0])
    assert local_up[1] < -0.99


def test_camera_lookat_pole_fallback():
    # view axis parallel to the up hint: falls back to +x
    cam_pose = camera_lookat([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], up_hint=(0, 0, 1))
    local_x = cam_pose.rotation.T @ np.array([1.0, 0.0, 0.0])
    assert local_x[1] < -0.99
    with pytest.raises(ValueError, match="coincide"):
        camera_lookat([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
