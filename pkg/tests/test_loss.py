"""Tests for the point-set distance and disentangled loss.

Hand-worked oracles:

Pure shift: moving any pose by d = (0.01, 0.02, 0) displaces every point by
d, so the mean L1 distance is |0.01| + |0.02| = 0.03.

Depth term: identity state at depth 1 with the anchor at the object origin,
target equal to the state, prediction perfect except vz = 1.1. The mixed
depth pose moves the anchor to depth 1.1 while the target keeps it at 1, a
displacement of 0.1 along +z for every point, so term_z = 0.1 exactly and
the other terms vanish.

Closed forms used as derived oracles below (with starred values from the
exact target update, z* the target anchor depth):
    term_xy = |vx - vx*| z*/fx + |vy - vy*| z*/fy
    term_z  = |vz z - z*| (|x*/z*| + |y*/z*| + 1)
    term_rot = mean_i || (R(e) R_k - R_t)(x_i - anchor) ||_1

Gradient checks use central finite differences with h = 1e-5 on the total
loss. Configurations are resampled if any L1 argument sits within 1e-3 of
a kink, the test-side analogue of the documented jitter.
"""
import itertools

import numpy as np
import pytest

from megarefine.geometry import (
    CameraModel,
    Pose,
    RngStream,
    compose,
    rotation_about_z,
    rotation_from_6d,
    sample_perturbation,
    uniform_rotation,
)
from megarefine.loss import (
    KinkError,
    LossBreakdown,
    disentangled_loss,
    loss_gradient,
    pose_distance,
    training_loss,
)
from megarefine.pose_update import AnchoredPose, PoseUpdate, apply_update, target_update

_CAM = CameraModel(fx=600.0, fy=600.0, cx=319.5, cy=239.5, width=640, height=480)


def _random_state(gen):
    rot = uniform_rotation(gen)
    t = np.array([gen.uniform(-0.2, 0.2), gen.uniform(-0.2, 0.2), gen.uniform(0.5, 1.8)])
    return AnchoredPose(Pose(rot, t), gen.uniform(-0.05, 0.05, size=3), _CAM)


def _random_update(gen):
    return PoseUpdate(
        gen.uniform(-20.0, 20.0),
        gen.uniform(-20.0, 20.0),
        gen.uniform(0.75, 1.3),
        uniform_rotation(gen)[:, 0] + 0.1 * gen.standard_normal(3),
        uniform_rotation(gen)[:, 1] + 0.1 * gen.standard_normal(3),
    )


class TestPoseDistance:
    def test_identical_poses(self):
        gen = RngStream(41, 0).generator()
        pose = Pose(uniform_rotation(gen), [0.1, -0.2, 1.0])
        pts = gen.uniform(-0.1, 0.1, size=(20, 3))
        assert pose_distance(pts, pose, pose) == 0.0

    def test_pure_shift(self):
        gen = RngStream(43, 0).generator()
        pose = Pose(uniform_rotation(gen), [0.0, 0.0, 1.0])
        shifted = Pose(pose.rotation, pose.translation + np.array([0.01, 0.02, 0.0]))
        pts = gen.uniform(-0.3, 0.3, size=(17, 3))
        assert pose_distance(pts, pose, shifted) == pytest.approx(0.03, abs=1e-15)

    def test_cube_corners_z_rotation_brute_force(self):
        corners = np.array(list(itertools.product((0.0, 1.0), repeat=3)))
        gen = RngStream(47, 0).generator()
        t1 = Pose(uniform_rotation(gen), [0.05, -0.1, 1.2])
        t2 = compose(t1, Pose(rotation_about_z(np.pi / 2), np.zeros(3)))
        expect = np.mean(
            [np.abs(t1.transform(c) - t2.transform(c)).sum() for c in corners]
        )
        assert pose_distance(corners, t1, t2) == pytest.approx(expect, abs=1e-12)
        assert pose_distance(corners, t2, t1) == pytest.approx(expect, abs=1e-12)

    def test_empty_point_set_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            pose_distance(np.zeros((0, 3)), Pose.identity(), Pose.identity())


class TestDisentangledLoss:
    def test_perfect_prediction_is_zero(self):
        gen = RngStream(53, 0).generator()
        for _ in range(25):
            st = _random_state(gen)
            target = sample_perturbation(gen, st.pose)
            if target.transform(st.anchor)[2] <= 1e-3:
                continue
            pts = gen.uniform(-0.1, 0.1, size=(30, 3))
            br = disentangled_loss(pts, st, target_update(st, target), target)
            assert br.term_xy <= 1e-12
            assert br.term_z <= 1e-12
            assert br.term_rot <= 1e-12
            assert br.k_iterations == 1

    def test_depth_term_hand_case(self):
        st = AnchoredPose(Pose(np.eye(3), [0.0, 0.0, 1.0]), np.zeros(3), _CAM)
        target = st.pose
        u_star = target_update(st, target)
        u = PoseUpdate(u_star.vx, u_star.vy, 1.1, u_star.e1, u_star.e2)
        pts = np.zeros((1, 3))
        br = disentangled_loss(pts, st, u, target)
        assert br.term_z == pytest.approx(0.1, abs=1e-12)
        assert br.term_xy <= 1e-15
        assert br.term_rot <= 1e-15

    def test_rotation_only_error_stays_in_rotation_term(self):
        gen = RngStream(59, 0).generator()
        st = _random_state(gen)
        target = sample_perturbation(gen, st.pose)
        u_star = target_update(st, target)
        wrong = rotation_about_z(0.05) @ u_star.rotation()
        u = PoseUpdate(u_star.vx, u_star.vy, u_star.vz, wrong[:, 0], wrong[:, 1])
        pts = gen.uniform(-0.1, 0.1, size=(40, 3))
        br = disentangled_loss(pts, st, u, target)
        assert br.term_rot > 1e-4
        assert br.term_xy <= 1e-12
        assert br.term_z <= 1e-12

    def test_closed_forms(self):
        gen = RngStream(61, 0).generator()
        checked = 0
        while checked < 200:
            st = _random_state(gen)
            target = sample_perturbation(gen, st.pose)
            p_star = target.transform(st.anchor)
            if p_star[2] <= 1e-3:
                continue
            u = _random_update(gen)
            pts = gen.uniform(-0.12, 0.12, size=(25, 3))
            br = disentangled_loss(pts, st, u, target)
            u_star = target_update(st, target)
            z = st.anchor_in_camera()[2]
            z_star = p_star[2]
            expect_xy = (
                abs(u.vx - u_star.vx) * z_star / _CAM.fx
                + abs(u.vy - u_star.vy) * z_star / _CAM.fy
            )
            ray_l1 = abs(p_star[0] / z_star) + abs(p_star[1] / z_star) + 1.0
            expect_z = abs(u.vz * z - z_star) * ray_l1
            m = rotation_from_6d(u.e1, u.e2) @ st.pose.rotation - target.rotation
            expect_rot = np.abs((pts - st.anchor) @ m.T).sum(axis=1).mean()
            assert br.term_xy == pytest.approx(expect_xy, abs=1e-9)
            assert br.term_z == pytest.approx(expect_z, abs=1e-9)
            assert br.term_rot == pytest.approx(expect_rot, abs=1e-9)
            assert br.total == br.term_xy + br.term_z + br.term_rot
            checked += 1

    def test_rejects_negative_terms(self):
        with pytest.raises(ValueError, match="nonnegative"):
            LossBreakdown(-0.1, 0.0, 0.0, -0.1, 1)


def _fd_gradient(points, state, u, target, h=1e-5):
    base = u.as_vector()
    g = np.zeros(9)
    for j in range(9):
        hi, lo = base.copy(), base.copy()
        hi[j] += h
        lo[j] -= h
        f_hi = disentangled_loss(points, state, PoseUpdate.from_vector(hi), target).total
        f_lo = disentangled_loss(points, state, PoseUpdate.from_vector(lo), target).total
        g[j] = (f_hi - f_lo) / (2.0 * h)
    return g


def _kink_margin(points, state, u, target):
    """Smallest |L1 argument| across all three terms."""
    u_star = target_update(state, target)
    z = state.anchor_in_camera()[2]
    z_star = target.transform(state.anchor)[2]
    m = rotation_from_6d(u.e1, u.e2) @ state.pose.rotation - target.rotation
    rot_args = (np.asarray(points) - state.anchor) @ m.T
    return min(
        abs(u.vx - u_star.vx),
        abs(u.vy - u_star.vy),
        abs(u.vz * z - z_star),
        float(np.abs(rot_args).min()),
    )


def _clear_config(gen):
    while True:
        st = _random_state(gen)
        target = sample_perturbation(gen, st.pose)
        if target.transform(st.anchor)[2] <= 1e-3:
            continue
        u = _random_update(gen)
        pts = gen.uniform(-0.12, 0.12, size=(30, 3))
        if _kink_margin(pts, st, u, target) > 1e-3:
            return pts, st, u, target


class TestLossGradient:
    def test_zero_gradient_at_target(self):
        gen = RngStream(67, 0).generator()
        for _ in range(20):
            st = _random_state(gen)
            target = sample_perturbation(gen, st.pose)
            if target.transform(st.anchor)[2] <= 1e-3:
                continue
            pts = gen.uniform(-0.1, 0.1, size=(30, 3))
            g = loss_gradient(pts, st, target_update(st, target), target)
            assert np.linalg.norm(g) <= 1e-6

    def test_matches_finite_differences(self):
        gen = RngStream(71, 0).generator()
        worst = 0.0
        for _ in range(100):
            pts, st, u, target = _clear_config(gen)
            analytic = loss_gradient(pts, st, u, target)
            fd = _fd_gradient(pts, st, u, target)
            rel = np.abs(analytic - fd) / np.maximum(
                np.maximum(np.abs(analytic), np.abs(fd)), 1e-8
            )
            worst = max(worst, float(rel.max()))
        assert worst <= 1e-4

    def test_cross_partials_vanish(self):
        # Finite differences of each term w.r.t. the component groups it
        # must not depend on. The mixed poses do not read those values at
        # all, so the differences are exactly zero.
        gen = RngStream(73, 0).generator()
        h = 1e-5
        for _ in range(20):
            pts, st, u, target = _clear_config(gen)
            base = u.as_vector()
            for j, foreign in [(0, "vx"), (1, "vy"), (2, "vz")] + [(k, "e") for k in range(3, 9)]:
                hi, lo = base.copy(), base.copy()
                hi[j] += h
                lo[j] -= h
                b_hi = disentangled_loss(pts, st, PoseUpdate.from_vector(hi), target)
                b_lo = disentangled_loss(pts, st, PoseUpdate.from_vector(lo), target)
                if foreign in ("vx", "vy"):
                    assert abs(b_hi.term_z - b_lo.term_z) / (2 * h) <= 1e-6
                    assert abs(b_hi.term_rot - b_lo.term_rot) / (2 * h) <= 1e-6
                elif foreign == "vz":
                    assert abs(b_hi.term_xy - b_lo.term_xy) / (2 * h) <= 1e-6
                    assert abs(b_hi.term_rot - b_lo.term_rot) / (2 * h) <= 1e-6
                else:
                    assert abs(b_hi.term_xy - b_lo.term_xy) / (2 * h) <= 1e-6
                    assert abs(b_hi.term_z - b_lo.term_z) / (2 * h) <= 1e-6

    def test_kink_detection_depth(self):
        st = AnchoredPose(Pose(np.eye(3), [0.0, 0.0, 1.0]), np.zeros(3), _CAM)
        target = Pose(np.eye(3), [0.0, 0.0, 1.0 + 5e-10])
        pts = np.array([[0.1, 0.0, 0.0]])
        with pytest.raises(KinkError) as err:
            loss_gradient(pts, st, PoseUpdate.identity(), target)
        assert ("z", None, "vz") in err.value.sites

    def test_kink_detection_rotation_names_point(self):
        st = AnchoredPose(Pose(np.eye(3), [0.0, 0.0, 1.0]), np.zeros(3), _CAM)
        target = Pose(rotation_about_z(1e-10), [0.0, 0.0, 1.0])
        pts = np.array([[0.3, 0.0, 0.0]])
        with pytest.raises(KinkError) as err:
            loss_gradient(pts, st, PoseUpdate.identity(), target)
        terms = {site[0] for site in err.value.sites}
        assert "rot" in terms

    def test_exact_kink_uses_zero_subgradient(self):
        st = AnchoredPose(Pose(np.eye(3), [0.0, 0.0, 1.0]), np.zeros(3), _CAM)
        target = st.pose
        pts = np.array([[0.1, 0.0, 0.0]])
        g = loss_gradient(pts, st, PoseUpdate.identity(), target)
        np.testing.assert_array_equal(g, np.zeros(9))


class TestTrainingLoss:
    def test_oracle_predictor_zero_loss(self):
        gen = RngStream(79, 0).generator()
        st = _random_state(gen)
        target = sample_perturbation(gen, st.pose)
        pts = gen.uniform(-0.1, 0.1, size=(30, 3))
        br = training_loss(pts, st, target, target_update, k=3)
        assert br.total <= 1e-9
        assert br.k_iterations == 3

    def test_identity_predictor_sums_static_step(self):
        gen = RngStream(83, 0).generator()
        st = _random_state(gen)
        target = sample_perturbation(gen, st.pose)
        pts = gen.uniform(-0.1, 0.1, size=(30, 3))
        single = disentangled_loss(pts, st, PoseUpdate.identity(), target)
        chained = training_loss(
            pts, st, target, lambda s, t: PoseUpdate.identity(), k=3
        )
        assert chained.term_xy == pytest.approx(3 * single.term_xy, rel=1e-12)
        assert chained.term_z == pytest.approx(3 * single.term_z, rel=1e-12)
        assert chained.term_rot == pytest.approx(3 * single.term_rot, rel=1e-12)

    def test_rejects_bad_iteration_count(self):
        with pytest.raises(ValueError, match="k must be"):
            training_loss(np.zeros((1, 3)), AnchoredPose(Pose(np.eye(3), [0, 0, 1.0]), np.zeros(3), _CAM), Pose(np.eye(3), [0, 0, 1.0]), target_update, k=0)
