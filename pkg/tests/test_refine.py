"""Refinement-loop tests.

Frozen regression values (computed once on the fixed streams, then locked):
  - noisy-oracle run from the true pose, stream (700, 2), 5 iterations:
    per-step cloud distances peak at 0.04396312357505664 and end at
    0.017984787398538423; every step stays inside the basin radius.
  - depth ICP at the true pose: final distance 8.6e-6 (locked at <= 1e-4),
    pure fixed-point behaviour on noiseless depth.
"""

import numpy as np
import pytest

from megarefine.geometry import Pose, RngStream, project, sample_perturbation, uniform_rotation
from megarefine.hypotheses import basin_label
from megarefine.loss import pose_distance
from megarefine.meshes import anchor_position, default_anchor, procedural_shape, reference_points
from megarefine.pose_update import PoseUpdate
from megarefine.refine import (
    EARLY_STOP_DISTANCE,
    DepthIcpPredictor,
    NoisyOraclePredictor,
    OraclePredictor,
    PredictorFailure,
    basin_experiment,
    make_predictor,
    normalize_depth,
    refine,
)
from megarefine.rendering import DEFAULT_BASE_CAMERA, ViewSetSpec, make_viewset, render

_MESH = procedural_shape("lshape")
_ANCHOR = default_anchor(_MESH)
_PROBE = reference_points(_MESH)


@pytest.fixture(scope="module")
def gt_pose():
    gen = RngStream(700, 0).generator()
    return Pose(uniform_rotation(gen), [0.03, -0.02, 0.9])


@pytest.fixture(scope="module")
def observed(gt_pose):
    view = render(_MESH, gt_pose, DEFAULT_BASE_CAMERA, channels=("depth", "normals"))
    assert not view.is_empty
    return view


class _FailingPredictor:
    requires_depth = False
    gt = None

    def propose(self, inputs):
        raise PredictorFailure("always fails")


class _IdentityPredictor:
    requires_depth = False
    gt = None

    def propose(self, inputs):
        return PoseUpdate.identity()


# -------------------------------------------------------- depth normalization


def test_normalize_depth_hand_values():
    assert normalize_depth(np.array([2.0]), 2.0)[0] == 0.0
    # above-clip pixel: 10 clips to z + 1 = 3, then 3/2 - 1
    assert normalize_depth(np.array([10.0]), 2.0)[0] == 0.5
    # no-hit pixel pins to the floor
    assert normalize_depth(np.array([0.0]), 2.0)[0] == -1.0


def test_normalize_depth_range_and_rejection():
    d = np.linspace(0.0, 9.0, 1000).reshape(20, 50)
    for z in (0.25, 1.0, 3.0):
        n = normalize_depth(d, z)
        assert n.min() >= -1.0
        assert n.max() <= 1.0 / z + 1e-12
    with pytest.raises(ValueError, match="anchor depth"):
        normalize_depth(d, 0.0)
    with pytest.raises(ValueError, match="anchor depth"):
        normalize_depth(d, -1.0)


def test_normalize_depth_scale_invariance(observed, gt_pose):
    # scaling every depth and the normalizer together must not change the
    # map while no pixel hits the metric +1 clip headroom
    z = float(gt_pose.transform(anchor_position(_ANCHOR))[2])
    base = normalize_depth(observed.depth, z)
    for lam in (0.5, 1.0, 3.7):
        scaled = normalize_depth(observed.depth * lam, z * lam)
        assert np.max(np.abs(scaled - base)) <= 1e-9


# ------------------------------------------------------------------ predictors


def test_oracle_reaches_gt_in_one_step(observed, gt_pose):
    for k in range(10):
        init = sample_perturbation(RngStream(710, k).generator(), gt_pose)
        trace = refine(observed, _MESH, init, _ANCHOR, OraclePredictor(gt_pose), 5)
        assert trace.steps[0].distance_to_gt <= 1e-9
        assert trace.early_stopped
        assert len(trace) <= 2


def test_icp_fixed_point_at_gt(observed, gt_pose):
    trace = refine(observed, _MESH, gt_pose, _ANCHOR, DepthIcpPredictor(), 2)
    assert pose_distance(_PROBE, trace.final_pose, gt_pose) <= 1e-4
    assert not any(s.flagged for s in trace.steps)


def test_icp_converges_from_perturbed_start(observed, gt_pose):
    init = sample_perturbation(RngStream(700, 1).generator(), gt_pose)
    start = pose_distance(_PROBE, init, gt_pose)
    trace = refine(observed, _MESH, init, _ANCHOR, DepthIcpPredictor(), 5, gt=gt_pose)
    final = pose_distance(_PROBE, trace.final_pose, gt_pose)
    assert start > 0.02
    assert final <= 1e-3
    assert basin_label(trace.final_pose, gt_pose, _ANCHOR) == "positive"
    # distances are recorded every step and never blow up
    for step in trace.steps:
        assert np.isfinite(step.distance_to_gt)
        assert np.all(np.isfinite(step.pose.rotation))
        assert np.all(np.isfinite(step.pose.translation))
        if step.update is not None:
            assert np.all(np.isfinite(step.update.as_vector()))


def test_icp_ignores_gt_annotation(observed, gt_pose):
    # the gt keyword only annotates the trace; the trajectory cannot depend
    # on it when the predictor is geometry-only
    init = sample_perturbation(RngStream(700, 1).generator(), gt_pose)
    with_gt = refine(observed, _MESH, init, _ANCHOR, DepthIcpPredictor(), 3, gt=gt_pose)
    without = refine(observed, _MESH, init, _ANCHOR, DepthIcpPredictor(), 3)
    assert np.array_equal(with_gt.final_pose.rotation, without.final_pose.rotation)
    assert np.array_equal(with_gt.final_pose.translation, without.final_pose.translation)
    assert without.steps[0].distance_to_gt is None
    assert DepthIcpPredictor().gt is None


def test_noisy_oracle_bounded_contraction(observed, gt_pose):
    pred = NoisyOraclePredictor(gt_pose, RngStream(700, 2))
    trace = refine(observed, _MESH, gt_pose, _ANCHOR, pred, 5)
    dists = [s.distance_to_gt for s in trace.steps]
    assert len(dists) == 5
    assert max(dists) <= 0.05
    assert abs(max(dists) - 0.04396312357505664) <= 1e-9
    assert abs(dists[-1] - 0.017984787398538423) <= 1e-9
    assert basin_label(trace.final_pose, gt_pose, _ANCHOR) == "positive"


def test_anchor_stays_centered_along_trajectory(observed, gt_pose):
    init = sample_perturbation(RngStream(700, 1).generator(), gt_pose)
    trace = refine(observed, _MESH, init, _ANCHOR, DepthIcpPredictor(), 3)
    a = anchor_position(_ANCHOR)
    for step in trace.steps:
        views = make_viewset(_MESH, step.pose, _ANCHOR,
                             spec=ViewSetSpec(channels=("depth",)),
                             base_cam=observed.camera)
        for view in views:
            uv = project(view.camera, view.view_pose.transform(a))
            center = (np.array([view.camera.width, view.camera.height]) - 1) / 2.0
            assert np.max(np.abs(uv - center)) <= 0.5


# ------------------------------------------------------------ loop mechanics


def test_failing_predictor_flags_and_holds(observed, gt_pose):
    init = sample_perturbation(RngStream(711, 0).generator(), gt_pose)
    trace = refine(observed, _MESH, init, _ANCHOR, _FailingPredictor(), 4)
    assert len(trace) == 4
    assert not trace.early_stopped
    for step in trace.steps:
        assert step.flagged
        assert step.update is None
        assert np.array_equal(step.pose.rotation, init.rotation)
        assert np.array_equal(step.pose.translation, init.translation)
    assert trace.final_pose is trace.steps[-1].pose


def test_identity_update_early_stops(observed, gt_pose):
    trace = refine(observed, _MESH, gt_pose, _ANCHOR, _IdentityPredictor(), 5)
    assert len(trace) == 1
    assert trace.early_stopped
    assert pose_distance(_PROBE, trace.final_pose, gt_pose) < EARLY_STOP_DISTANCE


def test_refine_input_validation(observed, gt_pose):
    with pytest.raises(ValueError, match="iters"):
        refine(observed, _MESH, gt_pose, _ANCHOR, OraclePredictor(gt_pose), 0)
    # anchor behind the camera at iteration 0 is a precondition violation
    behind = Pose(gt_pose.rotation, [0.0, 0.0, -0.5])
    with pytest.raises(ValueError):
        refine(observed, _MESH, behind, _ANCHOR, OraclePredictor(gt_pose), 3)
    # depth predictor against a depthless observation
    empty = render(_MESH, Pose(np.eye(3), [0.0, 0.0, -2.0]), DEFAULT_BASE_CAMERA,
                   channels=("depth",))
    assert empty.is_empty
    with pytest.raises(ValueError, match="observed depth"):
        refine(empty, _MESH, gt_pose, _ANCHOR, DepthIcpPredictor(), 3)


def test_make_predictor_validation(gt_pose):
    assert isinstance(make_predictor("oracle", gt=gt_pose), OraclePredictor)
    assert isinstance(make_predictor("depth_icp"), DepthIcpPredictor)
    noisy = make_predictor("noisy_oracle", gt=gt_pose, rng=RngStream(1, 2))
    assert isinstance(noisy, NoisyOraclePredictor)
    with pytest.raises(ValueError, match="unknown predictor"):
        make_predictor("cnn")
    with pytest.raises(ValueError, match="requires the ground-truth"):
        make_predictor("oracle")
    with pytest.raises(ValueError, match="ground truth and a stream"):
        make_predictor("noisy_oracle", gt=gt_pose)
    with pytest.raises(ValueError, match="vz_jitter"):
        NoisyOraclePredictor(gt_pose, RngStream(1, 2), vz_jitter=1.5)
    with pytest.raises(ValueError, match="correspondences"):
        DepthIcpPredictor(min_correspondences=3)


# ------------------------------------------------------------------- basins


def test_basin_experiment_shape_and_monotonicity(gt_pose):
    rows = basin_experiment(_MESH, gt_pose, _ANCHOR, "depth_icp", [0.0, 2.0], 6,
                            RngStream(701, 0))
    assert [r["magnitude"] for r in rows] == [0.0, 2.0]
    assert all(set(r) == {"magnitude", "trials", "converged", "rate"} for r in rows)
    assert rows[0]["rate"] == 1.0
    assert rows[0]["rate"] >= rows[1]["rate"]


def test_basin_experiment_oracle_always_converges(gt_pose):
    rows = basin_experiment(_MESH, gt_pose, _ANCHOR, "oracle", [0.5, 4.0], 4,
                            RngStream(702, 0))
    assert [r["rate"] for r in rows] == [1.0, 1.0]


def test_basin_experiment_thread_invariance(gt_pose):
    args = (_MESH, gt_pose, _ANCHOR, "depth_icp", [1.0], 6, RngStream(703, 0))
    serial = basin_experiment(*args, n_threads=1)
    threaded = basin_experiment(*args, n_threads=3)
    assert serial == threaded


def test_basin_experiment_validation(gt_pose):
    with pytest.raises(ValueError, match="trials_per_magnitude"):
        basin_experiment(_MESH, gt_pose, _ANCHOR, "oracle", [1.0], 0, RngStream(1, 0))
    with pytest.raises(ValueError, match="magnitudes"):
        basin_experiment(_MESH, gt_pose, _ANCHOR, "oracle", [], 2, RngStream(1, 0))
    with pytest.raises(ValueError, match="magnitudes"):
        basin_experiment(_MESH, gt_pose, _ANCHOR, "oracle", [-1.0], 2, RngStream(1, 0))
