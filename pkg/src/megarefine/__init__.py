"""Pose estimation for novel rigid objects by render-and-compare.

The package provides the full geometric machinery of a two-stage 6D pose
pipeline: coarse pose hypothesis generation and scoring, followed by
iterative refinement driven by an anchor-point pose-update parameterization,
with pluggable analytic predictors standing in for learned networks.
"""

__version__ = "0.1.0"

from .geometry import (
    CameraModel,
    Pose,
    RngStream,
    back_project,
    camera_lookat,
    compose,
    project,
    rotation_from_6d,
    rotation_geodesic_angle,
    sample_perturbation,
    uniform_rotation,
)
from .hypotheses import (
    BasinThresholds,
    Detection2D,
    HypothesisSet,
    basin_label,
    estimate_depth_from_detection,
    test_hypotheses,
    training_hypotheses,
)
from .loss import (
    KinkError,
    LossBreakdown,
    disentangled_loss,
    loss_gradient,
    pose_distance,
    training_loss,
)
from .meshes import (
    AnchorPoint,
    TriMesh,
    anchor_position,
    default_anchor,
    load_mesh,
    procedural_shape,
    reference_points,
    sample_surface_points,
    save_mesh,
)
from .imgio import (
    load_pfm,
    load_ppm,
    save_pfm,
    save_ppm,
)
from .metrics import (
    PoseError,
    aggregate,
    evaluate,
    read_csv,
    result_row,
    write_csv,
    write_json,
)
from .pose_update import (
    AnchoredPose,
    AnchorGap,
    PoseUpdate,
    anchor_dependency_gap,
    apply_update,
    target_update,
)
from .refine import (
    DepthIcpPredictor,
    NoisyOraclePredictor,
    OraclePredictor,
    PredictorFailure,
    RefineStep,
    RefineTrace,
    basin_experiment,
    make_predictor,
    normalize_depth,
    refine,
)
from .rendering import (
    DEFAULT_BASE_CAMERA,
    RenderedView,
    ViewSetSpec,
    anchor_centered_camera,
    crop_camera_for_detection,
    crop_resample,
    make_viewset,
    render,
)
from .scenes import (
    ObjectPlacement,
    SceneSample,
    SceneSpec,
    detection_from_mask,
    generate_scene,
    scene_spec_from_dict,
    scene_spec_to_dict,
)
from .scoring import (
    DepthL2Scorer,
    MaskIouScorer,
    OracleBasinScorer,
    PipelineResult,
    ScoredHypotheses,
    coarse_then_refine,
    make_scorer,
    score_hypotheses,
)

__all__ = [
    "__version__",
    "CameraModel", "Pose", "RngStream", "back_project", "camera_lookat",
    "compose", "project", "rotation_from_6d", "rotation_geodesic_angle",
    "sample_perturbation", "uniform_rotation",
    "BasinThresholds", "Detection2D", "HypothesisSet", "basin_label",
    "estimate_depth_from_detection", "test_hypotheses", "training_hypotheses",
    "KinkError", "LossBreakdown", "disentangled_loss", "loss_gradient",
    "pose_distance", "training_loss",
    "AnchorPoint", "TriMesh", "anchor_position", "default_anchor",
    "load_mesh", "procedural_shape", "reference_points",
    "sample_surface_points", "save_mesh",
    "PoseError", "aggregate", "evaluate", "read_csv", "result_row",
    "write_csv", "write_json",
    "AnchoredPose", "AnchorGap", "PoseUpdate", "anchor_dependency_gap",
    "apply_update", "target_update",
    "DepthIcpPredictor", "NoisyOraclePredictor", "OraclePredictor",
    "PredictorFailure", "RefineStep", "RefineTrace", "basin_experiment",
    "make_predictor", "normalize_depth", "refine",
    "DEFAULT_BASE_CAMERA", "RenderedView", "ViewSetSpec",
    "anchor_centered_camera", "crop_camera_for_detection", "crop_resample",
    "make_viewset", "render",
    "load_pfm", "load_ppm", "save_pfm", "save_ppm",
    "ObjectPlacement", "SceneSample", "SceneSpec", "detection_from_mask",
    "generate_scene",
    "scene_spec_from_dict", "scene_spec_to_dict",
    "DepthL2Scorer", "MaskIouScorer", "OracleBasinScorer", "PipelineResult",
    "ScoredHypotheses", "coarse_then_refine", "make_scorer",
    "score_hypotheses",
]
