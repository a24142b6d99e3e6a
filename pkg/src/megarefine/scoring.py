"""Hypothesis scoring and argmax selection, plus the two-stage pipeline.

Each hypothesis is rendered once in its own anchor-centered crop of the
observed camera; the observed depth is resampled onto that crop grid and a
pluggable scorer turns the pair into a scalar. Selection is a plain argmax
with ties broken by lowest index. Scorers:

  - ``oracle_basin``: 1.0 when the hypothesis is inside the basin radii of
    the ground truth, else 0.0. Needs the true pose; the reference ceiling.
  - ``depth_l2``: negative mean squared difference of the normalized depth
    maps over the whole crop. Background pixels pin to -1 on both sides, so
    silhouette disagreement is penalized along with surface depth error.
  - ``mask_iou``: intersection-over-union of the two validity masks.

A hypothesis that cannot render (anchor behind the camera, or nothing
survives clipping) scores -inf regardless of the scorer.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .geometry import CameraModel, Pose, RngStream
from .hypotheses import BasinThresholds, Detection2D, HypothesisSet, basin_label, test_hypotheses
from .meshes import TriMesh, anchor_position
from .refine import RefineTrace, _thread_count, normalize_depth, refine
from .rendering import (
    RenderedView,
    anchor_centered_camera,
    crop_resample,
    render,
)

__all__ = [
    "ScoreInputs",
    "ScoredHypotheses",
    "OracleBasinScorer",
    "DepthL2Scorer",
    "MaskIouScorer",
    "make_scorer",
    "score_hypotheses",
    "PipelineResult",
    "coarse_then_refine",
]


@dataclasses.dataclass(frozen=True)
class ScoreInputs:
    """One hypothesis's render paired with the matching observed crop."""

    pose: Pose
    anchor: np.ndarray
    rendered: RenderedView
    observed_depth_crop: np.ndarray
    rendered_depth_n: np.ndarray
    observed_depth_n: np.ndarray
    anchor_depth: float


@dataclasses.dataclass(frozen=True)
class OracleBasinScorer:
    """Basin membership against the known true pose: 1.0 inside, 0.0 out."""

    gt: Pose
    thresholds: BasinThresholds = BasinThresholds()
    requires_depth = False

    def score(self, inputs: ScoreInputs) -> float:
        label = basin_label(inputs.pose, self.gt, inputs.anchor, self.thresholds)
        return 1.0 if label == "positive" else 0.0


@dataclasses.dataclass(frozen=True)
class DepthL2Scorer:
    """Negative mean squared normalized-depth residual over the crop."""

    gt = None
    requires_depth = True

    def score(self, inputs: ScoreInputs) -> float:
        diff = inputs.observed_depth_n - inputs.rendered_depth_n
        return -float(np.mean(diff * diff))


@dataclasses.dataclass(frozen=True)
class MaskIouScorer:
    """Silhouette intersection-over-union of the two validity masks."""

    gt = None
    requires_depth = True

    def score(self, inputs: ScoreInputs) -> float:
        ren = inputs.rendered.depth > 0.0
        obs = inputs.observed_depth_crop > 0.0
        union = int(np.logical_or(ren, obs).sum())
        if union == 0:
            return 0.0
        return float(np.logical_and(ren, obs).sum()) / union


def make_scorer(kind: str, *, gt: Pose | None = None,
                thresholds: BasinThresholds | None = None):
    """Build a scorer by name: oracle_basin, depth_l2, or mask_iou."""
    if kind == "oracle_basin":
        if gt is None:
            raise ValueError("oracle_basin requires the ground-truth pose")
        return OracleBasinScorer(gt, thresholds or BasinThresholds())
    if kind == "depth_l2":
        return DepthL2Scorer()
    if kind == "mask_iou":
        return MaskIouScorer()
    raise ValueError(f"unknown scorer kind {kind!r}")


@dataclasses.dataclass(frozen=True)
class ScoredHypotheses:
    """Hypotheses plus their scores and the argmax selection."""

    hypotheses: HypothesisSet
    scores: tuple
    selected: int

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if len(self.scores) != len(self.hypotheses):
            raise ValueError("one score per hypothesis required")
        if any(math.isnan(s) for s in self.scores):
            raise ValueError("scores must not be NaN")
        expected = int(np.argmax(self.scores))
        if self.selected != expected:
            raise ValueError(
                f"selected must be the first argmax ({expected}), got {self.selected}")

    @property
    def selected_pose(self) -> Pose:
        return self.hypotheses.poses[self.selected]


def score_hypotheses(observed: RenderedView, mesh: TriMesh, anchor,
                     hyps: HypothesisSet, scorer, *, resolution: int = 160,
                     n_threads=None) -> ScoredHypotheses:
    """Render and score every hypothesis; select the argmax.

    Each pose gets a single anchor-centered crop of the observed camera;
    the observed depth is nearest-neighbor resampled onto that grid. Render
    failures score -inf. Output is deterministic and independent of the
    thread count (scores are collected in index order).
    """
    if len(hyps) == 0:
        raise ValueError("empty hypothesis set")
    if scorer.requires_depth and not np.any(observed.depth > 0.0):
        raise ValueError("scorer needs observed depth, but the map is empty")
    a_pos = anchor_position(anchor)

    def score_one(i: int) -> float:
        hyp = hyps.poses[i]
        try:
            crop_cam = anchor_centered_camera(observed.camera, hyp, a_pos, mesh,
                                              out_size=resolution)
        except ValueError:
            return float("-inf")
        view = render(mesh, hyp, crop_cam, channels=("depth",))
        if view.is_empty:
            return float("-inf")
        z = float(hyp.transform(a_pos)[2])
        obs_crop = crop_resample(observed.depth, observed.camera, crop_cam, fill=0.0)
        inputs = ScoreInputs(
            pose=hyp,
            anchor=a_pos,
            rendered=view,
            observed_depth_crop=obs_crop,
            rendered_depth_n=normalize_depth(view.depth, z),
            observed_depth_n=normalize_depth(obs_crop, z),
            anchor_depth=z,
        )
        return float(scorer.score(inputs))

    workers = _thread_count(n_threads)
    indices = range(len(hyps))
    if workers == 1:
        scores = [score_one(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score_one, indices))
    return ScoredHypotheses(hyps, tuple(scores), int(np.argmax(scores)))


@dataclasses.dataclass(frozen=True)
class PipelineResult:
    """Two-stage output: the refined pose plus stage diagnostics."""

    final_pose: Pose
    scored: ScoredHypotheses
    trace: RefineTrace
    selected_in_basin: bool | None

    @property
    def selected_pose(self) -> Pose:
        return self.scored.selected_pose


def coarse_then_refine(observed: RenderedView, mesh: TriMesh, anchor,
                       det: Detection2D, cam: CameraModel, scorer, predictor,
                       *, rng: RngStream, hypotheses_per_orientation: int = 5,
                       iters: int = 5, gt: Pose | None = None,
                       resolution: int = 160,
                       thresholds: BasinThresholds = BasinThresholds(),
                       n_threads=None) -> PipelineResult:
    """Detection to final pose: generate hypotheses, score, refine the best.

    hypotheses_per_orientation is the P of the detection-seeded generator
    (P * 104 poses). The selected_in_basin diagnostic is filled whenever a
    ground truth is available (explicitly, or from an oracle scorer or
    predictor); otherwise it is None.
    """
    hyps = test_hypotheses(det, cam, mesh, anchor, hypotheses_per_orientation, rng)
    scored = score_hypotheses(observed, mesh, anchor, hyps, scorer,
                              resolution=resolution, n_threads=n_threads)
    trace = refine(observed, mesh, scored.selected_pose, anchor, predictor,
                   iters, gt=gt)
    if gt is None:
        gt = getattr(predictor, "gt", None)
    if gt is None:
        gt = getattr(scorer, "gt", None)
    in_basin = None
    if gt is not None:
        in_basin = basin_label(scored.selected_pose, gt, anchor, thresholds) == "positive"
    return PipelineResult(trace.final_pose, scored, trace, in_basin)
