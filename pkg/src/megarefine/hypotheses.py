"""Coarse pose hypothesis generation and basin-of-attraction labeling.

Both hypothesis flavors share one expansion: 26 virtual cameras on the
corners, edge midpoints, and face centers of a cube centered on the object,
each aimed at the anchor and spun through four in-plane rolls, contribute
104 orientations. Every expanded pose is re-anchored so its anchor point
coincides with the seed's: only the orientation varies, the anchor stays on
the same camera ray at the same depth. The slot on the original viewing ray
keeps the original camera itself, so the seed pose appears verbatim at
index 0; everything else differs from it by at least a 45 degree rotation,
which is what makes the negatives negatives.

Training sets seed the expansion with a perturbed ground-truth pose and
carry labels. Test sets seed it with detection-backed guesses: for each of P
random orientations the detection center is back-projected at 1 m, the depth
is rescaled by comparing the projected model bounding box against the
detected one, and the corrected guess is expanded, giving P * 104 unlabeled
hypotheses.
"""
from __future__ import annotations

import dataclasses
import itertools
import math

import numpy as np

from .geometry import (
    CameraModel,
    Pose,
    back_project,
    camera_lookat,
    rotation_about_z,
    rotation_geodesic_angle,
    sample_perturbation,
    uniform_rotation,
    _resolve_generator,
)
from .meshes import TriMesh, anchor_position
from .rendering import NEAR_PLANE

__all__ = [
    "HypothesisSet",
    "Detection2D",
    "BasinThresholds",
    "training_hypotheses",
    "test_hypotheses",
    "basin_label",
    "estimate_depth_from_detection",
    "CUBE_POSES_PER_SEED",
]

CUBE_POSES_PER_SEED = 104  # 26 cameras x 4 rolls

_ROLLS = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)

# Cube offsets in units of the anchor depth; (0, 0, 1) is the slot of the
# original camera and must stay first so the seed pose is index 0.
_CUBE_COEFFS = ((0, 0, 1),) + tuple(
    c for c in itertools.product((-1, 0, 1), repeat=3) if c != (0, 0, 0) and c != (0, 0, 1)
)


@dataclasses.dataclass(frozen=True)
class Detection2D:
    """Approximate 2D bounding box: center and size in pixels."""

    center: tuple
    size: tuple

    def __post_init__(self):
        c = (float(self.center[0]), float(self.center[1]))
        s = (float(self.size[0]), float(self.size[1]))
        if not all(np.isfinite(c)) or not all(np.isfinite(s)):
            raise ValueError("detection values must be finite")
        if s[0] <= 0.0 or s[1] <= 0.0:
            raise ValueError(f"degenerate detection: size {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @property
    def bbox(self) -> tuple:
        """(u0, v0, u1, v1) corners."""
        return (
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
        )


@dataclasses.dataclass(frozen=True)
class HypothesisSet:
    """A batch of candidate poses with optional basin labels."""

    poses: tuple
    labels: tuple | None
    provenance: str

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
        if self.provenance not in ("training_cube", "test_detection"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        n = len(self.poses)
        if self.provenance == "training_cube":
            if n != CUBE_POSES_PER_SEED:
                raise ValueError(f"training cube must hold {CUBE_POSES_PER_SEED} poses, got {n}")
            if self.labels is None or self.labels.count("positive") != 1:
                raise ValueError("training cube needs labels with exactly one positive")
        else:
            if n == 0 or n % CUBE_POSES_PER_SEED != 0:
                raise ValueError(
                    f"test set size must be a positive multiple of {CUBE_POSES_PER_SEED}, got {n}"
                )
        if self.labels is not None:
            if len(self.labels) != n:
                raise ValueError("labels length must match poses")
            bad = set(self.labels) - {"positive", "negative"}
            if bad:
                raise ValueError(f"labels must be positive/negative, got {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.poses)


@dataclasses.dataclass(frozen=True)
class BasinThresholds:
    """Basin-of-attraction radii: anchor translation (m) and rotation (deg)."""

    translation_m: float = 0.05
    rotation_deg: float = 15.0

    def __post_init__(self):
        if self.translation_m <= 0 or self.rotation_deg <= 0:
            raise ValueError("thresholds must be positive")


def _orthonormal_frame(view_dir: np.ndarray):
    """E1, E2 completing -view_dir to a right-handed basis."""
    e3 = -view_dir
    for hint in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        e1 = np.cross(hint, e3)
        n = np.linalg.norm(e1)
        if n > 1e-8:
            e1 /= n
            return e1, np.cross(e3, e1), e3
    raise ValueError("degenerate view direction")  # unreachable: hints span


def _expand_cube(seed: Pose, anchor) -> list:
    """104 poses sharing the seed's anchor point, varying only orientation.

    Each cube vertex/edge/face direction plus four in-plane rolls defines a
    viewing direction; the object orientation that direction would observe is
    re-anchored at the seed's anchor position, so every hypothesis keeps the
    anchor on the same camera ray at the same depth. Index 0 is the seed
    itself; indices 1..3 are its in-plane rolls; the remaining 100 come from
    the other 25 cube directions.
    """
    a = seed.transform(anchor_position(anchor))
    if a[2] <= NEAR_PLANE:
        raise ValueError(f"anchor behind camera (z = {a[2]})")
    a_obj = anchor_position(anchor)
    depth = a[2]
    a_hat = a / np.linalg.norm(a)
    e1, e2, e3 = _orthonormal_frame(a_hat)
    out = []
    for coeff in _CUBE_COEFFS:
        if coeff == (0, 0, 1):
            # original camera slot: roll about the anchor so the zero-roll
            # hypothesis is the seed pose verbatim
            for theta in _ROLLS:
                if theta == 0.0:
                    out.append(seed)
                else:
                    rot = rotation_about_z(theta).T @ seed.rotation
                    out.append(Pose(rot, a - rot @ a_obj))
            continue
        eye = a + depth * (coeff[0] * e1 + coeff[1] * e2 + coeff[2] * e3)
        cam_to_ref = camera_lookat(eye, a)
        for theta in _ROLLS:
            rolled_rot = cam_to_ref.rotation @ rotation_about_z(theta)
            rot = rolled_rot.T @ seed.rotation
            out.append(Pose(rot, a - rot @ a_obj))
    return out


def training_hypotheses(gt: Pose, anchor, rng) -> HypothesisSet:
    """Perturb the ground truth and expand it through the camera cube.

    The perturbed pose itself is the single positive (index 0); the other
    103 views of it are negatives. Deterministic under the stream.
    """
    gen = _resolve_generator(rng)
    perturbed = sample_perturbation(gen, gt)
    if perturbed.transform(anchor_position(anchor))[2] <= NEAR_PLANE:
        # desk-scale perturbations cannot push a valid pose behind the
        # camera unless gt was marginal to begin with; resample once
        perturbed = sample_perturbation(gen, gt)
    poses = _expand_cube(perturbed, anchor)
    labels = ("positive",) + ("negative",) * (len(poses) - 1)
    return HypothesisSet(tuple(poses), labels, "training_cube")


def estimate_depth_from_detection(det: Detection2D, cam: CameraModel, mesh: TriMesh,
                                  anchor, rotation: np.ndarray,
                                  z_guess: float = 1.0) -> float:
    """Depth from bbox sizes: place the model at z_guess, compare boxes.

    The model (under the given orientation, anchor at the back-projected
    detection center) is projected to *normalized* image coordinates; the
    detected box is in pixels; each axis contributes the ratio of focal-
    scaled model extent to detected extent, and the two are averaged. When
    the detection was produced by the same projection at z_guess the ratio
    is exactly 1 per axis.
    """
    rot = np.asarray(rotation, dtype=np.float64)
    p_anchor = back_project(cam, np.array(det.center), z_guess)
    t = p_anchor - rot @ anchor_position(anchor)
    vc = mesh.vertices @ rot.T + t
    in_front = vc[:, 2] > NEAR_PLANE
    if not np.any(in_front):
        raise ValueError("model guess entirely behind camera")
    nx = vc[in_front, 0] / vc[in_front, 2]
    ny = vc[in_front, 1] / vc[in_front, 2]
    span_x = float(nx.max() - nx.min())
    span_y = float(ny.max() - ny.min())
    return z_guess * 0.5 * (cam.fx * span_x / det.size[0] + cam.fy * span_y / det.size[1])


def test_hypotheses(det: Detection2D, cam: CameraModel, mesh: TriMesh, anchor,
                    P: int, rng) -> HypothesisSet:
    """Detection-seeded hypothesis set: P orientations x 104 cube views.

    Each orientation gets its own depth estimate (back-project at 1 m,
    rescale by the bbox ratio), so the P seeds sit at index 0, 104, 208, ...
    of the returned set. Labels are absent; scoring assigns them later.
    """
    if P < 1:
        raise ValueError(f"P must be >= 1, got {P}")
    if not (0.0 <= det.center[0] < cam.width and 0.0 <= det.center[1] < cam.height):
        raise ValueError(f"detection center {det.center} outside image bounds")
    gen = _resolve_generator(rng)
    a_pos = anchor_position(anchor)
    poses = []
    for _ in range(P):
        rot = uniform_rotation(gen)
        z = estimate_depth_from_detection(det, cam, mesh, anchor, rot)
        p_anchor = back_project(cam, np.array(det.center), z)
        seed = Pose(rot, p_anchor - rot @ a_pos)
        poses.extend(_expand_cube(seed, anchor))
    return HypothesisSet(tuple(poses), None, "test_detection")


def basin_label(hyp: Pose, gt: Pose, anchor, thresholds: BasinThresholds = BasinThresholds()) -> str:
    """positive iff anchor translation and rotation errors are both inside
    the basin radii."""
    a = anchor_position(anchor)
    t_err = float(np.linalg.norm(hyp.transform(a) - gt.transform(a)))
    r_err = math.degrees(rotation_geodesic_angle(hyp.rotation, gt.rotation))
    inside = t_err <= thresholds.translation_m and r_err <= thresholds.rotation_deg
    return "positive" if inside else "negative"
