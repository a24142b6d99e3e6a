"""The 9-value pose-update parameterization and its anchor-dependency identities.

An update carries (vx, vy, vz, e1, e2): two focal-scaled image-space
translation components, a multiplicative depth ratio, and a 6D-encoded
rotation applied in the camera frame. Updates act on an anchored pose: the
anchor's camera-frame position moves according to the translation components,
the orientation is left-multiplied by the decoded rotation, and the object
translation is reassembled so the anchor lands at its updated position.

The rotation component of the inverse problem (which update reaches a given
target) is independent of the anchor choice; the translation components are
not, and the depth component admits a closed form for anchors displaced
along the viewing ray. anchor_dependency_gap exposes both facts.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .geometry import CameraModel, Pose, compose, rotation_from_6d, rotation_geodesic_angle

__all__ = [
    "PoseUpdate",
    "AnchoredPose",
    "AnchorGap",
    "apply_update",
    "target_update",
    "anchor_dependency_gap",
]

_MIN_DEPTH = 1e-9


@dataclasses.dataclass(frozen=True)
class PoseUpdate:
    """One refinement step: image-space translation, depth ratio, rotation.

    Attributes:
        vx, vy: focal-scaled image translation updates (dimensionless).
        vz: multiplicative depth ratio, must be > 0.
        e1, e2: 6D rotation encoding; decode with rotation().
    """

    vx: float
    vy: float
    vz: float
    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vx", float(self.vx))
        object.__setattr__(self, "vy", float(self.vy))
        object.__setattr__(self, "vz", float(self.vz))
        object.__setattr__(self, "e1", np.asarray(self.e1, dtype=np.float64).reshape(3).copy())
        object.__setattr__(self, "e2", np.asarray(self.e2, dtype=np.float64).reshape(3).copy())
        if not np.isfinite(self.vx) or not np.isfinite(self.vy) or not np.isfinite(self.vz):
            raise ValueError("update components must be finite")
        if self.vz <= 0.0:
            raise ValueError(f"depth ratio vz must be > 0, got {self.vz}")

    @staticmethod
    def identity() -> "PoseUpdate":
        return PoseUpdate(0.0, 0.0, 1.0, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))

    def rotation(self) -> np.ndarray:
        return rotation_from_6d(self.e1, self.e2)

    def as_vector(self) -> np.ndarray:
        """(9,) layout [vx, vy, vz, e1, e2]; inverse of from_vector."""
        return np.concatenate([[self.vx, self.vy, self.vz], self.e1, self.e2])

    @staticmethod
    def from_vector(v) -> "PoseUpdate":
        a = np.asarray(v, dtype=np.float64).reshape(9)
        return PoseUpdate(a[0], a[1], a[2], a[3:6], a[6:9])


@dataclasses.dataclass(frozen=True)
class AnchoredPose:
    """A pose plus the anchor point and crop camera that parameterize updates.

    Attributes:
        pose: object-to-camera transform.
        anchor: (3,) object-frame anchor point.
        cam: the virtual crop camera supplying fx, fy for the update scaling.
    """

    pose: Pose
    anchor: np.ndarray
    cam: CameraModel

    def __post_init__(self):
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=np.float64).reshape(3).copy())
        if not np.all(np.isfinite(self.anchor)):
            raise ValueError("anchor contains non-finite values")

    def anchor_in_camera(self) -> np.ndarray:
        return self.pose.transform(self.anchor)

    def with_pose(self, pose: Pose) -> "AnchoredPose":
        return AnchoredPose(pose, self.anchor, self.cam)


def apply_update(state: AnchoredPose, u: PoseUpdate) -> Pose:
    """Apply an update to an anchored pose.

    The anchor's camera position (x, y, z) moves to
        z' = vz * z
        x' = (vx / fx + x / z) * z'
        y' = (vy / fy + y / z) * z'
    and the orientation becomes decode(e1, e2) @ R. The returned pose places
    the anchor at (x', y', z') with the new orientation.

    Raises:
        ValueError: if the anchor sits at or behind the camera, or vz <= 0
            (rejected at PoseUpdate construction).
    """
    p = state.anchor_in_camera()
    x, y, z = p
    if z <= _MIN_DEPTH:
        raise ValueError(f"anchor depth must be positive, got {z}")
    z_new = u.vz * z
    x_new = (u.vx / state.cam.fx + x / z) * z_new
    y_new = (u.vy / state.cam.fy + y / z) * z_new
    r_new = u.rotation() @ state.pose.rotation
    t_new = np.array([x_new, y_new, z_new]) - r_new @ state.anchor
    return Pose(r_new, t_new)


def target_update(state: AnchoredPose, target: Pose) -> PoseUpdate:
    """The unique update with apply_update(state, result) == target.

    Inverts the update equations:
        vz = z* / z
        vx = fx * (x*/z* - x/z),  vy = fy * (y*/z* - y/z)
        rotation = R* R^T, encoded by its first two columns.

    Raises:
        ValueError: if either anchor depth is non-positive.
    """
    p = state.anchor_in_camera()
    p_t = target.transform(state.anchor)
    if p[2] <= _MIN_DEPTH or p_t[2] <= _MIN_DEPTH:
        raise ValueError(f"anchor depths must be positive, got {p[2]} and {p_t[2]}")
    vz = p_t[2] / p[2]
    vx = state.cam.fx * (p_t[0] / p_t[2] - p[0] / p[2])
    vy = state.cam.fy * (p_t[1] / p_t[2] - p[1] / p[2])
    r_delta = target.rotation @ state.pose.rotation.T
    return PoseUpdate(vx, vy, vz, r_delta[:, 0], r_delta[:, 1])


@dataclasses.dataclass(frozen=True)
class AnchorGap:
    """Componentwise difference of target updates across two anchorings."""

    dvx: float
    dvy: float
    dvz: float
    rot_gap_angle: float


def anchor_dependency_gap(state1: AnchoredPose, state2: AnchoredPose, target: Pose) -> AnchorGap:
    """How the target update changes when the anchoring changes.

    Both states must describe the same physical placement with the same
    camera; they may differ in anchor point and in object-frame convention
    (state2.pose = state1.pose composed with a frame change, which is
    recovered and applied to the target so both updates aim at the same
    physical target placement).

    The rotation gap is identically zero in exact arithmetic: both rotation
    targets equal the camera-frame orientation change. The translation
    components differ in general; for anchors displaced purely along the
    viewing ray and a translation-only move, dvz has the closed form
        z12 * (z1' - z1) / (z1 * (z1 + z12))
    with z1 the first anchor's depth, z12 the depth offset to the second,
    and z1' the first anchor's target depth.
    """
    if state1.cam != state2.cam:
        raise ValueError("anchor_dependency_gap requires a shared camera")
    frame_change = compose(state1.pose.inverse(), state2.pose)
    target2 = compose(target, frame_change)
    u1 = target_update(state1, target)
    u2 = target_update(state2, target2)
    gap = rotation_geodesic_angle(u1.rotation(), u2.rotation())
    return AnchorGap(u1.vx - u2.vx, u1.vy - u2.vy, u1.vz - u2.vz, gap)
