"""Point-set pose distance and the three-term disentangled refinement loss.

The distance between two placements of an object is the mean L1 displacement
of a fixed point set. The refinement loss splits one predicted update into
three single-responsibility terms: each term builds a pose that takes one
component group (image translation, depth, rotation) from the prediction and
the rest from the exact update that would reach the target, then measures the
point-set distance of that mixed pose to the target. A component therefore
only influences its own term, which the gradient tests assert.

The loss is piecewise linear in the update. Its gradient is defined away
from the L1 kinks; loss_gradient treats arguments within float noise of a
kink as sitting exactly on it (contributing the zero subgradient, which is
what makes the gradient vanish at a perfect prediction) and raises KinkError
for arguments close enough to a kink that a finite-difference probe would
straddle it.
"""
from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from .geometry import Pose, rotation_from_6d
from .pose_update import AnchoredPose, PoseUpdate, apply_update, target_update

__all__ = [
    "LossBreakdown",
    "KinkError",
    "pose_distance",
    "disentangled_loss",
    "loss_gradient",
    "training_loss",
]

# Arguments at or below this magnitude count as exactly on a kink: the zero
# subgradient is used. Between this and kink_tol the gradient is ambiguous
# for finite-difference purposes and KinkError is raised instead.
_ZERO_TOL = 1e-12


class KinkError(ValueError):
    """Gradient requested too close to an L1 kink to be trustworthy.

    sites lists (term, point_index, component) triples; point_index is None
    for the point-independent translation terms.
    """

    def __init__(self, sites):
        self.sites = list(sites)
        head = ", ".join(f"{t}[{i}].{c}" for t, i, c in self.sites[:4])
        more = "" if len(self.sites) <= 4 else f" and {len(self.sites) - 4} more"
        super().__init__(f"loss non-smooth at {head}{more}")


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values in meters; total is their sum.

    For a chained evaluation the terms are summed over k_iterations steps.
    """

    term_xy: float
    term_z: float
    term_rot: float
    total: float
    k_iterations: int = 3

    def __post_init__(self):
        for name in ("term_xy", "term_z", "term_rot"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


def pose_distance(points, t1: Pose, t2: Pose) -> float:
    """Mean L1 displacement of the point set between two placements.

    Symmetric in t1, t2; zero iff the transforms agree on every point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("pose_distance needs a nonempty point set")
    a = pts @ t1.rotation.T + t1.translation
    b = pts @ t2.rotation.T + t2.translation
    return float(np.abs(a - b).sum(axis=1).mean())


def _mixed_updates(u: PoseUpdate, u_star: PoseUpdate):
    u_xy = PoseUpdate(u.vx, u.vy, u_star.vz, u_star.e1, u_star.e2)
    u_z = PoseUpdate(u_star.vx, u_star.vy, u.vz, u_star.e1, u_star.e2)
    u_rot = PoseUpdate(u_star.vx, u_star.vy, u_star.vz, u.e1, u.e2)
    return u_xy, u_z, u_rot


def disentangled_loss(points, state: AnchoredPose, u: PoseUpdate, target: Pose) -> LossBreakdown:
    """Three-term loss of one predicted update against a target pose.

    Each term applies a mixed update (one component group predicted, the
    others taken from the exact target update) and measures pose_distance
    to the target. k_iterations is 1: this is a single step's loss.
    """
    u_star = target_update(state, target)
    u_xy, u_z, u_rot = _mixed_updates(u, u_star)
    term_xy = pose_distance(points, apply_update(state, u_xy), target)
    term_z = pose_distance(points, apply_update(state, u_z), target)
    term_rot = pose_distance(points, apply_update(state, u_rot), target)
    return LossBreakdown(term_xy, term_z, term_rot, term_xy + term_z + term_rot, 1)


def _sign_banded(arg: float, kink_tol: float, sites, site):
    a = abs(arg)
    if a <= _ZERO_TOL:
        return 0.0
    if a < kink_tol:
        sites.append(site)
        return 0.0
    return 1.0 if arg > 0.0 else -1.0


def _rotation_6d_jacobian(e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    """(6, 3, 3) derivative of the decoded rotation w.r.t. [e1, e2].

    Differentiates the two Gram-Schmidt normalizations and the cross
    product. Index j < 3 perturbs e1[j], index j >= 3 perturbs e2[j-3].
    """
    n1 = np.linalg.norm(e1)
    b1 = e1 / n1
    dot = float(b1 @ e2)
    w = e2 - dot * b1
    n2 = np.linalg.norm(w)
    b2 = w / n2
    out = np.empty((6, 3, 3))
    eye = np.eye(3)
    for j in range(6):
        if j < 3:
            de1, de2 = eye[j], np.zeros(3)
        else:
            de1, de2 = np.zeros(3), eye[j - 3]
        db1 = (de1 - b1 * (b1 @ de1)) / n1
        dw = de2 - ((db1 @ e2) + (b1 @ de2)) * b1 - dot * db1
        db2 = (dw - b2 * (b2 @ dw)) / n2
        db3 = np.cross(db1, b2) + np.cross(b1, db2)
        out[j] = np.column_stack([db1, db2, db3])
    return out


def loss_gradient(points, state: AnchoredPose, u: PoseUpdate, target: Pose,
                  kink_tol: float = 1e-9) -> np.ndarray:
    """Analytic gradient of the total loss w.r.t. the 9 update values.

    Layout matches PoseUpdate.as_vector(): [vx, vy, vz, e1, e2]. Arguments
    within _ZERO_TOL of an L1 kink use the zero subgradient; arguments in
    (_ZERO_TOL, kink_tol) raise KinkError naming every offending site.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("loss_gradient needs a nonempty point set")
    u_star = target_update(state, target)
    p = state.anchor_in_camera()
    p_star = target.transform(state.anchor)
    z, z_star = p[2], p_star[2]
    fx, fy = state.cam.fx, state.cam.fy

    sites: list = []
    grad = np.zeros(9)

    # term_xy: |vx - vx*| z*/fx + |vy - vy*| z*/fy, point-independent.
    grad[0] = _sign_banded(u.vx - u_star.vx, kink_tol, sites, ("xy", None, "vx")) * z_star / fx
    grad[1] = _sign_banded(u.vy - u_star.vy, kink_tol, sites, ("xy", None, "vy")) * z_star / fy

    # term_z: |vz z - z*| * ||(x*/z*, y*/z*, 1)||_1.
    ray_l1 = abs(p_star[0] / z_star) + abs(p_star[1] / z_star) + 1.0
    grad[2] = _sign_banded(u.vz * z - z_star, kink_tol, sites, ("z", None, "vz")) * z * ray_l1

    # term_rot: (1/N) sum_i ||(R(e) R_k - R_t)(x_i - anchor)||_1.
    d = pts - state.anchor
    r_e = rotation_from_6d(u.e1, u.e2)
    r_k = state.pose.rotation
    m = r_e @ r_k - target.rotation
    args = d @ m.T
    absa = np.abs(args)
    signs = np.sign(args)
    signs[absa <= _ZERO_TOL] = 0.0
    band = (absa > _ZERO_TOL) & (absa < kink_tol)
    if band.any():
        for i, c in zip(*np.nonzero(band)):
            sites.append(("rot", int(i), "xyz"[c]))
        signs[band] = 0.0
    if sites:
        raise KinkError(sites)
    jac = _rotation_6d_jacobian(u.e1, u.e2)
    n = pts.shape[0]
    for j in range(6):
        slope = d @ (jac[j] @ r_k).T
        grad[3 + j] = float((signs * slope).sum()) / n
    return grad


def training_loss(points, state: AnchoredPose, target: Pose,
                  predict: Callable[[AnchoredPose, Pose], PoseUpdate],
                  k: int = 3) -> LossBreakdown:
    """Chained k-step loss of an update predictor.

    Each step queries the predictor at the current state, scores its update
    with disentangled_loss, applies the update, and continues from the new
    state. Terms are summed over the k steps; no gradient flows between
    steps (loss_gradient stays a per-step quantity).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    term_xy = term_z = term_rot = 0.0
    current = state
    for _ in range(k):
        u = predict(current, target)
        step = disentangled_loss(points, current, u, target)
        term_xy += step.term_xy
        term_z += step.term_z
        term_rot += step.term_rot
        current = current.with_pose(apply_update(current, u))
    return LossBreakdown(term_xy, term_z, term_rot, term_xy + term_z + term_rot, k)
