"""Rigid-body poses, pinhole cameras, rotation encodings, and seeded RNG streams.

Conventions shared across the package:
  * right-handed camera frame: +x right, +y down, +z forward (into the scene)
  * rotations are 3x3 orthonormal matrices acting on column vectors
  * translations and all lengths are in meters; angles are radians internally,
    degrees only at configuration and reporting boundaries
  * pixel coordinates are continuous, with pixel (row i, col j) centered at
    (u=j, v=i)
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

__all__ = [
    "Pose",
    "CameraModel",
    "RngStream",
    "compose",
    "rotation_from_6d",
    "rotation_to_6d",
    "project",
    "back_project",
    "rotation_geodesic_angle",
    "euler_xyz_matrix",
    "rotation_about_z",
    "uniform_rotation",
    "sample_perturbation",
    "camera_lookat",
]

# Orthonormality drift beyond this raises instead of silently renormalizing.
_ORTHO_TOL = 1e-6
# project() refuses points at or behind the camera plane.
_PROJECT_MIN_Z = 1e-9
_DEG = math.pi / 180.0


def _as_float_array(value, shape, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclasses.dataclass(frozen=True)
class Pose:
    """Rigid transform taking points of a source frame into a reference frame.

    Attributes:
        rotation: (3, 3) orthonormal matrix, det +1, validated on construction.
        translation: (3,) vector in meters.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _as_float_array(self.rotation, (3, 3), "rotation")
        t = _as_float_array(self.translation, (3,), "translation")
        drift = np.abs(rot.T @ rot - np.eye(3)).max()
        if drift > _ORTHO_TOL:
            raise ValueError(
                f"rotation is not orthonormal: max |R^T R - I| = {drift:.3e}"
            )
        if np.linalg.det(rot) < 0.0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to one (3,) point or a stack of (n, 3) points."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape == (3,):
            return self.rotation @ pts + self.translation
        if pts.ndim == 2 and pts.shape[1] == 3:
            return pts @ self.rotation.T + self.translation
        raise ValueError(f"points must be (3,) or (n, 3), got {pts.shape}")

    def matrix34(self) -> np.ndarray:
        """Row-major (3, 4) matrix [R | t], the wire format for pose dumps."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @staticmethod
    def from_matrix34(values) -> "Pose":
        m = _as_float_array(np.reshape(np.asarray(values, dtype=np.float64), (3, 4)), (3, 4), "pose matrix")
        return Pose(m[:, :3], m[:, 3])


def compose(a: Pose, b: Pose) -> Pose:
    """Composition a*b: the transform applying b first, then a.

    No silent renormalization happens here; float drift from chained
    compositions stays orders of magnitude below the construction tolerance.
    """
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclasses.dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics. fx, fy, cx, cy in pixels; no distortion.

    Virtual crop cameras produced by anchor centering may carry a principal
    point outside the image bounds; only base/sensor cameras are required to
    keep it inside (see validate_sensor).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        for name in ("width", "height"):
            v = int(getattr(self, name))
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
            object.__setattr__(self, name, v)

    def validate_sensor(self) -> "CameraModel":
        """Additionally require the principal point to lie inside the image."""
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )
        return self

    def center(self) -> np.ndarray:
        """Continuous coordinates of the image center (pixel centers are integers)."""
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])


def project(cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """Project camera-frame points to continuous pixel coordinates (u, v).

    Args:
        cam: intrinsics.
        points: (3,) or (n, 3) camera-frame points.

    Returns:
        (2,) or (n, 2) pixel coordinates.

    Raises:
        ValueError: if any point lies at or behind the camera plane (z <= 1e-9).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.shape == (3,)
    if single:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (3,) or (n, 3), got {pts.shape}")
    z = pts[:, 2]
    if np.any(z <= _PROJECT_MIN_Z):
        raise ValueError(f"cannot project: {int(np.sum(z <= _PROJECT_MIN_Z))} point(s) at or behind camera plane")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = cam.fx * pts[:, 0] / z + cam.cx
    uv[:, 1] = cam.fy * pts[:, 1] / z + cam.cy
    return uv[0] if single else uv


def back_project(cam: CameraModel, uv: np.ndarray, depth) -> np.ndarray:
    """Invert project(): pixel coordinates plus camera-frame depth to 3D points.

    depth is the z coordinate (not the ray length); broadcastable against uv rows.
    """
    uvp = np.asarray(uv, dtype=np.float64)
    single = uvp.shape == (2,)
    if single:
        uvp = uvp[None, :]
    z = np.broadcast_to(np.asarray(depth, dtype=np.float64), (uvp.shape[0],))
    pts = np.empty((uvp.shape[0], 3))
    pts[:, 0] = (uvp[:, 0] - cam.cx) / cam.fx * z
    pts[:, 1] = (uvp[:, 1] - cam.cy) / cam.fy * z
    pts[:, 2] = z
    return pts[0] if single else pts


def rotation_from_6d(e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    """Recover a rotation matrix from the two-column 6D encoding.

    Gram-Schmidt: the first column is e1 normalized, the second is e2 with its
    e1 component removed then normalized, the third their cross product.

    Raises:
        ValueError: if e1 is near zero or e2 is near parallel to e1.
    """
    a1 = _as_float_array(e1, (3,), "e1")
    a2 = _as_float_array(e2, (3,), "e2")
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise ValueError("degenerate 6D rotation: e1 is near zero")
    b1 = a1 / n1
    w = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(w)
    if n2 < 1e-12:
        raise ValueError("degenerate 6D rotation: e2 is near parallel to e1")
    b2 = w / n2
    b3 = np.cross(b1, b2)
    return np.column_stack([b1, b2, b3])


def rotation_to_6d(rot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First two columns of a rotation matrix; rotation_from_6d inverts this."""
    r = _as_float_array(rot, (3, 3), "rotation")
    return r[:, 0].copy(), r[:, 1].copy()


def rotation_geodesic_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle in radians between two rotations.

    Mathematically arccos of (trace(ra^T rb) - 1) / 2, but computed as
    atan2(sin, cos) of the relative rotation: the skew part of ra^T rb gives
    2 sin(angle) times the axis. arccos alone loses half the significand
    near 0 and pi, this form stays accurate at both ends.
    """
    a = np.asarray(ra, dtype=np.float64)
    b = np.asarray(rb, dtype=np.float64)
    m = a.T @ b
    cos_term = (np.trace(m) - 1.0) / 2.0
    axial = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    sin_term = np.linalg.norm(axial) / 2.0
    return float(np.arctan2(sin_term, cos_term))


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_xyz_matrix(angles) -> np.ndarray:
    """Rotation from intrinsic XYZ Euler angles (radians): Rx @ Ry @ Rz."""
    ax, ay, az = np.asarray(angles, dtype=np.float64)
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    # q = (w, x, y, z), unit norm
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def uniform_rotation(gen: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly from SO(3) (normalized Gaussian quaternion)."""
    q = gen.normal(size=4)
    n = np.linalg.norm(q)
    while n < 1e-12:  # probability ~0, but keep the draw well defined
        q = gen.normal(size=4)
        n = np.linalg.norm(q)
    return _quat_to_matrix(q / n)


# splitmix64 constants; used to derive well-spread child stream ids.
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


@dataclasses.dataclass(frozen=True)
class RngStream:
    """Counter-based deterministic RNG handle: a (seed, stream) pair.

    generator() always returns a fresh generator positioned at the start of
    the stream, so identical handles yield identical sequences regardless of
    call history. Derive independent substreams with child()/split() before
    sharing across trials or threads; never share one live generator.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream", int(self.stream) & _MASK64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, index: int) -> "RngStream":
        if index < 0:
            raise ValueError(f"child index must be >= 0, got {index}")
        mixed = _splitmix64(self.stream ^ _splitmix64((index + 1) & _MASK64))
        return RngStream(self.seed, mixed)

    def split(self, n: int) -> list["RngStream"]:
        return [self.child(i) for i in range(n)]


def _resolve_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"rng must be RngStream or numpy Generator, got {type(rng)!r}")


def sample_perturbation(
    rng,
    base: Pose,
    t_std=(0.02, 0.02, 0.05),
    rot_std_deg: float = 15.0,
) -> Pose:
    """Randomly perturb a pose.

    Translation noise is Gaussian per camera-frame axis with std t_std meters
    (defaults: 2 cm lateral, 5 cm along depth). Rotation noise is built from
    independent Gaussian intrinsic-XYZ Euler angles with std rot_std_deg
    degrees per axis, applied about the object frame (right-multiplied).

    With both stds zero the base pose is returned bit-exactly. Draw order is
    fixed (angles first, then translation) so sequences are reproducible.

    Args:
        rng: RngStream or numpy Generator.
        base: pose to perturb.
        t_std: scalar or length-3 std in meters.
        rot_std_deg: per-axis Euler std in degrees.

    Returns:
        Perturbed pose.
    """
    gen = _resolve_generator(rng)
    t_std_arr = np.broadcast_to(np.asarray(t_std, dtype=np.float64), (3,))
    if np.any(t_std_arr < 0.0) or rot_std_deg < 0.0:
        raise ValueError("noise stds must be >= 0")
    angles = gen.normal(0.0, 1.0, size=3) * (rot_std_deg * _DEG)
    delta_t = gen.normal(0.0, 1.0, size=3) * t_std_arr
    rot = base.rotation @ euler_xyz_matrix(angles)
    return Pose(rot, base.translation + delta_t)


def camera_lookat(
    eye,
    target,
    up_hint=(0.0, 0.0, 1.0),
    fallback_hint=(1.0, 0.0, 0.0),
) -> Pose:
    """Pose of a camera at eye with its +z axis through target.

    The camera frame is +x right, +y down, +z forward; up_hint is the
    reference-frame direction that should appear "up" in the image (mapped to
    -y). When the view axis is within ~1e-9 of the up_hint direction the
    fallback hint is used instead, keeping the construction total.

    Returns:
        Pose mapping camera-frame coordinates into the reference frame.
    """
    eye_v = _as_float_array(np.asarray(eye, dtype=np.float64), (3,), "eye")
    tgt_v = _as_float_array(np.asarray(target, dtype=np.float64), (3,), "target")
    fwd = tgt_v - eye_v
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera_lookat: eye and target coincide")
    zc = fwd / n
    for hint in (up_hint, fallback_hint):
        h = np.asarray(hint, dtype=np.float64)
        h = h / np.linalg.norm(h)
        w = h - (h @ zc) * zc
        wn = np.linalg.norm(w)
        if wn > 1e-9:
            yc = -w / wn  # image up maps to -y in the camera frame
            xc = np.cross(yc, zc)
            return Pose(np.column_stack([xc, yc, zc]), eye_v)
    raise ValueError("camera_lookat: both up hints are parallel to the view axis")
