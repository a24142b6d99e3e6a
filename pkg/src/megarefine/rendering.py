"""Deterministic software rasterizer and the anchor-centered view machinery.

Images are z-buffered perspective rasterizations with flat Lambertian
shading, rendered by a numba kernel fed fully pre-clipped triangle soup.
Triangles crossing the near plane (0.01 m) are clipped against it on the
numpy side; triangles entirely behind it are dropped. Faces are shaded
double-sided: the face normal is flipped toward the camera before lighting,
so meshes with inconsistent winding still render.

Virtual crop cameras reparameterize a base camera so a chosen anchor point
lands exactly at the image center: the principal point is shifted, never the
viewing direction, so crops of the same underlying camera see the same
camera-frame geometry and differ only in their pixel grids (crop_resample
maps between them affinely). Multi-view sets place three extra cameras on a
circle around the anchor, each aimed straight at it, which is what makes the
anchor recoverable from center-ray intersections.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
from numba import njit

from .geometry import CameraModel, Pose, camera_lookat, compose
from .meshes import TriMesh, anchor_position

__all__ = [
    "RenderedView",
    "ViewSetSpec",
    "render",
    "anchor_centered_camera",
    "crop_camera_for_detection",
    "make_viewset",
    "crop_resample",
    "DEFAULT_BASE_CAMERA",
    "DEFAULT_LIGHT_DIR",
    "NEAR_PLANE",
]

NEAR_PLANE = 0.01

# Base sensor for renderer-generated views; crops are derived from it.
DEFAULT_BASE_CAMERA = CameraModel(fx=600.0, fy=600.0, cx=319.5, cy=319.5, width=640, height=640)

# Unit vector from surface toward the light, camera frame. Slightly off the
# optical axis so curvature reads in the shading.
DEFAULT_LIGHT_DIR = np.array([-0.3, -0.4, -0.866025403784439])
DEFAULT_LIGHT_DIR = DEFAULT_LIGHT_DIR / np.linalg.norm(DEFAULT_LIGHT_DIR)

_AMBIENT = 0.3
_DIFFUSE = 0.7
_DEFAULT_ALBEDO = 0.7
_CROP_MARGIN = 1.4


@dataclasses.dataclass(frozen=True, eq=False)
class RenderedView:
    """One rendered view plus the camera bookkeeping to interpret it.

    Attributes:
        rgb: (H, W, 3) floats in [0, 1]; zeros where nothing was requested
            or nothing was hit.
        depth: (H, W) camera-frame z in meters, 0 = no hit.
        normals: (H, W, 3) camera-frame unit face normals, 0 = no hit.
        camera: the (virtual crop) camera the maps are expressed in.
        view_pose: object pose in this view's camera frame.
        cam_from_ref: transform taking reference-camera coordinates into
            this view's camera frame; identity for direct renders and for
            view 1 of a viewset.
    """

    rgb: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    camera: CameraModel
    view_pose: Pose
    cam_from_ref: Pose = dataclasses.field(default_factory=Pose.identity)

    @property
    def is_empty(self) -> bool:
        """True when nothing rasterized (all depth zero)."""
        return not bool(np.any(self.depth > 0.0))


@dataclasses.dataclass(frozen=True)
class ViewSetSpec:
    """Shape of a multi-view render request."""

    n_views: int = 4
    resolution: int = 160
    channels: tuple = ("rgb", "depth", "normals")

    def __post_init__(self):
        if self.n_views not in (1, 2, 3, 4):
            raise ValueError(f"n_views must be in 1..4, got {self.n_views}")
        if self.resolution < 16:
            raise ValueError(f"resolution must be >= 16, got {self.resolution}")
        bad = set(self.channels) - {"rgb", "depth", "normals"}
        if bad or not self.channels:
            raise ValueError(f"channels must be a nonempty subset of rgb/depth/normals, got {self.channels}")
        object.__setattr__(self, "channels", tuple(self.channels))


@njit(cache=True, nogil=True)
def _raster_kernel(tv, tc, tn, shade, fx, fy, cx, cy, depth, rgb, normals,
                   want_rgb, want_normals):
    h_img, w_img = depth.shape
    for k in range(tv.shape[0]):
        x0, y0, z0 = tv[k, 0, 0], tv[k, 0, 1], tv[k, 0, 2]
        x1, y1, z1 = tv[k, 1, 0], tv[k, 1, 1], tv[k, 1, 2]
        x2, y2, z2 = tv[k, 2, 0], tv[k, 2, 1], tv[k, 2, 2]
        u0 = fx * x0 / z0 + cx
        v0 = fy * y0 / z0 + cy
        u1 = fx * x1 / z1 + cx
        v1 = fy * y1 / z1 + cy
        u2 = fx * x2 / z2 + cx
        v2 = fy * y2 / z2 + cy
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        lo_x = max(0, int(np.ceil(min(u0, min(u1, u2)))))
        hi_x = min(w_img - 1, int(np.floor(max(u0, max(u1, u2)))))
        lo_y = max(0, int(np.ceil(min(v0, min(v1, v2)))))
        hi_y = min(h_img - 1, int(np.floor(max(v0, max(v1, v2)))))
        if lo_x > hi_x or lo_y > hi_y:
            continue
        inv_area = 1.0 / area
        iz0 = 1.0 / z0
        iz1 = 1.0 / z1
        iz2 = 1.0 / z2
        for py in range(lo_y, hi_y + 1):
            for px in range(lo_x, hi_x + 1):
                w0 = ((u1 - px) * (v2 - py) - (u2 - px) * (v1 - py)) * inv_area
                w1 = ((u2 - px) * (v0 - py) - (u0 - px) * (v2 - py)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                iz = w0 * iz0 + w1 * iz1 + w2 * iz2
                z = 1.0 / iz
                d = depth[py, px]
                if d == 0.0 or z < d:
                    depth[py, px] = z
                    if want_normals:
                        normals[py, px, 0] = tn[k, 0]
                        normals[py, px, 1] = tn[k, 1]
                        normals[py, px, 2] = tn[k, 2]
                    if want_rgb:
                        s = shade[k]
                        for c in range(3):
                            val = (w0 * tc[k, 0, c] * iz0 + w1 * tc[k, 1, c] * iz1
                                   + w2 * tc[k, 2, c] * iz2) * z * s
                            rgb[py, px, c] = min(1.0, max(0.0, val))


def _clip_triangle_soup(vc, faces, albedo, near):
    """Near-plane clip to unindexed triangles.

    Returns (tv, tc, src_face): (T, 3, 3) camera-frame positions, (T, 3, 3)
    per-vertex albedo, and for each output triangle the original face index
    (clipping keeps a face's plane, so normals transfer unchanged).
    """
    fz = vc[:, 2][faces]
    front = fz.min(axis=1) >= near
    crossing = np.nonzero(~front & (fz.max(axis=1) > near))[0]
    parts_v = [vc[faces[front]]]
    parts_c = [albedo[faces[front]]]
    parts_f = [np.nonzero(front)[0]]
    for fi in crossing:
        poly_v = [vc[faces[fi, j]] for j in range(3)]
        poly_c = [albedo[faces[fi, j]] for j in range(3)]
        out_v: list = []
        out_c: list = []
        for j in range(3):
            av, ac = poly_v[j], poly_c[j]
            bv, bc = poly_v[(j + 1) % 3], poly_c[(j + 1) % 3]
            a_in = av[2] >= near
            if a_in:
                out_v.append(av)
                out_c.append(ac)
            if a_in != (bv[2] >= near):
                t = (near - av[2]) / (bv[2] - av[2])
                out_v.append(av + t * (bv - av))
                out_c.append(ac + t * (bc - ac))
        for j in range(1, len(out_v) - 1):
            parts_v.append(np.array([[out_v[0], out_v[j], out_v[j + 1]]]))
            parts_c.append(np.array([[out_c[0], out_c[j], out_c[j + 1]]]))
            parts_f.append(np.array([fi]))
    tv = np.concatenate(parts_v, axis=0)
    tc = np.concatenate(parts_c, axis=0)
    src = np.concatenate(parts_f, axis=0)
    return tv, tc, src


def render(mesh: TriMesh, pose: Pose, cam: CameraModel,
           light_dir=DEFAULT_LIGHT_DIR,
           channels: tuple = ("rgb", "depth", "normals")) -> RenderedView:
    """Rasterize one mesh under one pose into one camera.

    Deterministic and bit-exact for identical inputs. An object entirely
    behind the near plane yields an empty view (all depth 0), not an error.
    Depth is always filled (it is the z-buffer); rgb and normals come back
    as zero arrays when not requested.
    """
    bad = set(channels) - {"rgb", "depth", "normals"}
    if bad:
        raise ValueError(f"unknown channels {sorted(bad)}")
    h, w = cam.height, cam.width
    depth = np.zeros((h, w))
    rgb = np.zeros((h, w, 3))
    normals = np.zeros((h, w, 3))
    vc = mesh.vertices @ pose.rotation.T + pose.translation
    albedo = mesh.colors if mesh.colors is not None else np.full_like(mesh.vertices, _DEFAULT_ALBEDO)
    tv, tc, src = _clip_triangle_soup(vc, mesh.faces, albedo, NEAR_PLANE)
    if tv.shape[0] > 0:
        e1 = tv[:, 1] - tv[:, 0]
        e2 = tv[:, 2] - tv[:, 0]
        fn = np.cross(e1, e2)
        norms = np.linalg.norm(fn, axis=1)
        ok = norms > 1e-18
        fn[ok] /= norms[ok, None]
        # double-sided: flip normals to face the camera at the origin
        centroid = tv.mean(axis=1)
        facing_away = (fn * centroid).sum(axis=1) > 0.0
        fn[facing_away] = -fn[facing_away]
        light = np.asarray(light_dir, dtype=np.float64).reshape(3)
        light = light / np.linalg.norm(light)
        lambert = np.maximum(0.0, fn @ light)
        shade = np.minimum(1.0, _AMBIENT + _DIFFUSE * lambert)
        _raster_kernel(
            np.ascontiguousarray(tv),
            np.ascontiguousarray(tc),
            np.ascontiguousarray(fn),
            np.ascontiguousarray(shade),
            cam.fx, cam.fy, cam.cx, cam.cy,
            depth, rgb, normals,
            "rgb" in channels, "normals" in channels,
        )
    return RenderedView(rgb=rgb, depth=depth, normals=normals, camera=cam,
                        view_pose=pose)


def anchor_centered_camera(base_cam: CameraModel, pose: Pose, anchor,
                           mesh: TriMesh, out_size: int = 160,
                           margin: float = _CROP_MARGIN) -> CameraModel:
    """Square virtual crop of base_cam that centers the anchor exactly.

    The principal point is shifted so the anchor's projection lands on the
    image center pixel coordinate ((out-1)/2, (out-1)/2); focal lengths are
    scaled so the mesh's projected extent around the anchor fits the crop
    with the given margin. The crop's center-pixel ray therefore passes
    through the anchor in space, whatever the anchor's bearing.

    Raises:
        ValueError: anchor at or behind the camera, or no mesh vertex in
            front of it (nothing to size the crop by).
    """
    a = pose.transform(anchor_position(anchor))
    if a[2] <= NEAR_PLANE:
        raise ValueError(f"anchor behind camera (z = {a[2]})")
    vc = mesh.vertices @ pose.rotation.T + pose.translation
    in_front = vc[:, 2] > NEAR_PLANE
    if not np.any(in_front):
        raise ValueError("no mesh vertex in front of the camera")
    vcf = vc[in_front]
    ua = base_cam.fx * a[0] / a[2] + base_cam.cx
    va = base_cam.fy * a[1] / a[2] + base_cam.cy
    u = base_cam.fx * vcf[:, 0] / vcf[:, 2] + base_cam.cx
    v = base_cam.fy * vcf[:, 1] / vcf[:, 2] + base_cam.cy
    half_extent = max(float(np.abs(u - ua).max()), float(np.abs(v - va).max()))
    half_extent = max(half_extent, 1e-3)
    scale = out_size / (2.0 * margin * half_extent)
    fx = base_cam.fx * scale
    fy = base_cam.fy * scale
    center = (out_size - 1) / 2.0
    cx = center - fx * a[0] / a[2]
    cy = center - fy * a[1] / a[2]
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=out_size, height=out_size)


def crop_camera_for_detection(base_cam: CameraModel, bbox,
                              out_size: int = 160,
                              margin: float = _CROP_MARGIN) -> CameraModel:
    """Square crop of base_cam around a detection bbox (u0, v0, u1, v1).

    Unlike anchor_centered_camera this needs no pose: it is the test-time
    crop, driven purely by the 2D detection.
    """
    u0, v0, u1, v1 = (float(x) for x in bbox)
    if u1 <= u0 or v1 <= v0:
        raise ValueError(f"degenerate bbox {bbox}")
    uc = 0.5 * (u0 + u1)
    vc = 0.5 * (v0 + v1)
    half_extent = max(u1 - u0, v1 - v0) / 2.0
    scale = out_size / (2.0 * margin * half_extent)
    fx = base_cam.fx * scale
    fy = base_cam.fy * scale
    center = (out_size - 1) / 2.0
    cx = center + scale * (base_cam.cx - uc)
    cy = center + scale * (base_cam.cy - vc)
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=out_size, height=out_size)


def _orbit_axis(a_hat: np.ndarray) -> np.ndarray:
    """Rotation axis for the extra views: the view-1 vertical, made
    orthogonal to the anchor direction so the orbit angles are exact."""
    for hint in (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])):
        axis = hint - (hint @ a_hat) * a_hat
        n = np.linalg.norm(axis)
        if n > 1e-8:
            return axis / n
    raise ValueError("degenerate anchor direction")  # unreachable: hints span


def _axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def make_viewset(mesh: TriMesh, pose: Pose, anchor, spec: ViewSetSpec = ViewSetSpec(),
                 base_cam: CameraModel = DEFAULT_BASE_CAMERA,
                 light_dir=DEFAULT_LIGHT_DIR) -> list:
    """Render the anchor-centered multi-view set for one pose.

    View 1 keeps the input viewpoint (its view_pose is the given pose,
    cropped to center the anchor). The remaining views sit at the same
    distance from the anchor, at azimuths 90/180/270 degrees around the
    view-1 vertical, each aimed so its z-axis runs through the anchor.
    Every view is lit along its own camera's light_dir.
    """
    a = pose.transform(anchor_position(anchor))
    if a[2] <= NEAR_PLANE:
        raise ValueError(f"anchor behind camera (z = {a[2]})")
    dist = float(np.linalg.norm(a))
    a_hat = a / dist
    views = []
    cam1 = anchor_centered_camera(base_cam, pose, anchor, mesh, spec.resolution)
    views.append(dataclasses.replace(
        render(mesh, pose, cam1, light_dir, spec.channels),
        cam_from_ref=Pose.identity(),
    ))
    axis = _orbit_axis(a_hat)
    up_ref = np.array([0.0, -1.0, 0.0])  # reference-frame up (CV y points down)
    for j in range(1, spec.n_views):
        rot = _axis_angle_rotation(axis, j * math.pi / 2.0)
        eye = a + rot @ (-a)
        cam_to_ref = camera_lookat(eye, a, up_hint=up_ref)
        cam_from_ref = cam_to_ref.inverse()
        view_pose = compose(cam_from_ref, pose)
        cam_j = anchor_centered_camera(base_cam, view_pose, anchor, mesh, spec.resolution)
        views.append(dataclasses.replace(
            render(mesh, view_pose, cam_j, light_dir, spec.channels),
            cam_from_ref=cam_from_ref,
        ))
    return views


def crop_resample(image: np.ndarray, src_cam: CameraModel, dst_cam: CameraModel,
                  fill: float = 0.0) -> np.ndarray:
    """Nearest-neighbor resample between two crops of the same camera.

    Valid only when both cameras are principal-shift/zoom crops of one
    underlying camera frame: then pixel coordinates relate affinely through
    the shared normalized image plane and values (including depth) transfer
    without re-projection.
    """
    img = np.asarray(image)
    h_d, w_d = dst_cam.height, dst_cam.width
    ud = np.arange(w_d)
    vd = np.arange(h_d)
    us = np.rint((ud - dst_cam.cx) / dst_cam.fx * src_cam.fx + src_cam.cx).astype(np.int64)
    vs = np.rint((vd - dst_cam.cy) / dst_cam.fy * src_cam.fy + src_cam.cy).astype(np.int64)
    ok_u = (us >= 0) & (us < src_cam.width)
    ok_v = (vs >= 0) & (vs < src_cam.height)
    out_shape = (h_d, w_d) + img.shape[2:]
    out = np.full(out_shape, fill, dtype=img.dtype)
    vv, uu = np.meshgrid(vs[ok_v], us[ok_u], indexing="ij")
    out[np.ix_(ok_v, ok_u)] = img[vv, uu]
    return out
