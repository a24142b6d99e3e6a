"""Synthetic scene generation: multi-object renders with detections.

Builds evaluation scenes end to end: sample object poses inside declared
bounds, rasterize every object into one shared z-buffer (so objects occlude
each other), synthesize a 2D detection per object from its visible
silhouette, then corrupt the depth map with optional sensor-style noise.
Everything downstream of the seed is deterministic, so a scene can be
regenerated bit-identically from its spec alone.

A scene attempt is rejected when any object ends up with fewer visible
pixels than the spec demands (fully occluded, or projected outside the
frame). Rejected attempts are resampled up to a bounded retry count.

There is no physics here: poses are sampled in free space, orientation
uniform, with the object's anchor point placed inside an axis-aligned
camera-frame box.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping, Sequence

import numpy as np

from .geometry import Pose, RngStream, uniform_rotation
from .hypotheses import Detection2D
from .meshes import (
    AnchorPoint,
    TriMesh,
    anchor_position,
    default_anchor,
    load_mesh,
    procedural_shape,
)
from .rendering import (
    DEFAULT_BASE_CAMERA,
    NEAR_PLANE,
    CameraModel,
    RenderedView,
    crop_camera_for_detection,
    crop_resample,
    render,
)

__all__ = [
    "ObjectPlacement",
    "SceneSpec",
    "SceneObject",
    "SceneSample",
    "generate_scene",
    "detection_from_mask",
    "scene_spec_from_dict",
    "scene_spec_to_dict",
]


@dataclasses.dataclass(frozen=True)
class ObjectPlacement:
    """One object to drop into the scene, plus where its anchor may land.

    kind is a procedural shape name ("box", "sphere", "cylinder",
    "lshape") with params forwarded to the builder, or "file" with
    params={"path": ...} to load a mesh from disk. anchor_box gives
    camera-frame (lo, hi) bounds per axis for the anchor point; the
    sampled orientation is uniform over rotations.
    """

    kind: str
    params: Mapping = dataclasses.field(default_factory=dict)
    anchor_box: tuple = ((-0.15, 0.15), (-0.12, 0.12), (0.6, 1.2))

    def __post_init__(self):
        if not isinstance(self.kind, str) or not self.kind:
            raise ValueError("object kind must be a nonempty string")
        box = tuple(tuple(float(b) for b in axis) for axis in self.anchor_box)
        if len(box) != 3 or any(len(axis) != 2 for axis in box):
            raise ValueError("anchor_box must be three (lo, hi) pairs")
        for lo, hi in box:
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"bad anchor_box interval ({lo}, {hi})")
        if box[2][0] <= NEAR_PLANE:
            raise ValueError("anchor depth bounds must sit in front of the camera")
        object.__setattr__(self, "anchor_box", box)
        # normalize so a JSON round trip (tuples -> lists) compares equal
        params = {k: tuple(v) if isinstance(v, (list, tuple)) else v
                  for k, v in dict(self.params).items()}
        object.__setattr__(self, "params", params)

    def build_mesh(self) -> TriMesh:
        if self.kind == "file":
            if "path" not in self.params:
                raise ValueError("file placement needs params={'path': ...}")
            return load_mesh(self.params["path"])
        return procedural_shape(self.kind, **self.params)


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """Full recipe for one synthetic scene."""

    objects: tuple
    camera: CameraModel = DEFAULT_BASE_CAMERA
    depth_sigma: float = 0.0
    dropout: float = 0.0
    detection_jitter: float = 0.0
    seed: int = 0
    min_visible_px: int = 200
    max_retries: int = 20
    crop_resolution: int = 160

    def __post_init__(self):
        objs = tuple(self.objects)
        if not objs:
            raise ValueError("a scene needs at least one object")
        if not all(isinstance(o, ObjectPlacement) for o in objs):
            raise ValueError("objects must be ObjectPlacement instances")
        object.__setattr__(self, "objects", objs)
        if not (np.isfinite(self.depth_sigma) and self.depth_sigma >= 0.0):
            raise ValueError("depth_sigma must be a finite value >= 0")
        if not (0.0 <= self.dropout <= 1.0):
            raise ValueError("dropout must lie in [0, 1]")
        if not (np.isfinite(self.detection_jitter) and self.detection_jitter >= 0.0):
            raise ValueError("detection_jitter must be a finite value >= 0")
        if int(self.min_visible_px) < 1:
            raise ValueError("min_visible_px must be >= 1")
        if int(self.max_retries) < 1:
            raise ValueError("max_retries must be >= 1")
        if int(self.crop_resolution) < 8:
            raise ValueError("crop_resolution must be >= 8")


@dataclasses.dataclass(frozen=True, eq=False)
class SceneObject:
    """One target in an accepted scene."""

    name: str
    mesh: TriMesh
    anchor: AnchorPoint
    gt_pose: Pose
    detection: Detection2D
    crop: RenderedView
    visible_px: int


@dataclasses.dataclass(frozen=True, eq=False)
class SceneSample:
    """An accepted scene: the shared full-frame view plus per-target data.

    view.depth already carries the spec's noise; detections were measured
    on the clean silhouettes before noise was applied. view.view_pose is
    identity (the frame holds several objects, none canonical).
    """

    view: RenderedView
    objects: tuple
    attempts: int


def _visible_bbox(mask: np.ndarray):
    """Inclusive pixel-index bbox (u0, v0, u1, v1) of a boolean mask."""
    vs, us = np.nonzero(mask)
    return int(us.min()), int(vs.min()), int(us.max()), int(vs.max())


def detection_from_mask(mask: np.ndarray) -> Detection2D:
    """Tight detection around a boolean silhouette mask.

    Size counts pixels (u1 - u0 + 1), so a one-pixel silhouette still
    yields a valid, non-degenerate detection. Raises on an empty mask.
    """
    if not mask.any():
        raise ValueError("empty mask has no detection")
    u0, v0, u1, v1 = _visible_bbox(mask)
    center = (0.5 * (u0 + u1), 0.5 * (v0 + v1))
    size = (float(u1 - u0 + 1), float(v1 - v0 + 1))
    return Detection2D(center=center, size=size)


def _jitter_detection(det: Detection2D, amount: float,
                      gen: np.random.Generator,
                      cam: CameraModel) -> Detection2D:
    d = gen.uniform(-amount, amount, size=4)
    size = (det.size[0] * (1.0 + d[0]), det.size[1] * (1.0 + d[1]))
    center = (det.center[0] + d[2] * det.size[0],
              det.center[1] + d[3] * det.size[1])
    center = (float(np.clip(center[0], 0.0, cam.width - 1.0)),
              float(np.clip(center[1], 0.0, cam.height - 1.0)))
    return Detection2D(center=center, size=size)


def _composite(views: Sequence[RenderedView], cam: CameraModel):
    """Merge per-object renders through one shared z-buffer.

    Ties (exactly equal depths) go to the lower object index, matching the
    first-hit rule a joint rasterization with stable triangle order would
    give. Returns (depth, rgb, normals, winner) with winner = -1 on empty
    pixels.
    """
    depths = np.stack([v.depth for v in views])
    padded = np.where(depths > 0.0, depths, np.inf)
    winner = np.argmin(padded, axis=0)
    any_hit = np.any(depths > 0.0, axis=0)
    winner = np.where(any_hit, winner, -1)
    h, w = cam.height, cam.width
    depth = np.zeros((h, w))
    rgb = np.zeros((h, w, 3))
    normals = np.zeros((h, w, 3))
    for i, v in enumerate(views):
        sel = winner == i
        depth[sel] = v.depth[sel]
        rgb[sel] = v.rgb[sel]
        normals[sel] = v.normals[sel]
    return depth, rgb, normals, winner


def generate_scene(spec: SceneSpec) -> SceneSample:
    """Sample, render, and annotate one scene from its spec.

    Raises:
        RuntimeError: when max_retries attempts in a row leave some object
            without enough visible pixels.
        ValueError: on meshes or shape parameters the builders reject.
    """
    meshes = [p.build_mesh() for p in spec.objects]
    anchors = [default_anchor(m) for m in meshes]
    cam = spec.camera
    root = RngStream(spec.seed)

    for attempt in range(int(spec.max_retries)):
        stream = root.child(attempt)
        pose_gen = stream.child(0).generator()
        poses = []
        for placement, anchor in zip(spec.objects, anchors):
            rot = uniform_rotation(pose_gen)
            point = np.array([pose_gen.uniform(lo, hi)
                              for lo, hi in placement.anchor_box])
            t = point - rot @ anchor_position(anchor)
            poses.append(Pose(rotation=rot, translation=t))

        solo = [render(mesh, pose, cam) for mesh, pose in zip(meshes, poses)]
        depth, rgb, normals, winner = _composite(solo, cam)
        visible = [int(np.count_nonzero(winner == i)) for i in range(len(solo))]
        if any(v < int(spec.min_visible_px) for v in visible):
            continue

        detections = [detection_from_mask(winner == i) for i in range(len(solo))]

        if spec.depth_sigma > 0.0 or spec.dropout > 0.0:
            noise_gen = stream.child(1).generator()
            valid = depth > 0.0
            if spec.depth_sigma > 0.0:
                jolt = noise_gen.normal(0.0, spec.depth_sigma, size=depth.shape)
                depth = np.where(valid, np.maximum(depth + jolt, NEAR_PLANE), depth)
            if spec.dropout > 0.0:
                drop = (noise_gen.random(size=depth.shape) < spec.dropout) & valid
                depth = np.where(drop, 0.0, depth)

        if spec.detection_jitter > 0.0:
            jitter_gen = stream.child(2).generator()
            detections = [_jitter_detection(d, spec.detection_jitter, jitter_gen, cam)
                          for d in detections]

        view = RenderedView(rgb=rgb, depth=depth, normals=normals,
                            camera=cam, view_pose=Pose.identity())
        objects = []
        for i, placement in enumerate(spec.objects):
            crop_cam = crop_camera_for_detection(cam, detections[i].bbox,
                                                 out_size=int(spec.crop_resolution))
            crop = RenderedView(
                rgb=crop_resample(rgb, cam, crop_cam),
                depth=crop_resample(depth, cam, crop_cam),
                normals=crop_resample(normals, cam, crop_cam),
                camera=crop_cam,
                view_pose=poses[i],
            )
            objects.append(SceneObject(
                name=f"{placement.kind}{i}",
                mesh=meshes[i],
                anchor=anchors[i],
                gt_pose=poses[i],
                detection=detections[i],
                crop=crop,
                visible_px=visible[i],
            ))
        return SceneSample(view=view, objects=tuple(objects),
                           attempts=attempt + 1)

    raise RuntimeError(
        f"no acceptable scene after {spec.max_retries} attempts "
        f"(some object kept fewer than {spec.min_visible_px} visible pixels)")


# --- JSON-facing (de)serialization ---------------------------------------

_TOP_KEYS = {"objects", "camera", "depth_sigma", "dropout", "detection_jitter",
             "seed", "min_visible_px", "max_retries", "crop_resolution"}
_OBJ_KEYS = {"kind", "params", "anchor_box"}
_CAM_KEYS = {"fx", "fy", "cx", "cy", "width", "height"}


def _reject_unknown(d: Mapping, allowed: set, where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValueError(f"unknown {where} keys: {unknown}")


def scene_spec_from_dict(data: Mapping) -> SceneSpec:
    """Build a SceneSpec from plain JSON-style data; unknown keys raise."""
    _reject_unknown(data, _TOP_KEYS, "scene spec")
    if "objects" not in data:
        raise ValueError("scene spec needs an 'objects' list")
    objects = []
    for entry in data["objects"]:
        _reject_unknown(entry, _OBJ_KEYS, "scene object")
        if "kind" not in entry:
            raise ValueError("scene object needs a 'kind'")
        kwargs = {"kind": entry["kind"]}
        if "params" in entry:
            kwargs["params"] = entry["params"]
        if "anchor_box" in entry:
            kwargs["anchor_box"] = tuple(tuple(ax) for ax in entry["anchor_box"])
        objects.append(ObjectPlacement(**kwargs))
    kwargs = {"objects": tuple(objects)}
    if "camera" in data:
        _reject_unknown(data["camera"], _CAM_KEYS, "camera")
        kwargs["camera"] = CameraModel(**{k: data["camera"][k] for k in data["camera"]})
    for key in ("depth_sigma", "dropout", "detection_jitter"):
        if key in data:
            kwargs[key] = float(data[key])
    for key in ("seed", "min_visible_px", "max_retries", "crop_resolution"):
        if key in data:
            kwargs[key] = int(data[key])
    return SceneSpec(**kwargs)


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    """Plain JSON-ready dict; scene_spec_from_dict inverts it."""
    return {
        "objects": [
            {"kind": p.kind, "params": dict(p.params),
             "anchor_box": [list(ax) for ax in p.anchor_box]}
            for p in spec.objects
        ],
        "camera": {"fx": spec.camera.fx, "fy": spec.camera.fy,
                   "cx": spec.camera.cx, "cy": spec.camera.cy,
                   "width": spec.camera.width, "height": spec.camera.height},
        "depth_sigma": spec.depth_sigma,
        "dropout": spec.dropout,
        "detection_jitter": spec.detection_jitter,
        "seed": spec.seed,
        "min_visible_px": spec.min_visible_px,
        "max_retries": spec.max_retries,
        "crop_resolution": spec.crop_resolution,
    }
