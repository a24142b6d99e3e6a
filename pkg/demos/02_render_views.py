#!/usr/bin/env python3
"""Anchor-centered rendering: the object cannot leave the crop.

Every view a refiner compares against is rendered through a derived camera
whose principal ray passes through the object's anchor point, so the
object sits centered and scaled to the frame no matter where it floats in
the original image. Writes the RGB/depth/normal maps of a 4-view set to
demos/out/.
"""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from megarefine import (
    DEFAULT_BASE_CAMERA,
    Pose,
    RngStream,
    ViewSetSpec,
    anchor_position,
    default_anchor,
    make_viewset,
    procedural_shape,
    project,
    save_pfm,
    save_ppm,
    uniform_rotation,
)

out = Path(__file__).resolve().parent / "out"
out.mkdir(exist_ok=True)

mesh = procedural_shape("lshape")
anchor = default_anchor(mesh)
gen = RngStream(202, 0).generator()
pose = Pose(uniform_rotation(gen), np.array([0.12, -0.06, 0.75]))

views = make_viewset(mesh, pose, anchor,
                     ViewSetSpec(n_views=4, resolution=160,
                                 channels=("rgb", "depth", "normals")))
a = np.asarray(anchor_position(anchor))
for i, view in enumerate(views):
    u, v = project(view.camera, view.view_pose.transform(a))
    cx = (view.camera.width - 1) / 2
    cy = (view.camera.height - 1) / 2
    print(f"view {i}: anchor at pixel ({u:.2f}, {v:.2f}), center ({cx}, {cy}), "
          f"{int((view.depth > 0).sum())} px covered")
    save_ppm(out / f"view{i}_rgb.ppm", view.rgb)
    save_pfm(out / f"view{i}_depth.pfm", view.depth)
    save_pfm(out / f"view{i}_normals.pfm", view.normals)

print(f"wrote {4 * 3} files under {out}")
print("the object was 16 cm off axis in the base camera; every crop still "
      "holds it dead center.")
