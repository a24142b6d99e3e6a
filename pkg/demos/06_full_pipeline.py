#!/usr/bin/env python3
"""Detection to pose, end to end, on a generated scene.

Scene generation renders an object at a random pose, derives its
detection from the clean silhouette, and hands back noisy maps plus
crops. The pipeline then knows nothing but the detection: it spreads 520
hypotheses along the detection ray, scores each one's render against the
observed crop, and refines the winner. The same run is scriptable as

    megarefine pipeline --scenes 20 --seed 2026

which adds a manifest whose replay is byte-identical.
"""
import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from megarefine import (
    ObjectPlacement,
    RngStream,
    SceneSpec,
    anchor_position,
    basin_label,
    coarse_then_refine,
    evaluate,
    generate_scene,
    make_predictor,
    make_scorer,
)

spec = SceneSpec(
    objects=(ObjectPlacement("lshape", {},
                             ((-0.12, 0.12), (-0.1, 0.1), (0.6, 1.1))),),
    depth_sigma=0.002,
    seed=7,
)
sample = generate_scene(spec)
ob = sample.objects[0]
z = ob.gt_pose.transform(np.asarray(anchor_position(ob.anchor)))[2]
print(f"scene: {ob.name} at anchor depth {z:.3f} m, "
      f"{ob.visible_px} visible px, detection {ob.detection.size[0]:.0f}x"
      f"{ob.detection.size[1]:.0f}")

result = coarse_then_refine(
    sample.view, ob.mesh, ob.anchor, ob.detection, sample.view.camera,
    make_scorer("depth_l2"), make_predictor("depth_icp"),
    rng=RngStream(7, 1), gt=ob.gt_pose)

labels = [basin_label(p, ob.gt_pose, ob.anchor)
          for p in result.scored.hypotheses.poses]
err_sel = evaluate(result.selected_pose, ob.gt_pose, ob.mesh, ob.anchor)
err_fin = evaluate(result.final_pose, ob.gt_pose, ob.mesh, ob.anchor)
print(f"hypotheses: {len(labels)} scored, {labels.count('positive')} in basin; "
      f"scorer picked #{result.scored.selected} "
      f"({err_sel.rotation_error:.1f} deg / {err_sel.translation_error:.3f} m off)")
print(f"after refinement: {err_fin.rotation_error:.1f} deg / "
      f"{err_fin.translation_error:.3f} m, ADD {err_fin.add:.4f} m, "
      f"5cm/15deg success: {err_fin.success_5cm15deg}")
print("(this seed is a scene the analytic depth scorer handles well; such "
      "a scorer is a weak stand-in for a trained classifier, and the "
      "recorded artifact baseline is ~21% success over 100 scenes)")
