#!/usr/bin/env python3
"""Regenerate tests/data/baselines.json.

Runs the two empirical experiments the acceptance suite regression-locks
(the scene pipeline with the depth_l2 scorer + depth_icp predictor, and the
basin-convergence-vs-magnitude curve) and records their configs next to
their results. The acceptance test replays the stored configs and compares
rates within an absolute 0.03 band, so rerun this script only when a
deliberate behavior change moves the numbers; the diff then documents the
shift.
"""
import json
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from megarefine.cli import run_basin, run_pipeline  # noqa: E402
from megarefine.metrics import read_csv  # noqa: E402

PIPELINE_CONFIG = {
    "scene": {
        "objects": [
            {
                "kind": "lshape",
                "params": {},
                "anchor_box": [[-0.12, 0.12], [-0.1, 0.1], [0.6, 1.1]],
            }
        ],
        "camera": None,
        "depth_sigma": 0.0,
        "dropout": 0.0,
        "detection_jitter": 0.0,
        "min_visible_px": 200,
        "max_retries": 20,
        "crop_resolution": 160,
    },
    "scenes": 100,
    "scorer": "depth_l2",
    "predictor": "depth_icp",
    "per_orientation": 5,
    "iters": 5,
    "resolution": 160,
    "seed": 2026,
    "threads": 4,
}

BASIN_CONFIG = {
    "object": {"kind": "lshape", "params": {}},
    "distance": 0.9,
    "magnitudes": [0.5, 1.0, 2.0, 4.0],
    "trials": 50,
    "predictor": "depth_icp",
    "iters": 5,
    "seed": 2026,
    "threads": 4,
}


def record() -> dict:
    with tempfile.TemporaryDirectory() as d:
        out = Path(d)
        run_pipeline(PIPELINE_CONFIG, out)
        summary = json.loads((out / "summary.json").read_text())
    with tempfile.TemporaryDirectory() as d:
        out = Path(d)
        run_basin(BASIN_CONFIG, out)
        rows = read_csv(out / "results.csv")
    return {
        "pipeline": {"config": PIPELINE_CONFIG, "results": summary},
        "basin": {
            "config": BASIN_CONFIG,
            "results": {
                "magnitudes": [r["magnitude"] for r in rows],
                "rates": [r["rate"] for r in rows],
            },
        },
    }


def main() -> int:
    dest = REPO / "tests" / "data" / "baselines.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    data = record()
    dest.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    print(f"wrote {dest}")
    print(json.dumps({"pipeline": data["pipeline"]["results"],
                      "basin": data["basin"]["results"]}, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
