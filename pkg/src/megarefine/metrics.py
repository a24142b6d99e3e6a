"""Pose-error metrics and experiment aggregation.

Errors are measured three ways at once: displacement of the anchor point
(the quantity the update parameterization steers), geodesic rotation angle,
and the mean L1 displacement of the object's canonical 2000-point surface
cloud (an ADD-style distance). Success is the fixed 5 cm / 15 degree rule.

Result rows are flat dicts following CSV_COLUMNS so experiment scripts can
stream them straight to disk; aggregate() folds rows into per-group success
rates and median errors.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .geometry import Pose, rotation_geodesic_angle
from .loss import pose_distance
from .meshes import TriMesh, anchor_position, reference_points

__all__ = [
    "SUCCESS_TRANSLATION_M",
    "SUCCESS_ROTATION_DEG",
    "CSV_COLUMNS",
    "PoseError",
    "evaluate",
    "result_row",
    "aggregate",
    "write_csv",
    "write_json",
    "read_csv",
]

SUCCESS_TRANSLATION_M = 0.05
SUCCESS_ROTATION_DEG = 15.0

CSV_COLUMNS = (
    "run_id",
    "object",
    "scorer",
    "predictor",
    "magnitude",
    "t_err_m",
    "r_err_deg",
    "add_m",
    "success",
)


@dataclasses.dataclass(frozen=True)
class PoseError:
    """Errors of one predicted pose against its ground truth."""

    translation_error: float
    rotation_error: float
    add: float
    success_5cm15deg: bool

    def __post_init__(self):
        for name in ("translation_error", "rotation_error", "add"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        expected = (self.translation_error <= SUCCESS_TRANSLATION_M
                    and self.rotation_error <= SUCCESS_ROTATION_DEG)
        if self.success_5cm15deg != expected:
            raise ValueError("success flag inconsistent with the error fields")


def evaluate(pred: Pose, gt: Pose, mesh: TriMesh, anchor, *,
             translation_mode: str = "anchor") -> PoseError:
    """Measure pred against gt.

    translation_mode picks the point whose displacement is reported:
    "anchor" (default) uses the object's anchor, "centroid" the vertex
    centroid. Rotation and ADD are unaffected by the mode.
    """
    if translation_mode == "anchor":
        p = anchor_position(anchor)
    elif translation_mode == "centroid":
        p = mesh.vertices.mean(axis=0)
    else:
        raise ValueError(f"unknown translation_mode {translation_mode!r}")
    t_err = float(np.linalg.norm(pred.transform(p) - gt.transform(p)))
    r_err = math.degrees(rotation_geodesic_angle(pred.rotation, gt.rotation))
    add = pose_distance(reference_points(mesh), pred, gt)
    success = t_err <= SUCCESS_TRANSLATION_M and r_err <= SUCCESS_ROTATION_DEG
    return PoseError(t_err, r_err, add, success)


def result_row(run_id: str, object_name: str, scorer: str, predictor: str,
               magnitude, err: PoseError) -> dict:
    """Flatten one evaluation into a CSV_COLUMNS-shaped dict."""
    return {
        "run_id": run_id,
        "object": object_name,
        "scorer": scorer,
        "predictor": predictor,
        "magnitude": magnitude,
        "t_err_m": err.translation_error,
        "r_err_deg": err.rotation_error,
        "add_m": err.add,
        "success": err.success_5cm15deg,
    }


def aggregate(rows: list, group_keys=()) -> list:
    """Per-group success rate and median errors.

    rows are result_row dicts. Groups are the distinct group_keys value
    tuples, emitted in sorted order; empty group_keys folds everything into
    one summary row. Each summary carries count, success_rate, and the
    median of the three error fields.
    """
    if not rows:
        raise ValueError("aggregate needs at least one row")
    keys = tuple(group_keys)
    groups: dict = {}
    for row in rows:
        gk = tuple(row[k] for k in keys)
        groups.setdefault(gk, []).append(row)
    out = []
    for gk in sorted(groups):
        members = groups[gk]
        summary = dict(zip(keys, gk))
        summary["count"] = len(members)
        summary["success_rate"] = sum(bool(m["success"]) for m in members) / len(members)
        for field in ("t_err_m", "r_err_deg", "add_m"):
            summary[f"median_{field}"] = float(np.median([m[field] for m in members]))
        out.append(summary)
    return out


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: list, path, columns=None) -> None:
    """Write rows with a fixed column order and byte-stable formatting.

    Floats are written with repr (shortest round-trip form) and lines end
    in plain newlines, so identical inputs produce identical bytes.
    """
    if columns is None:
        columns = CSV_COLUMNS if rows and "run_id" in rows[0] else None
    if columns is None:
        seen = []
        for row in rows:
            for k in row:
                if k not in seen:
                    seen.append(k)
        columns = tuple(seen)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(c)) for c in columns])


def write_json(rows: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_csv(path) -> list:
    """Inverse of write_csv for result tables: typed rows back as dicts."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        out = []
        for line in reader:
            row: dict = {}
            for key, cell in zip(header, line):
                if cell == "":
                    row[key] = None
                elif cell in ("true", "false"):
                    row[key] = cell == "true"
                else:
                    try:
                        row[key] = float(cell) if ("." in cell or "e" in cell or "inf" in cell) else int(cell)
                    except ValueError:
                        row[key] = cell
            out.append(row)
    return out
