"""Experiment command line: reproducible runs with manifests and flat files.

Subcommands: render, hypotheses, coarse, refine, pipeline, basin, selftest.
Each run resolves a config (defaults, then an optional JSON file, then
`--key value` dotted overrides), writes a manifest.json recording the
resolved config plus tool version, and drops its results as CSV/JSONL
(and optional PPM/PFM image dumps) inside the chosen output directory.
Nothing is ever written outside that directory.

Reruns are reproducible from the manifest alone: point --config at a
previous manifest.json and the result tables come back byte-identical.
Unknown config keys are rejected (exit 2) so a config can't silently
drift; runtime failures exit 1.

All randomness descends from the single top-level seed through named
substreams, and parallel sections collect results in submission order, so
the outputs are independent of --threads (env MEGAREFINE_THREADS is the
fallback for the cap).
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import Pose, RngStream, project, sample_perturbation, uniform_rotation
from .hypotheses import Detection2D, training_hypotheses
from .hypotheses import test_hypotheses as detection_hypotheses
from .imgio import save_pfm, save_ppm
from .loss import disentangled_loss, loss_gradient, pose_distance
from .meshes import anchor_position, default_anchor, reference_points
from .metrics import aggregate, evaluate, result_row, write_csv, write_json
from .pose_update import AnchoredPose, PoseUpdate, anchor_dependency_gap, apply_update, target_update
from .refine import _thread_count, basin_experiment, make_predictor, refine
from .rendering import DEFAULT_BASE_CAMERA, ViewSetSpec, make_viewset, render
from .scenes import ObjectPlacement, SceneSpec, generate_scene, scene_spec_from_dict
from .scoring import coarse_then_refine, make_scorer, score_hypotheses

KINDS = ("render", "hypotheses", "coarse", "refine", "pipeline", "basin", "selftest")


class ConfigError(ValueError):
    """Bad config file, flag, or key: reported on stderr with exit code 2."""


# --- defaults -------------------------------------------------------------

def _object_block():
    return {"kind": "box", "params": {"extents": [0.12, 0.09, 0.16]}}


def _scene_block():
    return {
        "objects": [{"kind": "box", "params": {"extents": [0.12, 0.09, 0.16]},
                     "anchor_box": [[-0.15, 0.15], [-0.12, 0.12], [0.6, 1.2]]}],
        "camera": None,
        "depth_sigma": 0.0,
        "dropout": 0.0,
        "detection_jitter": 0.0,
        "min_visible_px": 200,
        "max_retries": 20,
        "crop_resolution": 160,
    }


def _defaults(kind: str) -> dict:
    base = {"seed": 0, "threads": None}
    per_kind = {
        "render": {"object": _object_block(), "distance": 0.9, "views": 4,
                   "resolution": 160, "channels": ["rgb", "depth", "normals"],
                   "dump_images": True},
        "hypotheses": {"object": _object_block(), "distance": 0.9,
                       "mode": "training", "per_orientation": 5},
        "coarse": {"scene": _scene_block(), "scorer": "depth_l2",
                   "per_orientation": 5, "resolution": 160},
        "refine": {"scene": _scene_block(), "predictor": "depth_icp",
                   "iters": 5, "magnitude": 1.0},
        "pipeline": {"scene": _scene_block(), "scenes": 20,
                     "scorer": "depth_l2", "predictor": "depth_icp",
                     "per_orientation": 5, "iters": 5, "resolution": 160},
        "basin": {"object": _object_block(), "distance": 0.9,
                  "magnitudes": [0.5, 1.0, 2.0, 4.0], "trials": 50,
                  "predictor": "depth_icp", "iters": 5},
        "selftest": {"trials": 200},
    }
    base.update(per_kind[kind])
    return base


# free-form subtrees: replaced wholesale, validated by their consumers
_OPEN_KEYS = {"params", "camera"}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        full = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key '{full}'")
        if (isinstance(defaults[key], dict) and key not in _OPEN_KEYS
                and isinstance(value, dict)):
            out[key] = _merge(defaults[key], value, f"{full}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if "," in text:
            return [_parse_value(part) for part in text.split(",")]
        return text


def _parse_overrides(tokens: list) -> dict:
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"expected a --key flag, got {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} is missing a value")
            raw = tokens[i + 1]
            i += 2
        node = out
        parts = key.replace("-", "_").split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"conflicting overrides at '{key}'")
        node[parts[-1]] = _parse_value(raw)
    return out


def resolve_config(kind: str, config_path, extra_tokens: list,
                   seed=None, threads=None) -> dict:
    cfg = _defaults(kind)
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        if data.get("tool") == "megarefine" and "config" in data:
            # a manifest from a previous run doubles as a config
            if data.get("kind") != kind:
                raise ConfigError(
                    f"manifest is for '{data.get('kind')}', not '{kind}'")
            data = data["config"]
        cfg = _merge(cfg, data)
    cfg = _merge(cfg, _parse_overrides(extra_tokens))
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        cfg["threads"] = int(threads)
    return cfg


# --- shared run helpers ---------------------------------------------------

def _write_manifest(out_dir: Path, kind: str, cfg: dict) -> Path:
    path = out_dir / "manifest.json"
    payload = {"tool": "megarefine", "version": __version__,
               "kind": kind, "config": cfg}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _write_jsonl(rows: list, path: Path) -> Path:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def _pose12(pose: Pose) -> list:
    return np.hstack([pose.rotation,
                      pose.translation[:, None]]).reshape(12).tolist()


def _build_object(block: dict):
    mesh = ObjectPlacement(kind=block["kind"],
                           params=block.get("params", {})).build_mesh()
    return mesh, default_anchor(mesh)


def _seeded_pose(anchor, distance: float, stream: RngStream) -> Pose:
    """Random orientation with the anchor on the optical axis at distance."""
    rot = uniform_rotation(stream.generator())
    t = np.array([0.0, 0.0, float(distance)]) - rot @ anchor_position(anchor)
    return Pose(rotation=rot, translation=t)


def _scene_from_config(block: dict, seed: int) -> SceneSpec:
    data = {k: v for k, v in block.items() if not (k == "camera" and v is None)}
    data["seed"] = int(seed)
    try:
        return scene_spec_from_dict(data)
    except ValueError as e:
        raise ConfigError(str(e))


def _detection_from_view(view) -> Detection2D:
    mask = view.depth > 0.0
    if not np.any(mask):
        raise RuntimeError("object renders empty; no detection to synthesize")
    vs, us = np.nonzero(mask)
    u0, v0, u1, v1 = int(us.min()), int(vs.min()), int(us.max()), int(vs.max())
    return Detection2D(center=(0.5 * (u0 + u1), 0.5 * (v0 + v1)),
                       size=(float(u1 - u0 + 1), float(v1 - v0 + 1)))


# --- runners --------------------------------------------------------------

def run_render(cfg: dict, out_dir: Path) -> list:
    mesh, anchor = _build_object(cfg["object"])
    pose = _seeded_pose(anchor, cfg["distance"], RngStream(cfg["seed"], 0))
    spec = ViewSetSpec(n_views=int(cfg["views"]),
                       resolution=int(cfg["resolution"]),
                       channels=tuple(cfg["channels"]))
    views = make_viewset(mesh, pose, anchor, spec=spec)
    rows = []
    for i, v in enumerate(views):
        a_px = project(v.camera, v.view_pose.transform(anchor_position(anchor)))
        rows.append({"view": i,
                     "anchor_u": float(a_px[0]), "anchor_v": float(a_px[1]),
                     "valid_px": int(np.count_nonzero(v.depth > 0.0)),
                     "max_depth": float(v.depth.max())})
    write_csv(rows, out_dir / "results.csv")
    written = [out_dir / "results.csv"]
    if cfg["dump_images"]:
        img_dir = out_dir / "images"
        img_dir.mkdir(exist_ok=True)
        for i, v in enumerate(views):
            if "rgb" in spec.channels:
                save_ppm(img_dir / f"view{i}_rgb.ppm", v.rgb)
            if "depth" in spec.channels:
                save_pfm(img_dir / f"view{i}_depth.pfm", v.depth)
            if "normals" in spec.channels:
                save_pfm(img_dir / f"view{i}_normals.pfm", v.normals)
        written.append(img_dir)
    return written


def run_hypotheses(cfg: dict, out_dir: Path) -> list:
    mesh, anchor = _build_object(cfg["object"])
    gt = _seeded_pose(anchor, cfg["distance"], RngStream(cfg["seed"], 0))
    mode = cfg["mode"]
    if mode == "training":
        hyps = training_hypotheses(gt, anchor, RngStream(cfg["seed"], 1))
    elif mode == "test":
        view = render(mesh, gt, DEFAULT_BASE_CAMERA, channels=("depth",))
        det = _detection_from_view(view)
        hyps = detection_hypotheses(det, DEFAULT_BASE_CAMERA, mesh, anchor,
                                    int(cfg["per_orientation"]),
                                    RngStream(cfg["seed"], 2))
    else:
        raise ConfigError(f"mode must be 'training' or 'test', got {mode!r}")
    lines = [{"index": i, "pose": _pose12(p),
              "label": None if hyps.labels is None else hyps.labels[i],
              "provenance": hyps.provenance}
             for i, p in enumerate(hyps.poses)]
    positives = (None if hyps.labels is None
                 else sum(1 for l in hyps.labels if l == "positive"))
    summary = [{"provenance": hyps.provenance, "count": len(hyps),
                "positives": positives}]
    write_csv(summary, out_dir / "results.csv")
    _write_jsonl(lines, out_dir / "results.jsonl")
    return [out_dir / "results.csv", out_dir / "results.jsonl"]


def run_coarse(cfg: dict, out_dir: Path) -> list:
    seed = int(cfg["seed"])
    sample = generate_scene(_scene_from_config(cfg["scene"], seed))
    target = sample.objects[0]
    hyps = detection_hypotheses(target.detection, sample.view.camera,
                                target.mesh, target.anchor,
                                int(cfg["per_orientation"]),
                                RngStream(seed, 2))
    scorer = make_scorer(cfg["scorer"], gt=target.gt_pose)
    scored = score_hypotheses(sample.view, target.mesh, target.anchor, hyps,
                              scorer, resolution=int(cfg["resolution"]),
                              n_threads=cfg["threads"])
    rows = [{"index": i, "score": float(s),
             "selected": int(i == scored.selected)}
            for i, s in enumerate(scored.scores)]
    lines = [{"index": i, "pose": _pose12(p), "score": float(s)}
             for i, (p, s) in enumerate(zip(hyps.poses, scored.scores))]
    write_csv(rows, out_dir / "results.csv")
    _write_jsonl(lines, out_dir / "results.jsonl")
    return [out_dir / "results.csv", out_dir / "results.jsonl"]


def run_refine(cfg: dict, out_dir: Path) -> list:
    seed = int(cfg["seed"])
    sample = generate_scene(_scene_from_config(cfg["scene"], seed))
    target = sample.objects[0]
    gt = target.gt_pose
    m = float(cfg["magnitude"])
    gen = RngStream(seed, 3).generator()
    init = sample_perturbation(gen, gt, t_std=(0.02 * m, 0.02 * m, 0.05 * m),
                               rot_std_deg=15.0 * m)
    if init.transform(anchor_position(target.anchor))[2] <= 0.0:
        init = sample_perturbation(gen, gt,
                                   t_std=(0.02 * m, 0.02 * m, 0.05 * m),
                                   rot_std_deg=15.0 * m)
    predictor = make_predictor(cfg["predictor"], gt=gt, rng=RngStream(seed, 4))
    trace = refine(sample.view, target.mesh, init, target.anchor, predictor,
                   iters=int(cfg["iters"]), gt=gt)
    points = reference_points(target.mesh)
    lines = [{"iteration": 0, "pose": _pose12(init),
              "distance_to_gt": pose_distance(points, init, gt),
              "flagged": False}]
    lines += [{"iteration": k + 1, "pose": _pose12(s.pose),
               "distance_to_gt": s.distance_to_gt, "flagged": s.flagged}
              for k, s in enumerate(trace.steps)]
    err = evaluate(trace.final_pose, gt, target.mesh, target.anchor)
    rows = [result_row(run_id="refine0000", object_name=target.name,
                       scorer="", predictor=cfg["predictor"],
                       magnitude=m, err=err)]
    write_csv(rows, out_dir / "results.csv")
    _write_jsonl(lines, out_dir / "results.jsonl")
    return [out_dir / "results.csv", out_dir / "results.jsonl"]


def run_pipeline(cfg: dict, out_dir: Path) -> list:
    seed = int(cfg["seed"])
    n_scenes = int(cfg["scenes"])
    if n_scenes < 1:
        raise ConfigError("scenes must be >= 1")
    scene_seeds = [int(RngStream(seed, 1).child(i).generator().integers(2 ** 31))
                   for i in range(n_scenes)]

    def one_scene(i: int):
        sample = generate_scene(_scene_from_config(cfg["scene"], scene_seeds[i]))
        target = sample.objects[0]
        gt = target.gt_pose
        scorer = make_scorer(cfg["scorer"], gt=gt)
        predictor = make_predictor(cfg["predictor"], gt=gt,
                                   rng=RngStream(seed, 3).child(i))
        result = coarse_then_refine(
            sample.view, target.mesh, target.anchor, target.detection,
            sample.view.camera, scorer, predictor,
            rng=RngStream(seed, 2).child(i),
            hypotheses_per_orientation=int(cfg["per_orientation"]),
            iters=int(cfg["iters"]), gt=gt,
            resolution=int(cfg["resolution"]), n_threads=1)
        err = evaluate(result.final_pose, gt, target.mesh, target.anchor)
        row = result_row(run_id=f"scene{i:04d}", object_name=target.name,
                         scorer=cfg["scorer"], predictor=cfg["predictor"],
                         magnitude=None, err=err)
        return row, result.selected_in_basin

    n_threads = _thread_count(cfg["threads"])
    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            outcomes = list(pool.map(one_scene, range(n_scenes)))
    else:
        outcomes = [one_scene(i) for i in range(n_scenes)]
    rows = [row for row, _ in outcomes]
    in_basin = [flag for _, flag in outcomes if flag is not None]
    summary = dict(aggregate(rows)[0])
    summary["scenes"] = n_scenes
    if in_basin:
        summary["selected_in_basin_rate"] = sum(in_basin) / len(in_basin)
    write_csv(rows, out_dir / "results.csv")
    write_json(summary, out_dir / "summary.json")
    return [out_dir / "results.csv", out_dir / "summary.json"]


def run_basin(cfg: dict, out_dir: Path) -> list:
    mesh, anchor = _build_object(cfg["object"])
    gt = _seeded_pose(anchor, cfg["distance"], RngStream(cfg["seed"], 0))
    magnitudes = cfg["magnitudes"]
    if not isinstance(magnitudes, (list, tuple)):
        magnitudes = [magnitudes]
    # a kind string is instantiated per trial inside the experiment, gt-wired
    rows = basin_experiment(mesh, gt, anchor, cfg["predictor"],
                            [float(m) for m in magnitudes],
                            int(cfg["trials"]), RngStream(cfg["seed"], 1),
                            iters=int(cfg["iters"]),
                            n_threads=cfg["threads"])
    write_csv(rows, out_dir / "results.csv")
    return [out_dir / "results.csv"]


def _selftest_checks(trials: int) -> list:
    cam = DEFAULT_BASE_CAMERA
    rows = []

    # 1) the rotation part of a target update never depends on the anchor
    gen = RngStream(9000, 0).generator()
    worst = 0.0
    for _ in range(trials):
        rot = uniform_rotation(gen)
        t = np.array([gen.uniform(-0.1, 0.1), gen.uniform(-0.1, 0.1),
                      gen.uniform(0.6, 1.4)])
        pose = Pose(rotation=rot, translation=t)
        target = Pose(rotation=uniform_rotation(gen),
                      translation=t + gen.normal(0.0, 0.03, size=3))
        a1 = gen.uniform(-0.08, 0.08, size=3)
        a2 = gen.uniform(-0.08, 0.08, size=3)
        if (pose.transform(a1)[2] <= 0.0 or pose.transform(a2)[2] <= 0.0
                or target.transform(a1)[2] <= 0.0
                or target.transform(a2)[2] <= 0.0):
            continue
        gap = anchor_dependency_gap(AnchoredPose(pose, a1, cam),
                                    AnchoredPose(pose, a2, cam), target)
        worst = max(worst, abs(gap.rot_gap_angle))
    rows.append({"check": "anchor_rotation_invariance", "value": float(worst),
                 "threshold": 1e-9, "passed": bool(worst <= 1e-9)})

    # 2) apply_update(target_update(.)) is the identity on reachable targets
    mesh, anchor = _build_object(_object_block())
    points = reference_points(mesh)
    a = anchor_position(anchor)
    worst = 0.0
    for _ in range(trials):
        pose = Pose(rotation=uniform_rotation(gen),
                    translation=np.array([0.0, 0.0, gen.uniform(0.6, 1.4)]))
        pose = Pose(rotation=pose.rotation,
                    translation=pose.translation - pose.rotation @ a)
        target = sample_perturbation(gen, pose)
        if target.transform(a)[2] <= 0.0:
            continue
        state = AnchoredPose(pose, a, cam)
        recovered = apply_update(state, target_update(state, target))
        worst = max(worst, pose_distance(points, recovered, target))
    rows.append({"check": "pose_update_round_trip", "value": float(worst),
                 "threshold": 1e-9, "passed": bool(worst <= 1e-9)})

    # 3) analytic loss gradient against central differences
    worst = 0.0
    for _ in range(20):
        pose = Pose(rotation=uniform_rotation(gen),
                    translation=np.array([0.02, -0.01, 1.0]) - uniform_rotation(gen) @ a)
        state = AnchoredPose(pose, a, cam)
        target = sample_perturbation(gen, pose)
        if target.transform(a)[2] <= 0.0:
            continue
        u_star = target_update(state, target)
        u = PoseUpdate(u_star.vx + 0.3, u_star.vy - 0.25, u_star.vz * 1.15,
                       uniform_rotation(gen)[:, 0], uniform_rotation(gen)[:, 1])
        analytic = loss_gradient(points, state, u, target)
        vec = u.as_vector()
        h = 1e-6
        for j in range(9):
            hi, lo = vec.copy(), vec.copy()
            hi[j] += h
            lo[j] -= h
            f_hi = disentangled_loss(points, state, PoseUpdate.from_vector(hi), target).total
            f_lo = disentangled_loss(points, state, PoseUpdate.from_vector(lo), target).total
            numeric = (f_hi - f_lo) / (2.0 * h)
            scale = max(abs(numeric), abs(analytic[j]), 1e-8)
            worst = max(worst, abs(numeric - analytic[j]) / scale)
    rows.append({"check": "loss_gradient_check", "value": float(worst),
                 "threshold": 1e-4, "passed": bool(worst <= 1e-4)})

    # 4) hypothesis counts
    gt = _seeded_pose(anchor, 0.9, RngStream(9000, 1))
    training = training_hypotheses(gt, anchor, RngStream(9000, 2))
    n_pos = sum(1 for l in training.labels if l == "positive")
    rows.append({"check": "training_hypothesis_count", "value": len(training),
                 "threshold": 104, "passed": len(training) == 104})
    rows.append({"check": "training_positive_count", "value": n_pos,
                 "threshold": 1, "passed": n_pos == 1})
    view = render(mesh, gt, cam, channels=("depth",))
    det = _detection_from_view(view)
    test_set = detection_hypotheses(det, cam, mesh, anchor, 5, RngStream(9000, 3))
    rows.append({"check": "test_hypothesis_count_p5", "value": len(test_set),
                 "threshold": 520, "passed": len(test_set) == 520})
    return rows


def run_selftest(cfg: dict, out_dir: Path) -> list:
    rows = _selftest_checks(int(cfg["trials"]))
    write_csv(rows, out_dir / "results.csv")
    failed = [r["check"] for r in rows if not r["passed"]]
    if failed:
        raise RuntimeError(f"selftest failed: {', '.join(failed)}")
    return [out_dir / "results.csv"]


_RUNNERS = {
    "render": run_render,
    "hypotheses": run_hypotheses,
    "coarse": run_coarse,
    "refine": run_refine,
    "pipeline": run_pipeline,
    "basin": run_basin,
    "selftest": run_selftest,
}


# --- entry point ----------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="megarefine",
        description="Reproducible pose-estimation experiments.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", help="JSON config or a previous manifest.json")
        p.add_argument("--out", help=f"output directory (default runs/{kind})")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
    args, extra = parser.parse_known_args(argv)

    try:
        cfg = resolve_config(args.kind, args.config, extra,
                             seed=args.seed, threads=args.threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    out_dir = Path(args.out) if args.out else Path("runs") / args.kind
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_manifest(out_dir, args.kind, cfg)
        written = _RUNNERS[args.kind](cfg, out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for path in [out_dir / "manifest.json"] + list(written):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
