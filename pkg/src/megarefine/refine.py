"""Iterative render-and-compare refinement with pluggable update predictors.

The loop is fixed: build the 4-view render of the current estimate, normalize
every depth map by the current anchor depth, hand the bundle to a predictor,
apply the returned update, repeat. Predictors are swappable:

  - ``oracle``: returns the exact update to the ground truth (one-step
    convergence; sanity ceiling).
  - ``noisy_oracle``: oracle plus bounded jitter on the update components,
    for basin-of-attraction studies.
  - ``depth_icp``: point-to-plane alignment of back-projected observed vs
    rendered depth. Never touches the ground truth.

Depth maps are normalized as clip(D, 0, z + 1) / z - 1 with z the anchor
depth, so a predictor sees inputs invariant to a global rescale of the scene
(background pixels pin to -1). Geometric predictors that need metric depth
reconstruct it as (N + 1) * z.
"""

from __future__ import annotations

import dataclasses
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import CameraModel, Pose, RngStream, _resolve_generator, compose, sample_perturbation
from .hypotheses import BasinThresholds, basin_label
from .loss import pose_distance
from .meshes import TriMesh, anchor_position, reference_points
from .pose_update import AnchoredPose, PoseUpdate, apply_update, target_update
from .rendering import (
    DEFAULT_BASE_CAMERA,
    NEAR_PLANE,
    RenderedView,
    ViewSetSpec,
    make_viewset,
    render,
)

__all__ = [
    "PredictorFailure",
    "PredictorInputs",
    "OraclePredictor",
    "NoisyOraclePredictor",
    "DepthIcpPredictor",
    "make_predictor",
    "RefineStep",
    "RefineTrace",
    "normalize_depth",
    "refine",
    "basin_experiment",
    "EARLY_STOP_DISTANCE",
]

# stop iterating once an update moves the reference cloud less than this
EARLY_STOP_DISTANCE = 1e-6

_PERTURB_T_STD = np.array([0.02, 0.02, 0.05])
_PERTURB_ROT_STD_DEG = 15.0


class PredictorFailure(RuntimeError):
    """A predictor could not produce an update; the iteration holds the pose."""


def normalize_depth(depth, anchor_depth_z) -> np.ndarray:
    """Dimensionless depth: clip to [0, z + 1], divide by z, subtract 1.

    Missing pixels (depth 0) map to -1; the output range is [-1, 1/z].
    The +1 clip headroom is metric, so the map is invariant to scaling both
    the depths and z only while no pixel is clipped.
    """
    z = float(anchor_depth_z)
    if z <= 0.0:
        raise ValueError(f"anchor depth must be > 0, got {z}")
    d = np.asarray(depth, dtype=np.float64)
    return np.clip(d, 0.0, z + 1.0) / z - 1.0


@dataclasses.dataclass(frozen=True)
class PredictorInputs:
    """Everything a predictor may look at for one iteration.

    Depth maps come normalized (see normalize_depth); anchor_depth is the
    normalizer, letting metric predictors undo it.
    """

    state: AnchoredPose
    observed: RenderedView
    views: tuple
    observed_depth_n: np.ndarray
    view_depths_n: tuple
    anchor_depth: float


@dataclasses.dataclass(frozen=True)
class OraclePredictor:
    """Exact one-step predictor: encodes the ground-truth pose as an update."""

    gt: Pose
    requires_depth = False

    def propose(self, inputs: PredictorInputs) -> PoseUpdate:
        return target_update(inputs.state, self.gt)


class NoisyOraclePredictor:
    """Oracle with bounded uniform jitter, for basin studies.

    vz is scaled by (1 + U(-vz_jitter, vz_jitter)); vx, vy are shifted by
    U(-pixel_jitter, pixel_jitter) pixels; the rotation is pre-composed with
    a random-axis rotation of angle U(0, rot_jitter_deg). Deterministic for
    a given stream.
    """

    requires_depth = False

    def __init__(self, gt: Pose, rng, vz_jitter: float = 0.05,
                 pixel_jitter: float = 0.0, rot_jitter_deg: float = 0.0):
        if vz_jitter < 0.0 or vz_jitter >= 1.0:
            raise ValueError(f"vz_jitter must be in [0, 1), got {vz_jitter}")
        self.gt = gt
        self.vz_jitter = float(vz_jitter)
        self.pixel_jitter = float(pixel_jitter)
        self.rot_jitter_deg = float(rot_jitter_deg)
        self._gen = _resolve_generator(rng)

    def propose(self, inputs: PredictorInputs) -> PoseUpdate:
        u = target_update(inputs.state, self.gt)
        gen = self._gen
        vz = u.vz * (1.0 + gen.uniform(-self.vz_jitter, self.vz_jitter))
        vx = u.vx + gen.uniform(-self.pixel_jitter, self.pixel_jitter)
        vy = u.vy + gen.uniform(-self.pixel_jitter, self.pixel_jitter)
        rot = u.rotation()
        if self.rot_jitter_deg > 0.0:
            axis = gen.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = np.radians(gen.uniform(0.0, self.rot_jitter_deg))
            rot = Rotation.from_rotvec(angle * axis).as_matrix() @ rot
        return PoseUpdate(vx, vy, vz, rot[:, 0], rot[:, 1])


def _back_project_depth(view: RenderedView, depth_n: np.ndarray, z: float):
    """Metric 3D points for every valid pixel, plus the valid mask."""
    valid = depth_n > -1.0 + 1e-6
    d = (depth_n + 1.0) * z
    cam = view.camera
    vv, uu = np.nonzero(valid)
    zz = d[vv, uu]
    x = (uu - cam.cx) / cam.fx * zz
    y = (vv - cam.cy) / cam.fy * zz
    return np.column_stack([x, y, zz]), valid, vv, uu


def _normals_from_depth(points: np.ndarray, valid: np.ndarray,
                        vv: np.ndarray, uu: np.ndarray, shape) -> np.ndarray:
    """Finite-difference surface normals when no normals channel exists."""
    grid = np.full(shape + (3,), np.nan)
    grid[vv, uu] = points
    du = grid[:, 2:] - grid[:, :-2]
    dv = grid[2:, :] - grid[:-2, :]
    n = np.full(shape + (3,), np.nan)
    n[1:-1, 1:-1] = np.cross(du[1:-1, :], dv[:, 1:-1])
    out = n[vv, uu]
    norms = np.linalg.norm(out, axis=1)
    good = np.isfinite(norms) & (norms > 1e-12)
    out[good] /= norms[good][:, None]
    out[~good] = 0.0
    return out


class DepthIcpPredictor:
    """Point-to-plane ICP between observed and rendered (view 1) depth.

    Back-projects both maps, matches rendered points to their nearest
    observed neighbors, gates matches at 3x the median distance, and solves
    the linearized point-to-plane system twice. The resulting rigid motion
    is re-encoded through the update parameterization so it flows down the
    same pathway as any other predictor. Ground truth is never consulted.
    """

    requires_depth = True
    gt = None

    def __init__(self, min_correspondences: int = 50, inner_iterations: int = 2):
        if min_correspondences < 6:
            raise ValueError("need at least 6 correspondences to solve")
        self.min_correspondences = int(min_correspondences)
        self.inner_iterations = int(inner_iterations)

    def propose(self, inputs: PredictorInputs) -> PoseUpdate:
        z = inputs.anchor_depth
        obs = inputs.observed
        obs_pts, valid, vv, uu = _back_project_depth(obs, inputs.observed_depth_n, z)
        if obs_pts.shape[0] < self.min_correspondences:
            raise PredictorFailure(
                f"observed depth has {obs_pts.shape[0]} valid pixels, "
                f"need {self.min_correspondences}")
        if obs.normals.size and np.any(obs.normals):
            obs_n = obs.normals[vv, uu].astype(np.float64)
        else:
            obs_n = _normals_from_depth(obs_pts, valid, vv, uu, valid.shape)
        usable = np.linalg.norm(obs_n, axis=1) > 0.5
        obs_pts, obs_n = obs_pts[usable], obs_n[usable]

        view1 = inputs.views[0]
        ren_pts, _, _, _ = _back_project_depth(view1, inputs.view_depths_n[0], z)
        if ren_pts.shape[0] < self.min_correspondences:
            raise PredictorFailure("rendered view has too few valid pixels")

        tree = cKDTree(obs_pts)
        delta = Pose.identity()
        for _ in range(self.inner_iterations):
            cur = ren_pts @ delta.rotation.T + delta.translation
            dist, idx = tree.query(cur)
            gate = dist <= 3.0 * np.median(dist)
            if int(gate.sum()) < self.min_correspondences:
                raise PredictorFailure(
                    f"{int(gate.sum())} gated correspondences, "
                    f"need {self.min_correspondences}")
            p = cur[gate]
            q = obs_pts[idx[gate]]
            n = obs_n[idx[gate]]
            a = np.hstack([np.cross(p, n), n])
            b = -((p - q) * n).sum(axis=1)
            x, *_ = np.linalg.lstsq(a, b, rcond=None)
            step = Pose(Rotation.from_rotvec(x[:3]).as_matrix(), x[3:])
            delta = compose(step, delta)
        aligned = compose(delta, inputs.state.pose)
        # a bad match set can throw the anchor out of the visible half-space;
        # that is a failure to flag, not a pose to encode
        if aligned.transform(inputs.state.anchor)[2] <= NEAR_PLANE:
            raise PredictorFailure("alignment pushed the anchor to the near plane")
        return target_update(inputs.state, aligned)


def make_predictor(kind: str, *, gt: Pose | None = None, rng=None, **params):
    """Build a predictor by name: oracle, noisy_oracle, or depth_icp."""
    if kind == "oracle":
        if gt is None:
            raise ValueError("oracle predictor requires the ground-truth pose")
        return OraclePredictor(gt)
    if kind == "noisy_oracle":
        if gt is None or rng is None:
            raise ValueError("noisy_oracle requires ground truth and a stream")
        return NoisyOraclePredictor(gt, rng, **params)
    if kind == "depth_icp":
        return DepthIcpPredictor(**params)
    raise ValueError(f"unknown predictor kind {kind!r}")


@dataclasses.dataclass(frozen=True)
class RefineStep:
    """One refiner iteration: the pose reached, how, and at what cost."""

    pose: Pose
    update: PoseUpdate | None
    distance_to_gt: float | None
    wall_time_s: float
    flagged: bool = False


@dataclasses.dataclass(frozen=True)
class RefineTrace:
    init_pose: Pose
    steps: tuple
    early_stopped: bool = False

    @property
    def final_pose(self) -> Pose:
        return self.steps[-1].pose if self.steps else self.init_pose

    def __len__(self) -> int:
        return len(self.steps)


def refine(observed: RenderedView, mesh: TriMesh, init: Pose, anchor,
           predictor, iters: int = 5, *, gt: Pose | None = None,
           spec: ViewSetSpec | None = None) -> RefineTrace:
    """Run the render-predict-update loop from init.

    Per iteration: render the 4-view set of the current estimate (cropped
    from the observed camera), normalize all depths by the current anchor
    depth, ask the predictor for an update, apply it. A PredictorFailure
    flags the step and holds the pose. Stops early once an update moves the
    reference cloud less than EARLY_STOP_DISTANCE.

    gt is only used to annotate the trace with distances; it defaults to the
    predictor's own ground truth when it has one.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if predictor.requires_depth and not np.any(observed.depth > 0.0):
        raise ValueError("predictor needs observed depth, but the map is empty")
    spec = spec if spec is not None else ViewSetSpec(channels=("depth", "normals"))
    if gt is None:
        gt = getattr(predictor, "gt", None)
    a_pos = anchor_position(anchor)
    probe = reference_points(mesh)

    current = init
    steps = []
    early = False
    for it in range(iters):
        t0 = time.perf_counter()
        flagged = False
        update = None
        new_pose = current
        try:
            views = make_viewset(mesh, current, anchor, spec=spec, base_cam=observed.camera)
            renderable = not views[0].is_empty
        except ValueError:
            # anchor behind the camera or similar; only legal mid-run, where
            # an earlier flagged update left the pose in a bad spot
            if it == 0:
                raise
            renderable = False
        if it == 0 and not renderable:
            raise ValueError("initial pose renders empty")
        if not renderable:
            flagged = True
        else:
            state = AnchoredPose(current, a_pos, views[0].camera)
            z = float(state.anchor_in_camera()[2])
            inputs = PredictorInputs(
                state=state,
                observed=observed,
                views=tuple(views),
                observed_depth_n=normalize_depth(observed.depth, z),
                view_depths_n=tuple(normalize_depth(v.depth, z) for v in views),
                anchor_depth=z,
            )
            try:
                update = predictor.propose(inputs)
                candidate = apply_update(state, update)
                if candidate.transform(a_pos)[2] <= NEAR_PLANE:
                    raise PredictorFailure("update pushes the anchor to the near plane")
                new_pose = candidate
            except PredictorFailure:
                flagged = True
                update = None
        moved = 0.0 if flagged else pose_distance(probe, current, new_pose)
        dist = None if gt is None else pose_distance(probe, new_pose, gt)
        steps.append(RefineStep(new_pose, update, dist, time.perf_counter() - t0, flagged))
        current = new_pose
        if not flagged and moved < EARLY_STOP_DISTANCE:
            early = True
            break
    return RefineTrace(init, tuple(steps), early)


def _thread_count(n_threads=None) -> int:
    if n_threads is not None:
        return max(1, int(n_threads))
    return max(1, int(os.environ.get("MEGAREFINE_THREADS", "1")))


def basin_experiment(mesh: TriMesh, gt: Pose, anchor, predictor, magnitudes,
                     trials_per_magnitude: int, rng: RngStream, *,
                     iters: int = 5, thresholds: BasinThresholds = BasinThresholds(),
                     base_cam: CameraModel = DEFAULT_BASE_CAMERA,
                     n_threads=None) -> list:
    """Convergence rate vs initial-perturbation magnitude.

    For each magnitude m, draws trials_per_magnitude perturbed starts at m
    times the training noise scale (2/2/5 cm translation, 15 deg rotation),
    refines each, and labels the final pose against the basin thresholds.
    predictor is a kind string (fresh instance per trial, substream-seeded)
    or a ready instance shared across trials. Trials run on a thread pool
    (size from n_threads, else MEGAREFINE_THREADS, else 1); results are
    collected in submission order, so the output is thread-count invariant.
    """
    if trials_per_magnitude < 1:
        raise ValueError(f"trials_per_magnitude must be >= 1, got {trials_per_magnitude}")
    mags = [float(m) for m in magnitudes]
    if not mags or any(m < 0 for m in mags):
        raise ValueError("magnitudes must be a nonempty list of floats >= 0")
    observed = render(mesh, gt, base_cam, channels=("depth", "normals"))
    if observed.is_empty:
        raise ValueError("ground-truth pose renders empty")

    def run_trial(mi: int, ti: int) -> bool:
        stream = rng.child(mi * trials_per_magnitude + ti)
        gen = stream.generator()
        m = mags[mi]
        init = sample_perturbation(gen, gt, t_std=m * _PERTURB_T_STD,
                                   rot_std_deg=m * _PERTURB_ROT_STD_DEG)
        if init.transform(anchor_position(anchor))[2] <= 0.0:
            init = sample_perturbation(gen, gt, t_std=m * _PERTURB_T_STD,
                                       rot_std_deg=m * _PERTURB_ROT_STD_DEG)
        if isinstance(predictor, str):
            pred = make_predictor(predictor, gt=gt, rng=stream.child(10**6))
        else:
            pred = predictor
        try:
            trace = refine(observed, mesh, init, anchor, pred, iters, gt=gt)
        except ValueError:
            # a start so far off it cannot even render is outside the basin
            return False
        return basin_label(trace.final_pose, gt, anchor, thresholds) == "positive"

    jobs = [(mi, ti) for mi in range(len(mags)) for ti in range(trials_per_magnitude)]
    workers = _thread_count(n_threads)
    if workers == 1:
        outcomes = [run_trial(mi, ti) for mi, ti in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda j: run_trial(*j), jobs))

    rows = []
    for mi, m in enumerate(mags):
        chunk = outcomes[mi * trials_per_magnitude:(mi + 1) * trials_per_magnitude]
        converged = int(sum(chunk))
        rows.append({
            "magnitude": m,
            "trials": trials_per_magnitude,
            "converged": converged,
            "rate": converged / trials_per_magnitude,
        })
    return rows
