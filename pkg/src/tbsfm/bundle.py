"""Two-body bundle adjustment with one shared foreground motion per take.

Levenberg-Marquardt over background camera poses, per-take foreground
motions and points; point blocks are eliminated with the Schur complement.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .geometry import CameraPose, Intrinsics, RigidMotion, rotvec_to_matrix, skew_batch
from .merging import foreground_pose
from .scene import Label, LabeledScene

log = logging.getLogger(__name__)


class UnderConstrainedError(ValueError):
    pass


@dataclass(frozen=True)
class BAOptions:
    max_iters: int = 100
    robust: bool = False
    huber_scale: float = 8.0  # 2 * tau for the default tau of 4 px
    rel_tol: float = 1e-9
    grad_tol: float = 1e-10
    cost_floor: float = 1e-20
    initial_damping: float = 1e-3
    max_damping: float = 1e12


@dataclass
class BAState:
    rotations: np.ndarray   # (n_img, 3, 3) background rotations
    centers: np.ndarray     # (n_img, 3)
    motion_rot: np.ndarray  # (n_mot, 3, 3)
    motion_t: np.ndarray    # (n_mot, 3)
    points: np.ndarray      # (n_pts, 3)

    def copy(self):
        return BAState(*(a.copy() for a in (self.rotations, self.centers, self.motion_rot,
                                           self.motion_t, self.points)))


@dataclass
class BAProblem:
    """Index tables for the labeled observations of a merged scene.

    Parameter layout: 6 per non-frozen image (rotation increment, centre),
    6 per motion (rotation increment, translation), then 3 per point.
    """

    images: List[int]
    intrinsics: List[Intrinsics]
    motion_takes: List[int]
    tracks: List[int]
    obs_image: np.ndarray
    obs_point: np.ndarray
    obs_motion: np.ndarray  # -1 for background or reference-take observations
    pixels: np.ndarray
    state: BAState
    free_cam: np.ndarray    # boolean mask over the 6 * (n_img + n_mot) pose parameters
    fx: np.ndarray = field(init=False)
    fy: np.ndarray = field(init=False)
    cx: np.ndarray = field(init=False)
    cy: np.ndarray = field(init=False)

    def __post_init__(self):
        K = np.array([k.as_array() for k in self.intrinsics]).reshape(-1, 4)
        self.fx, self.fy, self.cx, self.cy = (K[self.obs_image, i] for i in range(4))

    @property
    def n_obs(self):
        return len(self.obs_image)

    @property
    def n_pose_params(self):
        return int(self.free_cam.sum())

    @property
    def n_params(self):
        return self.n_pose_params + 3 * len(self.tracks)


def build_problem(scene: LabeledScene) -> BAProblem:
    """Collect free parameters and residuals; U observations are left out."""
    r = scene.reference
    images = sorted(j for j, obs in scene.observations.items()
                    if j in scene.cameras and any(scene.points[t][1] != Label.U for _, t in obs if t in scene.points))
    if len(images) < 2:
        raise UnderConstrainedError(f"bundle adjustment needs at least 2 cameras, got {len(images)}")
    img_index = {j: k for k, j in enumerate(images)}
    tracks = sorted(t for t, (_, lab) in scene.points.items() if lab != Label.U)
    pt_index = {t: k for k, t in enumerate(tracks)}
    rows = []
    for j in images:
        tk = scene.image_take[j]
        for px, tid in scene.observations[j]:
            if tid in pt_index:
                is_f = scene.points[tid][1] == Label.F
                rows.append((img_index[j], pt_index[tid], tk if is_f and tk != r else None, px[0], px[1]))
    used_pts = sorted({row[1] for row in rows})
    if len(used_pts) < 4:
        raise UnderConstrainedError(f"bundle adjustment needs at least 4 observed points, got {len(used_pts)}")
    # drop points without observations
    remap = {old: new for new, old in enumerate(used_pts)}
    tracks = [tracks[k] for k in used_pts]
    motion_takes = sorted({row[2] for row in rows if row[2] is not None})
    mot_index = {t: k for k, t in enumerate(motion_takes)}
    obs_image = np.array([row[0] for row in rows], dtype=np.int64)
    obs_point = np.array([remap[row[1]] for row in rows], dtype=np.int64)
    obs_motion = np.array([-1 if row[2] is None else mot_index[row[2]] for row in rows], dtype=np.int64)
    pixels = np.array([row[3:] for row in rows], dtype=float)

    bg = [scene.cameras[j][0] for j in images]
    state = BAState(np.array([p.rotation for p in bg]), np.array([p.center for p in bg]),
                    np.array([scene.motions[t].rotation for t in motion_takes]).reshape(-1, 3, 3),
                    np.array([scene.motions[t].translation for t in motion_takes]).reshape(-1, 3),
                    np.array([scene.points[t][0] for t in tracks]))

    # gauge: first reference-take camera fully fixed, plus one centre coordinate
    # of the camera farthest from it along its largest offset
    ref_imgs = [k for k, j in enumerate(images) if scene.image_take[j] == r] or [0]
    anchor = ref_imgs[0]
    free = np.ones(6 * (len(images) + len(motion_takes)), dtype=bool)
    free[6 * anchor:6 * anchor + 6] = False
    offsets = state.centers - state.centers[anchor]
    second = int(np.argmax(np.linalg.norm(offsets, axis=1)))
    axis = int(np.argmax(np.abs(offsets[second])))
    free[6 * second + 3 + axis] = False
    return BAProblem(images, [p.intrinsics for p in bg], motion_takes, tracks, obs_image, obs_point,
                     obs_motion, pixels, state, free)


def _moved_points(problem: BAProblem, state: BAState, sel):
    X = state.points[problem.obs_point[sel]]
    m = problem.obs_motion[sel]
    Y = X.copy()
    fg = m >= 0
    if fg.any():
        Y[fg] = np.einsum("nij,nj->ni", state.motion_rot[m[fg]], X[fg]) + state.motion_t[m[fg]]
    return X, Y, fg


def _camera_points(problem, state, sel):
    X, Y, fg = _moved_points(problem, state, sel)
    img = problem.obs_image[sel]
    R = state.rotations[img]
    P = np.einsum("nij,nj->ni", R, Y - state.centers[img])
    return X, P, R, fg


def residuals(problem: BAProblem, state: BAState, sel=slice(None)) -> np.ndarray:
    """Reprojection errors, shape ``(n, 2)``."""
    _, P, _, _ = _camera_points(problem, state, sel)
    u = problem.fx[sel] * P[:, 0] / P[:, 2] + problem.cx[sel]
    v = problem.fy[sel] * P[:, 1] / P[:, 2] + problem.cy[sel]
    return np.column_stack([u, v]) - problem.pixels[sel]


def _blocks(problem: BAProblem, state: BAState, sel=slice(None)):
    """Per-observation Jacobian blocks (pose 2x6, motion 2x6, point 2x3)."""
    X, P, R, fg = _camera_points(problem, state, sel)
    n = len(P)
    z = P[:, 2]
    Jpi = np.zeros((n, 2, 3))
    fx, fy = problem.fx[sel], problem.fy[sel]
    Jpi[:, 0, 0] = fx / z
    Jpi[:, 0, 2] = -fx * P[:, 0] / z ** 2
    Jpi[:, 1, 1] = fy / z
    Jpi[:, 1, 2] = -fy * P[:, 1] / z ** 2
    J_pose = np.concatenate([Jpi @ -skew_batch(P), Jpi @ -R], axis=2)
    JR = Jpi @ R
    J_point = JR.copy()
    J_motion = np.zeros((n, 2, 6))
    if fg.any():
        m = problem.obs_motion[sel][fg]
        A = state.motion_rot[m]
        J_point[fg] = JR[fg] @ A
        AX = np.einsum("nij,nj->ni", A, X[fg])
        J_motion[fg] = np.concatenate([JR[fg] @ -skew_batch(AX), JR[fg]], axis=2)
    return J_pose, J_motion, J_point


def jacobian(problem: BAProblem, state: BAState, sel=slice(None)) -> sp.csr_matrix:
    """Sparse Jacobian over the free parameters, rows in observation order."""
    J_pose, J_motion, J_point = _blocks(problem, state, sel)
    img = problem.obs_image[sel]
    mot = problem.obs_motion[sel]
    pts = problem.obs_point[sel]
    n = len(img)
    n_img = len(problem.images)
    col_map = np.full(problem.free_cam.size, -1, dtype=np.int64)
    col_map[problem.free_cam] = np.arange(problem.n_pose_params)
    rows2 = np.repeat(2 * np.arange(n), 2) + np.tile([0, 1], n)

    rows, cols, vals = [], [], []
    pose_cols = col_map[(6 * img)[:, None] + np.arange(6)]  # (n, 6)
    for k in range(6):
        rows.append(rows2)
        cols.append(np.repeat(pose_cols[:, k], 2))
        vals.append(J_pose[:, :, k].ravel())
    has_m = mot >= 0
    mot_cols = col_map[(6 * (n_img + np.where(has_m, mot, 0)))[:, None] + np.arange(6)]
    mot_cols[~has_m] = -1
    for k in range(6):
        rows.append(rows2)
        cols.append(np.repeat(mot_cols[:, k], 2))
        vals.append(J_motion[:, :, k].ravel())
    base = problem.n_pose_params
    for k in range(3):
        rows.append(rows2)
        cols.append(np.repeat(base + 3 * pts + k, 2))
        vals.append(J_point[:, :, k].ravel())
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    keep = cols >= 0
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(2 * n, problem.n_params))


def apply_update(problem: BAProblem, state: BAState, delta) -> BAState:
    """New state after a parameter increment (left rotation increments)."""
    out = state.copy()
    full = np.zeros(problem.free_cam.size)
    full[problem.free_cam] = delta[:problem.n_pose_params]
    n_img = len(problem.images)
    for k in range(n_img):
        d = full[6 * k:6 * k + 6]
        if d.any():
            out.rotations[k] = rotvec_to_matrix(d[:3]) @ state.rotations[k]
            out.centers[k] = state.centers[k] + d[3:]
    for k in range(len(problem.motion_takes)):
        d = full[6 * (n_img + k):6 * (n_img + k) + 6]
        if d.any():
            out.motion_rot[k] = rotvec_to_matrix(d[:3]) @ state.motion_rot[k]
            out.motion_t[k] = state.motion_t[k] + d[3:]
    out.points = state.points + delta[problem.n_pose_params:].reshape(-1, 3)
    return out


def _weights(norms, options: BAOptions):
    if not options.robust:
        return np.ones_like(norms)
    k = options.huber_scale
    return np.where(norms <= k, 1.0, k / np.maximum(norms, 1e-300))


def total_cost(problem: BAProblem, state: BAState, options: BAOptions = BAOptions()) -> float:
    e = np.linalg.norm(residuals(problem, state), axis=1)
    if not options.robust:
        return float(np.sum(e * e))
    k = options.huber_scale
    return float(np.sum(np.where(e <= k, e * e, 2.0 * k * e - k * k)))


def check_gradients(problem: BAProblem, h=1e-6, n_rows=100, rng=None) -> float:
    """Max relative difference between analytic and central-difference Jacobian rows."""
    rng = rng if rng is not None else np.random.default_rng(0)
    sel = np.sort(rng.choice(problem.n_obs, size=min(n_rows, problem.n_obs), replace=False))
    state = problem.state
    J = jacobian(problem, state, sel).toarray()
    cols = np.flatnonzero(np.any(J != 0, axis=0))
    fd = np.zeros_like(J)
    for c in cols:
        d = np.zeros(problem.n_params)
        d[c] = h
        rp = residuals(problem, apply_update(problem, state, d), sel).ravel()
        rm = residuals(problem, apply_update(problem, state, -d), sel).ravel()
        fd[:, c] = (rp - rm) / (2 * h)
    num = np.linalg.norm(J - fd, axis=1)
    den = np.maximum(np.linalg.norm(fd, axis=1), 1e-12)
    return float(np.max(num / den))


@dataclass
class BAReport:
    initial_cost: float
    final_cost: float
    iterations: int
    median_reproj_px: float
    termination: str
    cost_history: List[float] = field(default_factory=list)


def _solve_step(problem, J, r, damping):
    """Damped normal equations with the point blocks eliminated."""
    npp = problem.n_pose_params
    Jc, Jl = J[:, :npp], J[:, npp:]
    g_c = Jc.T @ r
    g_l = Jl.T @ r
    Hcc = (Jc.T @ Jc).toarray()
    Hcl = (Jc.T @ Jl).tocsr()
    n_pts = len(problem.tracks)
    # point blocks are 3x3 because each residual row touches a single point
    Hll_sp = (Jl.T @ Jl).tocsr()
    Hll = np.zeros((n_pts, 3, 3))
    for a in range(3):
        for b in range(3):
            Hll[:, a, b] = np.asarray(Hll_sp[a::3, b::3].diagonal()).ravel()
    Hcc[np.diag_indices(npp)] *= 1.0 + damping
    idx = np.arange(3)
    Hll[:, idx, idx] *= 1.0 + damping
    Hll_inv = np.linalg.inv(Hll)
    Binv = sp.bsr_matrix((Hll_inv, np.arange(n_pts), np.arange(n_pts + 1)), shape=(3 * n_pts, 3 * n_pts))
    HclB = (Hcl @ Binv).tocsr()
    S = Hcc - (HclB @ Hcl.T).toarray()
    rhs = -g_c + HclB @ g_l
    try:
        d_c = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S), rhs)
    except np.linalg.LinAlgError:
        d_c = np.linalg.lstsq(S, rhs, rcond=None)[0]
    d_l = Binv @ (-g_l - Hcl.T @ d_c)
    grad = np.concatenate([g_c, g_l])
    return np.concatenate([d_c, d_l]), grad


def solve(problem: BAProblem, options: BAOptions = BAOptions()) -> Tuple[BAState, BAReport]:
    """Levenberg-Marquardt; the accepted-iteration cost never increases."""
    state = problem.state
    cost = total_cost(problem, state, options)
    initial = cost
    history = [cost]
    damping = options.initial_damping
    reason = "max_iters"
    it = 0
    while it < options.max_iters:
        if cost <= options.cost_floor:
            reason = "cost_floor"
            break
        it += 1
        e = residuals(problem, state)
        w = np.sqrt(_weights(np.linalg.norm(e, axis=1), options))
        J = sp.diags(np.repeat(w, 2)) @ jacobian(problem, state)
        r = (e * w[:, None]).ravel()
        grad = J.T @ r
        if np.max(np.abs(grad)) < options.grad_tol:
            reason = "gradient"
            break
        while True:
            delta, _ = _solve_step(problem, J, r, damping)
            trial = apply_update(problem, state, delta)
            new_cost = total_cost(problem, trial, options)
            if np.isfinite(new_cost) and new_cost < cost:
                break
            damping *= 10.0
            if damping > options.max_damping:
                log.warning("damping exceeded %.0e, returning best state", options.max_damping)
                return state, _report(problem, state, initial, cost, it, "damping", history)
        decrease = (cost - new_cost) / cost
        state, cost = trial, new_cost
        history.append(cost)
        damping = max(damping / 10.0, 1e-15)
        if decrease < options.rel_tol:
            reason = "relative_decrease"
            break
    return state, _report(problem, state, initial, cost, it, reason, history)


def _report(problem, state, initial, final, iters, reason, history):
    e = np.linalg.norm(residuals(problem, state), axis=1)
    med = float(np.median(e)) if len(e) else 0.0
    log.info("bundle adjustment: cost %.6g -> %.6g in %d iterations (%s), median %.4f px",
             initial, final, iters, reason, med)
    return BAReport(initial, final, iters, med, reason, history)


def apply_state(scene: LabeledScene, problem: BAProblem, state: BAState) -> LabeledScene:
    """Scene with refined points, poses and motions; untouched entries are kept."""
    points = dict(scene.points)
    for k, tid in enumerate(problem.tracks):
        points[tid] = (state.points[k].copy(), scene.points[tid][1])
    motions = dict(scene.motions)
    for k, t in enumerate(problem.motion_takes):
        motions[t] = RigidMotion(state.motion_rot[k], state.motion_t[k])
    cameras = dict(scene.cameras)
    refined = {j: k for k, j in enumerate(problem.images)}
    for j, (bg, _) in scene.cameras.items():
        if j in refined:
            k = refined[j]
            bg = CameraPose.canonical(bg.intrinsics, state.rotations[k], state.centers[k])
        cameras[j] = (bg, foreground_pose(bg, motions[scene.image_take[j]]))
    return replace(scene, points=points, cameras=cameras, motions=motions)


def bundle_adjust(scene: LabeledScene, options: BAOptions = BAOptions()) -> Tuple[LabeledScene, BAReport]:
    problem = build_problem(scene)
    state, report = solve(problem, options)
    return apply_state(scene, problem, state), report
