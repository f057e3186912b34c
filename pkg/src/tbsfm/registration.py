"""Sequential RANSAC registration of every image against every other take."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import _kernels
from .geometry import CameraPose, Intrinsics, project_many, projection_jacobian, rotvec_to_matrix, skew_batch
from .scene import MultiTakeScene, correspondences

log = logging.getLogger(__name__)

CHUNK = 256
REFINE_ITERS = 10
REFINE_ROUNDS = 3
# 3 robust sigmas, with sigma estimated as 1.4826 * median residual
ADAPTIVE_SCALE = 3.0 * 1.4826
ADAPTIVE_FLOOR = 1e-6


@dataclass(frozen=True)
class RansacParams:
    tau: float = 4.0
    max_iters: int = 10000
    confidence: float = 0.999
    min_inliers: int = 15
    max_models: int = 4

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_models < 2:
            raise ValueError("max_models must be >= 2")
        if self.max_iters < 1 or self.min_inliers < 4:
            raise ValueError("max_iters must be >= 1 and min_inliers >= 4")


@dataclass(frozen=True)
class RegisteredPose:
    """Pose of image ``image`` in the frame of take ``take``.

    ``inliers`` holds sorted ``(point_id, observation_index)`` pairs.
    """

    image: int
    take: int
    pose: CameraPose
    inliers: Tuple[Tuple[int, int], ...]

    @property
    def n_inliers(self):
        return len(self.inliers)

    @property
    def point_ids(self):
        return frozenset(p for p, _ in self.inliers)


def rng_stream(seed, image, take):
    """Independent RNG for one (image, take) cell, stable under parallelism."""
    return np.random.default_rng([int(v) % 2**63 for v in (seed, image, take)])


def _bearings(pixels, intr: Intrinsics):
    n = intr.normalize(pixels)
    b = np.column_stack([n, np.ones(len(n))])
    return np.ascontiguousarray(b / np.linalg.norm(b, axis=1, keepdims=True))


def p3p_minimal(pixels, points, intr: Intrinsics) -> List[CameraPose]:
    """All poses consistent with exactly three 2D-3D matches (empty if degenerate)."""
    pixels = np.asarray(pixels, dtype=float)
    points = np.asarray(points, dtype=float)
    if len(pixels) != 3 or len(points) != 3:
        raise ValueError("p3p needs exactly three correspondences")
    return [CameraPose(intr, R, c) for R, c in _kernels.p3p(_bearings(pixels, intr), points)]


def _errors(pose: CameraPose, points, pixels):
    uv, z = project_many(pose, points)
    with np.errstate(invalid="ignore"):
        err = np.sqrt(np.sum((uv - pixels) ** 2, axis=1))
    err[~(z > 1e-12)] = np.inf
    return err


def inlier_mask(pose: CameraPose, points, pixels, tau):
    return _errors(pose, points, pixels) < tau


def adaptive_threshold(errors, tau):
    """Inlier threshold matched to the residual noise level, never above ``tau``.

    Points of another object can land within ``tau`` by coincidence; on
    low-noise data this tighter bound keeps them out of the inlier set.
    """
    inside = errors[errors < tau]
    if inside.size == 0:
        return float(tau)
    return float(min(tau, max(ADAPTIVE_SCALE * np.median(inside), ADAPTIVE_FLOOR)))


def refine_pose(pose: CameraPose, points, pixels, iters=REFINE_ITERS) -> CameraPose:
    """Gauss-Newton on squared reprojection error, left rotation increment."""
    R, c = pose.rotation.copy(), pose.center.copy()
    intr = pose.intrinsics
    for _ in range(iters):
        P = (points - c) @ R.T
        if np.any(P[:, 2] <= 1e-12):
            break
        uv = np.column_stack([intr.fx * P[:, 0] / P[:, 2] + intr.cx, intr.fy * P[:, 1] / P[:, 2] + intr.cy])
        r = (uv - pixels).ravel()
        Jp = projection_jacobian(P, intr)
        J = np.concatenate([Jp @ -skew_batch(P), Jp @ -R], axis=2).reshape(-1, 6)
        # einsum keeps the reduction order fixed regardless of BLAS threading
        try:
            delta = np.linalg.solve(np.einsum("ki,kj->ij", J, J), -np.einsum("ki,k->i", J, r))
        except np.linalg.LinAlgError:
            break
        R = rotvec_to_matrix(delta[:3]) @ R
        c = c + delta[3:]
        if np.linalg.norm(delta) < 1e-14:
            break
    return CameraPose(intr, R, c)


def _ransac(bearings, pixels, points, intr: Intrinsics, params: RansacParams, rng):
    n = len(points)
    best_R, best_c = np.zeros(9), np.zeros(3)
    best_count, iters = 0, 0
    log_eta = math.log(1.0 - params.confidence)
    bound = _kernels.iterations_needed(params.min_inliers, n, log_eta, params.max_iters)
    intr_a = intr.as_array()
    while iters < bound:
        raw = rng.integers(0, n, size=(CHUNK, 4))
        s = np.sort(raw, axis=1)
        distinct = np.all(s[:, 1:] != s[:, :-1], axis=1)
        samples = np.ascontiguousarray(raw[distinct], dtype=np.int64)
        best_count, iters, bound = _kernels.ransac_chunk(
            samples, bearings, pixels, points, intr_a, float(params.tau), best_count, best_R, best_c,
            iters, bound, params.max_iters, log_eta, params.min_inliers)
    if best_count == 0:
        return None
    return CameraPose(intr, best_R.reshape(3, 3), best_c.copy())


def pnp_ransac(pixels, points, intr: Intrinsics, params: RansacParams, rng):
    """Best pose over RANSAC hypotheses, refined on its inliers.

    Returns ``(pose, inlier_mask)`` or ``None`` when no hypothesis reaches
    ``params.min_inliers``.
    """
    pixels = np.ascontiguousarray(pixels, dtype=float).reshape(-1, 2)
    points = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
    if len(pixels) != len(points):
        raise ValueError("pixels and points differ in length")
    if len(points) < 4:
        raise ValueError(f"{len(points)} correspondences is below the minimum of 4")
    pose = _ransac(_bearings(pixels, intr), pixels, points, intr, params, rng)
    if pose is None:
        return None
    mask = inlier_mask(pose, points, pixels, params.tau)
    if mask.sum() < params.min_inliers:
        return None
    for _ in range(REFINE_ROUNDS):
        refined = refine_pose(pose, points[mask], pixels[mask])
        err = _errors(refined, points, pixels)
        rmask = err < adaptive_threshold(err, params.tau)
        if rmask.sum() < params.min_inliers:
            break
        stable = np.array_equal(rmask, mask)
        pose, mask = refined, rmask
        if stable:
            break
    return CameraPose.canonical(intr, pose.rotation, pose.center), mask


def sequential_register(scene: MultiTakeScene, image_id, take, params: RansacParams, seed=0):
    """Greedy sequence of poses of one image toward one take, inliers removed each round."""
    corrs = correspondences(scene, image_id, take)
    if not corrs:
        return []
    intr = scene.pose(image_id).intrinsics
    pixels = np.array([c[0] for c in corrs], dtype=float)
    pids = np.array([c[1] for c in corrs], dtype=np.int64)
    qidx = np.array([c[2] for c in corrs], dtype=np.int64)
    points = scene.take(take).coords(pids)
    rng = rng_stream(seed, image_id, take)
    remaining = np.arange(len(corrs))
    poses = []
    while len(poses) < params.max_models and len(remaining) >= max(4, params.min_inliers):
        found = pnp_ransac(pixels[remaining], points[remaining], intr, params, rng)
        if found is None:
            break
        pose, mask = found
        used = remaining[mask]
        inl = tuple(sorted(zip(pids[used].tolist(), qidx[used].tolist())))
        poses.append(RegisteredPose(image_id, take, pose, inl))
        remaining = remaining[~mask]
    return poses


def register_all(scene: MultiTakeScene, params: Optional[RansacParams] = None, seed=0, threads=1
                 ) -> Dict[Tuple[int, int], List[RegisteredPose]]:
    """Pose sets for every image toward every take other than its own."""
    params = params or RansacParams()
    cells = [(j, t) for j in scene.image_ids for t in scene.take_ids if t != scene.image_take[j]]

    def run(cell):
        return sequential_register(scene, cell[0], cell[1], params, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    out = dict(zip(cells, results))
    n_ok = sum(1 for v in out.values() if v)
    log.info("registered %d of %d (image, take) cells using %s kernels", n_ok, len(cells), _kernels.BACKEND)
    return {k: out[k] for k in sorted(out)}
