"""Synthetic two-body scenes standing in for per-take reconstructions.

The background is a textured plane with low bumps; the foreground is a sphere
floating above it that moves rigidly between takes.  Every take is stored in
its own randomly scrambled similarity frame, like an independent SfM run.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Tuple

import numpy as np

from .geometry import (CameraPose, Intrinsics, RigidMotion, SimilarityTransform, project_many,
                       random_rotation, rotvec_to_matrix, transport_pose)
from .scene import GroundTruth, Label, MultiTakeScene, Observation, TakeModel

log = logging.getLogger(__name__)

OBJECT_CENTER = np.array([0.0, 0.0, 2.2])
OBJECT_RADIUS = 1.0
PLANE_HALF_SIZE = 5.0


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    num_takes: int = 4
    num_background: int = 500
    num_foreground: int = 200
    cameras_per_take: int = 10
    pixel_noise: float = 0.0
    outlier_fraction: float = 0.0
    visibility: float = 0.8
    motion_rotation: float = 0.6
    motion_translation: float = 1.5
    scramble: bool = True
    image_size: Tuple[int, int] = (1024, 768)
    focal_length: float = 800.0
    camera_distance: float = 12.0
    hide_foreground: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.num_takes < 2:
            raise ValueError("num_takes must be >= 2")
        if self.cameras_per_take < 2:
            raise ValueError("cameras_per_take must be >= 2")
        if self.pixel_noise < 0:
            raise ValueError("pixel_noise must be >= 0")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if not 0 < self.visibility <= 1:
            raise ValueError("visibility must lie in (0, 1]")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "hide_foreground", tuple(int(v) for v in self.hide_foreground))

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            data = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


def _background_points(rng, n):
    xy = rng.uniform(-PLANE_HALF_SIZE, PLANE_HALF_SIZE, size=(n, 2))
    z = 0.15 * np.sin(1.3 * xy[:, 0]) * np.cos(1.1 * xy[:, 1]) + rng.normal(0.0, 0.02, n)
    return np.column_stack([xy, z])


def _foreground_points(rng, n):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # mild anisotropy so the object has no rotational symmetry
    return OBJECT_CENTER + OBJECT_RADIUS * d * np.array([1.0, 0.8, 0.7])


def _sample_motion(rng, cfg: SimConfig):
    if cfg.motion_rotation == 0 and cfg.motion_translation == 0:
        return RigidMotion.identity()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = cfg.motion_rotation * rng.uniform(0.5, 1.0)
    A = rotvec_to_matrix(axis * angle)
    phi = rng.uniform(0, 2 * np.pi)
    d = cfg.motion_translation * rng.uniform(0.5, 1.0) * np.array([np.cos(phi), np.sin(phi), 0.0])
    return RigidMotion(A, OBJECT_CENTER - A @ OBJECT_CENTER + d)


def _look_at(center, target):
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def _sample_cameras(rng, cfg: SimConfig, take_index):
    offset = take_index * 2 * np.pi / (cfg.num_takes * cfg.cameras_per_take)
    poses = []
    w, h = cfg.image_size
    intr = Intrinsics(cfg.focal_length, cfg.focal_length, w / 2.0, h / 2.0)
    for i in range(cfg.cameras_per_take):
        az = offset + 2 * np.pi * (i + rng.uniform(-0.25, 0.25)) / cfg.cameras_per_take
        elev = rng.uniform(0.45, 0.75)
        dist = cfg.camera_distance * rng.uniform(0.95, 1.1)
        c = dist * np.array([np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)])
        target = np.array([0.0, 0.0, 1.0]) + rng.normal(0.0, 0.3, 3)
        poses.append(CameraPose(intr, _look_at(c, target), c))
    return poses


def _random_scramble(rng):
    return SimilarityTransform(random_rotation(rng), rng.normal(0.0, 3.0, 3), rng.uniform(0.5, 2.0))


def generate(config: SimConfig):
    """Sample a scene and its ground truth; returns ``(MultiTakeScene, GroundTruth)``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    nB, nF = cfg.num_background, cfg.num_foreground
    X0 = np.vstack([_background_points(rng, nB), _foreground_points(rng, nF)])
    labels = np.array([Label.B] * nB + [Label.F] * nF, dtype=object)
    is_fg = np.arange(nB + nF) >= nB

    take_ids = list(range(1, cfg.num_takes + 1))
    gt = GroundTruth(world_points=X0, world_labels=labels)
    w, h = cfg.image_size

    # per take: world points in that configuration, cameras, visibility
    configs, world_cams, visible = {}, {}, {}
    image_id = 1
    for ti, t in enumerate(take_ids):
        motion = RigidMotion.identity() if ti == 0 else _sample_motion(rng, cfg)
        gt.motions[t] = motion
        Xt = X0.copy()
        Xt[is_fg] = motion.apply(X0[is_fg])
        configs[t] = Xt
        cams = {}
        for pose in _sample_cameras(rng, cfg, ti):
            uv, z = project_many(pose, Xt)
            inside = (z > 0.1) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
            vis = inside & (rng.random(len(Xt)) < cfg.visibility)
            if t in cfg.hide_foreground:
                vis &= ~is_fg
            cams[image_id] = (pose, uv, vis)
            image_id += 1
        world_cams[t] = cams
        visible[t] = np.sum([v for _, _, v in cams.values()], axis=0)

    # per-take models hold points seen at least twice within the take
    point_ids = {}
    for t in take_ids:
        idx = np.flatnonzero(visible[t] >= 2)
        ids = rng.permutation(len(idx)) + 1
        point_ids[t] = dict(zip(idx.tolist(), ids.tolist()))

    # observations with links to every take whose model holds the point
    obs_raw = {}
    for t in take_ids:
        for j, (pose, uv, vis) in world_cams[t].items():
            pts = np.flatnonzero(vis)
            pts = pts[rng.permutation(len(pts))]
            noise = rng.normal(0.0, cfg.pixel_noise, size=(len(pts), 2)) if cfg.pixel_noise > 0 else np.zeros((len(pts), 2))
            rows = []
            for i, e in zip(pts.tolist(), noise):
                links = [(u, point_ids[u][i]) for u in take_ids if i in point_ids[u]]
                rows.append([uv[i] + e, links, i])
            obs_raw[j] = rows

    # outliers: rewire a fraction of the cross-take links
    cross = [(j, q, li) for t in take_ids for j in world_cams[t]
             for q, (_, links, _) in enumerate(obs_raw[j])
             for li, (u, _) in enumerate(links) if u != t]
    n_out = int(round(cfg.outlier_fraction * len(cross)))
    if n_out:
        for k in rng.choice(len(cross), size=n_out, replace=False):
            j, q, li = cross[k]
            u, p = obs_raw[j][q][1][li]
            pool = len(point_ids[u])
            if pool < 2:
                continue
            wrong = int(rng.integers(1, pool))
            obs_raw[j][q][1][li] = (u, wrong if wrong != p else pool)

    counts = {}
    for t in take_ids:
        for j in world_cams[t]:
            for _, links, _ in obs_raw[j]:
                for u, _ in links:
                    if u != t:
                        counts[(t, u)] = counts.get((t, u), 0) + 1
    for s in take_ids:
        for u in take_ids:
            if s != u and counts.get((s, u), 0) < 4:
                msg = f"takes {s}->{u} share only {counts.get((s, u), 0)} correspondences"
                gt.warnings.append(msg)
                log.warning(msg)

    takes = []
    for t in take_ids:
        S = _random_scramble(rng) if cfg.scramble else SimilarityTransform.identity()
        gt.scrambles[t] = S
        inv = {pid: i for i, pid in point_ids[t].items()}
        pts_t = S.apply(configs[t][list(inv.values())]) if inv else np.zeros((0, 3))
        points = {pid: pts_t[k] for k, pid in enumerate(inv)}
        cameras, observations = {}, {}
        for j, (pose, _, _) in world_cams[t].items():
            gt.camera_poses[j] = pose
            moved = transport_pose(pose, S)
            cameras[j] = CameraPose.canonical(moved.intrinsics, moved.rotation, moved.center)
            observations[j] = [Observation(px, links) for px, links, _ in obs_raw[j]]
        for pid, i in inv.items():
            gt.labels[(t, pid)] = labels[i]
            gt.point_identity[(t, pid)] = i
        takes.append(TakeModel(t, points, cameras, observations, {j: 1 for j in cameras}))
    return MultiTakeScene(tuple(takes)), gt


def write(config: SimConfig, out):
    """Generate a scene and write it, with ground truth, to ``out``."""
    from .scene import save_scene
    scene, gt = generate(config)
    out = Path(out)
    save_scene(scene, out, gt)
    config.to_json(out / "config.json")
    return scene, gt
