"""Bring every take into the reference frame and split cameras into two poses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import (CameraPose, RigidMotion, SimilarityTransform, chain_motion, chain_similarity,
                       chordal_mean, conjugate_motion, invert_motion,
                       rotation_geodesic_distance, transport_pose)
from .grouping import foreground_motion_from_pair
from .scene import Label, LabeledScene, MultiTakeScene
from .tracks import Track, track_index

log = logging.getLogger(__name__)

CROSS_CHECK_ROTATION = 1e-3
TRIM_FACTOR = 5.0


class DegenerateConfigurationError(ValueError):
    pass


class UnresolvableCameraError(KeyError):
    pass


def _check_points(src, dst):
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("source and target differ in length")
    if len(src) < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {len(src)}")
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfigurationError("correspondences are collinear")
    return src, dst


def _align(src, dst, with_scale):
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    S, D = src - mu_s, dst - mu_d
    U, sig, Vt = np.linalg.svd(D.T @ S / len(src))
    E = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    B = U @ E @ Vt
    beta = float(np.trace(np.diag(sig) @ E) / (np.sum(S * S) / len(src))) if with_scale else 1.0
    return B, mu_d - beta * B @ mu_s, beta


def similarity_from_points(src, dst) -> SimilarityTransform:
    """Least-squares ``dst ~ scale * B src + b`` (centroids, SVD, reflection fix)."""
    src, dst = _check_points(src, dst)
    B, b, beta = _align(src, dst, with_scale=True)
    return SimilarityTransform(B, b, beta)


def rigid_from_points(src, dst) -> RigidMotion:
    src, dst = _check_points(src, dst)
    A, a, _ = _align(src, dst, with_scale=False)
    return RigidMotion(A, a)


def _trimmed(fit, src, dst, scale):
    """Fit, drop gross residuals once, refit."""
    first = fit(src, dst)
    res = np.linalg.norm(first.apply(src) - dst, axis=1)
    keep = res <= TRIM_FACTOR * np.median(res) + 1e-9 * scale
    if keep.all() or keep.sum() < 3:
        return first
    try:
        return fit(src[keep], dst[keep])
    except DegenerateConfigurationError:
        return first


def similarity_from_camera_pair(native: Sequence[CameraPose], registered: Sequence[CameraPose]
                                ) -> Tuple[SimilarityTransform, bool]:
    """Similarity from frame s to frame t given poses of the same cameras in both.

    Returns ``(transform, determined)``; with a single pair only the rotation
    is determined and the translation/scale are left at identity.
    """
    if len(native) != len(registered) or not native:
        raise ValueError("need matching, non-empty pose lists")
    B = chordal_mean([r.rotation.T @ n.rotation for n, r in zip(native, registered)])
    if len(native) < 2:
        return SimilarityTransform(B, np.zeros(3), 1.0), False
    # c_t = b + beta * B c_s, stacked over pairs
    M = np.zeros((3 * len(native), 4))
    rhs = np.zeros(3 * len(native))
    for k, (n, r) in enumerate(zip(native, registered)):
        M[3 * k:3 * k + 3, :3] = np.eye(3)
        M[3 * k:3 * k + 3, 3] = B @ n.center
        rhs[3 * k:3 * k + 3] = r.center
    sol, _, rank, _ = np.linalg.lstsq(M, rhs, rcond=None)
    if rank < 4 or not sol[3] > 0:
        return SimilarityTransform(B, np.zeros(3), 1.0), False
    return SimilarityTransform(B, sol[:3], sol[3]), True


def transform_model(points: Mapping[int, np.ndarray], s: SimilarityTransform) -> Dict[int, np.ndarray]:
    ids = sorted(points)
    if not ids:
        return {}
    moved = s.apply(np.array([points[p] for p in ids]))
    return {p: moved[k] for k, p in enumerate(ids)}


def foreground_pose(background: CameraPose, motion: RigidMotion) -> CameraPose:
    """Pose that sees rest-configuration foreground points as ``background`` sees them moved."""
    A, a = motion.rotation, motion.translation
    return CameraPose(background.intrinsics, background.rotation @ A, A.T @ (background.center - a))


def background_pose(foreground: CameraPose, motion: RigidMotion) -> CameraPose:
    """Inverse of :func:`foreground_pose`."""
    A, a = motion.rotation, motion.translation
    return CameraPose(foreground.intrinsics, foreground.rotation @ A.T, A @ foreground.center + a)


def transform_camera(pose: CameraPose, take, frame, obj, reference, similarities, motions
                     ) -> Tuple[CameraPose, CameraPose]:
    """Background and foreground poses in the reference frame.

    ``pose`` belongs to a camera of ``take`` and is expressed in the frame of
    take ``frame``, registered to object ``obj`` ("A" both, "B" or "F").
    ``similarities[u]`` maps frame u to the reference frame and ``motions[u]``
    moves the foreground from the reference configuration to take u's.
    """
    try:
        moved = pose if frame == reference else transport_pose(pose, similarities[frame])
        if obj in ("A", "B"):
            bg = moved
            return bg, foreground_pose(bg, motions[take])
        if obj == "F":
            fg = foreground_pose(moved, motions[frame])
            return background_pose(fg, motions[take]), fg
    except KeyError as exc:
        raise UnresolvableCameraError(f"camera of take {take}: missing transform for take {exc.args[0]}") from None
    raise ValueError(f"unknown object {obj!r}")


@dataclass
class MergePlan:
    reference: int
    similarities: Dict[int, SimilarityTransform] = field(default_factory=dict)
    motions: Dict[int, RigidMotion] = field(default_factory=dict)
    sources: Dict[int, str] = field(default_factory=dict)
    excluded: List[int] = field(default_factory=list)


def _pose_object(pose, take, labels, index):
    """Label of the object a registered pose is locked onto (majority of its inliers)."""
    counts = {Label.B: 0, Label.F: 0, Label.U: 0}
    for p, _ in pose.inliers:
        tid = index.get((take, p))
        if tid is not None:
            counts[labels.get(tid, Label.U)] += 1
    if counts[Label.B] == counts[Label.F]:
        return None
    return Label.B if counts[Label.B] > counts[Label.F] else Label.F


def _camera_route(scene, t, u, registrations, labels, index):
    """Similarity t -> u and motion u -> t (frame u) from registered poses."""
    native, registered, motions = [], [], []
    for j in scene.take(t).cameras:
        poses = registrations.get((j, u), [])
        by_obj = {}
        for p in poses:
            obj = _pose_object(p, u, labels, index)
            if obj is not None and obj not in by_obj:
                by_obj[obj] = p.pose
        if Label.B in by_obj:
            native.append(scene.pose(j))
            registered.append(by_obj[Label.B])
            if Label.F in by_obj:
                motions.append(foreground_motion_from_pair(by_obj[Label.B], by_obj[Label.F]))
    sim = None
    if native:
        s, determined = similarity_from_camera_pair(native, registered)
        sim = s if determined else None
    motion = None
    if motions:
        motion = RigidMotion(chordal_mean([m.rotation for m in motions]),
                             np.mean([m.translation for m in motions], axis=0))
    return sim, motion


def _take_centroids(scene, t, tracks_of_take, wanted):
    """Per track of the wanted label: centroid of its members' native coordinates in take t."""
    ids, pts = [], []
    model = scene.take(t)
    for tid, members in tracks_of_take.get(t, {}).items():
        if tid in wanted:
            ids.append(tid)
            pts.append(model.coords(members).mean(axis=0))
    return ids, np.array(pts).reshape(-1, 3)


def plan_merge(scene: MultiTakeScene, tracks: Sequence[Track], labels: Mapping[int, Label],
               order: Sequence[int], registrations=None) -> MergePlan:
    """Similarity to the reference frame and foreground motion for every take in ``order``."""
    r = order[0]
    index = track_index(tracks)
    tracks_of_take: Dict[int, Dict[int, List[int]]] = {}
    for tr in tracks:
        for t, p in tr.members:
            tracks_of_take.setdefault(t, {}).setdefault(tr.track_id, []).append(p)
    bg = {tid for tid, lab in labels.items() if lab == Label.B}
    fg = {tid for tid, lab in labels.items() if lab == Label.F}
    need_motion = bool(fg)
    scale = float(np.linalg.norm(np.ptp(scene.take(r).point_array, axis=0))) if len(scene.take(r).points) else 1.0

    plan = MergePlan(r)
    plan.similarities[r] = SimilarityTransform.identity()
    plan.motions[r] = RigidMotion.identity()
    plan.sources[r] = "reference"
    merged_bg: Dict[int, List[np.ndarray]] = {}
    rest_fg: Dict[int, List[np.ndarray]] = {}

    def absorb(t):
        S, M = plan.similarities[t], plan.motions[t]
        ids, X = _take_centroids(scene, t, tracks_of_take, bg)
        for tid, x in zip(ids, S.apply(X)):
            merged_bg.setdefault(tid, []).append(x)
        ids, X = _take_centroids(scene, t, tracks_of_take, fg)
        for tid, x in zip(ids, invert_motion(M).apply(S.apply(X))):
            rest_fg.setdefault(tid, []).append(x)

    absorb(r)
    for t in order[1:]:
        S, source = None, None
        ids, X = _take_centroids(scene, t, tracks_of_take, bg)
        common = [k for k, tid in enumerate(ids) if tid in merged_bg]
        if common:
            dst = np.array([np.mean(merged_bg[ids[k]], axis=0) for k in common])
            try:
                S, source = _trimmed(similarity_from_points, X[common], dst, scale), "points"
            except DegenerateConfigurationError:
                pass
        route_motion = None
        if registrations is not None:
            for u in [u for u in order if u in plan.similarities]:
                s_tu, m_ut = _camera_route(scene, t, u, registrations, labels, index)
                if s_tu is None:
                    continue
                s_cam = chain_similarity(s_tu, plan.similarities[u])
                if S is None:
                    S, source = s_cam, f"cameras/{u}"
                elif rotation_geodesic_distance(S.rotation, s_cam.rotation) > CROSS_CHECK_ROTATION:
                    log.warning("take %s: point and camera similarities disagree by %.3g rad", t,
                                rotation_geodesic_distance(S.rotation, s_cam.rotation))
                if m_ut is not None:
                    # u -> t in frame u, moved to the reference frame and chained after r -> u
                    route_motion = chain_motion(plan.motions[u], conjugate_motion(m_ut, plan.similarities[u]))
                break
        if S is None:
            log.warning("take %s: no similarity to the reference frame, excluded", t)
            plan.excluded.append(t)
            continue
        M = RigidMotion.identity()
        if need_motion:
            fids, FX = _take_centroids(scene, t, tracks_of_take, fg)
            common = [k for k, tid in enumerate(fids) if tid in rest_fg]
            M = None
            if common:
                src = np.array([np.mean(rest_fg[fids[k]], axis=0) for k in common])
                try:
                    M = _trimmed(rigid_from_points, src, S.apply(FX[common]), scale)
                except DegenerateConfigurationError:
                    pass
            if M is None:
                M = route_motion
            if M is None:
                log.warning("take %s: no foreground motion, excluded", t)
                plan.excluded.append(t)
                continue
        plan.similarities[t] = S
        plan.motions[t] = M
        plan.sources[t] = source
        absorb(t)
    return plan


def merge_scene(scene: MultiTakeScene, tracks: Sequence[Track], labels: Mapping[int, Label],
                order: Sequence[int], registrations=None, degenerate=False,
                plan: Optional[MergePlan] = None) -> LabeledScene:
    """Merged, labeled model in the reference frame."""
    plan = plan or plan_merge(scene, tracks, labels, order, registrations)
    r = plan.reference
    merged = [t for t in order if t in plan.similarities]
    sims, motions = plan.similarities, plan.motions
    inv = {t: invert_motion(motions[t]) for t in merged}

    member_positions = {}
    for t in merged:
        model = scene.take(t)
        ids = model.point_ids
        moved = sims[t].apply(model.point_array)
        member_positions.update({(t, int(p)): moved[k] for k, p in enumerate(ids)})

    points, members = {}, {}
    for tr in tracks:
        inside = [m for m in tr.members if m in member_positions]
        if not inside:
            continue
        lab = labels.get(tr.track_id, Label.U)
        if lab == Label.F:
            pos = np.mean([inv[t].apply(member_positions[(t, p)]) for t, p in inside], axis=0)
        else:
            pos = np.mean([member_positions[m] for m in inside], axis=0)
        points[tr.track_id] = (pos, lab)
        members[tr.track_id] = tr.members

    index = track_index(tracks)
    cameras, image_take, observations = {}, {}, {}
    for t in merged:
        for j in sorted(scene.take(t).cameras):
            cameras[j] = transform_camera(scene.pose(j), t, t, "A", r, sims, motions)
            image_take[j] = t
            obs = []
            for o in scene.observations(j):
                p = o.link_to(t)
                tid = index.get((t, p)) if p is not None else None
                if tid in points:
                    obs.append((np.asarray(o.pixel, dtype=float), tid))
            observations[j] = obs
    excluded = sorted(set(plan.excluded) | (set(scene.take_ids) - set(merged)))
    return LabeledScene(r, points, cameras, image_take, {t: motions[t] for t in merged}, observations,
                        members, excluded, degenerate, member_positions)
