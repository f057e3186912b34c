"""Scores against simulator ground truth and the summary report."""
from __future__ import annotations

import json
from collections import Counter
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import (chain_motion, conjugate_motion, invert_motion, invert_similarity,
                       project_many, rotation_geodesic_distance)
from .merging import DegenerateConfigurationError, similarity_from_points
from .scene import GroundTruth, Label, LabeledScene, MultiTakeScene, PointKey


def gt_track_label(members: Sequence[PointKey], gt: GroundTruth) -> Optional[Label]:
    """Majority ground-truth label of a track's members (ties: first seen)."""
    labs = [gt.labels[m] for m in members if m in gt.labels]
    if not labs:
        return None
    return Counter(labs).most_common(1)[0][0]


def segmentation_accuracy(labels: Mapping[int, Label], tracks: Mapping[int, Sequence[PointKey]],
                          gt: GroundTruth) -> Tuple[float, bool, float]:
    """``(accuracy, swapped, coverage)``, accuracy maximized over the global B/F swap."""
    truth = {tid: gt_track_label(tracks[tid], gt) for tid in labels if tid in tracks}
    truth = {tid: lab for tid, lab in truth.items() if lab is not None}
    if not truth:
        return 0.0, False, 0.0
    labeled = [tid for tid in truth if labels[tid] != Label.U]
    coverage = len(labeled) / len(truth)
    if not labeled:
        return 0.0, False, coverage
    same = sum(labels[tid] == truth[tid] for tid in labeled)
    swapped = len(labeled) - same
    return max(same, swapped) / len(labeled), swapped > same, coverage


def gt_relative_motion(gt: GroundTruth, reference, take):
    """Ground-truth foreground motion reference -> take, in the reference take's frame."""
    m = chain_motion(invert_motion(gt.motions[reference]), gt.motions[take])
    return conjugate_motion(m, gt.scrambles[reference])


def scene_diameter(points) -> float:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return 0.0
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def motion_error(scene: LabeledScene, gt: GroundTruth, swapped=False, diameter=None
                 ) -> Dict[int, Optional[Tuple[float, float]]]:
    """Per take: (rotation error in rad, translation error / scene diameter); None if absent."""
    if diameter is None:
        diameter = scene_diameter([p for p, _ in scene.points.values()])
    out = {}
    for t in sorted(gt.motions):
        est = scene.motions.get(t)
        if est is None:
            out[t] = None
            continue
        ref = gt_relative_motion(gt, scene.reference, t)
        if swapped:
            ref = invert_motion(ref)
        rot = rotation_geodesic_distance(ref.rotation, est.rotation)
        out[t] = (rot, float(np.linalg.norm(ref.translation - est.translation) / max(diameter, 1e-300)))
    return out


def gt_reference_positions(scene: LabeledScene, model: MultiTakeScene, gt: GroundTruth) -> Dict[int, np.ndarray]:
    """Ground-truth positions of labeled tracks in the reference configuration (world frame).

    Uses the first member of each track; members are mapped back to the world
    through the take's scramble and, for foreground, that take's motion.
    """
    r = scene.reference
    out = {}
    for tid, (_, lab) in scene.points.items():
        if lab == Label.U:
            continue
        t, p = scene.tracks[tid][0]
        if (t, p) not in gt.labels:
            continue
        X = invert_similarity(gt.scrambles[t]).apply(model.take(t).points[p][None])[0]
        if gt.labels[(t, p)] == Label.F:
            X = gt.motions[r].apply(invert_motion(gt.motions[t]).apply(X[None]))[0]
        out[tid] = X
    return out


def alignment_rmse(scene: LabeledScene, model: MultiTakeScene, gt: GroundTruth) -> Optional[float]:
    """RMSE of labeled points after a similarity fit to ground truth, over the scene diameter."""
    ref = gt_reference_positions(scene, model, gt)
    ids = sorted(ref)
    if len(ids) < 3:
        return None
    truth = np.array([ref[t] for t in ids])
    est = np.array([scene.points[t][0] for t in ids])
    try:
        s = similarity_from_points(est, truth)
    except DegenerateConfigurationError:
        return None
    err = s.apply(est) - truth
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))) / max(scene_diameter(truth), 1e-300))


def reprojection_errors(scene: LabeledScene) -> np.ndarray:
    """Pixel errors of labeled observations, using the pose of each point's object."""
    errs = []
    for j in sorted(scene.observations):
        if j not in scene.cameras:
            continue
        obs = [(px, tid) for px, tid in scene.observations[j]
               if tid in scene.points and scene.points[tid][1] != Label.U]
        if not obs:
            continue
        bg, fg = scene.cameras[j]
        for pose, lab in ((bg, Label.B), (fg, Label.F)):
            sel = [(px, tid) for px, tid in obs if scene.points[tid][1] == lab]
            if not sel:
                continue
            uv, _ = project_many(pose, np.array([scene.points[tid][0] for _, tid in sel]))
            errs.append(np.linalg.norm(uv - np.array([px for px, _ in sel]), axis=1))
    return np.concatenate(errs) if errs else np.zeros(0)


def report(scene: LabeledScene, gt: Optional[GroundTruth] = None, model: Optional[MultiTakeScene] = None) -> dict:
    counts = scene.label_counts()
    errs = reprojection_errors(scene)
    rec = {
        "reference_take": scene.reference,
        "points_B": counts[Label.B],
        "points_F": counts[Label.F],
        "points_U": counts[Label.U],
        "points_total": len(scene.points),
        "median_reproj_px": float(np.median(errs)) if len(errs) else None,
        "excluded_takes": list(scene.excluded),
        "degenerate_grouping": bool(scene.degenerate),
    }
    if gt is not None:
        labels = {tid: lab for tid, (_, lab) in scene.points.items()}
        acc, swapped, cov = segmentation_accuracy(labels, scene.tracks, gt)
        rec["segmentation"] = {"accuracy": acc, "swapped": swapped, "coverage": cov}
        diameter = None
        if model is not None:
            truth = gt_reference_positions(scene, model, gt)
            if truth:
                s = gt.scrambles[scene.reference]
                diameter = scene_diameter(s.apply(np.array(list(truth.values()))))
            rec["alignment_rmse_rel"] = alignment_rmse(scene, model, gt)
        if scene.degenerate:
            rec["motion_error"] = {}
        else:
            errors = motion_error(scene, gt, swapped, diameter)
            rec["motion_error"] = {str(t): (None if e is None else {"rotation_rad": e[0], "translation_rel": e[1]})
                                   for t, e in errors.items()}
    return rec


def format_report(rec: dict) -> str:
    """Aligned plain-text rendering of a report record."""
    lines = []

    def walk(prefix, value):
        if isinstance(value, dict):
            for k in value:
                walk(f"{prefix}.{k}" if prefix else k, value[k])
        else:
            lines.append((prefix, value))

    walk("", rec)
    width = max((len(k) for k, _ in lines), default=0)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in lines) + "\n"


def write_report(rec: dict, path):
    with open(path, "w") as f:
        json.dump(rec, f, indent=2, sort_keys=True)
        f.write("\n")
