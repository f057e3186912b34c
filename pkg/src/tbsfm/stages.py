"""Pipeline stages operating on dump files.

Each stage reads its inputs from disk and writes its outputs to disk, so the
end-to-end ``pipeline`` is exactly the chain of individual stages.
"""
from __future__ import annotations

import logging
import shutil
from pathlib import Path
from typing import Optional

from . import dumps
from .bundle import BAOptions, UnderConstrainedError, bundle_adjust
from .evaluation import format_report, report, write_report
from .grouping import extract_pose_pairs, foreground_motion_from_pair, group_all
from .merging import merge_scene
from .registration import RansacParams, register_all
from .scene import Label, ReferentialIntegrityError, SceneFormatError, load_ground_truth, load_scene
from .segmentation import DEFAULT_K, knn_propagate, label_points, lift_to_tracks, merge_global
from .tracks import build_tracks, track_index

log = logging.getLogger(__name__)

REGISTRATIONS = "registrations.txt"
GROUPS = "groups.txt"
TRACKS = "tracks.txt"
LABELS = "labels.txt"


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _file(path, default_name):
    path = Path(path)
    return path / default_name if path.is_dir() else path


def run_register(scene_dir, out, params: Optional[RansacParams] = None, seed=0, threads=1):
    scene = load_scene(scene_dir)
    regs = register_all(scene, params or RansacParams(), seed=seed, threads=threads)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dumps.write_registrations(regs, out / REGISTRATIONS)
    return regs


def run_group(scene_dir, registrations, out, motion_criterion=False):
    scene = load_scene(scene_dir)
    regs = dumps.read_registrations(_file(registrations, REGISTRATIONS), scene)
    groups = group_all(scene, regs, motion_criterion)
    motions = []
    if motion_criterion:
        for t in scene.take_ids:
            per_image = {j: poses for (j, tt), poses in regs.items() if tt == t}
            for pair in extract_pose_pairs(per_image):
                m = foreground_motion_from_pair(pair.first.pose, pair.second.pose)
                motions.append((scene.image_take[pair.image], t, m))
    tracks = build_tracks(scene, regs)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dumps.write_groups(groups, out / GROUPS, motions)
    dumps.write_tracks(tracks, out / TRACKS)
    log.info("grouped %d of %d takes, %d tracks", sum(g is not None for g in groups.values()),
             len(groups), len(tracks))
    return groups, tracks


def run_segment(scene_dir, groups_path, tracks_path, out, knn=DEFAULT_K, swap=False, registrations=None):
    scene = load_scene(scene_dir)
    groups = dumps.read_groups(_file(groups_path, GROUPS))
    tracks = dumps.read_tracks(_file(tracks_path, TRACKS))
    regs = dumps.read_registrations(_file(registrations, REGISTRATIONS), scene) if registrations else None
    usable = {t: g for t, g in groups.items() if g is not None and not g.degenerate}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not usable:
        # nothing moved relative to anything else: one rigid body
        log.warning("no take produced a usable two-way grouping; labeling every track as background")
        labels = {tr.track_id: Label.B for tr in tracks}
        takes = scene.take_ids
        dumps.write_labels(labels, out / LABELS, takes[0], takes, [], degenerate=True)
    else:
        index = track_index(tracks)
        lifted = {t: lift_to_tracks(g, index) for t, g in usable.items()}
        gg = merge_global(lifted, usable)
        labels = label_points(gg, tracks, swap)
        unmerged = gg.unmerged + [t for t in scene.take_ids if t not in usable]
        merged = merge_scene(scene, tracks, labels, gg.order + unmerged, regs)
        rest = {tid: pos for tid, (pos, lab) in merged.points.items() if lab != Label.U}
        labels = knn_propagate(labels, rest, merged.member_positions, tracks, merged.motions, knn)
        dumps.write_labels(labels, out / LABELS, gg.reference, gg.order, unmerged)
    shutil.copyfile(_file(tracks_path, TRACKS), out / TRACKS)
    return labels


def run_merge(scene_dir, labels_path, out, registrations=None):
    scene = load_scene(scene_dir)
    labels_file = _file(labels_path, LABELS)
    labels, reference, order, unmerged, degenerate = dumps.read_labels(labels_file)
    if reference is None:
        raise StageError("merge", f"{labels_file} has no reference take")
    tracks = dumps.read_tracks(labels_file.parent / TRACKS)
    regs = dumps.read_registrations(_file(registrations, REGISTRATIONS), scene) if registrations else None
    merged = merge_scene(scene, tracks, labels, list(order) + list(unmerged), regs, degenerate)
    if len(merged.cameras) < 2:
        raise StageError("merge", "fewer than two cameras could be placed in the reference frame")
    dumps.save_result(merged, out)
    return merged


def run_ba(merged_dir, out, options: BAOptions = BAOptions()):
    scene = dumps.load_result(merged_dir)
    try:
        refined, rep = bundle_adjust(scene, options)
    except UnderConstrainedError as e:
        raise StageError("ba", str(e)) from None
    dumps.save_result(refined, out)
    dumps.write_ba_report(rep, Path(out) / "ba_report.txt")
    return refined, rep


def run_evaluate(result_dir, out, ground_truth=None):
    scene = dumps.load_result(result_dir)
    gt = model = None
    if ground_truth is not None:
        gt_path = Path(ground_truth)
        scene_dir = gt_path if gt_path.is_dir() else gt_path.parent
        gt = load_ground_truth(_file(gt_path, "ground_truth.txt"))
        model = load_scene(scene_dir)
    rec = report(scene, gt, model)
    write_report(rec, out)
    log.info("report:\n%s", format_report(rec))
    return rec


def run_export_ply(result_dir, out):
    dumps.write_ply(dumps.load_result(result_dir), out)


def run_pipeline(scene_dir, out, params: Optional[RansacParams] = None, seed=0, threads=1,
                 motion_criterion=False, knn=DEFAULT_K, swap=False, ba_options: BAOptions = BAOptions()):
    """Register, group, segment, merge, bundle-adjust and report, writing every dump."""
    out = Path(out)
    reg_dir, grp_dir, seg_dir = out / "registration", out / "groups", out / "segment"
    merged_dir, result_dir = out / "merge", out / "result"
    stages = [
        ("register", lambda: run_register(scene_dir, reg_dir, params, seed, threads)),
        ("group", lambda: run_group(scene_dir, reg_dir, grp_dir, motion_criterion)),
        ("segment", lambda: run_segment(scene_dir, grp_dir, grp_dir, seg_dir, knn, swap, reg_dir)),
        ("merge", lambda: run_merge(scene_dir, seg_dir, merged_dir, reg_dir)),
        ("ba", lambda: run_ba(merged_dir, result_dir, ba_options)),
    ]
    for name, fn in stages:
        log.info("stage %s", name)
        try:
            fn()
        except (StageError, FileNotFoundError, SceneFormatError, ReferentialIntegrityError):
            raise
        except (ValueError, RuntimeError) as e:
            raise StageError(name, str(e)) from e
    gt = Path(scene_dir) / "ground_truth.txt"
    return run_evaluate(result_dir, out / "report.json", gt if gt.is_file() else None)
