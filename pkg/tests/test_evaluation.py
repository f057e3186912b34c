from dataclasses import replace

import numpy as np
import pytest

from conftest import gt_labeled_scene
from tbsfm.evaluation import (format_report, gt_relative_motion, motion_error, report, scene_diameter,
                             segmentation_accuracy)
from tbsfm.geometry import RigidMotion, rotvec_to_matrix
from tbsfm.scene import Label, LabeledScene
from tbsfm.simulator import SimConfig, generate


@pytest.fixture(scope="module")
def truth():
    scene, gt = generate(SimConfig(seed=41, num_takes=3, num_background=150, num_foreground=60,
                                   cameras_per_take=6))
    return scene, gt, gt_labeled_scene(scene, gt)


def labels_of(labeled):
    return {tid: lab for tid, (_, lab) in labeled.points.items()}


def test_perfect_labels(truth):
    _, gt, labeled = truth
    assert segmentation_accuracy(labels_of(labeled), labeled.tracks, gt) == (1.0, False, 1.0)


def test_swapped_labels_score_perfectly_and_flag_swap(truth):
    _, gt, labeled = truth
    swapped = {tid: lab.swapped() for tid, lab in labels_of(labeled).items()}
    assert segmentation_accuracy(swapped, labeled.tracks, gt) == (1.0, True, 1.0)


def test_half_unknown_halves_coverage(truth):
    _, gt, labeled = truth
    labels = labels_of(labeled)
    ids = sorted(labels)
    half = {tid: Label.U if k % 2 else lab for k, (tid, lab) in enumerate(sorted(labels.items()))}
    acc, _, cov = segmentation_accuracy(half, labeled.tracks, gt)
    assert acc == 1.0
    assert cov == pytest.approx(len(ids[::2]) / len(ids))


def test_motion_error_matches_known_offset(truth):
    _, gt, labeled = truth
    exact = {t: gt_relative_motion(gt, labeled.reference, t) for t in gt.motions}
    offset = rotvec_to_matrix([0.0, 0.0, 0.1])
    moved = {t: RigidMotion(offset @ m.rotation, m.translation + [0.0, 0.0, 1.0]) for t, m in exact.items()}
    diameter = 10.0
    for t, err in motion_error(replace(labeled, motions=exact), gt, diameter=diameter).items():
        assert err[0] < 1e-12 and err[1] < 1e-12
    for t, (rot, trans) in motion_error(replace(labeled, motions=moved), gt, diameter=diameter).items():
        assert rot == pytest.approx(0.1, abs=1e-12) and trans == pytest.approx(0.1, abs=1e-12)
    missing = replace(labeled, motions={t: m for t, m in exact.items() if t != 2})
    assert motion_error(missing, gt)[2] is None


def test_report_counts_sum_to_total(truth):
    scene, gt, labeled = truth
    rec = report(labeled, gt, scene)
    assert rec["points_B"] + rec["points_F"] + rec["points_U"] == rec["points_total"] == len(labeled.points)
    assert rec["segmentation"]["accuracy"] == 1.0
    assert rec["median_reproj_px"] < 1e-9
    assert rec["alignment_rmse_rel"] < 1e-9


def test_empty_scene_report():
    empty = LabeledScene(1, {}, {}, {}, {1: RigidMotion.identity()}, {})
    rec = report(empty)
    assert rec["points_total"] == 0 and rec["median_reproj_px"] is None
    assert scene_diameter(np.zeros((0, 3))) == 0.0


def test_format_report_flattens_nested_keys():
    text = format_report({"a": 1, "seg": {"accuracy": 0.5, "swapped": False}})
    lines = text.splitlines()
    assert lines == ["a             1", "seg.accuracy  0.5", "seg.swapped   False"]
