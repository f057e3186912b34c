import itertools

import numpy as np
import pytest

from conftest import NOISELESS, STATIC, random_pose
from tbsfm import dumps
from tbsfm.geometry import (RigidMotion, chain_motion, conjugate_motion, invert_motion, random_rotation,
                            rotation_geodesic_distance)
from tbsfm.grouping import (BACKWARD, FORWARD, ZERO, PosePair, _Linkage, extract_pose_pairs,
                            foreground_motion_from_pair, group_take, linkage, motion_cluster)
from tbsfm.registration import RegisteredPose
from tbsfm.scene import Label

POSE = random_pose(np.random.default_rng(0))


def reg(image, take, points, pose=POSE):
    return RegisteredPose(image, take, pose, tuple((int(p), k) for k, p in enumerate(sorted(points))))


def pair(image, first, second, take=9):
    return PosePair(image, take, reg(image, take, first), reg(image, take, second))


def test_extract_pose_pairs_counts():
    poses = {1: [reg(1, 9, range(20))],
             2: [reg(2, 9, range(20)), reg(2, 9, range(30, 60))],
             3: [reg(3, 9, range(5)), reg(3, 9, range(10, 40)), reg(3, 9, range(50, 70))]}
    pairs = extract_pose_pairs(poses)
    assert [p.image for p in pairs] == [2, 3, 3, 3]
    assert all(p.first.n_inliers >= p.second.n_inliers for p in pairs)
    assert all(p.support == 1 for p in pairs)


def test_identical_pairs_merge_straight():
    a, b = set(range(50)), set(range(100, 150))
    out = linkage([pair(1, a, b), pair(2, a, b)])
    assert out == [((frozenset(a), frozenset(b)), 2)]


def test_swapped_pairs_merge_crossed():
    a, b = set(range(50)), set(range(100, 150))
    first = pair(1, a, b)
    second = pair(2, set(range(100, 140)) | {200}, set(range(45)) | {300})
    (groups, support), = linkage([first, second])
    assert support == 2
    assert groups == (frozenset(a | {300}), frozenset(b | {200}))


def test_inadmissible_pairs_do_not_merge():
    a, b = set(range(50)), set(range(100, 150))
    mixed = pair(2, set(range(25)) | set(range(100, 125)), set(range(25, 50)) | set(range(125, 150)))
    out = linkage([pair(1, a, b), mixed])
    assert len(out) == 2 and all(s == 1 for _, s in out)


def test_each_step_removes_one_pair():
    rng = np.random.default_rng(1)
    a, b = list(range(100)), list(range(100, 200))
    pairs = [pair(i, set(rng.choice(a, 60, replace=False)), set(rng.choice(b, 60, replace=False)))
             for i in range(8)]
    state = _Linkage(pairs)
    sizes = [len(state)]
    while state.step():
        sizes.append(len(state))
    assert sizes == list(range(8, 8 - len(sizes), -1))
    assert len(sizes) - 1 <= 7


def test_group_take_single_and_empty():
    a, b = set(range(50)), set(range(100, 150))
    got = group_take(9, [pair(1, a, b)])
    assert got.groups == (frozenset(a), frozenset(b)) and got.support == 1 and not got.degenerate
    assert group_take(9, []) is None


def test_group_take_permutation_invariant():
    rng = np.random.default_rng(2)
    a, b = np.arange(100), np.arange(100, 200)
    pairs = []
    for i in range(12):
        x, y = set(rng.choice(a, 50, replace=False)), set(rng.choice(b, 50, replace=False))
        pairs.append(pair(i, x, y) if i % 3 else pair(i, y, x))
    reference = group_take(9, pairs)
    for _ in range(10):
        shuffled = [pairs[k] for k in rng.permutation(len(pairs))]
        assert group_take(9, shuffled) == reference


def test_degenerate_group_flagged():
    got = group_take(9, [pair(1, set(range(200)), {500})])
    assert got.degenerate


def random_motion(rng):
    return RigidMotion(random_rotation(rng), rng.normal(0.0, 2.0, 3))


def test_foreground_motion_identity_and_swap():
    rng = np.random.default_rng(3)
    for _ in range(100):
        pb, pf = random_pose(rng), random_pose(rng)
        same = foreground_motion_from_pair(pb, pb)
        np.testing.assert_allclose(same.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(same.translation, 0.0, atol=1e-12)
        m = foreground_motion_from_pair(pb, pf)
        back = foreground_motion_from_pair(pf, pb)
        inv = invert_motion(m)
        np.testing.assert_allclose(back.rotation, inv.rotation, atol=1e-10)
        np.testing.assert_allclose(back.translation, inv.translation, atol=1e-10)


def test_foreground_motion_from_simulator_pairs(pipeline_runs):
    run = pipeline_runs(NOISELESS)
    regs = dumps.read_registrations(run.out / "registration" / "registrations.txt", run.scene)
    gt = run.gt
    checked = 0
    for (j, t), poses in list(regs.items())[::10]:
        pb, pf = sorted(poses[:2], key=lambda p: gt.labels[(t, p.inliers[0][0])] != Label.B)
        s = run.scene.image_take[j]
        # take t configuration to take s configuration, expressed in the frame of take t
        world = chain_motion(invert_motion(gt.motions[t]), gt.motions[s])
        expected = conjugate_motion(world, gt.scrambles[t])
        got = foreground_motion_from_pair(pb.pose, pf.pose)
        assert rotation_geodesic_distance(got.rotation, expected.rotation) < 1e-9
        np.testing.assert_allclose(got.translation, expected.translation, atol=1e-9)
        checked += 1
    assert checked >= 10


def test_motion_cluster_single_motion():
    rng = np.random.default_rng(4)
    m = random_motion(rng)
    assert motion_cluster([m] * 6, 10.0) == [FORWARD] * 6


def test_motion_cluster_forward_backward():
    rng = np.random.default_rng(5)
    m = random_motion(rng)
    tags = motion_cluster([m, invert_motion(m)] * 4, 10.0)
    assert sorted(set(tags)) == sorted({FORWARD, BACKWARD})
    f = [k for k, tag in enumerate(tags) if tag == FORWARD]
    b = [k for k, tag in enumerate(tags) if tag == BACKWARD]
    ms = [m, invert_motion(m)] * 4
    composed = chain_motion(ms[f[0]], ms[b[0]])
    np.testing.assert_allclose(composed.rotation, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(composed.translation, 0.0, atol=1e-6)


def test_motion_cluster_zero_motions():
    assert motion_cluster([RigidMotion.identity()] * 5, 10.0) is None
    rng = np.random.default_rng(6)
    m = random_motion(rng)
    tags = motion_cluster([RigidMotion.identity(), m, m, m], 10.0)
    assert tags == [ZERO, FORWARD, FORWARD, FORWARD]


def test_noiseless_groups_are_pure(pipeline_runs):
    run = pipeline_runs(NOISELESS)
    groups = dumps.read_groups(run.out / "groups" / "groups.txt")
    regs = dumps.read_registrations(run.out / "registration" / "registrations.txt", run.scene)
    for t, g in groups.items():
        assert g is not None and not g.degenerate
        for members in g.groups:
            labels = [run.gt.labels[(t, p)] for p in members]
            top = max(labels.count(Label.B), labels.count(Label.F))
            assert top / len(labels) >= 0.99
        n_pairs = sum(len(list(itertools.combinations(v, 2))) for (j, u), v in regs.items() if u == t)
        assert g.support == n_pairs


def test_static_scene_groupings_are_degenerate(pipeline_runs):
    run = pipeline_runs(STATIC)
    groups = dumps.read_groups(run.out / "groups" / "groups.txt")
    assert all(g is None or g.degenerate for g in groups.values())


@pytest.mark.parametrize("criterion", [False, True])
def test_motion_criterion_keeps_noiseless_grouping(pipeline_runs, criterion):
    from tbsfm.grouping import group_all
    run = pipeline_runs(NOISELESS)
    regs = dumps.read_registrations(run.out / "registration" / "registrations.txt", run.scene)
    plain = dumps.read_groups(run.out / "groups" / "groups.txt")
    got = group_all(run.scene, regs, motion_criterion=criterion)
    assert {t: g.groups for t, g in got.items()} == {t: g.groups for t, g in plain.items()}
