import numpy as np
import pytest

from conftest import NOISELESS
from tbsfm import dumps
from tbsfm.geometry import RigidMotion, random_rotation
from tbsfm.grouping import TakeGroupPair
from tbsfm.merging import merge_scene
from tbsfm.scene import Label
from tbsfm.segmentation import (GlobalGroups, choose_reference, knn_propagate, label_points, lift_to_tracks,
                                merge_global)
from tbsfm.tracks import Track, track_index

A, B = frozenset(range(1, 51)), frozenset(range(101, 151))


def singleton_tracks(take, ids):
    return [Track(k + 1, ((take, p),)) for k, p in enumerate(sorted(ids))]


def test_lift_of_singleton_tracks_is_identity():
    pair = TakeGroupPair(1, (frozenset({5, 6}), frozenset({9})), 1)
    index = {(1, p): p for p in (5, 6, 9)}
    assert lift_to_tracks(pair, index) == (frozenset({5, 6}), frozenset({9}))


def test_lift_takes_majority_and_drops_ties():
    pair = TakeGroupPair(1, (frozenset({1, 2, 4}), frozenset({3, 5})), 1)
    index = {(1, 1): 10, (1, 2): 10, (1, 3): 10, (1, 4): 20, (1, 5): 20}
    assert lift_to_tracks(pair, index) == (frozenset({10}), frozenset())


def test_reference_has_most_support():
    pairs = {1: TakeGroupPair(1, (A, B), 3), 2: TakeGroupPair(2, (A, B), 5), 3: TakeGroupPair(3, (A, B), 5)}
    assert choose_reference(pairs) == 2


def pairs_for(lifted, support=None):
    support = support or {}
    return {t: TakeGroupPair(t, g, support.get(t, 1)) for t, g in lifted.items()}


def test_two_identical_takes_merge_straight():
    lifted = {1: (A, B), 2: (A, B)}
    gg = merge_global(lifted, pairs_for(lifted, {1: 2}))
    assert gg.reference == 1 and gg.order == [1, 2]
    assert gg.groups == (A, B) and gg.crossed == {1: False, 2: False} and not gg.unmerged


def test_swapped_take_merges_crossed():
    lifted = {1: (A, B), 2: (B, A)}
    gg = merge_global(lifted, pairs_for(lifted, {1: 2}))
    assert gg.crossed[2] and gg.groups == (A, B)


def test_take_without_shared_tracks_is_unmerged():
    lifted = {1: (A, B), 2: (frozenset({900}), frozenset({901}))}
    gg = merge_global(lifted, pairs_for(lifted, {1: 2}))
    assert gg.order == [1] and gg.unmerged == [2]
    with pytest.raises(ValueError):
        merge_global({}, {})


def test_label_points_and_swap():
    tracks = [Track(1, ((1, 1),)), Track(101, ((1, 2),)), Track(999, ((1, 3),))]
    gg = GlobalGroups(1, (A, B), [1])
    assert label_points(gg, tracks) == {1: Label.B, 101: Label.F, 999: Label.U}
    assert label_points(gg, tracks, swap=True) == {1: Label.F, 101: Label.B, 999: Label.U}


def knn_setup(rng, n=40):
    """Background cloud near the origin, foreground cloud at x = 10, one query U track per take."""
    rest = {}
    labels = {}
    for k in range(n):
        rest[k + 1] = rng.normal(0.0, 1.0, 3)
        labels[k + 1] = Label.B
        rest[k + 101] = rng.normal(0.0, 1.0, 3) + [10.0, 0.0, 0.0]
        labels[k + 101] = Label.F
    return rest, labels


def test_knn_surrounded_by_background_becomes_background():
    rest, labels = knn_setup(np.random.default_rng(0))
    labels[500] = Label.U
    tracks = [Track(500, ((1, 7), (2, 7)))]
    members = {(1, 7): np.zeros(3), (2, 7): np.zeros(3)}
    motions = {1: RigidMotion.identity(), 2: RigidMotion(np.eye(3), [5.0, 0.0, 0.0])}
    out = knn_propagate(labels, rest, members, tracks, motions, k=5)
    assert out[500] == Label.B


def test_knn_follows_foreground_into_each_configuration():
    rest, labels = knn_setup(np.random.default_rng(1))
    labels[500] = Label.U
    motion = RigidMotion(random_rotation(np.random.default_rng(2)), [0.0, 30.0, 0.0])
    moved = motion.apply(np.array([[10.0, 0.0, 0.0]]))[0]
    tracks = [Track(500, ((1, 7), (2, 7)))]
    members = {(1, 7): np.array([10.0, 0.0, 0.0]), (2, 7): moved}
    out = knn_propagate(labels, rest, members, tracks, {1: RigidMotion.identity(), 2: motion}, k=5)
    assert out[500] == Label.F


def test_knn_mixed_neighbourhood_stays_unknown():
    rest = {1: np.zeros(3), 2: np.ones(3) * 0.1, 3: np.ones(3) * -0.1, 4: np.array([0.1, -0.1, 0.0])}
    labels = {1: Label.B, 2: Label.F, 3: Label.B, 4: Label.F, 9: Label.U}
    tracks = [Track(9, ((1, 9),))]
    out = knn_propagate(labels, rest, {(1, 9): np.zeros(3)}, tracks, {1: RigidMotion.identity()}, k=4)
    assert out[9] == Label.U


def test_knn_skips_with_fewer_labeled_than_k():
    rest = {1: np.zeros(3), 2: np.ones(3)}
    labels = {1: Label.B, 2: Label.B, 9: Label.U}
    tracks = [Track(9, ((1, 9),))]
    out = knn_propagate(labels, rest, {(1, 9): np.zeros(3)}, tracks, {1: RigidMotion.identity()}, k=3)
    assert out == labels
    with pytest.raises(ValueError):
        knn_propagate(labels, rest, {}, tracks, {1: RigidMotion.identity()}, k=0)


def test_noiseless_lift_preserves_purity(pipeline_runs):
    run = pipeline_runs(NOISELESS)
    groups = dumps.read_groups(run.out / "groups" / "groups.txt")
    tracks = dumps.read_tracks(run.out / "groups" / "tracks.txt")
    index = track_index(tracks)
    by_id = {tr.track_id: tr for tr in tracks}
    for t, g in groups.items():
        for side in lift_to_tracks(g, index):
            labels = {run.gt.labels[by_id[tid].members[0]] for tid in side}
            assert len(labels) == 1


def test_erase_and_recover_half_the_labels(pipeline_runs):
    run = pipeline_runs(NOISELESS)
    regs = dumps.read_registrations(run.out / "registration" / "registrations.txt", run.scene)
    tracks = dumps.read_tracks(run.out / "segment" / "tracks.txt")
    labels, reference, order, unmerged, _ = dumps.read_labels(run.out / "segment" / "labels.txt")
    merged = merge_scene(run.scene, tracks, labels, list(order) + list(unmerged), regs)
    rng = np.random.default_rng(0)
    known = sorted(tid for tid, lab in labels.items() if lab != Label.U)
    erased = set(rng.choice(known, len(known) // 2, replace=False).tolist())
    partial = {tid: Label.U if tid in erased else lab for tid, lab in labels.items()}
    rest = {tid: pos for tid, (pos, _) in merged.points.items() if partial.get(tid, Label.U) != Label.U}
    out = knn_propagate(partial, rest, merged.member_positions, tracks, merged.motions)
    recovered = sum(out[tid] == labels[tid] for tid in erased)
    flipped = sum(out[tid] not in (Label.U, labels[tid]) for tid in erased)
    assert recovered >= 0.95 * len(erased)
    assert flipped == 0
