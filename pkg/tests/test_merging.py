import numpy as np
import pytest

from conftest import NOISELESS, random_pose
from tbsfm import dumps
from tbsfm.evaluation import motion_error, reprojection_errors
from tbsfm.geometry import (RigidMotion, SimilarityTransform, chain_similarity, invert_similarity, random_rotation,
                            rotation_geodesic_distance, transport_pose)
from tbsfm.merging import (DegenerateConfigurationError, UnresolvableCameraError, background_pose,
                           foreground_pose, merge_scene, plan_merge, similarity_from_camera_pair,
                           similarity_from_points, transform_camera, transform_model)
from tbsfm.scene import Label
from tbsfm.simulator import SimConfig, generate
from tbsfm.tracks import Track, build_tracks


def random_similarity(rng):
    return SimilarityTransform(random_rotation(rng), rng.normal(0.0, 3.0, 3), rng.uniform(0.3, 3.0))


def test_similarity_of_identical_sets_is_identity():
    src = np.random.default_rng(0).normal(size=(10, 3))
    s = similarity_from_points(src, src)
    np.testing.assert_allclose(s.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(s.translation, 0.0, atol=1e-12)
    assert s.scale == pytest.approx(1.0, abs=1e-12)


def test_similarity_scale_and_shift():
    src = np.random.default_rng(1).normal(size=(10, 3))
    s = similarity_from_points(src, 2.0 * src + [1.0, 0.0, 0.0])
    np.testing.assert_allclose(s.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(s.translation, [1.0, 0.0, 0.0], atol=1e-12)
    assert s.scale == pytest.approx(2.0, abs=1e-12)


def test_similarity_with_small_noise():
    rng = np.random.default_rng(2)
    truth = random_similarity(rng)
    src = rng.normal(0.0, 5.0, (200, 3))
    dst = truth.apply(src) + rng.normal(0.0, 1e-3, (200, 3))
    s = similarity_from_points(src, dst)
    rmse = np.sqrt(np.mean(np.sum((s.apply(src) - dst) ** 2, axis=1)))
    assert rmse <= 3e-3


def test_similarity_rejects_degenerate_input():
    with pytest.raises(DegenerateConfigurationError):
        similarity_from_points(np.eye(3)[:2], np.eye(3)[:2])
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfigurationError):
        similarity_from_points(line, line)
    with pytest.raises(ValueError):
        similarity_from_points(np.eye(3), np.eye(4)[:, :3])


def test_similarity_is_equivariant():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(20, 3))
    dst = random_similarity(rng).apply(src)
    pre, post = random_similarity(rng), random_similarity(rng)
    base = similarity_from_points(src, dst)
    moved = similarity_from_points(pre.apply(src), post.apply(dst))
    expected = chain_similarity(chain_similarity(invert_similarity(pre), base), post)
    np.testing.assert_allclose(moved.rotation, expected.rotation, atol=1e-10)
    np.testing.assert_allclose(moved.translation, expected.translation, atol=1e-9)
    assert moved.scale == pytest.approx(expected.scale, rel=1e-10)


def test_camera_pair_single_pair_only_fixes_rotation():
    rng = np.random.default_rng(4)
    truth = random_similarity(rng)
    native = random_pose(rng)
    s, determined = similarity_from_camera_pair([native], [transport_pose(native, truth)])
    assert not determined
    assert rotation_geodesic_distance(s.rotation, truth.rotation) < 1e-12
    with pytest.raises(ValueError):
        similarity_from_camera_pair([], [])


def test_transform_model_identity_round_trip_and_distances():
    rng = np.random.default_rng(5)
    pts = {k: rng.normal(size=3) for k in range(10)}
    assert all(np.array_equal(v, pts[k]) for k, v in transform_model(pts, SimilarityTransform.identity()).items())
    s = random_similarity(rng)
    moved = transform_model(pts, s)
    back = transform_model(moved, invert_similarity(s))
    for k in pts:
        np.testing.assert_allclose(back[k], pts[k], atol=1e-12)
    ratio = np.linalg.norm(moved[0] - moved[1]) / np.linalg.norm(pts[0] - pts[1])
    assert ratio == pytest.approx(s.scale, rel=1e-12)
    assert transform_model({}, s) == {}


def test_foreground_and_background_pose_invert_each_other():
    rng = np.random.default_rng(6)
    pose = random_pose(rng)
    m = RigidMotion(random_rotation(rng), rng.normal(size=3))
    back = background_pose(foreground_pose(pose, m), m)
    np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-12)
    np.testing.assert_allclose(back.center, pose.center, atol=1e-12)


def test_transform_camera_missing_take_is_unresolvable():
    pose = random_pose(np.random.default_rng(7))
    ident = {1: RigidMotion.identity()}
    with pytest.raises(UnresolvableCameraError):
        transform_camera(pose, 2, 3, "B", 1, {1: SimilarityTransform.identity()}, ident)
    with pytest.raises(ValueError):
        transform_camera(pose, 1, 1, "X", 1, {1: SimilarityTransform.identity()}, ident)


def gt_labels(tracks, gt):
    return {tr.track_id: gt.labels[tr.members[0]] for tr in tracks}


def test_two_take_merge_is_exact():
    scene, gt = generate(SimConfig(seed=21, num_takes=2))
    tracks = build_tracks(scene)
    merged = merge_scene(scene, tracks, gt_labels(tracks, gt), scene.take_ids)
    assert sorted(merged.image_take) == scene.image_ids and not merged.excluded
    assert np.max(reprojection_errors(merged)) < 1e-6
    (rot0, tr0), (rot1, tr1) = motion_error(merged, gt).values()
    assert max(rot0, tr0, rot1, tr1) < 1e-9


def isolate_take(tracks, take):
    """Split every member of ``take`` off its track, so that take shares no tracks."""
    out, next_id = [], max(tr.track_id for tr in tracks) + 1
    for tr in tracks:
        rest = tuple(m for m in tr.members if m[0] != take)
        mine = [m for m in tr.members if m[0] == take]
        if rest:
            out.append(Track(tr.track_id, rest))
        for m in mine:
            out.append(Track(next_id, (m,)))
            next_id += 1
    return out


def test_take_without_correspondences_is_excluded():
    scene, gt = generate(SimConfig(seed=22, num_takes=3))
    tracks = isolate_take(build_tracks(scene), 3)
    merged = merge_scene(scene, tracks, gt_labels(tracks, gt), scene.take_ids)
    assert merged.excluded == [3]
    assert all(t != 3 for t in merged.image_take.values())


def test_camera_route_stands_in_for_missing_points(pipeline_runs):
    run = pipeline_runs(NOISELESS)
    regs = dumps.read_registrations(run.out / "registration" / "registrations.txt", run.scene)
    tracks = build_tracks(run.scene, regs)
    labels = gt_labels(tracks, run.gt)
    order = run.scene.take_ids
    full = plan_merge(run.scene, tracks, labels, order, regs)
    assert all(full.sources[t] == "points" for t in order[1:])
    split = isolate_take(tracks, order[1])
    fallback = plan_merge(run.scene, split, gt_labels(split, run.gt), order, regs)
    assert fallback.sources[order[1]].startswith("cameras/")
    a, b = full.similarities[order[1]], fallback.similarities[order[1]]
    assert rotation_geodesic_distance(a.rotation, b.rotation) < 1e-9
    assert b.scale == pytest.approx(a.scale, rel=1e-9)
    np.testing.assert_allclose(b.translation, a.translation, atol=1e-8)
