import filecmp

import numpy as np
import pytest

from tbsfm.scene import (MultiTakeScene, Observation, ReferentialIntegrityError, SceneFormatError,
                         correspondences, load_ground_truth, load_scene, load_take, save_ground_truth,
                         save_scene)
from tbsfm.simulator import SimConfig, generate

MINIMAL_TAKE = {
    "cameras.txt": "CAM 1 800 800 512 384\n",
    "images.txt": ("IMG 1 1 1 0 0 0 0 0 -5\n"
                   "OBS 512 384 1 1 7\n"
                   "IMG 2 1 1 0 0 0 1 0 -5\n"
                   "OBS 352 384 1 1 7\n"),
    "points.txt": "PT 7 0 0 0\n",
}


def write_take(root, take_id, files):
    d = root / f"take_{take_id}"
    d.mkdir(parents=True)
    for name, text in files.items():
        (d / name).write_text(text)
    return d


def test_minimal_take_fixture(tmp_path):
    model = load_take(write_take(tmp_path, 1, MINIMAL_TAKE), 1)
    assert (len(model.points), len(model.cameras)) == (1, 2)
    assert model.observations[2][0].links == ((1, 7),)


def test_empty_directory_has_no_takes(tmp_path):
    with pytest.raises(SceneFormatError, match="no takes found"):
        load_scene(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path / "absent")


def test_single_take_is_not_a_scene(tmp_path):
    write_take(tmp_path, 1, MINIMAL_TAKE)
    with pytest.raises(SceneFormatError, match="two takes"):
        load_scene(tmp_path)


def test_malformed_line_reports_file_and_line(tmp_path):
    write_take(tmp_path, 1, MINIMAL_TAKE)
    write_take(tmp_path, 2, {**MINIMAL_TAKE, "points.txt": "# header\nPT 7 0 0\n"})
    with pytest.raises(SceneFormatError, match=r"points\.txt:2"):
        load_scene(tmp_path)


def test_dangling_link_is_referential_error(tmp_path):
    write_take(tmp_path, 1, MINIMAL_TAKE)
    images = MINIMAL_TAKE["images.txt"].replace("OBS 352 384 1 1 7", "OBS 352 384 1 1 8")
    write_take(tmp_path, 2, {**MINIMAL_TAKE, "images.txt": images.replace("IMG 1", "IMG 3")
                             .replace("IMG 2", "IMG 4")})
    with pytest.raises(ReferentialIntegrityError):
        load_scene(tmp_path)


def test_duplicate_take_in_links():
    with pytest.raises(ValueError):
        Observation((0.0, 0.0), [(1, 2), (1, 3)])


def test_simulator_scene_round_trip(tmp_path, noiseless_scene):
    scene, gt = noiseless_scene
    save_scene(scene, tmp_path / "a", gt)
    loaded = load_scene(tmp_path / "a")
    assert loaded == scene
    save_scene(loaded, tmp_path / "b")
    for d in [f"take_{t}" for t in scene.take_ids]:
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / d, tmp_path / "b" / d,
                                               ["cameras.txt", "images.txt", "points.txt"], shallow=False)
        assert not mismatch and not errors


def test_ground_truth_round_trip(tmp_path, noiseless_scene):
    _, gt = noiseless_scene
    save_ground_truth(gt, tmp_path / "gt.txt")
    back = load_ground_truth(tmp_path / "gt.txt")
    assert back.labels == gt.labels and back.point_identity == gt.point_identity
    for t in gt.motions:
        np.testing.assert_allclose(back.motions[t].rotation, gt.motions[t].rotation, atol=1e-15)
        np.testing.assert_array_equal(back.scrambles[t].translation, gt.scrambles[t].translation)


def test_correspondences_follow_links():
    scene, _ = generate(SimConfig(seed=1, num_takes=2, num_background=60, num_foreground=20,
                                  cameras_per_take=3))
    j = scene.image_ids[0]
    own = scene.image_take[j]
    other = [t for t in scene.take_ids if t != own][0]
    got = correspondences(scene, j, other)
    obs = scene.observations(j)
    expected = [q for q, o in enumerate(obs) if o.link_to(other) is not None]
    assert [q for _, _, q in got] == expected
    assert all(obs[q].link_to(other) == p for _, p, q in got)
    assert len(correspondences(scene, j, own)) == sum(o.link_to(own) is not None for o in obs)
    with pytest.raises(KeyError):
        correspondences(scene, 10_000, other)


def test_scene_rejects_shared_image_ids(noiseless_scene):
    scene, _ = noiseless_scene
    a = scene.takes[0]
    with pytest.raises(ReferentialIntegrityError):
        MultiTakeScene((a, type(a)(99, a.points, a.cameras, a.observations)))
