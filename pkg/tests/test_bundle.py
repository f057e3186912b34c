from dataclasses import replace

import numpy as np
import pytest

from conftest import gt_labeled_scene
from tbsfm.bundle import (BAOptions, UnderConstrainedError, build_problem, bundle_adjust, check_gradients,
                          residuals, solve, total_cost)
from tbsfm.geometry import SimilarityTransform, conjugate_motion, random_rotation, transport_pose
from tbsfm.merging import foreground_pose
from tbsfm.scene import Label
from tbsfm.simulator import SimConfig, generate

SMALL = dict(num_takes=3, num_background=150, num_foreground=60, cameras_per_take=6)


@pytest.fixture(scope="module")
def exact():
    scene, gt = generate(SimConfig(seed=31, **SMALL))
    return gt_labeled_scene(scene, gt)


@pytest.fixture(scope="module")
def noisy():
    scene, gt = generate(SimConfig(seed=32, pixel_noise=1.0, **SMALL))
    return gt_labeled_scene(scene, gt)


def labeled_observations(scene):
    return sum(1 for rows in scene.observations.values() for _, tid in rows if scene.points[tid][1] != Label.U)


def test_residual_count_and_layout(exact):
    problem = build_problem(exact)
    assert problem.n_obs == labeled_observations(exact)
    assert residuals(problem, problem.state).shape == (problem.n_obs, 2)
    n_img, n_mot = len(problem.images), len(problem.motion_takes)
    assert n_mot == len(exact.motions) - 1
    assert problem.n_pose_params == 6 * (n_img + n_mot) - 7


def test_background_only_scene_has_no_motion_parameters(exact):
    only_b = replace(exact, points={t: (x, Label.B if lab == Label.F else lab) for t, (x, lab) in exact.points.items()})
    problem = build_problem(only_b)
    assert problem.motion_takes == [] and np.all(problem.obs_motion == -1)


def test_cost_vanishes_at_ground_truth(exact):
    problem = build_problem(exact)
    assert total_cost(problem, problem.state) < 1e-12


def test_converges_immediately_at_ground_truth(exact):
    _, rep = solve(build_problem(exact))
    assert rep.iterations <= 2 and rep.final_cost < 1e-12


def test_gradients_at_zero_residual(exact):
    assert check_gradients(build_problem(exact)) < 1e-4


def transformed(scene, s):
    points = {t: (s.apply(x[None])[0], lab) for t, (x, lab) in scene.points.items()}
    motions = {t: conjugate_motion(m, s) for t, m in scene.motions.items()}
    cameras = {}
    for j, (bg, _) in scene.cameras.items():
        moved = transport_pose(bg, s)
        cameras[j] = (moved, foreground_pose(moved, motions[scene.image_take[j]]))
    return replace(scene, points=points, cameras=cameras, motions=motions)


def test_cost_and_solution_are_gauge_invariant(noisy):
    rng = np.random.default_rng(33)
    s = SimilarityTransform(random_rotation(rng), rng.normal(0.0, 5.0, 3), 2.5)
    moved = transformed(noisy, s)
    a, b = build_problem(noisy), build_problem(moved)
    assert total_cost(b, b.state) == pytest.approx(total_cost(a, a.state), rel=1e-9)
    _, rep_a = bundle_adjust(noisy)
    _, rep_b = bundle_adjust(moved)
    assert rep_b.final_cost == pytest.approx(rep_a.final_cost, rel=1e-6)
    assert rep_a.final_cost < rep_a.initial_cost


def test_robust_cost_is_huber(noisy):
    opts = BAOptions(robust=True, huber_scale=1.0)
    problem = build_problem(noisy)
    e = np.linalg.norm(residuals(problem, problem.state), axis=1)
    expected = np.sum(np.where(e <= 1.0, e * e, 2.0 * e - 1.0))
    assert total_cost(problem, problem.state, opts) == pytest.approx(expected, rel=1e-12)
    _, rep = bundle_adjust(noisy, opts)
    assert np.all(np.diff(rep.cost_history) <= 0.0)


def test_under_constrained_problems_are_rejected(exact):
    one = sorted(exact.cameras)[0]
    single = replace(exact, observations={one: exact.observations[one]})
    with pytest.raises(UnderConstrainedError):
        build_problem(single)
    keep = sorted(exact.points)[:3]
    few = replace(exact, points={t: (x, lab if t in keep else Label.U) for t, (x, lab) in exact.points.items()})
    with pytest.raises(UnderConstrainedError):
        build_problem(few)
