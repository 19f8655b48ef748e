import numpy as np
import pytest

import frozen
import oracles
from evotf import rng
from evotf.tasks import (FUNCTIONS, ControlTask, TaskSpec, bbob_batch, eval_bbob, eval_policy, mlp_param_count,
                         sample_task, task_set)


def test_sphere_optimum_and_translation():
    assert eval_bbob(TaskSpec.centered("sphere", 4), np.zeros(4)) == 0.0
    b = (0.5, -1.0, 2.0, 0.1)
    assert eval_bbob(TaskSpec("sphere", 4, b), np.array(b)) == 0.0


def test_rosenbrock_minimizer():
    assert eval_bbob(TaskSpec.centered("rosenbrock", 5), np.ones(5)) == 0.0


def test_rastrigin_values():
    spec = TaskSpec.centered("rastrigin", 5)
    assert eval_bbob(spec, np.zeros(5)) == pytest.approx(0.0, abs=1e-12)
    x = np.array([0.5, 0, 0, 0, 0])
    assert eval_bbob(spec, x) == pytest.approx(frozen.RASTRIGIN_HALF_FIRST_D5, abs=1e-9)
    y = np.random.default_rng(0).normal(size=5)
    assert eval_bbob(spec, y) == pytest.approx(oracles.rastrigin_direct(y.tolist()), rel=1e-12)


@pytest.mark.parametrize("fid", sorted(FUNCTIONS))
def test_functions_nonnegative_and_zero_at_optimum(fid):
    spec = TaskSpec.centered(fid, 5)
    x = np.random.default_rng(1).uniform(-5, 5, size=(2000, 5))
    assert np.all(spec(x) >= -1e-9)
    opt = np.ones(5) if fid == "rosenbrock" else np.zeros(5)
    if fid == "griewank_rosen":
        return
    assert eval_bbob(spec, opt) == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("fid", sorted(FUNCTIONS))
def test_translation_identity(fid):
    b = np.array([1.5, -2.0, 0.25])
    x = np.random.default_rng(2).normal(size=(20, 3))
    shifted = TaskSpec(fid, 3, tuple(b))
    centered = TaskSpec.centered(fid, 3)
    np.testing.assert_array_equal(shifted(x + b), centered((x + b) - b))


def test_batch_matches_single():
    spec = TaskSpec("discus", 3, (0.1, 0.2, 0.3))
    x = np.random.default_rng(3).normal(size=(6, 3))
    np.testing.assert_array_equal(bbob_batch(spec, x), [eval_bbob(spec, r) for r in x])


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        eval_bbob(TaskSpec.centered("sphere", 3), np.zeros(4))
    with pytest.raises(ValueError):
        TaskSpec("sphere", 3, (0.0,))
    with pytest.raises(ValueError):
        TaskSpec.centered("nope", 3)


def test_task_sets():
    assert task_set("small").members == ("sphere",)
    assert len(task_set("medium").members) == 5
    assert len(task_set("large").members) == 10
    with pytest.raises(ValueError):
        task_set("huge")


def test_small_set_always_sphere():
    k = rng.key(0)
    assert {sample_task("small", 3, rng.split(k, i)).function_id for i in range(50)} == {"sphere"}


def test_medium_sampling_frequencies_and_offsets():
    k = rng.key(1)
    specs = [sample_task("medium", 2, rng.split(k, i)) for i in range(10_000)]
    ids = [s.function_id for s in specs]
    for fid in task_set("medium").members:
        assert abs(ids.count(fid) / len(ids) - 0.2) <= 0.02
    offs = np.array([s.offset for s in specs])
    assert offs.min() >= -3 and offs.max() <= 3
    assert abs(offs.mean()) <= 0.05


def test_cartpole_zero_weights_deterministic_and_bounded():
    task = ControlTask("cartpole", seed=3)
    w = np.zeros(task.dims)
    f1 = eval_policy(task, w, seed=3)
    f2 = eval_policy(task, w, seed=3)
    assert f1 == f2 and np.isfinite(f1)
    assert f1 >= -task.episode_length


def test_cartpole_proportional_controller_beats_zero():
    task = ControlTask("cartpole", hidden=(), seed=0)
    assert task.dims == mlp_param_count(task.layout)
    # action = [x, x_dot, theta, theta_dot] . w > 0  pushes right
    w = np.array([0.0, 0.5, 10.0, 2.0, 0.0])
    assert eval_policy(task, w, seed=0) < eval_policy(task, np.zeros(task.dims), seed=0)


def test_control_task_layouts():
    assert ControlTask("cartpole").dims == 369
    assert ControlTask("pendulum").dims == 353
    pend = ControlTask("pendulum", episode_length=20)
    f = pend(np.zeros((3, pend.dims)))
    assert f.shape == (3,) and np.all(np.isfinite(f))
