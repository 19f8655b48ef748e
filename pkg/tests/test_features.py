import numpy as np
import pytest

from evotf import rng
from evotf.features import (DISTRIBUTION_DIM, FITNESS_DIM, SOLUTION_DIM, PathState, distribution_features, featurize,
                            fitness_features, solution_features, stack_features)


def _gen(seed=0, n=6, d=3):
    g = np.random.default_rng(seed)
    mean, sigma = g.normal(size=d), np.exp(g.normal(size=d))
    X = mean + sigma * g.normal(size=(n, d))
    return X, g.normal(size=n), mean, sigma


def test_shapes():
    X, F, m, s = _gen()
    feats, _ = featurize(X, F, m, s, PathState.init(3))
    assert feats.solution.shape == (6, 3, SOLUTION_DIM)
    assert feats.fitness.shape == (6, FITNESS_DIM)
    assert feats.distribution.shape == (3, DISTRIBUTION_DIM)


def test_solution_channels_zero_at_mean_and_clip():
    m, s = np.array([1.0, 2.0]), np.array([0.5, 2.0])
    X = np.tile(m, (4, 1))
    f = solution_features(X, np.arange(4.0), m, s, PathState.init(2))
    assert np.all(f[..., :2] == 0)
    X = np.array([[m[0] + 7 * s[0], m[1]], [m[0], m[1]]])
    f = solution_features(X, np.array([1.0, 0.0]), m, s, PathState.init(2))
    assert f[0, 0, 0] == pytest.approx(7.0) and f[0, 0, 4] == 5.0


def test_solution_scale_invariance():
    X, F, m, s = _gen(1)
    a = solution_features(X, F, m, s, PathState.init(3))
    b = solution_features(m + 2 * (X - m), F, m, 2 * s, PathState.init(3))
    np.testing.assert_allclose(a[..., [0, 1, 4]], b[..., [0, 1, 4]], rtol=1e-12)


def test_fitness_zscore_and_constant():
    f = fitness_features(np.array([1.0, 2.0, 3.0]), PathState.init(1))
    np.testing.assert_allclose(f[:, 1], [-1.2247, 0.0, 1.2247], atol=1e-4)
    f = fitness_features(np.full(4, 2.0), PathState.init(1))
    assert np.all(f[:, 1] == 0) and np.all(f[:, 3] == -0.5)
    np.testing.assert_array_equal(f[:, 5], [1, 0, 0, 0])


def test_fitness_shift_invariance():
    F = np.random.default_rng(2).normal(size=7)
    a = fitness_features(F, PathState.init(1))
    b = fitness_features(F + 100, PathState.init(1))
    np.testing.assert_allclose(a[:, 1:5], b[:, 1:5], atol=1e-9)


def test_improvement_flag_uses_previous_best():
    paths = PathState.init(1)
    X, F = np.array([[0.0], [1.0]]), np.array([3.0, 4.0])
    f = fitness_features(F, paths)
    np.testing.assert_array_equal(f[:, 0], [1, 1])
    _, paths = featurize(X, F, np.zeros(1), np.ones(1), paths)
    f = fitness_features(np.array([3.5, 2.0]), paths)
    np.testing.assert_array_equal(f[:, 0], [0, 1])


def test_paths_zero_at_start_and_recursion():
    X, F, m, s = _gen(3)
    feats, p1 = distribution_features(X, F, m, s, PathState.init(3))
    assert np.all(feats[:, 3:9] == 0)
    # constant gradient g twice, c = 0.5 -> 0.75 g
    _, p2 = distribution_features(X, F, m, s, p1)
    g_mean = feats[:, 1]
    np.testing.assert_allclose(p2.mean_paths[1], 0.75 * g_mean, rtol=1e-12)


def test_antithetic_symmetric_fitness_fd_gradient_cancels():
    # fitness depends on |z| only, so each antithetic pair ties; with ties
    # ranked by index the estimate and its mirrored population cancel exactly
    z = rng.normal_antithetic(rng.key(0), (6, 2))
    m, s = np.zeros(2), np.ones(2)
    F = np.abs(z).sum(axis=1)
    a, _ = distribution_features(m + s * z, F, m, s, PathState.init(2))
    b, _ = distribution_features(m - s * z, F, m, s, PathState.init(2))
    np.testing.assert_allclose(a[:, 0] + b[:, 0], 0.0, atol=1e-12)


def test_batched_featurize_matches_loop():
    rows = [_gen(i) for i in range(4)]
    X = np.stack([r[0] for r in rows])
    F = np.stack([r[1] for r in rows])
    m = np.stack([r[2] for r in rows])
    s = np.stack([r[3] for r in rows])
    fb, pb = featurize(X, F, m, s, PathState.init(3, (4,)))
    for i, r in enumerate(rows):
        fi, pi = featurize(*r, PathState.init(3))
        np.testing.assert_allclose(fb.solution[i], fi.solution)
        np.testing.assert_allclose(fb.fitness[i], fi.fitness)
        np.testing.assert_allclose(fb.distribution[i], fi.distribution)
        np.testing.assert_allclose(pb.mean_paths[i], pi.mean_paths)


def test_translation_covariance():
    X, F, m, s = _gen(5)
    b = np.array([3.0, -1.0, 0.5])
    a, _ = featurize(X, F, m, s, PathState.init(3))
    c, _ = featurize(X + b, F, m + b, s, PathState.init(3))
    np.testing.assert_allclose(a.solution, c.solution, atol=1e-12)
    np.testing.assert_allclose(a.distribution, c.distribution, atol=1e-12)


def test_stack_features_axis():
    seq = [featurize(*_gen(i), PathState.init(3))[0] for i in range(5)]
    st = stack_features(seq)
    assert st.solution.shape == (5, 6, 3, SOLUTION_DIM)
    assert st.fitness.shape == (5, 6, FITNESS_DIM)
    assert st.distribution.shape == (5, 3, DISTRIBUTION_DIM)
