import numpy as np
import pytest
from shapes import fibonacci_sphere

from gpdf.field import NoiseMode, NoiseModel, distance, fit, occupancy
from gpdf.kernels import KernelConfig, KernelKind
from gpdf.updates import (
    add_points,
    fit_inducing,
    inducing_objective,
    inverse_residual,
    optimize_inducing,
    remove_points,
)

CFG = KernelConfig(KernelKind.MATERN_HALF, 0.4)
NOISE = NoiseModel(sigma_y2=1e-4)


class TestIncremental:
    def test_add_matches_batch(self, rng):
        X = fibonacci_sphere(120)
        Q = rng.uniform(-1.5, 1.5, (40, 3))
        inc = add_points(fit(X[:80], CFG, NOISE), X[80:])
        full = fit(X, CFG, NOISE)
        np.testing.assert_allclose(occupancy(inc, Q), occupancy(full, Q), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(distance(inc, Q, 0), distance(full, Q, 0), rtol=1e-8)

    def test_repeated_adds_stay_exact(self, rng):
        X = fibonacci_sphere(100)
        m = fit(X[:40], CFG, NOISE)
        for k in range(40, 100, 15):
            m = add_points(m, X[k : k + 15])
        assert m.n == 100
        assert inverse_residual(m) < 1e-8
        Q = rng.uniform(-1, 1, (20, 3))
        np.testing.assert_allclose(occupancy(m, Q), occupancy(fit(X, CFG, NOISE), Q), rtol=1e-9)

    def test_remove_matches_batch(self, rng):
        X = fibonacci_sphere(90)
        drop = rng.choice(90, 25, replace=False)
        keep = np.setdiff1d(np.arange(90), drop)
        m = remove_points(add_points(fit(X[:50], CFG, NOISE), X[50:]), drop)
        Q = rng.uniform(-1.5, 1.5, (30, 3))
        np.testing.assert_allclose(occupancy(m, Q), occupancy(fit(X[keep], CFG, NOISE), Q), rtol=1e-9, atol=1e-12)
        np.testing.assert_array_equal(m.X, X[keep])

    def test_add_then_remove_restores(self, rng):
        X = fibonacci_sphere(60)
        base = fit(X[:40], CFG, NOISE)
        back = remove_points(add_points(base, X[40:]), np.arange(40, 60))
        Q = rng.uniform(-1, 1, (20, 3))
        np.testing.assert_allclose(occupancy(back, Q), occupancy(base, Q), rtol=1e-9, atol=1e-12)

    def test_feature_tables_extend(self, rng):
        X = fibonacci_sphere(30)
        F = rng.uniform(0, 1, (30, 3))
        m = add_points(fit(X[:20], CFG, NOISE, features=F[:20]), X[20:], features2=F[20:])
        full = fit(X, CFG, NOISE, features=F)
        np.testing.assert_allclose(m.feature_weights, full.feature_weights, rtol=1e-8, atol=1e-10)
        with pytest.raises(ValueError):
            add_points(fit(X[:20], CFG, NOISE, features=F[:20]), X[20:])

    def test_noisy_input_takes_supplied_variance(self):
        X = fibonacci_sphere(30)
        noise = NoiseModel(NoiseMode.NOISY_INPUT, 1e-4, (1e-3,) * 3)
        m = fit(X[:20], CFG, noise)
        m2 = add_points(m, X[20:], point_var2=np.full(10, 0.5))
        np.testing.assert_array_equal(m2.D_diag[:20], m.D_diag)
        np.testing.assert_array_equal(m2.D_diag[20:], 0.5)

    def test_errors(self):
        m = fit(fibonacci_sphere(10), CFG, NOISE)
        with pytest.raises(IndexError):
            remove_points(m, [10])
        with pytest.raises(ValueError):
            remove_points(m, range(10))
        with pytest.raises(ValueError):
            add_points(m, np.zeros((1, 2)))
        with pytest.raises(ValueError):
            add_points(m, [[np.inf, 0, 0]])
        assert add_points(m, np.zeros((0, 3))) is m
        assert remove_points(m, []) is m


class TestInducing:
    def test_objective_oracle(self, rng):
        # Titsias bound written out with dense matrices
        from gpdf.kernels import kernel_matrix

        X = rng.uniform(-1, 1, (25, 3))
        Z = X[:6] + 0.01
        s2 = 1e-2
        Knm = kernel_matrix(X, Z, CFG)
        Kmm = kernel_matrix(Z, Z, CFG)
        Q = Knm @ np.linalg.solve(Kmm, Knm.T)
        C = Q + s2 * np.eye(25)
        y = np.ones(25)
        sign, logdet = np.linalg.slogdet(C)
        ref = -0.5 * (25 * np.log(2 * np.pi) + logdet + y @ np.linalg.solve(C, y)) - 0.5 / s2 * (25 - np.trace(Q))
        assert inducing_objective(X, y, Z, CFG, s2) == pytest.approx(ref, rel=1e-8)

    def test_objective_trace_non_decreasing(self):
        X = fibonacci_sphere(120)
        res = optimize_inducing(X, 15, CFG, 1e-3, iterations=8)
        assert len(res.points) == 15
        assert np.all(np.diff(res.objective_trace) >= 0)
        assert res.objective_trace[-1] > res.objective_trace[0]

    def test_fit_inducing_rejects_noisy_input(self):
        with pytest.raises(ValueError):
            fit_inducing(fibonacci_sphere(20), 5, CFG, NoiseModel(NoiseMode.NOISY_INPUT, 1e-3, (0, 0, 0)))
        with pytest.raises(ValueError):
            optimize_inducing(fibonacci_sphere(5), 6, CFG, 1e-3)
