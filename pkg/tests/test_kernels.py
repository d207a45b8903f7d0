import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from gpdf.kernels import (
    KernelConfig,
    KernelKind,
    eval_kernel,
    kernel_derivatives,
    kernel_matrix,
    revert,
    revert_derivatives,
    spectral_density,
)

ALL_KINDS = list(KernelKind)


def cfg(kind, l=0.7, alpha=2.0):
    return KernelConfig(kind, l, alpha)


class TestKernelValues:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_unit_at_zero(self, kind):
        assert eval_kernel(0.0, cfg(kind)) == pytest.approx(1.0, abs=1e-15)

    def test_values_at_one_length_scale(self):
        # hand-evaluated closed forms at d = l
        expected = {
            KernelKind.MATERN_HALF: math.exp(-1.0),
            KernelKind.SQUARED_EXPONENTIAL: math.exp(-0.5),
            KernelKind.RATIONAL_QUADRATIC: (1.0 + 1.0 / 4.0) ** -2.0,
            KernelKind.MATERN_THREE_HALF: (1.0 + math.sqrt(3.0)) * math.exp(-math.sqrt(3.0)),
        }
        for kind, value in expected.items():
            assert float(eval_kernel(0.7, cfg(kind))) == pytest.approx(value, rel=1e-14)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_monotone_decreasing(self, kind):
        d = np.linspace(0.0, 5.0, 200)
        k = eval_kernel(d, cfg(kind))
        assert np.all(np.diff(k) < 0)

    def test_exponential_continues_to_negative_distance(self):
        c = cfg(KernelKind.MATERN_HALF)
        np.testing.assert_allclose(eval_kernel(-0.35, c), math.exp(0.5), rtol=1e-14)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_matrix_symmetric_psd(self, kind, rng):
        X = rng.uniform(-1, 1, (40, 3))
        K = kernel_matrix(X, X, cfg(kind))
        np.testing.assert_allclose(K, K.T, atol=0)
        assert np.linalg.eigvalsh(K).min() > -1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kernel_matrix(np.zeros((2, 3)), np.zeros((2, 2)), cfg(KernelKind.MATERN_HALF))


class TestConfig:
    def test_rejects_bad_length_scale(self):
        for bad in (0.0, -1.0, float("nan"), float("inf")):
            with pytest.raises(ValueError):
                KernelConfig(KernelKind.MATERN_HALF, bad)

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            KernelConfig(KernelKind.RATIONAL_QUADRATIC, 1.0, 0.0)

    def test_dict_round_trip(self):
        c = KernelConfig("rational_quadratic", 0.3, 1.5)
        assert KernelConfig.from_dict(c.to_dict()) == c

    def test_only_exponential_is_signed(self):
        assert [k for k in ALL_KINDS if cfg(k).signed] == [KernelKind.MATERN_HALF]


class TestDerivatives:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_first_and_second_against_differences(self, kind):
        c = cfg(kind)
        d = np.linspace(0.05, 3.0, 50)
        h = 1e-5
        k, k1, k2 = kernel_derivatives(d, c)
        np.testing.assert_allclose(k, eval_kernel(d, c), rtol=1e-14)
        fd1 = (eval_kernel(d + h, c) - eval_kernel(d - h, c)) / (2 * h)
        fd2 = (eval_kernel(d + h, c) - 2 * k + eval_kernel(d - h, c)) / h**2
        np.testing.assert_allclose(k1, fd1, rtol=1e-7, atol=1e-10)
        np.testing.assert_allclose(k2, fd2, rtol=1e-4, atol=1e-6)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_revert_derivatives_against_differences(self, kind):
        c = cfg(kind)
        o = np.linspace(0.05, 0.95, 30)
        h = 1e-6
        r, r1, r2 = revert_derivatives(o, c)
        np.testing.assert_allclose(r, revert(o, c), rtol=1e-12)
        fd1 = (revert(o + h, c) - revert(o - h, c)) / (2 * h)
        np.testing.assert_allclose(r1, fd1, rtol=1e-5)
        fd2 = (revert(o + 1e-4, c) - 2 * revert(o, c) + revert(o - 1e-4, c)) / 1e-8
        np.testing.assert_allclose(r2, fd2, rtol=1e-3)


class TestRevert:
    @pytest.mark.parametrize("kind", [k for k in ALL_KINDS if k is not KernelKind.MATERN_HALF])
    def test_clamped_above_one_has_flat_derivatives(self, kind):
        r, r1, r2 = revert_derivatives(np.array([1.0, 1.05, 1.5]), cfg(kind))
        np.testing.assert_array_equal(r, 0.0)
        np.testing.assert_array_equal(r1, 0.0)
        np.testing.assert_array_equal(r2, 0.0)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @settings(max_examples=60, deadline=None)
    @given(d=st.floats(0.0, 20.0), l=st.floats(0.05, 5.0))
    def test_inverts_kernel(self, kind, d, l):
        c = cfg(kind, l)
        o = float(eval_kernel(d * l, c))
        if o < 1e-250:
            return
        # smooth kernels are flat at zero, so o = 1 - O(d^2) only pins d to ~sqrt(eps) l
        atol = 1e-12 * l if c.signed else 3e-8 * l
        assert float(revert(o, c)) == pytest.approx(d * l, rel=1e-7, abs=atol)

    @settings(max_examples=60, deadline=None)
    @given(d=st.floats(-20.0, 20.0), l=st.floats(0.05, 5.0))
    def test_exponential_is_signed(self, d, l):
        c = cfg(KernelKind.MATERN_HALF, l)
        assert float(revert(eval_kernel(d * l, c), c)) == pytest.approx(d * l, rel=1e-12, abs=1e-12)

    def test_non_positive_occupancy_rejected(self):
        with pytest.raises(ValueError):
            revert(np.array([0.5, 0.0]), cfg(KernelKind.MATERN_HALF))

    def test_underflow_gives_finite_distance(self):
        assert np.isfinite(revert(1e-320, cfg(KernelKind.MATERN_HALF)))


def _spectral_1d(c, s):
    # S(s) = 2 int_0^inf k(r) cos(2 pi s r) dr
    val, _ = integrate.quad(lambda r: float(eval_kernel(r, c)), 0, np.inf, weight="cos", wvar=2 * np.pi * s)
    return 2 * val


def _spectral_3d(c, s):
    # radial transform: S(s) = (2 / s) int_0^inf r k(r) sin(2 pi s r) dr
    val, _ = integrate.quad(lambda r: r * float(eval_kernel(r, c)), 0, np.inf, weight="sin", wvar=2 * np.pi * s)
    return 2 * val / s


class TestSpectralDensity:
    @pytest.mark.parametrize("kind", [KernelKind.SQUARED_EXPONENTIAL, KernelKind.MATERN_HALF,
                                      KernelKind.MATERN_THREE_HALF])
    @pytest.mark.parametrize("s", [0.1, 0.5, 1.3])
    def test_one_dimensional_fourier_transform(self, kind, s):
        c = cfg(kind, 0.4)
        assert float(spectral_density(s, c, 1)) == pytest.approx(_spectral_1d(c, s), rel=1e-6)

    @pytest.mark.parametrize("kind", [KernelKind.SQUARED_EXPONENTIAL, KernelKind.MATERN_HALF,
                                      KernelKind.MATERN_THREE_HALF])
    @pytest.mark.parametrize("s", [0.2, 0.9])
    def test_three_dimensional_fourier_transform(self, kind, s):
        c = cfg(kind, 0.4)
        assert float(spectral_density(s, c, 3)) == pytest.approx(_spectral_3d(c, s), rel=1e-5)

    def test_integrates_to_kernel_at_zero(self):
        # int S(s) ds over the line equals k(0) = 1
        for kind in (KernelKind.SQUARED_EXPONENTIAL, KernelKind.MATERN_THREE_HALF):
            c = cfg(kind, 0.4)
            val, _ = integrate.quad(lambda s: float(spectral_density(s, c, 1)), 0, np.inf)
            assert 2 * val == pytest.approx(1.0, rel=1e-7)

    def test_rational_quadratic_row_is_continuous_at_zero(self):
        c = cfg(KernelKind.RATIONAL_QUADRATIC, 0.5, 3.0)
        assert float(spectral_density(1e-9, c, 2)) == pytest.approx(float(spectral_density(0.0, c, 2)), rel=1e-6)

    def test_rejects_negative_frequency(self):
        with pytest.raises(ValueError):
            spectral_density(-1.0, cfg(KernelKind.MATERN_HALF), 2)
