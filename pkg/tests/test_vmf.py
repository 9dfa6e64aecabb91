import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ive, logsumexp

from oracles import circle_grid, scipy_log_vmf_norm
from tpsda.specfun import bessel_ratio
from tpsda.vmf import (
    KAPPA_MAX,
    VmfParams,
    fit_from_resultant,
    logpdf_natural,
    mean_natural,
    sample_natural,
    solve_kappa,
    vmf_fit_ml,
    vmf_logpdf,
    vmf_logpmf_s0,
    vmf_mean,
    vmf_sample,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def sphere_integral(params, n_polar=600, n_azimuth=256):
    """
    Integral of the density over S^2 on a product grid: Gauss-Legendre in the
    cosine to the mean direction, trapezoid in the azimuth. The integrand is
    evaluated at full 3-d points so the code path sees arbitrary x.
    """
    t, wt = np.polynomial.legendre.leggauss(n_polar)
    phi = 2 * np.pi * np.arange(n_azimuth) / n_azimuth
    mu = params.mu
    # orthonormal frame (mu, b1, b2)
    b1 = unit(np.cross(mu, [0.3, -0.5, 0.81]))
    b2 = np.cross(mu, b1)
    s = np.sqrt(1 - t**2)
    X = (t[:, None, None] * mu
         + (s[:, None] * np.cos(phi))[:, :, None] * b1
         + (s[:, None] * np.sin(phi))[:, :, None] * b2).reshape(-1, 3)
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    logw = np.log(np.repeat(wt, n_azimuth)) + math.log(2 * np.pi / n_azimuth)
    return math.exp(logsumexp(vmf_logpdf(X, params) + logw))


class TestParams:
    def test_from_natural(self):
        p = VmfParams.from_natural([3.0, 4.0])
        assert p.kappa == 5.0
        np.testing.assert_allclose(p.mu, [0.6, 0.8])
        np.testing.assert_allclose(p.natural, [3.0, 4.0])

    def test_zero_natural_is_uniform_with_flag(self):
        p = VmfParams.from_natural(np.zeros(4))
        assert p.kappa == 0 and p.arbitrary_mu
        np.testing.assert_array_equal(p.mu, [1, 0, 0, 0])

    @pytest.mark.parametrize("mu,kappa", [([1.0, 1.0], 1.0), ([1.0, 0.0], -1.0), ([], 1.0)])
    def test_rejects_invalid(self, mu, kappa):
        with pytest.raises(ValueError):
            VmfParams(mu, kappa)


class TestDensity:
    def test_uniform_on_two_sphere(self):
        p = VmfParams([0, 0, 1.0], 0.0)
        assert vmf_logpdf(unit([1, 2, 3]), p) == pytest.approx(-math.log(4 * math.pi), abs=1e-14)
        assert -math.log(4 * math.pi) == pytest.approx(-2.531024, abs=1e-6)

    def test_three_dim_closed_form_at_mode(self):
        mu = unit([1, -1, 2])
        p = VmfParams(mu, 2.0)
        expected = math.log(2 / (4 * math.pi * math.sinh(2.0))) + 2
        assert vmf_logpdf(mu, p) == pytest.approx(expected, abs=1e-13)
        assert 2 / (4 * math.pi * math.sinh(2.0)) == pytest.approx(0.0438823, abs=1e-7)

    def test_circle_quadrature_kappa_three(self):
        Z, dth = circle_grid(2048)
        p = VmfParams(unit([0.3, -1.0]), 3.0)
        assert math.exp(logsumexp(vmf_logpdf(Z, p)) + math.log(dth)) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("kappa", [0.0, 1.0, 10.0, 100.0])
    def test_normalized_on_circle(self, kappa):
        Z, dth = circle_grid(4096)
        p = VmfParams(unit([-0.2, 0.7]), kappa)
        assert math.exp(logsumexp(vmf_logpdf(Z, p)) + math.log(dth)) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("kappa", [0.0, 1.0, 10.0, 100.0])
    def test_normalized_on_two_sphere(self, kappa):
        p = VmfParams(unit([0.4, 0.1, -0.9]), kappa)
        assert sphere_integral(p) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("d", [2, 3, 8, 64, 512])
    def test_normalizer_against_scipy(self, d):
        for kappa in [0.0, 0.5, 5.0, 50.0, 500.0]:
            if kappa > 0 and ive(d / 2 - 1, kappa) == 0:
                continue  # the oracle underflows
            p = VmfParams(np.eye(d)[0], kappa)
            assert vmf_logpdf(np.eye(d)[0], p) == pytest.approx(scipy_log_vmf_norm(d, kappa), abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(d=st.integers(2, 40), kappa=st.floats(0.0, 1e4), seed=st.integers(0, 2**32 - 1))
    def test_parametrizations_agree(self, d, kappa, seed):
        rng = np.random.default_rng(seed)
        mu, x = unit(rng.normal(size=d)), unit(rng.normal(size=d))
        p = VmfParams(mu, kappa)
        assert logpdf_natural(x, p.natural) == pytest.approx(vmf_logpdf(x, p), abs=1e-12, rel=1e-14)

    def test_rejects_bad_input(self):
        p = VmfParams([1.0, 0.0, 0.0], 1.0)
        with pytest.raises(ValueError):
            vmf_logpdf([1.0, 0.0], p)
        with pytest.raises(ValueError):
            vmf_logpdf([1.1, 0.0, 0.0], p)
        with pytest.raises(ValueError):
            vmf_logpdf([1.0], VmfParams([1.0], 1.0))


class TestTwoPoint:
    def test_uniform(self):
        assert vmf_logpmf_s0(1.0, VmfParams([1.0], 0.0)) == pytest.approx(math.log(0.5), abs=1e-15)

    def test_values(self):
        p = VmfParams([1.0], 1.0)
        c = math.log(2 * math.cosh(1.0))
        assert vmf_logpmf_s0(1.0, p) == pytest.approx(1 - c, abs=1e-15)
        assert 1 - c == pytest.approx(-0.126928, abs=1e-6)
        assert vmf_logpmf_s0(-1.0, p) == pytest.approx(-1 - c, abs=1e-15)

    @pytest.mark.parametrize("kappa", [0.0, 0.3, 5.0, 400.0])
    def test_masses_sum_to_one(self, kappa):
        for mu in (1.0, -1.0):
            p = VmfParams([mu], kappa)
            assert logsumexp(vmf_logpmf_s0(np.array([1.0, -1.0]), p)) == pytest.approx(0.0, abs=1e-14)
            # the natural-parameter path gives the same masses
            np.testing.assert_allclose(logpdf_natural(np.array([[1.0], [-1.0]]), p.natural),
                                       vmf_logpmf_s0(np.array([1.0, -1.0]), p), atol=1e-14)

    def test_rejects_non_sign(self):
        with pytest.raises(ValueError):
            vmf_logpmf_s0(0.5, VmfParams([1.0], 1.0))


class TestMean:
    def test_uniform(self):
        np.testing.assert_array_equal(vmf_mean(VmfParams([0.0, 1.0, 0.0], 0.0)), 0.0)

    def test_two_point(self):
        assert vmf_mean(VmfParams([1.0], 2.0))[0] == pytest.approx(math.tanh(2.0), abs=1e-15)
        assert math.tanh(2.0) == pytest.approx(0.964028, abs=1e-6)

    def test_three_dim(self):
        mu = unit([1, 2, 2])
        m = vmf_mean(VmfParams(mu, 5.0))
        np.testing.assert_allclose(m, (1 / math.tanh(5) - 0.2) * mu, rtol=1e-13)
        assert 1 / math.tanh(5) - 0.2 == pytest.approx(0.800091, abs=1e-6)

    @pytest.mark.parametrize("d", [2, 5, 64])
    def test_norm_is_ratio(self, d):
        p = VmfParams(np.eye(d)[-1], 7.5)
        assert np.linalg.norm(vmf_mean(p)) == bessel_ratio(d / 2 - 1, 7.5)

    def test_mean_natural_rows(self):
        a = np.array([[0.0, 0.0, 0.0], [0.0, 3.0, 4.0]])
        m = mean_natural(a)
        np.testing.assert_array_equal(m[0], 0.0)
        np.testing.assert_allclose(m[1], vmf_mean(VmfParams.from_natural(a[1])), rtol=1e-15)


def coth_bisect(rho):
    """Concentration with coth(k) - 1/k = rho by plain bisection."""
    lo, hi = 1e-9, 1e6
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 1 / math.tanh(mid) - 1 / mid < rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestFit:
    def test_antipodal_pair(self):
        p = vmf_fit_ml(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
        assert p.kappa == 0 and p.arbitrary_mu

    def test_identical_vectors_capped(self):
        x = unit([1, 2, 3])
        p = vmf_fit_ml(np.tile(x, (5, 1)))
        assert p.kappa == KAPPA_MAX and p.capped
        np.testing.assert_allclose(p.mu, x)

    def test_three_dim_half_resultant(self):
        p = fit_from_resultant([0.5, 0.0, 0.0])
        assert p.kappa == pytest.approx(coth_bisect(0.5), rel=1e-9)
        # 1.796756..., quoted elsewhere rounded as 1.79680
        assert p.kappa == pytest.approx(1.79680, abs=5e-5)
        assert abs(bessel_ratio(0.5, p.kappa) - 0.5) <= 1e-10

    @settings(max_examples=60, deadline=None)
    @given(d=st.integers(1, 600), rho=st.floats(1e-6, 1 - 1e-9))
    def test_solver_hits_target(self, d, rho):
        k = solve_kappa(d, rho)
        a = math.tanh(k) if d == 1 else bessel_ratio(d / 2 - 1, k)
        # targets beyond A(KAPPA_MAX) stop at the cap
        assert abs(a - rho) <= 1e-10 or (k == KAPPA_MAX and a < rho)

    def test_weights(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = vmf_fit_ml(x, weights=[3.0, 1.0])
        q = fit_from_resultant([0.75, 0.25])
        assert p.kappa == q.kappa
        np.testing.assert_array_equal(p.mu, q.mu)

    @pytest.mark.parametrize("x,w", [(np.zeros((0, 3)), None), (np.eye(2), [0.0, 0.0]), (np.eye(2), [1.0, -1.0])])
    def test_errors(self, x, w):
        with pytest.raises(ValueError):
            vmf_fit_ml(x, w)


class TestSampling:
    def test_uniform_statistics(self):
        x = vmf_sample(VmfParams(np.eye(4)[0], 0.0), 100_000, seed=1)
        assert np.linalg.norm(x.mean(axis=0)) <= 0.02
        np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)

    def test_three_dim_moment(self):
        mu = unit([1, 1, 1])
        x = vmf_sample(VmfParams(mu, 10.0), 100_000, seed=2)
        assert abs(np.linalg.norm(x.mean(axis=0)) - (1 / math.tanh(10) - 0.1)) <= 0.01

    def test_deterministic(self):
        p = VmfParams(unit([1, -2, 0.5, 3]), 4.0)
        np.testing.assert_array_equal(vmf_sample(p, 50, seed=7), vmf_sample(p, 50, seed=7))
        assert not np.array_equal(vmf_sample(p, 50, seed=7), vmf_sample(p, 50, seed=8))

    def test_two_point(self):
        x = vmf_sample(VmfParams([-1.0], 1.0), 100_000, seed=3)
        assert set(np.unique(x)) <= {-1.0, 1.0}
        assert x.mean() == pytest.approx(-math.tanh(1.0), abs=0.01)

    def test_zero_count(self):
        assert vmf_sample(VmfParams([1.0, 0.0], 1.0), 0, seed=0).shape == (0, 2)

    def test_rows_with_different_parameters(self):
        rng = np.random.default_rng(4)
        a = np.array([[50.0, 0.0, 0.0], [0.0, 0.0, -50.0]])
        x = sample_natural(np.repeat(a, 5000, axis=0), rng)
        assert x[:5000, 0].mean() > 0.9 and x[5000:, 2].mean() < -0.9

    @pytest.mark.parametrize("d", [2, 8, 64])
    @pytest.mark.parametrize("kappa", [
        5.0, 50.0,
    ])
    def test_fit_round_trip(self, d, kappa, request):
        if d == 64 and kappa == 5.0:
            # With 1e5 draws the direction estimate has angular noise of about
            # sqrt((d-1)/n)/rho ~ 0.04 rad here, so a 0.02 rad bound cannot hold.
            request.applymarker(pytest.mark.xfail(strict=True, reason="angle noise exceeds 0.02 rad at d=64, kappa=5"))
        mu = unit(np.arange(1, d + 1) % 3 - 1.0 + 0.1)
        x = vmf_sample(VmfParams(mu, kappa), 100_000, seed=10 + d)
        p = vmf_fit_ml(x)
        assert p.kappa == pytest.approx(kappa, rel=0.03)
        assert math.acos(min(1.0, float(p.mu @ mu))) < 0.02
