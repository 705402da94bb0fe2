import math
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm
from scipy.stats import poisson

from fockdamp.ensemble import DistributionTimeline
from fockdamp.estimation import (
    FitError,
    FitResult,
    FitWarning,
    _FitData,
    _StageModel,
    _residuals,
    diagonal_law,
    fit_exponential,
    fit_generator,
    fit_poisson,
    fock_lifetimes,
    predict_curves,
    sensitivity_jacobian,
)
from fockdamp.numkernel import CavityParams, GeneratorMatrix, PhotonDistribution, build_generator

KAPPA = 1 / 0.130


def noiseless_ensembles(K, spread=0.02, grid=None, counts=1000):
    D = K.shape[0]
    grid = np.arange(0, 0.0201, 2e-3) if grid is None else grid
    out = {}
    for n0 in range(D):
        P0 = np.full(D, spread)
        P0[n0] += 1 - P0.sum()
        table = np.array([expm(K * t) @ P0 for t in grid])
        out[n0] = DistributionTimeline(grid, table, np.full(grid.size, counts))
    return out


class TestExponential:
    def test_exact_recovery(self):
        t = np.linspace(0, 0.5, 200)
        f = fit_exponential(t, 0.06 + 4.1 * np.exp(-t / 0.13))
        assert abs(f.time_constant - 0.13) < 1e-9
        assert abs(f.offset - 0.06) < 1e-9 and abs(f.amplitude - 4.1) < 1e-9
        assert f.rms_residual < 1e-12
        assert f(0.0) == pytest.approx(4.16)

    def test_constant_flagged(self):
        with pytest.warns(FitWarning):
            f = fit_exponential(np.linspace(0, 1, 20), np.full(20, 2.5))
        assert f.time_constant == math.inf and "time_constant_unidentifiable" in f.flags

    def test_too_few_points(self):
        with pytest.raises(FitError):
            fit_exponential([0, 1, 2], [3, 2, 1])

    @settings(max_examples=30)
    @given(tau=st.floats(0.05, 0.5), off=st.floats(0, 1), amp=st.floats(0.5, 5),
           shift=st.floats(0, 0.3))
    def test_time_shift_invariance(self, tau, off, amp, shift):
        t = np.linspace(0, 0.6, 150)
        y = off + amp * np.exp(-t / tau)
        a, b = fit_exponential(t, y), fit_exponential(t + shift, y)
        assert b.time_constant == pytest.approx(a.time_constant, rel=1e-6)
        assert b.offset == pytest.approx(a.offset, abs=1e-6)
        assert b.amplitude == pytest.approx(a.amplitude * math.exp(shift / tau), rel=1e-6)


class TestPoisson:
    def test_exact_truncated_poisson(self):
        p = poisson.pmf(np.arange(8), 2.0)
        mu, tv = fit_poisson(p / p.sum())
        assert mu == pytest.approx(2.0, abs=1e-10) and tv < 1e-12

    def test_delta_is_far(self):
        mu, tv = fit_poisson(PhotonDistribution.delta(5))
        assert tv > 0.3
        assert np.dot(np.arange(8), poisson.pmf(np.arange(8), mu)) / poisson.cdf(7, mu) == \
            pytest.approx(5.0, abs=1e-9)

    def test_vacuum(self):
        assert fit_poisson(PhotonDistribution.delta(0)) == (0.0, 0.0)


class TestGeneratorFit:
    def test_noiseless_recovery_planted(self, planted_K):
        K = np.asarray(planted_K.rates)
        fit = fit_generator(noiseless_ensembles(K))
        assert np.abs(fit.K_hat.rates - K).max() < 1e-6 * np.abs(K).max()
        assert fit.residual < 1e-10
        for n0, P in fit.initial_dists.items():
            want = np.full(8, 0.02)
            want[n0] += 0.84
            assert np.abs(P.probs - want).max() < 1e-6

    @settings(max_examples=5)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_noiseless_recovery_random(self, seed):
        from conftest import random_generator
        K = random_generator(np.random.default_rng(seed), 4, KAPPA)
        fit = fit_generator(noiseless_ensembles(K, grid=np.arange(0, 0.0401, 2e-3)),
                            fit_window=0.04)
        assert np.abs(fit.K_hat.rates - K).max() < 1e-5 * np.abs(K).max()

    def test_sensitivity_mode_agrees(self):
        K = np.asarray(build_generator(CavityParams(KAPPA, 0.06, n_max=3)).rates)
        ens = noiseless_ensembles(K)
        a = fit_generator(ens, jac="2-point")
        b = fit_generator(ens, jac="sensitivity")
        assert np.abs(a.K_hat.rates - b.K_hat.rates).max() < 1e-6 * KAPPA
        with pytest.raises(ValueError):
            fit_generator(ens, jac="nope")

    def test_unconstrained_recovery(self):
        K = np.asarray(build_generator(CavityParams(KAPPA, 0.06, n_max=3)).rates)
        fit = fit_generator(noiseless_ensembles(K), constrained=False)
        assert not fit.constrained
        assert np.abs(fit.K_hat.rates - K).max() < 1e-5 * KAPPA

    def test_requires_low_ensembles(self):
        K = np.asarray(build_generator(CavityParams(KAPPA, 0.06, n_max=3)).rates)
        ens = noiseless_ensembles(K)
        del ens[1]
        with pytest.raises(FitError):
            fit_generator(ens)


def test_sensitivity_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    size, n0s = 4, [0, 1, 2]
    grid = np.arange(0, 0.0201, 2e-3)
    data = _FitData(n0s, {n: grid for n in n0s},
                    {n: rng.random((grid.size, size)) for n in n0s},
                    {n: rng.random((grid.size, size)) + 0.5 for n in n0s})
    for constrained in (True, False):
        model = _StageModel(size, n0s, constrained)
        x = np.concatenate([rng.random(model.nk) * 10, rng.random(len(model.p_index))])
        J = sensitivity_jacobian(x, model, data)
        h = 1e-6
        fd = np.column_stack([
            (_residuals(x + h * e, model, data) - _residuals(x - h * e, model, data)) / (2 * h)
            for e in np.eye(x.size)])
        assert np.abs(J - fd).max() < 1e-6 * max(1.0, np.abs(fd).max())


def _result(K, initial):
    K = np.asarray(K, float)
    return FitResult(GeneratorMatrix(K), initial, 0.0, np.ones_like(K))


class TestPrediction:
    def test_zero_generator_is_constant(self):
        P = PhotonDistribution.poisson(2.0)
        curves = predict_curves(_result(np.zeros((8, 8)), {3: P}), horizon=0.1)
        assert np.allclose(curves[3].table, P.probs, atol=1e-15)
        assert curves[3].grid[-1] == pytest.approx(0.1)

    def test_planted_generator(self, planted_K):
        K = np.asarray(planted_K.rates)
        curves = predict_curves(_result(K, {5: PhotonDistribution.delta(5)}), grid=[0.0, 0.05, 0.3])
        for t, row in zip(curves[5].grid, curves[5].table):
            assert np.abs(row - expm(K * t)[:, 5]).max() < 1e-12


class TestLifetimes:
    def test_pure_damping(self):
        K = build_generator(CavityParams(KAPPA, 0.0))
        with pytest.warns(FitWarning, match=r"n = \[0\]"):
            life = dict(fock_lifetimes(K))
        assert life[0] == math.inf
        assert life[7] == pytest.approx(0.130 / 7, rel=1e-12)
        assert life[7] == pytest.approx(0.0186, abs=1e-4)
        for n in range(1, 8):
            assert life[n] == pytest.approx(0.130 / n, rel=1e-12)

    def test_thermal_values(self, planted_K):
        life = dict(fock_lifetimes(planted_K))
        assert life[1] == pytest.approx(0.130 / 1.18, rel=1e-12)
        assert life[1] == pytest.approx(0.110, abs=5e-4)
        assert life[0] == pytest.approx(0.130 / 0.06, rel=1e-12)
        assert life[7] == pytest.approx(0.130 / 7.42, rel=1e-12)

    def test_non_negative_diagonal_warns(self):
        with pytest.warns(FitWarning):
            life = fock_lifetimes(np.zeros((3, 3)))
        assert all(v == math.inf for _, v in life)


class TestDiagonalLaw:
    @given(a=st.floats(0.5, 2), b=st.floats(0, 0.5))
    def test_exact_line(self, a, b):
        K = np.zeros((8, 8))
        d = a * np.arange(8) + b
        K[np.diag_indices(8)] = -d * KAPPA
        fit = FitResult(GeneratorMatrix(K, validate=False), {}, 0.0,
                        np.diag(np.linspace(0.01, 0.4, 8)) * KAPPA)
        for weighted in (True, False):
            slope, icpt = diagonal_law(fit, KAPPA, weighted)
            assert slope == pytest.approx(a, abs=1e-10) and icpt == pytest.approx(b, abs=1e-10)

    def test_weights_discount_noisy_points(self):
        K = np.zeros((8, 8))
        d = 1.12 * np.arange(8) + 0.06
        d[7] += 3.0
        K[np.diag_indices(8)] = -d * KAPPA
        se = np.full(8, 0.01)
        se[7] = 100.0
        fit = FitResult(GeneratorMatrix(K, validate=False), {}, 0.0, np.diag(se) * KAPPA)
        slope, icpt = diagonal_law(fit, KAPPA)
        assert slope == pytest.approx(1.12, abs=1e-3) and icpt == pytest.approx(0.06, abs=1e-3)
        assert diagonal_law(fit, KAPPA, weighted=False)[0] > 1.3

    def test_needs_positive_errors(self, planted_K):
        with pytest.raises(FitError):
            diagonal_law(FitResult(planted_K, {}, 0.0, np.zeros((8, 8))), KAPPA)
