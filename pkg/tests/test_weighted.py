import json
import numpy as np
import numpy.testing as npt
import pytest
import scipy.stats

import coxsub.sampling
from coxsub import (
    Cohort,
    EstimationError,
    SamplingMethod,
    SingularHessianError,
    SolverOptions,
    Subsample,
    breslow,
    confidence_intervals,
    full_data_sandwich,
    log_partial_likelihood,
    newton_solve,
    normal_quantile,
    run_algorithm1,
    run_report,
    sandwich_variance,
    score_and_hessian,
    sort_cohort,
    uniform_probs,
    weighted_breslow,
    weighted_log_likelihood,
    weighted_newton,
    weighted_risk_sums,
    weighted_score_hessian,
)
from coxsub.sampling import draw_subsample
from coxsub.simulate import BETA0, Baseline, make_cohort
from conftest import random_cohort

import oracles


def identity_subsample(cohort):
    n = cohort.n
    return Subsample(
        indices=np.arange(n, dtype=np.intp),
        probs_at_draw=np.full(n, 1.0 / n),
        r=n,
        source_n=n,
    )


def random_subsample(cohort, r, rng):
    idx = rng.integers(0, cohort.n, size=r).astype(np.intp)
    return Subsample(
        indices=idx, probs_at_draw=np.full(r, 1.0 / cohort.n), r=r, source_n=cohort.n
    )


class TestWeightedRiskSums:
    def test_identity_collapse_exact(self, rng):
        from coxsub import risk_set_sums

        cohort = random_cohort(rng, n=30, p=2)
        sc = sort_cohort(cohort)
        beta = rng.standard_normal(2) * 0.5
        sub = identity_subsample(cohort)
        ws = weighted_risk_sums(sub, sc, beta)
        fs = risk_set_sums(sc, beta)
        npt.assert_array_equal(ws.event_times, fs.event_times)
        assert ws.shift == fs.shift
        npt.assert_allclose(ws.s0, fs.s0, rtol=1e-14)
        npt.assert_allclose(ws.s1, fs.s1, rtol=1e-14, atol=1e-16)
        npt.assert_allclose(ws.s2, fs.s2, rtol=1e-14, atol=1e-16)

    def test_single_uncensored_draw(self, rng):
        cohort = Cohort(np.array([[1.0, 2.0], [3.0, 4.0]]), [1.0, 2.0], [1, 0])
        sc = sort_cohort(cohort)
        sub = Subsample(np.array([0], dtype=np.intp), np.array([0.5]), 1, 2)
        ws = weighted_risk_sums(sub, sc, rng.standard_normal(2))
        npt.assert_allclose(ws.zbar[0], [1.0, 2.0])

    def test_matches_double_loop(self, rng):
        cohort = random_cohort(rng, n=100, p=2)
        sc = sort_cohort(cohort)
        beta = rng.standard_normal(2) * 0.4
        sub = random_subsample(cohort, 20, rng)
        if cohort.status[sub.indices].sum() == 0:
            pytest.skip("no events drawn")
        ws = weighted_risk_sums(sub, sc, beta)
        ev, s0, s1, s2 = oracles.naive_weighted_sums(
            cohort.covariates[sub.indices],
            cohort.time[sub.indices],
            cohort.status[sub.indices],
            sub.probs_at_draw,
            cohort.n,
            beta,
        )
        scale = np.exp(ws.shift)
        npt.assert_array_equal(ws.event_times, ev)
        npt.assert_allclose(ws.s0 * scale, s0, rtol=1e-12)
        npt.assert_allclose(ws.s1 * scale, s1, rtol=1e-12, atol=1e-14)
        npt.assert_allclose(ws.s2 * scale, s2, rtol=1e-12, atol=1e-14)

    def test_no_events_errors(self, rng):
        cohort = random_cohort(rng, n=20, p=2)
        cens = np.flatnonzero(cohort.status == 0)
        sub = Subsample(cens[:3].astype(np.intp), np.full(3, 1 / 20), 3, 20)
        with pytest.raises(EstimationError, match="no events"):
            weighted_risk_sums(sub, sort_cohort(cohort), np.zeros(2))


class TestWeightedScore:
    def test_identity_collapse(self, rng):
        cohort = random_cohort(rng, n=40, p=3)
        sc = sort_cohort(cohort)
        beta = rng.standard_normal(3) * 0.3
        score, hessian = score_and_hessian(sc, beta)
        wscore, whessian = weighted_score_hessian(identity_subsample(cohort), sc, beta)
        npt.assert_allclose(wscore, score, atol=1e-15)
        npt.assert_allclose(whessian, hessian, atol=1e-15)
        ll = log_partial_likelihood(sc, beta)
        wll = weighted_log_likelihood(identity_subsample(cohort), sc, beta)
        npt.assert_allclose(wll, ll, atol=1e-12)

    def test_matches_loop_oracle(self, rng):
        cohort = random_cohort(rng, n=60, p=2)
        sc = sort_cohort(cohort)
        beta = rng.standard_normal(2) * 0.4
        plan = uniform_probs(sc)
        sub = draw_subsample(plan, 25, np.random.default_rng(5))
        score, _ = weighted_score_hessian(sub, sc, beta)
        expected = oracles.naive_weighted_score(
            cohort.covariates[sub.indices],
            cohort.time[sub.indices],
            cohort.status[sub.indices],
            sub.probs_at_draw,
            cohort.n,
            beta,
        )
        npt.assert_allclose(score, expected, rtol=1e-12, atol=1e-15)

    def test_score_matches_finite_difference_of_loglik(self, rng):
        cohort = random_cohort(rng, n=80, p=2)
        sc = sort_cohort(cohort)
        sub = draw_subsample(uniform_probs(sc), 30, np.random.default_rng(2))
        beta = rng.standard_normal(2) * 0.4
        score, _ = weighted_score_hessian(sub, sc, beta)
        step = 1e-5
        for j in range(2):
            e = np.zeros(2)
            e[j] = step
            fd = (
                weighted_log_likelihood(sub, sc, beta + e)
                - weighted_log_likelihood(sub, sc, beta - e)
            ) / (2 * step)
            assert abs(fd - score[j]) <= 1e-6 * max(abs(score[j]), 1e-3)

    def test_single_uncensored_draw_score_zero(self, rng):
        cohort = Cohort(np.array([[1.0, 2.0], [0.5, 1.0]]), [1.0, 2.0], [1, 1])
        sc = sort_cohort(cohort)
        sub = Subsample(np.array([0], dtype=np.intp), np.array([0.5]), 1, 2)
        for _ in range(3):
            score, _ = weighted_score_hessian(sub, sc, rng.standard_normal(2))
            npt.assert_allclose(score, 0.0, atol=1e-16)


class TestWeightedNewton:
    def test_identity_reproduces_full_fit(self, rng):
        cohort = random_cohort(rng, n=50, p=2)
        sc = sort_cohort(cohort)
        full = newton_solve(sc)
        wfit = weighted_newton(identity_subsample(cohort), sc)
        npt.assert_allclose(wfit.beta, full.beta, atol=1e-8)

    def test_constant_covariate_singular(self):
        z = np.column_stack([np.ones(8), np.arange(8.0)])
        cohort = Cohort(z, np.arange(1.0, 9.0), np.array([1, 1, 1, 1, 1, 1, 1, 0]))
        sc = sort_cohort(cohort)
        sub = identity_subsample(cohort)
        with pytest.raises(SingularHessianError, match="Hessian singular"):
            weighted_newton(sub, sc)

    def test_root_invariant_to_common_probability_scale(self, rng):
        cohort = random_cohort(rng, n=60, p=2)
        sc = sort_cohort(cohort)
        sub = draw_subsample(uniform_probs(sc), 30, np.random.default_rng(3))
        opts = SolverOptions(score_tol=1e-12)
        fit = weighted_newton(sub, sc, options=opts)
        scaled = Subsample(sub.indices, sub.probs_at_draw * 3.7, sub.r, sub.source_n)
        fit2 = weighted_newton(scaled, sc, options=opts)
        npt.assert_allclose(fit.beta, fit2.beta, atol=1e-8)
        # the score itself scales by the inverse constant
        s1, _ = weighted_score_hessian(sub, sc, fit.beta + 0.1)
        s2, _ = weighted_score_hessian(scaled, sc, fit.beta + 0.1)
        npt.assert_allclose(s2 * 3.7, s1, rtol=1e-12)


class TestSandwich:
    def test_sigma_symmetric_psd(self, rng):
        for seed in range(5):
            cohort = random_cohort(np.random.default_rng(seed), n=120, p=2, censoring=0.3)
            sc = sort_cohort(cohort)
            sub = draw_subsample(uniform_probs(sc), 60, np.random.default_rng(seed + 50))
            try:
                fit = weighted_newton(sub, sc)
            except EstimationError:
                continue
            sigma, v = sandwich_variance(sub, sc, fit.beta, fit.h_tilde)
            npt.assert_allclose(sigma, sigma.T)
            assert np.linalg.eigvalsh(sigma).min() > -1e-14
            assert np.linalg.eigvalsh(v).min() > -1e-14

    def test_weighted_residual_sum_equals_score(self, rng):
        # the u-weighted residuals must add up to the weighted score
        from coxsub.weighted import _WeightedDesign, _draw_residuals

        cohort = random_cohort(rng, n=80, p=2)
        sc = sort_cohort(cohort)
        sub = draw_subsample(uniform_probs(sc), 40, np.random.default_rng(8))
        beta = rng.standard_normal(2) * 0.3
        design = _WeightedDesign(sub, sc)
        psi = _draw_residuals(design, beta)
        score, _ = weighted_score_hessian(sub, sc, beta)
        npt.assert_allclose(design.u @ psi, score, atol=1e-14)

    def test_full_data_sandwich_tracks_information(self, rng):
        rng = np.random.Generator(np.random.PCG64(17))
        cohort = make_cohort(5000, BETA0, Baseline.CONSTANT, 25.48, rng)
        sc = sort_cohort(cohort)
        fit = newton_solve(sc)
        _, se = full_data_sandwich(sc, fit.beta, fit.hessian)
        se_info = np.sqrt(np.diag(np.linalg.inv(fit.hessian)) / cohort.n)
        ratio = se / se_info
        assert np.all((ratio > 0.8) & (ratio < 1.25))


class TestWeightedBreslow:
    def test_identity_collapse_exact(self, rng):
        cohort = random_cohort(rng, n=40, p=2)
        sc = sort_cohort(cohort)
        beta = rng.standard_normal(2) * 0.4
        full = breslow(sc, beta)
        weighted = weighted_breslow(identity_subsample(cohort), sc, beta)
        npt.assert_array_equal(weighted.times, full.times)
        npt.assert_allclose(weighted.increments, full.increments, rtol=1e-15)

    def test_matches_direct_ratio(self, rng):
        cohort = random_cohort(rng, n=60, p=2)
        sc = sort_cohort(cohort)
        beta = rng.standard_normal(2) * 0.3
        sub = draw_subsample(uniform_probs(sc), 25, np.random.default_rng(4))
        got = weighted_breslow(sub, sc, beta)
        ev, inc = oracles.naive_weighted_breslow(
            cohort.covariates[sub.indices],
            cohort.time[sub.indices],
            cohort.status[sub.indices],
            sub.probs_at_draw,
            beta,
        )
        npt.assert_array_equal(got.times, ev)
        npt.assert_allclose(got.increments, inc, rtol=1e-12)

    def test_step_function_properties(self, rng):
        cohort = random_cohort(rng, n=50, p=2)
        sc = sort_cohort(cohort)
        sub = draw_subsample(uniform_probs(sc), 30, np.random.default_rng(9))
        baseline = weighted_breslow(sub, sc, np.zeros(2))
        assert baseline.evaluate(0.0) == 0.0
        assert np.all(baseline.increments > 0)
        assert np.all(np.diff(baseline.cumulative) > 0) or baseline.times.size == 1

    def test_variance_components(self, rng):
        cohort = random_cohort(rng, n=200, p=2, censoring=0.3)
        sc = sort_cohort(cohort)
        fit_full = newton_solve(sc)
        sub = draw_subsample(uniform_probs(sc), 80, np.random.default_rng(10))
        wfit = weighted_newton(sub, sc, beta_init=fit_full.beta)
        baseline = weighted_breslow(sub, sc, wfit.beta, with_variance=True)
        lam = baseline.lambda_variance
        assert lam is not None
        grid = np.quantile(cohort.time, [0.1, 0.3, 0.5, 0.7, 0.9])
        psi1 = [lam.psi_term1(t) for t in grid]
        assert all(b >= a for a, b in zip(psi1, psi1[1:]))
        assert lam.psi_term1(0.0) == 0.0
        npt.assert_array_equal(lam.gamma(0.0), 0.0)
        for t in grid:
            assert np.isfinite(lam.variance(t))
            assert lam.psi(t) >= 0

    def test_variance_reuses_supplied_pieces(self, rng):
        cohort = random_cohort(rng, n=100, p=2, censoring=0.3)
        sc = sort_cohort(cohort)
        sub = draw_subsample(uniform_probs(sc), 50, np.random.default_rng(11))
        fit = weighted_newton(sub, sc)
        sigma, _ = sandwich_variance(sub, sc, fit.beta, fit.h_tilde)
        a = weighted_breslow(sub, sc, fit.beta, with_variance=True)
        b = weighted_breslow(sub, sc, fit.beta, with_variance=True,
                             h_tilde=fit.h_tilde, sigma=sigma)
        t = float(np.median(cohort.time))
        npt.assert_allclose(a.lambda_variance.variance(t), b.lambda_variance.variance(t),
                            rtol=1e-12)


class TestConfidenceIntervals:
    def test_known_halfwidth(self):
        fit = _fit_with_sigma(np.array([1.0, -1.0]), np.diag([0.01, 0.01]))
        lower, upper = confidence_intervals(fit, 0.95)
        npt.assert_allclose(upper - fit.beta, 0.1959964, atol=1e-6)
        npt.assert_allclose(fit.beta - lower, 0.1959964, atol=1e-6)

    def test_tiny_level_degenerates(self):
        fit = _fit_with_sigma(np.array([2.0]), np.array([[1.0]]))
        lower, upper = confidence_intervals(fit, 1e-12)
        npt.assert_allclose(lower, 2.0, atol=1e-10)
        npt.assert_allclose(upper, 2.0, atol=1e-10)

    @pytest.mark.parametrize("level", [0.0, 1.0, -0.1, 1.5])
    def test_invalid_level_rejected(self, level):
        fit = _fit_with_sigma(np.array([0.0]), np.array([[1.0]]))
        with pytest.raises(ValueError):
            confidence_intervals(fit, level)

    def test_quantile_matches_scipy(self):
        # 1e-8 contract everywhere; much tighter away from the representation
        # limit of 1 - q near one
        for q in np.concatenate([
            np.linspace(1e-9, 1 - 1e-9, 41), [0.5, 0.975, 0.995, 1e-12, 1 - 1e-12]
        ]):
            expected = scipy.stats.norm.ppf(q)
            tol = 1e-8 if q > 1 - 1e-6 else 1e-12 * max(1, abs(expected))
            assert abs(normal_quantile(float(q)) - expected) <= tol

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.5, 2.0])
    def test_quantile_domain(self, q):
        with pytest.raises(ValueError):
            normal_quantile(q)


def _fit_with_sigma(beta, sigma):
    from coxsub.weighted import WeightedFit

    return WeightedFit(
        beta=beta, h_tilde=np.eye(len(beta)), score_norm=0.0,
        iterations=1, converged=True, sigma=sigma,
    )


class TestRunAlgorithm1:
    def test_uniform_skips_influence_scores(self, rng, monkeypatch):
        cohort = random_cohort(rng, n=200, p=2, censoring=0.3)
        sc = sort_cohort(cohort)

        def boom(*args, **kwargs):
            raise AssertionError("influence scores computed for the uniform plan")

        monkeypatch.setattr(coxsub.sampling, "_q_internals", boom)
        fit, _ = run_algorithm1(sc, 40, "Uniform", np.random.default_rng(0))
        assert fit.converged and fit.pilot_beta is not None

    def test_deterministic_given_seed(self, rng):
        cohort = random_cohort(rng, n=300, p=2, censoring=0.3)
        sc = sort_cohort(cohort)
        runs = []
        for _ in range(2):
            fit, baseline = run_algorithm1(sc, 50, SamplingMethod.FULL_OPT,
                                           np.random.Generator(np.random.PCG64(1234)))
            runs.append(json.dumps(run_report(fit, baseline, "FullOpt", 50, seed=1234)))
        assert runs[0] == runs[1]

    def test_stage_label_on_failure(self):
        cohort = Cohort(np.ones((20, 1)), np.arange(1.0, 21.0), np.zeros(20, dtype=int))
        sc = sort_cohort(cohort)
        with pytest.raises(EstimationError) as err:
            run_algorithm1(sc, 10, "Uniform", np.random.default_rng(0))
        assert err.value.stage == "pilot"
        assert "[pilot]" in str(err.value)

    def test_report_fields(self, rng):
        cohort = random_cohort(rng, n=250, p=2, censoring=0.3)
        sc = sort_cohort(cohort)
        fit, baseline = run_algorithm1(sc, 40, "CenOpt", np.random.default_rng(5))
        doc = run_report(fit, baseline, "CenOpt", 40, seed=5)
        assert set(doc) == {
            "beta", "sigma", "se", "ci_lower", "ci_upper", "method", "r",
            "seed", "pilot_beta", "breslow",
        }
        assert doc["method"] == "CenOpt"
        assert set(doc["breslow"]) == {"times", "cumulative"}
        json.dumps(doc)


class TestStandardizedDeviationsNormality:
    def test_skew_and_kurtosis_bounds(self):
        rng = np.random.Generator(np.random.PCG64(2024))
        cohort = make_cohort(20_000, BETA0, Baseline.CONSTANT, 25.48, rng)
        sc = sort_cohort(cohort)
        full = newton_solve(sc)
        m = 1000
        standardized = np.empty((m, 6))
        for i in range(m):
            g = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                entropy=777, spawn_key=(i,))))
            fit, _ = run_algorithm1(sc, 500, "FullOpt", g)
            vals, vecs = np.linalg.eigh(fit.sigma)
            root_inv = vecs @ np.diag(vals**-0.5) @ vecs.T
            standardized[i] = root_inv @ (fit.beta - full.beta)
        skew = scipy.stats.skew(standardized, axis=0)
        kurt = scipy.stats.kurtosis(standardized, axis=0)
        assert np.all(np.abs(skew) < 0.25)
        assert np.all(np.abs(kurt) < 0.5)
