"""Tests for the warped Bayesian regression core: evidence, fits, deviations, metrics."""

import math

import numpy as np
import pytest
import scipy.linalg as sla
from scipy.integrate import quad
from scipy.stats import multivariate_normal

from normgauge import (
    BasisConfig,
    Cohort,
    Hyperparams,
    InputError,
    ModelConfig,
    NormativeModel,
    OptimizerSettings,
    RegionModel,
    SchemaError,
    Subject,
    WarpParams,
    deviations,
    explained_variance,
    fit_design,
    fit_metrics,
    fit_normative,
    fit_region,
    load_bundle,
    neg_log_evidence,
    neg_log_evidence_grad,
    predict_region,
    save_bundle,
    standardized_log_loss,
    warp_forward,
    warp_inverse,
    warp_log_jacobian,
)
from normgauge.blr import _EvidenceProblem


def make_cohort(ages, responses, sexes=None, races=None, regions=None):
    n = len(ages)
    sexes = sexes or ["F" if i % 2 == 0 else "M" for i in range(n)]
    races = races or ["W"] * n
    responses = np.asarray(responses, dtype=float)
    if responses.ndim == 1:
        responses = responses[:, None]
    regions = regions or tuple(f"r{k}" for k in range(responses.shape[1]))
    subjects = tuple(
        Subject(id=f"s{i:05d}", age=float(ages[i]), sex=sexes[i], race=races[i])
        for i in range(n)
    )
    return Cohort(subjects=subjects, regions=tuple(regions), responses=responses)


class TestEvidenceValue:
    def test_worked_single_feature_example(self):
        # phi = [[1],[1]], y = [1,3], alpha = beta = 1, identity warp:
        # A = 3, m = 4/3, E(m) = 7/3 - 1/2 ln alpha... collected by hand:
        # NLL = 7/3 + (1/2) ln 3 + ln(2 pi)
        phi = np.array([[1.0], [1.0]])
        y = np.array([1.0, 3.0])
        h = Hyperparams(log_alpha=0.0, log_beta=0.0)
        expected = 7.0 / 3.0 + 0.5 * math.log(3.0) + math.log(2.0 * math.pi)
        assert neg_log_evidence(phi, y, h) == pytest.approx(expected, abs=1e-12)

    def test_identity_warp_matches_closed_form_gaussian(self):
        # with identity warp the evidence is the Gaussian marginal
        # y ~ N(0, phi phi^T / alpha + I / beta), an independent closed form
        rng = np.random.default_rng(12)
        for _ in range(10):
            n, m = 12, 3
            phi = rng.normal(size=(n, m))
            y = rng.normal(size=n)
            h = Hyperparams(log_alpha=rng.uniform(-1, 1), log_beta=rng.uniform(-1, 1))
            cov = phi @ phi.T / h.alpha + np.eye(n) / h.beta
            oracle = -multivariate_normal.logpdf(y, mean=np.zeros(n), cov=cov)
            assert neg_log_evidence(phi, y, h) == pytest.approx(oracle, rel=1e-10)

    def test_warped_matches_quadrature_oracle(self):
        # brute-force integral over the single weight on a 3-point problem
        phi = np.array([[0.5], [1.0], [1.5]])
        y = np.array([0.3, 1.2, 2.0])
        warp = WarpParams(epsilon=0.3, log_delta=-0.2)
        h = Hyperparams(log_alpha=math.log(1.3), log_beta=math.log(2.1), warp=warp)
        z = np.asarray(warp_forward(y, warp))

        def integrand(w):
            prior = math.exp(-0.5 * h.alpha * w * w) * math.sqrt(h.alpha / (2 * math.pi))
            resid = z - phi[:, 0] * w
            lik = math.exp(-0.5 * h.beta * float(resid @ resid)) * (
                h.beta / (2 * math.pi)
            ) ** 1.5
            return prior * lik

        integral, err = quad(integrand, -30.0, 30.0, epsabs=1e-14, epsrel=1e-12)
        log_jac = float(np.sum(np.asarray(warp_log_jacobian(y, warp))))
        oracle = -(math.log(integral) + log_jac)
        assert neg_log_evidence(phi, y, h) == pytest.approx(oracle, rel=1e-4)
        assert err < 1e-10

    def test_warp_jacobian_shifts_evidence(self):
        # identity warp evidence differs from warped evidence by more than the
        # Jacobian alone unless the warp is identity; sanity on the plumbing
        phi = np.array([[1.0], [1.0]])
        y = np.array([1.0, 3.0])
        base = neg_log_evidence(phi, y, Hyperparams())
        warped = neg_log_evidence(
            phi, y, Hyperparams(warp=WarpParams(epsilon=0.2, log_delta=0.1))
        )
        assert warped != pytest.approx(base, abs=1e-6)


class TestEvidenceGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(77)
        n, m = 50, 4
        phi = rng.normal(size=(n, m))
        y = rng.normal(1.0, 0.8, size=n)
        step = 1e-5
        for _ in range(20):
            theta = np.array(
                [
                    rng.uniform(-1.5, 1.5),
                    rng.uniform(-1.5, 1.5),
                    rng.uniform(-0.8, 0.8),
                    rng.uniform(-0.5, 0.5),
                ]
            )
            h = Hyperparams.from_vector(theta)
            grad = neg_log_evidence_grad(phi, y, h)
            fd = np.empty(4)
            for k in range(4):
                hi = theta.copy()
                lo = theta.copy()
                hi[k] += step
                lo[k] -= step
                fd[k] = (
                    neg_log_evidence(phi, y, Hyperparams.from_vector(hi))
                    - neg_log_evidence(phi, y, Hyperparams.from_vector(lo))
                ) / (2 * step)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_posterior_mean_is_ridge_solution(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            n, m = 40, 5
            phi = rng.normal(size=(n, m))
            y = rng.normal(size=n)
            h = Hyperparams(
                log_alpha=rng.uniform(-1, 1),
                log_beta=rng.uniform(-1, 1),
                warp=WarpParams(epsilon=rng.uniform(-0.5, 0.5), log_delta=rng.uniform(-0.3, 0.3)),
            )
            st = _EvidenceProblem(phi, y).state(h)
            ridge = np.linalg.solve(
                phi.T @ phi + (h.alpha / h.beta) * np.eye(m), phi.T @ st.z
            )
            np.testing.assert_allclose(st.m, ridge, atol=1e-10)


class TestFitRegion:
    def test_recovers_noise_precision_on_gaussian_data(self):
        rng = np.random.default_rng(42)
        n = 500
        x = rng.uniform(-1, 1, n)
        y = 2.0 + 0.0 * x + rng.normal(0.0, 0.1, n)
        phi = np.column_stack([np.ones(n), x])
        model = fit_region(phi, y, region="gauss")
        h = model.hyperparams
        assert 0.8 <= h.beta / 100.0 <= 1.25
        assert abs(h.warp.epsilon) < 0.1
        assert model.converged

    def test_gaussian_data_does_not_engage_warp(self):
        rng = np.random.default_rng(8)
        n = 400
        x = rng.uniform(-1, 1, n)
        phi = np.column_stack([np.ones(n), x, x * x])
        y = 1.5 - 0.7 * x + rng.normal(0.0, 0.3, n)
        model = fit_region(phi, y, region="gauss")
        assert abs(model.nll - model.nll_identity) < 1e-3
        assert model.hyperparams.warp.is_identity()

    def test_skewed_data_engages_warp(self):
        rng = np.random.default_rng(7)
        n = 500
        x = rng.uniform(-1, 1, n)
        phi = np.column_stack([np.ones(n), x])
        truth = WarpParams(epsilon=0.5, log_delta=-0.3)
        z_latent = 0.8 + 0.6 * x + rng.normal(0.0, 1.0, n)
        y = np.asarray(warp_inverse(z_latent, truth))
        model = fit_region(phi, y, region="skew")
        h = model.hyperparams
        assert not h.warp.is_identity()
        assert h.warp.epsilon == pytest.approx(truth.epsilon, abs=0.15)
        assert h.warp.log_delta == pytest.approx(truth.log_delta, abs=0.15)
        assert model.nll < model.nll_identity - 10.0

    def test_constant_response_rejected(self):
        phi = np.ones((5, 1))
        with pytest.raises(InputError):
            fit_region(phi, np.full(5, 3.3), region="flat")

    def test_too_few_observations_rejected(self):
        with pytest.raises(InputError):
            fit_region(np.ones((1, 1)), np.array([1.0]), region="tiny")

    def test_nll_path_monotone_nonincreasing(self):
        rng = np.random.default_rng(15)
        for seed in range(3):
            r = np.random.default_rng(seed)
            n = 120
            x = r.uniform(-1, 1, n)
            phi = np.column_stack([np.ones(n), x])
            y = 0.5 + x + r.normal(0, 0.4, n)
            model = fit_region(phi, y, region="p")
            path = np.asarray(model.nll_path)
            assert path.size >= 1
            assert np.all(np.diff(path) <= 1e-9)

    def test_held_out_deviation_calibration(self):
        # fit on draws from a known process, score fresh draws from it
        rng = np.random.default_rng(100)
        n_train, n_test = 800, 4000
        ages = rng.uniform(20, 70, n_train + n_test)
        y = 0.02 * ages + 1.0 + rng.normal(0, 0.25, ages.size)
        cohort = make_cohort(ages, y)
        train = cohort.subset(np.arange(n_train))
        test = cohort.subset(np.arange(n_train, n_train + n_test))
        model = fit_normative(train, ModelConfig())
        dev = deviations(model, test)
        assert abs(float(dev.Z.mean())) < 0.08
        assert 0.85 < float(dev.Z.var()) < 1.15


class TestPredictRegion:
    def worked_model(self):
        # m = 4/3, A = 3, beta = 1, identity warp (the worked 1-feature fit)
        return RegionModel(
            region="r0",
            weights=np.array([4.0 / 3.0]),
            chol_precision=np.array([[math.sqrt(3.0)]]),
            hyperparams=Hyperparams(log_alpha=0.0, log_beta=0.0),
            train_z_mean=2.0,
            train_z_var=1.0,
            n_train=2,
        )

    def test_worked_prediction(self):
        pred = predict_region(self.worked_model(), np.array([[1.0]]))
        assert pred.zhat[0] == pytest.approx(4.0 / 3.0, abs=1e-12)
        assert pred.model_variance[0] == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert pred.noise_variance == pytest.approx(1.0, abs=1e-15)

    def test_zero_row_maps_to_origin(self):
        pred = predict_region(self.worked_model(), np.array([[0.0]]))
        assert pred.zhat[0] == 0.0
        assert pred.model_variance[0] == 0.0

    def test_identity_warp_predicts_in_latent_units(self):
        pred = predict_region(self.worked_model(), np.array([[1.0], [0.5]]))
        np.testing.assert_array_equal(pred.yhat, pred.zhat)

    def test_wrong_column_count_rejected(self):
        with pytest.raises(SchemaError):
            predict_region(self.worked_model(), np.ones((2, 3)))


def pinned_config():
    return ModelConfig(basis=BasisConfig(knot_range=(20.0, 70.0)))


def engineered_model_and_cohort(y_values, beta=1.0, model_var=None):
    """Zero-weight model: zhat = 0, so Z is warp(y) over the predictive sd."""
    y_values = np.asarray(y_values, dtype=float)
    ages = np.linspace(25.0, 65.0, y_values.size)
    cohort = make_cohort(ages, y_values)
    config = pinned_config()
    design = fit_design(cohort, config)
    m_dim = design.values.shape[1]
    if model_var is None:
        precision = 1e16
    else:
        # isotropic A^{-1} with phi^T A^{-1} phi = model_var for row 0
        norm2 = float(design.values[0] @ design.values[0])
        precision = norm2 / model_var
    region = RegionModel(
        region="r0",
        weights=np.zeros(m_dim),
        chol_precision=np.eye(m_dim) * math.sqrt(precision),
        hyperparams=Hyperparams(log_alpha=0.0, log_beta=math.log(beta)),
        train_z_mean=0.0,
        train_z_var=1.0,
        n_train=max(y_values.size, 2),
    )
    model = NormativeModel(
        region_models=(region,), config=config, schema=design.schema
    )
    return model, cohort


class TestDeviations:
    def test_worked_z_score(self):
        # z - zhat = 1 with sigma^2 = 0.16 and sigma*^2 = 0.09 gives Z = 2.0
        model, cohort = engineered_model_and_cohort(
            [1.0], beta=1.0 / 0.16, model_var=0.09
        )
        dev = deviations(model, cohort)
        assert dev.Z[0, 0] == pytest.approx(2.0, abs=1e-12)
        assert dev.E[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_exact_prediction_gives_zero(self):
        model, cohort = engineered_model_and_cohort([0.0, 0.0, 0.0])
        dev = deviations(model, cohort)
        np.testing.assert_allclose(dev.Z, 0.0, atol=1e-15)
        np.testing.assert_allclose(dev.E, 0.0, atol=1e-15)

    def test_region_mismatch_lists_missing(self):
        model, cohort = engineered_model_and_cohort([0.0, 1.0])
        other = Cohort(
            subjects=cohort.subjects,
            regions=("other",),
            responses=cohort.responses.copy(),
        )
        with pytest.raises(SchemaError, match="r0"):
            deviations(model, other)


class TestFitMetrics:
    def test_perfect_prediction_ev_one(self):
        assert explained_variance(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0])) == 1.0

    def test_worked_negative_ev(self):
        # population variances: Var(y - yhat) = 8/9, Var(y) = 2/3 -> EV = -1/3
        ev = explained_variance(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 5.0]))
        assert ev == pytest.approx(-1.0 / 3.0, abs=1e-15)

    def test_constant_response_ev_missing(self):
        assert explained_variance(np.array([2.0, 2.0]), np.array([1.0, 2.0])) is None

    def test_msll_of_trivial_model_is_zero(self):
        z = np.array([0.4, -1.2, 0.7, 2.0])
        mean, var = float(z.mean()), float(z.var())
        out = standardized_log_loss(
            z, np.full(z.size, mean), np.full(z.size, var), mean, var
        )
        assert out == 0.0

    def test_symmetric_z_moments(self):
        # Z column [-1, 0, 1]: skew 0, excess kurtosis (2/3)/(4/9) - 3 = -1.5
        model, cohort = engineered_model_and_cohort([-1.0, 0.0, 1.0])
        metrics = fit_metrics(model, cohort)[0]
        assert metrics.skew == pytest.approx(0.0, abs=1e-12)
        assert metrics.kurtosis == pytest.approx(-1.5, abs=1e-9)

    def test_fitted_model_metrics_reasonable(self):
        rng = np.random.default_rng(3)
        n = 600
        ages = rng.uniform(20, 70, n)
        y = 0.5 + 0.03 * ages + rng.normal(0, 0.2, n)
        cohort = make_cohort(ages, y)
        model = fit_normative(cohort, ModelConfig())
        metrics = fit_metrics(model, cohort)[0]
        assert metrics.explained_variance > 0.7
        assert metrics.msll < -0.5
        assert abs(metrics.skew) < 0.3
        assert abs(metrics.kurtosis) < 0.6


class TestNormativeModel:
    def small_cohort(self, seed=0, n=150, d=3):
        rng = np.random.default_rng(seed)
        ages = rng.uniform(20, 70, n)
        base = 1.0 + 0.02 * ages
        responses = base[:, None] + rng.normal(0, 0.3, (n, d))
        return make_cohort(ages, responses)

    def test_parallel_fit_is_bitwise_identical(self):
        cohort = self.small_cohort()
        m1 = fit_normative(cohort, ModelConfig(), workers=1, seed=5)
        m4 = fit_normative(cohort, ModelConfig(), workers=4, seed=5)
        for r1, r4 in zip(m1.region_models, m4.region_models):
            np.testing.assert_array_equal(r1.weights, r4.weights)
            assert r1.hyperparams == r4.hyperparams
            assert r1.nll == r4.nll

    def test_region_order_independence(self):
        cohort = self.small_cohort()
        perm = [2, 0, 1]
        permuted = Cohort(
            subjects=cohort.subjects,
            regions=tuple(cohort.regions[i] for i in perm),
            responses=cohort.responses[:, perm],
        )
        m1 = fit_normative(cohort, ModelConfig(), seed=5)
        m2 = fit_normative(permuted, ModelConfig(), seed=5)
        by_name = {r.region: r for r in m2.region_models}
        for r1 in m1.region_models:
            r2 = by_name[r1.region]
            np.testing.assert_array_equal(r1.weights, r2.weights)
            assert r1.hyperparams == r2.hyperparams

    def test_bundle_round_trip_bitwise(self, tmp_path):
        cohort = self.small_cohort(seed=2)
        model = fit_normative(cohort, ModelConfig(), seed=9)
        save_bundle(model, tmp_path / "bundle")
        loaded = load_bundle(tmp_path / "bundle")
        for r1, r2 in zip(model.region_models, loaded.region_models):
            np.testing.assert_array_equal(r1.weights, r2.weights)
            np.testing.assert_array_equal(r1.chol_precision, r2.chol_precision)
            assert r1.hyperparams == r2.hyperparams
            assert r1.train_z_mean == r2.train_z_mean
            assert r1.train_z_var == r2.train_z_var
        dev1 = deviations(model, cohort)
        dev2 = deviations(loaded, cohort)
        np.testing.assert_array_equal(dev1.Z, dev2.Z)

    def test_bundle_floats_have_full_precision(self, tmp_path):
        cohort = self.small_cohort(seed=4)
        model = fit_normative(cohort, ModelConfig(), seed=1)
        save_bundle(model, tmp_path / "bundle")
        text = (tmp_path / "bundle" / "regions.json").read_text()
        # 17 significant digits: mantissa with 16 decimal places in e-notation
        import re

        floats = re.findall(r"-?\d\.\d{16}e[+-]\d{2,3}", text)
        assert len(floats) > 10

    def test_provenance_recorded(self, tmp_path):
        cohort = self.small_cohort(seed=6)
        model = fit_normative(cohort, ModelConfig(), seed=33)
        assert model.provenance["seed"] == 33
        assert model.provenance["cohort_hash"] == cohort.content_hash()
        assert model.provenance["n_train"] == cohort.n_subjects
