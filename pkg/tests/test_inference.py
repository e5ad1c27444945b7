from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate, stats

from core.assembler import assemble
from core.config_loader import validate_model_spec
from core.inference import (
    explore,
    explore_theta,
    fit,
    lincomb_marginal,
    resolve_strategy,
    sample_hyperpar,
    sample_posterior,
    starting_point,
)
from core.lgm import InferenceError
from core.priors import log_prior
from tests.conftest import fast_config, simulate_longitudinal, simulate_weibull, surv_spec

CRITERIA_KEYS = {
    "log_mlik_integration",
    "log_mlik_gaussian",
    "log_mlik_approximate",
    "dic",
    "p_d",
    "mean_deviance",
    "deviance_at_mean",
    "waic",
    "p_waic",
    "lppd",
    "criteria_samples",
}


@pytest.fixture(scope="module")
def weibull_model():
    frame = simulate_weibull(np.random.default_rng(7), n=400)
    return assemble(surv_spec(), frame, fast_config())


@pytest.fixture(scope="module")
def weibull_fit(weibull_model):
    return fit(weibull_model, "grid", seed=3, keep_config=True)


def _latent(fit_result, symbol):
    _, index = fit_result.model.lookup(symbol)
    return fit_result.latent_marginals[index].summary


class TestStrategy:
    def test_resolution(self, weibull_model):
        assert resolve_strategy(weibull_model, "auto") == "grid"
        assert resolve_strategy(weibull_model, "eb") == "empirical-bayes"
        with pytest.raises(ValueError, match="Unknown integration strategy"):
            resolve_strategy(weibull_model, "mcmc")

    def test_starting_point_inside_window(self, weibull_model):
        start = starting_point(weibull_model)
        low, high = weibull_model.settings.initial_window
        assert start.shape == (1,)
        assert low <= start[0] <= high

    def test_explore_theta_matches_explore(self, weibull_model):
        grid = explore_theta(weibull_model, "grid")
        assert grid.strategy == "grid"
        assert grid.points.shape[0] > 1
        np.testing.assert_allclose(grid.mode, explore(weibull_model, "grid")[0].mode)
        assert explore_theta(weibull_model, "eb").points.shape[0] == 1


class TestFit:
    def test_recovers_simulation_parameters(self, weibull_fit):
        assert _latent(weibull_fit, "x")["mean"] == pytest.approx(0.8, abs=0.25)
        assert _latent(weibull_fit, "Intercept")["mean"] == pytest.approx(-1.0, abs=0.4)
        _, shape = weibull_fit.model.lookup("Weibull (shape)")
        assert weibull_fit.hyper_marginals[shape].summary["mean"] == pytest.approx(1.5, abs=0.25)

    def test_theta_posterior(self, weibull_fit):
        tp = weibull_fit.theta_posterior
        assert tp.strategy == "grid"
        assert tp.points.shape[0] >= 5
        assert tp.weights.sum() == pytest.approx(1.0)
        assert len(weibull_fit.approxs) == tp.points.shape[0]

    def test_quantiles_are_ordered(self, weibull_fit):
        for marginal in [*weibull_fit.latent_marginals, *weibull_fit.hyper_marginals]:
            summary = marginal.summary
            assert summary["0.025quant"] < summary["0.5quant"] < summary["0.975quant"]

    def test_criteria(self, weibull_fit):
        criteria = weibull_fit.criteria
        assert set(criteria) == CRITERIA_KEYS
        assert criteria["log_mlik_approximate"] is False
        assert criteria["criteria_samples"] == 200
        assert 1.0 < criteria["p_d"] < 6.0
        assert criteria["log_mlik_integration"] == pytest.approx(criteria["log_mlik_gaussian"], abs=0.5)
        assert math.isfinite(criteria["waic"])

    def test_empirical_bayes_agrees_with_grid(self, weibull_model, weibull_fit):
        eb = fit(weibull_model, "eb", criteria=False)
        assert eb.theta_posterior.strategy == "empirical-bayes"
        assert eb.theta_posterior.points.shape == (1, 1)
        assert _latent(eb, "x")["mean"] == pytest.approx(_latent(weibull_fit, "x")["mean"], abs=0.02)
        assert any("empirical Bayes" in message for message in eb.warnings)
        assert set(eb.criteria) == {"log_mlik_integration", "log_mlik_gaussian", "log_mlik_approximate"}
        assert eb.criteria["log_mlik_approximate"] is True

    def test_seed_is_reproducible(self, weibull_model):
        first = fit(weibull_model, "eb", seed=11)
        second = fit(weibull_model, "eb", seed=11)
        assert first.criteria["dic"] == second.criteria["dic"]

    def test_model_without_hyperparameters(self, rng):
        frame = simulate_weibull(rng, shape=1.0)
        result = fit(assemble(surv_spec(baseline="exponential"), frame, fast_config()), criteria=False)
        assert result.theta_posterior.dim == 0
        assert result.hyper_marginals == []
        assert _latent(result, "x")["mean"] == pytest.approx(0.8, abs=0.5)


class TestEvidence:
    def test_grid_evidence_matches_quadrature(self, rng):
        frame = simulate_longitudinal(rng, n_subjects=30, visits=3)
        spec = validate_model_spec(
            {
                "spec_version": 1,
                "longitudinal": [{"data": "d", "response": "y", "id": "id", "covariates": ["time"]}],
            }
        )
        model = assemble(spec, frame, fast_config())
        result = fit(model, "grid", criteria=False)

        design = np.column_stack([np.ones(len(frame)), frame["time"].to_numpy()])
        y = frame["y"].to_numpy()
        prior = model.hypers[0].prior
        peak = result.theta_posterior.mode_log_density

        def integrand(log_tau: float) -> float:
            covariance = 100.0 * design @ design.T + np.eye(y.shape[0]) / math.exp(log_tau)
            value = stats.multivariate_normal(np.zeros(y.shape[0]), covariance).logpdf(y)
            return math.exp(value + log_prior(prior, log_tau) - peak)

        mode = float(result.theta_posterior.mode[0])
        mass, _ = integrate.quad(integrand, mode - 1.5, mode + 1.5, points=[mode], limit=200)
        assert result.criteria["log_mlik_integration"] == pytest.approx(peak + math.log(mass), abs=0.05)


class TestSampling:
    def test_joint_samples(self, weibull_model, weibull_fit):
        tp = weibull_fit.theta_posterior
        samples = sample_posterior(weibull_model, tp, weibull_fit.approxs, 500, seed=1)
        assert samples.latent.shape == (500, weibull_model.n_latent)
        assert samples.theta.shape == (500, 1)
        _, index = weibull_model.lookup("x")
        assert np.mean(samples.latent[:, index]) == pytest.approx(_latent(weibull_fit, "x")["mean"], abs=0.03)
        again = sample_posterior(weibull_model, tp, weibull_fit.approxs, 500, seed=1)
        np.testing.assert_array_equal(samples.latent, again.latent)

    def test_sampling_needs_factors(self, weibull_model):
        tp, approxs = explore(weibull_model, "eb")
        with pytest.raises(InferenceError, match="keep_config"):
            sample_posterior(weibull_model, tp, approxs, 10)
        assert sample_posterior(weibull_model, tp, approxs, 10, recompute=True).n == 10
        with pytest.raises(ValueError, match=">= 0"):
            sample_posterior(weibull_model, tp, approxs, -1)

    def test_hyperparameter_samples(self, weibull_fit):
        draws = sample_hyperpar(weibull_fit.theta_posterior, 2000, seed=2)
        assert draws.shape == (2000, 1)
        internal = weibull_fit.hyper_marginals_internal[0].summary
        assert np.mean(draws[:, 0]) == pytest.approx(internal["mean"], abs=0.5 * internal["sd"])


class TestLinearCombinations:
    def test_symbol_weights(self, weibull_model, weibull_fit):
        tp = weibull_fit.theta_posterior
        combined = lincomb_marginal(weibull_model, tp, weibull_fit.approxs, {"Intercept": 1.0, "x": 1.0})
        expected = _latent(weibull_fit, "Intercept")["mean"] + _latent(weibull_fit, "x")["mean"]
        assert combined.summary["mean"] == pytest.approx(expected, abs=1e-6)
        assert combined.summary["sd"] > 0

    def test_invalid_weights(self, weibull_model, weibull_fit):
        tp = weibull_fit.theta_posterior
        with pytest.raises(ValueError, match="hyperparameter"):
            lincomb_marginal(weibull_model, tp, weibull_fit.approxs, {"Weibull (shape)": 1.0})
        with pytest.raises(ValueError, match="latent field has 2"):
            lincomb_marginal(weibull_model, tp, weibull_fit.approxs, np.ones(3))
