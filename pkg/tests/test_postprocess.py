from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from core.assembler import assemble
from core.config_loader import validate_model_spec
from core.inference import fit
from core.models import Transform
from core.postprocess import (
    baseline_curve,
    cif,
    cure_fraction,
    display_name,
    gumbel_convert,
    hazard_eval,
    hazard_ratios,
    prior_vs_posterior,
    sample_hyperpar,
    summarise,
    tmarginal,
    transition_probs,
    zmarginal,
)
from tests.conftest import fast_config, simulate_longitudinal, simulate_weibull, surv_spec


def _causes(n_causes: int, seed: int = 5) -> tuple[pd.DataFrame, dict]:
    rng = np.random.default_rng(seed)
    frame = simulate_weibull(rng, n=300)
    frame["cause"] = np.where(frame["delta"] == 1, rng.integers(1, n_causes + 1, len(frame)), 0)
    survival = [
        {"data": "d", "time": "time", "event": {"column": "cause", "equals": k}, "covariates": ["x"]}
        for k in range(1, n_causes + 1)
    ]
    return frame, validate_model_spec({"spec_version": 1, "name": f"causes{n_causes}", "survival": survival})


@pytest.fixture(scope="module")
def weibull_result():
    frame = simulate_weibull(np.random.default_rng(9), n=300)
    return fit(assemble(surv_spec(), frame, fast_config()), "grid", seed=1)


@pytest.fixture(scope="module")
def rw_result():
    frame = simulate_weibull(np.random.default_rng(9), n=300)
    return fit(assemble(surv_spec(baseline="rw1", n_cutpoints=6), frame, fast_config()), "eb", criteria=False)


@pytest.fixture(scope="module")
def competing_result():
    frame, spec = _causes(2)
    return fit(assemble(spec, frame, fast_config()), "eb", criteria=False)


@pytest.fixture(scope="module")
def illness_death_result():
    frame, spec = _causes(3)
    return fit(assemble(spec, frame, fast_config()), "eb", criteria=False)


class TestSummaries:
    def test_row_layout(self, weibull_result):
        table = summarise(weibull_result)
        assert list(table.groups) == ["S1"]
        assert [row.name for row in table.groups["S1"]] == ["Intercept", "x", "Weibull (shape)", "Weibull (scale)"]
        assert "criteria_samples" not in table.criteria
        assert "dic" in table.criteria

    def test_hazard_ratios(self, weibull_result):
        plain = summarise(weibull_result).row("x")
        ratio = summarise(weibull_result, hr=True).row("x")
        assert ratio.q50 == pytest.approx(np.exp(plain.q50))
        assert ratio.q025 == pytest.approx(np.exp(plain.q025))
        intercept = summarise(weibull_result).row("Intercept")
        assert summarise(weibull_result, hr=True).row("Intercept").mean == pytest.approx(intercept.mean)
        assert hazard_ratios(weibull_result).row("x").q50 == pytest.approx(np.exp(plain.q50), rel=0.02)

    def test_weibull_scale_row(self, weibull_result):
        table = summarise(weibull_result)
        assert table.row("Weibull (scale)").q50 == pytest.approx(np.exp(table.row("Intercept").q50))

    def test_display_name(self, weibull_result, competing_result):
        assert display_name(weibull_result.model, "x_S1") == "x"
        assert display_name(competing_result.model, "x_S1") == "x_S1"

    def test_variance_and_sd_reporting(self):
        frame = simulate_longitudinal(np.random.default_rng(4), n_subjects=50, noise_sd=0.3)
        spec = validate_model_spec(
            {
                "spec_version": 1,
                "longitudinal": [
                    {"data": "d", "response": "y", "id": "id", "covariates": ["time"],
                     "random_effects": ["Intercept", "time"]}
                ],
            }
        )
        result = fit(assemble(spec, frame, fast_config()), "eb", criteria=False)
        variance = summarise(result)
        assert variance.row("Res. err. (variance)").q50 == pytest.approx(0.09, abs=0.05)
        assert variance.row("IDIntercept:IDtime").name == "IDIntercept:IDtime"
        sd = summarise(result, sdcor=True)
        assert sd.row("Res. err. (sd)").q50 == pytest.approx(0.3, abs=0.08)
        assert -1.0 <= sd.row("IDIntercept:IDtime").q50 <= 1.0

    def test_marginal_helpers(self, weibull_result):
        marginal = weibull_result.latent_marginals[1]
        summary = zmarginal(marginal)
        assert "mode" not in summary
        assert summary["mean"] == pytest.approx(marginal.summary["mean"], abs=1e-3)
        with pytest.raises(ValueError, match="Unknown transform"):
            tmarginal(marginal, Transform("square"))


class TestGumbel:
    def test_conversion(self, weibull_result):
        table, marginals = gumbel_convert(weibull_result)
        summary = summarise(weibull_result)
        assert table.row("x").mean == pytest.approx(-summary.row("x").mean)
        assert table.row("x").q025 == pytest.approx(-summary.row("x").q975)
        assert table.row("Gumbel scale").q50 * summary.row("Weibull (shape)").q50 == pytest.approx(1.0)
        assert set(marginals) == {"Intercept", "x", "Gumbel scale"}

    def test_needs_parametric_weibull(self, rw_result):
        with pytest.raises(ValueError, match="non-augmented Weibull"):
            gumbel_convert(rw_result)


class TestCurves:
    def test_baseline_curve(self, rw_result):
        curves = baseline_curve(rw_result)
        table = curves["S1"]
        assert list(table.columns) == ["time", "lower", "median", "upper"]
        assert len(table) == 7
        assert table["time"].iloc[0] == 0.0
        assert np.all(table["lower"] > 0)
        assert np.all(table["lower"] <= table["median"]) and np.all(table["median"] <= table["upper"])
        logged = baseline_curve(rw_result, log10=True)["S1"]
        np.testing.assert_allclose(logged["median"], np.log10(table["median"]))

    def test_baseline_curve_needs_random_walk(self, weibull_result):
        with pytest.raises(ValueError, match="rw1/rw2 baseline"):
            baseline_curve(weibull_result)

    def test_hazard_eval(self, weibull_result):
        times = np.array([0.5, 1.0, 2.0])
        values = hazard_eval(weibull_result, "S1", {"x": 1.0}, times)
        means = [m.summary["mean"] for m in weibull_result.latent_marginals]
        alpha = weibull_result.hyper_marginals[0].summary["mean"]
        expected = alpha * np.exp(means[0] + means[1]) * times ** (alpha - 1.0)
        np.testing.assert_allclose(values, expected)
        with pytest.raises(ValueError, match="does not resolve"):
            hazard_eval(weibull_result, "S1", {}, times)


class TestCompetingRisks:
    def test_exact_cif_is_coherent(self, competing_result):
        table = cif(competing_result, {"x": 0.0}, np.linspace(0.0, 3.0, 13))
        assert list(table.columns) == ["time", "cif_S1", "cif_S2", "survival"]
        total = table["cif_S1"] + table["cif_S2"] + table["survival"]
        np.testing.assert_allclose(total, 1.0, atol=1e-6)
        assert np.all(np.diff(table["cif_S1"]) >= 0)
        assert table["survival"].iloc[0] == 1.0

    def test_riemann_is_close_to_exact(self, competing_result):
        times = [0.5, 1.0, 2.0]
        exact = cif(competing_result, {"x": 0.0}, times, step=0.001)
        riemann = cif(competing_result, {"x": 0.0}, times, step=0.001, method="riemann")
        np.testing.assert_allclose(riemann["cif_S1"], exact["cif_S1"], atol=5e-3)

    def test_bands(self, competing_result):
        table = cif(competing_result, {"x": 0.0}, [1.0, 2.0], samples=100, seed=3)
        assert np.all(table["cif_S1_lower"] <= table["cif_S1"] + 1e-9)
        assert np.all(table["cif_S1"] <= table["cif_S1_upper"] + 1e-9)

    def test_invalid_arguments(self, competing_result):
        with pytest.raises(ValueError, match="Unknown CIF method"):
            cif(competing_result, {"x": 0.0}, [1.0], method="simpson")
        with pytest.raises(ValueError, match="strictly increasing"):
            cif(competing_result, {"x": 0.0}, [2.0, 1.0])


class TestTransitions:
    def test_identities(self, illness_death_result):
        table = transition_probs(illness_death_result, {"x": 0.0}, np.linspace(0.0, 3.0, 7))
        assert table.loc[0, "p11"] == pytest.approx(1.0)
        assert table.loc[0, "p12"] == pytest.approx(0.0)
        np.testing.assert_allclose(table["p11"] + table["p12"] + table["p13"], 1.0)
        np.testing.assert_allclose(table["p22"] + table["p23"], 1.0)
        assert np.all(np.diff(table["p11"]) <= 0)
        assert np.all((table["p13"] >= -1e-12) & (table["p13"] <= 1.0))

    def test_scheme_ordering(self, illness_death_result):
        times = [1.0, 2.0, 3.0]
        fixed = transition_probs(illness_death_result, {"x": 0.0}, times, step=0.01, scheme="fixed-end")
        entry = transition_probs(illness_death_result, {"x": 0.0}, times, step=0.01, scheme="cumsum")
        reset = transition_probs(illness_death_result, {"x": 0.0}, times, step=0.01, scheme="convolution")
        assert np.all(fixed["p12"] <= entry["p12"] + 1e-12)
        assert np.all(fixed["p12"] <= reset["p12"] + 1e-12)

    def test_needs_three_transitions(self, competing_result):
        with pytest.raises(ValueError, match="exactly 3 transitions"):
            transition_probs(competing_result, {"x": 0.0}, [1.0])
        with pytest.raises(ValueError, match="Unknown transition scheme"):
            transition_probs(competing_result, {"x": 0.0}, [1.0], scheme="markov")


class TestReports:
    def test_prior_vs_posterior(self, weibull_result):
        report = prior_vs_posterior(weibull_result)
        assert [entry["name"] for entry in report] == ["Intercept", "x", "Weibull (shape)"]
        shape = report[2]
        assert np.all(np.diff(shape["support"]) > 0)
        assert np.all(shape["support"] > 0)
        assert np.all(shape["prior"] >= 0)

    def test_hyperparameter_samples(self, weibull_result):
        table = sample_hyperpar(weibull_result, 300, seed=2)
        assert list(table.columns) == ["Weibull (shape)"]
        assert len(table) == 300
        assert (table["Weibull (shape)"] > 0).all()
        internal = sample_hyperpar(weibull_result, 300, seed=2, user_scale=False)
        np.testing.assert_allclose(np.exp(internal["Weibull (shape)"]), table["Weibull (shape)"])

    def test_cure_fraction(self):
        rng = np.random.default_rng(12)
        frame = simulate_weibull(rng, n=300)
        cured = rng.uniform(size=len(frame)) < 0.3
        frame.loc[cured, "delta"] = 0
        result = fit(assemble(surv_spec(cure=["Int", "group"]), frame, fast_config()), "eb", criteria=False)
        summary = cure_fraction(result, {"group": 0.0})
        assert set(summary) == {"mean", "sd", "0.025quant", "0.25quant", "0.5quant", "0.75quant", "0.975quant"}
        assert 0.0 < summary["0.025quant"] < summary["0.975quant"] < 1.0
        with pytest.raises(ValueError, match="does not resolve cure terms"):
            cure_fraction(result, {})

    def test_cure_fraction_needs_cure_model(self, weibull_result):
        with pytest.raises(ValueError, match="mixture cure"):
            cure_fraction(weibull_result, {})
