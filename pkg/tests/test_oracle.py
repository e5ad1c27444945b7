from __future__ import annotations

import numpy as np
import pytest

from core.assembler import assemble
from core.inference import fit, starting_point
from core.models import HyperDecl, LatentBlock, LatentModel, PriorSpec
from core.oracle import fd_check, quad_posterior
from tests.conftest import fast_config, simulate_weibull, surv_spec


@pytest.fixture(scope="module")
def tiny_model():
    frame = simulate_weibull(np.random.default_rng(21), n=80)
    return assemble(surv_spec(covariates=[]), frame, fast_config())


class TestQuadrature:
    def test_matches_nested_laplace(self, tiny_model):
        exact = quad_posterior(tiny_model, resolution=61)
        approx = fit(tiny_model, "grid", criteria=True)

        latent = approx.latent_marginals[0].summary
        assert exact.latent[0].summary["mean"] == pytest.approx(latent["mean"], abs=0.05)
        assert exact.latent[0].summary["sd"] == pytest.approx(latent["sd"], rel=0.1)
        shape = approx.hyper_marginals_internal[0].summary
        assert exact.hyper[0].summary["mean"] == pytest.approx(shape["mean"], abs=0.05)
        assert exact.hyper[0].summary["sd"] == pytest.approx(shape["sd"], rel=0.1)
        assert exact.log_evidence == pytest.approx(approx.criteria["log_mlik_integration"], abs=0.2)

    def test_box_shrinks_around_posterior(self, tiny_model):
        result = quad_posterior(tiny_model, resolution=21, rounds=3)
        widths = result.box[:, 1] - result.box[:, 0]
        assert np.all(widths < 10.0)

    def test_rejects_large_models(self, weibull_frame):
        model = assemble(surv_spec(covariates=["x", "group"]), weibull_frame, fast_config())
        with pytest.raises(ValueError, match="at most 2 latent"):
            quad_posterior(model)

    def test_rejects_random_walks(self):
        model = LatentModel(
            blocks=[LatentBlock("Baseline risk_S1", "rw1", 2, hyper_links=(0,), constraint=True)],
            hypers=[HyperDecl("Baseline risk (variance)_S1", "log-precision", PriorSpec("pc-precision"), "block-precision")],
            groups=[],
        )
        with pytest.raises(ValueError, match="does not support block"):
            quad_posterior(model)

    def test_resolution(self, tiny_model):
        with pytest.raises(ValueError, match="resolution must be >= 5"):
            quad_posterior(tiny_model, resolution=3)


class TestFiniteDifferences:
    def test_analytic_derivatives(self, tiny_model, rng):
        theta = starting_point(tiny_model) + rng.normal(0.0, 0.2, tiny_model.n_hyper)
        errors = fd_check(tiny_model, tiny_model.prior_mean + rng.normal(0.0, 0.3, tiny_model.n_latent), theta)
        assert errors["gradient_error"] < 1e-5
        assert errors["hessian_error"] < 1e-4
