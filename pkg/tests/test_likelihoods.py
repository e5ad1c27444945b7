from __future__ import annotations

import numpy as np
import pytest
from scipy import sparse, stats

from core import inference, lgm, likelihoods, oracle
from core.likelihoods import (
    LikelihoodError,
    evaluate_group,
    loglik_cure,
    loglik_exp_surv,
    loglik_glm,
    loglik_weibull_surv,
    validate_surv_payload,
)
from core.models import EVENT_EXACT, EVENT_INTERVAL, EVENT_LEFT, EVENT_RIGHT, LOG_2PI, RowGroup, SurvPayload
from core.oracle import fd_check_group


def _weibull(eta: np.ndarray, alpha: float):
    # hazard exp(eta) * alpha * t^(alpha-1) is weibull_min with scale exp(-eta / alpha)
    return stats.weibull_min(c=alpha, scale=np.exp(-eta / alpha))


class TestWeibull:
    def test_exact_and_right_censored_match_scipy(self, rng):
        t = rng.uniform(0.2, 3.0, 8)
        eta = rng.normal(0.0, 0.5, 8)
        event = np.array([EVENT_EXACT, EVENT_RIGHT] * 4)
        ll, _, _ = loglik_weibull_surv(SurvPayload.build(t, event), eta, 1.7)
        dist = _weibull(eta, 1.7)
        expected = np.where(event == EVENT_EXACT, dist.logpdf(t), dist.logsf(t))
        np.testing.assert_allclose(ll, expected, rtol=1e-10)

    def test_left_and_interval_censoring(self):
        t = np.array([1.0, 0.5])
        t2 = np.array([np.nan, 2.0])
        payload = SurvPayload.build(t, [EVENT_LEFT, EVENT_INTERVAL], time2=t2)
        eta = np.array([0.2, -0.3])
        ll, _, _ = loglik_weibull_surv(payload, eta, 1.3)
        dist = _weibull(eta, 1.3)
        np.testing.assert_allclose(ll[0], dist.logcdf(t)[0])
        np.testing.assert_allclose(ll[1], np.log(dist.sf(0.5)[1] - dist.sf(2.0)[1]))

    def test_left_truncation_conditions_on_survival(self):
        payload = SurvPayload.build([2.0], [EVENT_EXACT], trunc_left=[0.5])
        ll, _, _ = loglik_weibull_surv(payload, np.array([0.1]), 0.8)
        dist = _weibull(np.array([0.1]), 0.8)
        np.testing.assert_allclose(ll, dist.logpdf(2.0) - dist.logsf(0.5))

    def test_right_truncation_divides_by_event_probability(self):
        payload = SurvPayload.build([1.0], [EVENT_EXACT], trunc_right=[2.0])
        ll, _, _ = loglik_weibull_surv(payload, np.zeros(1), 1.0)
        np.testing.assert_allclose(ll, -1.0 - np.log(1.0 - np.exp(-2.0)))

    def test_double_truncation(self):
        payload = SurvPayload.build([1.5], [EVENT_EXACT], trunc_left=[1.0], trunc_right=[2.0])
        eta = np.array([-0.2])
        ll, _, _ = loglik_weibull_surv(payload, eta, 1.4)
        dist = _weibull(eta, 1.4)
        np.testing.assert_allclose(ll, dist.logpdf(1.5) - np.log(dist.sf(1.0) - dist.sf(2.0)))

    def test_zero_left_truncation_is_no_truncation(self, rng):
        t = rng.uniform(0.2, 3.0, 6)
        event = np.array([EVENT_EXACT, EVENT_RIGHT, EVENT_LEFT] * 2)
        eta = rng.normal(0.0, 0.5, 6)
        plain = loglik_weibull_surv(SurvPayload.build(t, event), eta, 1.3)
        truncated = loglik_weibull_surv(SurvPayload.build(t, event, trunc_left=np.zeros(6)), eta, 1.3)
        for a, b in zip(plain, truncated):
            assert np.array_equal(a, b)

    def test_exponential_is_unit_shape_weibull(self, rng):
        payload = SurvPayload.build(
            rng.uniform(0.2, 3.0, 8),
            np.tile([EVENT_EXACT, EVENT_RIGHT, EVENT_LEFT, EVENT_INTERVAL], 2),
            time2=np.full(8, 4.0),
        )
        eta = rng.normal(0.0, 0.5, 8)
        for a, b in zip(loglik_exp_surv(payload, eta), loglik_weibull_surv(payload, eta, 1.0)):
            assert np.array_equal(a, b)

    def test_eta_derivatives(self, rng):
        n = 12
        payload = SurvPayload.build(
            rng.uniform(0.3, 2.0, n),
            np.tile([EVENT_EXACT, EVENT_RIGHT, EVENT_LEFT, EVENT_INTERVAL], 3),
            time2=rng.uniform(2.5, 4.0, n),
            trunc_left=np.tile([0.0, 0.1, 0.0], 4),
        )
        group = RowGroup(
            name="survival_S1",
            family="weibullsurv",
            design=sparse.csr_matrix((n, 1)),
            offset=np.zeros(n),
            row_labels=np.arange(n).astype(str),
            surv=payload,
            shape_hyper=0,
        )
        errors = fd_check_group(group, rng.normal(0.0, 0.3, n), np.array([np.log(1.4)]))
        assert errors["gradient_error"] < 1e-6
        assert errors["hessian_error"] < 1e-6


class TestGlm:
    def test_gaussian(self):
        ll, d1, d2 = loglik_glm("gaussian", {"y": np.array([1.0, 2.0])}, np.array([0.5, 2.5]), precision=4.0)
        np.testing.assert_allclose(ll, stats.norm.logpdf([1.0, 2.0], loc=[0.5, 2.5], scale=0.5))
        np.testing.assert_allclose(d1, [2.0, -2.0])
        np.testing.assert_allclose(d2, [-4.0, -4.0])

    def test_normalising_constant_is_shared(self):
        ll, _, _ = loglik_glm("gaussian", {"y": np.zeros(1)}, np.zeros(1), precision=1.0)
        assert ll[0] == -0.5 * LOG_2PI
        for module in (inference, lgm, likelihoods, oracle):
            assert module.LOG_2PI is LOG_2PI

    def test_lognormal_includes_jacobian(self):
        y = np.array([0.5, 3.0])
        ll, _, _ = loglik_glm("lognormal", {"y": y}, np.array([0.0, 1.0]), precision=2.0)
        expected = stats.lognorm.logpdf(y, s=1.0 / np.sqrt(2.0), scale=np.exp([0.0, 1.0]))
        np.testing.assert_allclose(ll, expected)

    def test_lognormal_rejects_nonpositive(self):
        with pytest.raises(LikelihoodError, match="> 0"):
            loglik_glm("lognormal", {"y": np.array([1.0, 0.0])}, 0.0, precision=1.0)

    def test_binomial(self):
        y = np.array([0.0, 1.0, 3.0])
        trials = np.array([1.0, 1.0, 5.0])
        eta = np.array([-0.5, 0.2, 1.0])
        ll, _, _ = loglik_glm("binomial", {"y": y, "trials": trials}, eta)
        np.testing.assert_allclose(ll, stats.binom.logpmf(y, trials, 1.0 / (1.0 + np.exp(-eta))))

    def test_poisson_with_offset(self):
        payload = {"y": np.array([0.0, 2.0]), "offset": np.log([0.5, 2.0])}
        ll, _, _ = loglik_glm("poisson", payload, np.array([0.1, -0.2]))
        np.testing.assert_allclose(ll, stats.poisson.logpmf([0, 2], np.array([0.5, 2.0]) * np.exp([0.1, -0.2])))

    def test_poisson_rejects_fractional_counts(self):
        with pytest.raises(LikelihoodError):
            loglik_glm("poisson", {"y": np.array([0.5])}, 0.0)


class TestCure:
    def test_mixture(self):
        payload = SurvPayload.build([1.0, 2.0], [EVENT_EXACT, EVENT_RIGHT])
        eta = np.array([-0.4, -0.4])
        cure_eta = np.array([-1.0, -1.0])
        ll, _, _ = loglik_cure(payload, eta, 1.2, cure_eta)
        cured = 1.0 / (1.0 + np.exp(1.0))
        dist = _weibull(eta, 1.2)
        np.testing.assert_allclose(ll[0], np.log((1.0 - cured) * dist.pdf(1.0)[0]))
        np.testing.assert_allclose(ll[1], np.log(cured + (1.0 - cured) * dist.sf(2.0)[1]))

    def test_rejects_interval_rows(self):
        payload = SurvPayload.build([1.0], [EVENT_INTERVAL], time2=[2.0])
        with pytest.raises(LikelihoodError, match="exact and right-censored"):
            loglik_cure(payload, 0.0, 1.0, 0.0)


class TestValidation:
    def test_interval_needs_ordered_times(self):
        payload = SurvPayload.build([2.0], [EVENT_INTERVAL], time2=[1.0])
        with pytest.raises(LikelihoodError, match="time < time2"):
            validate_surv_payload(payload, ["patient-7"])

    def test_names_offending_rows(self):
        payload = SurvPayload.build([1.0, -1.0], [EVENT_EXACT, EVENT_RIGHT])
        with pytest.raises(LikelihoodError, match="patient-2"):
            validate_surv_payload(payload, ["patient-1", "patient-2"])

    def test_event_names_are_accepted(self):
        payload = SurvPayload.build([1.0, 2.0], ["exact", "right-censored"])
        np.testing.assert_array_equal(payload.event, [EVENT_EXACT, EVENT_RIGHT])

    def test_strict_group_reports_non_finite_rows(self):
        group = RowGroup(
            name="longitudinal_L1",
            family="gaussian",
            design=sparse.csr_matrix((1, 1)),
            offset=np.zeros(1),
            row_labels=np.array(["3#1"]),
            response={"y": np.array([np.inf])},
            precision_hyper=0,
        )
        with pytest.raises(LikelihoodError, match="3#1"):
            evaluate_group(group, np.zeros(1), np.zeros(1))


def _family_group(family: str, rng: np.random.Generator, n: int = 12) -> tuple[RowGroup, np.ndarray]:
    common = {
        "name": f"{family}_group",
        "family": family,
        "design": sparse.csr_matrix((n, 1)),
        "offset": np.zeros(n),
        "row_labels": np.arange(n).astype(str),
    }
    if family == "gaussian":
        return RowGroup(**common, response={"y": rng.normal(size=n)}, precision_hyper=0), np.array([0.7])
    if family == "lognormal":
        return RowGroup(**common, response={"y": rng.lognormal(size=n)}, precision_hyper=0), np.array([0.7])
    if family == "binomial":
        trials = rng.integers(1, 6, n).astype(float)
        y = np.floor(trials * rng.uniform(size=n))
        return RowGroup(**common, response={"y": y, "trials": trials}), np.zeros(0)
    if family == "poisson":
        response = {"y": rng.poisson(2.0, n).astype(float), "offset": np.log(rng.uniform(0.5, 2.0, n))}
        return RowGroup(**common, response=response), np.zeros(0)
    time = rng.uniform(0.3, 2.0, n)
    if family == "cure":
        payload = SurvPayload.build(time, np.tile([EVENT_EXACT, EVENT_RIGHT], n // 2))
        cure_design = np.column_stack([np.ones(n), rng.integers(0, 2, n)])
        group = RowGroup(**common, surv=payload, shape_hyper=0, cure_hypers=(1, 2), cure_design=cure_design)
        return group, np.array([np.log(1.2), -0.5, 0.4])
    payload = SurvPayload.build(
        time,
        np.tile([EVENT_EXACT, EVENT_RIGHT, EVENT_LEFT, EVENT_INTERVAL], n // 4),
        time2=time + 1.0,
        trunc_right=np.where(np.arange(n) % 3 == 0, time + 2.0, np.inf),
    )
    if family == "exponentialsurv":
        return RowGroup(**common, surv=payload), np.zeros(0)
    return RowGroup(**common, surv=payload, shape_hyper=0), np.array([np.log(0.8)])


class TestDerivatives:
    @pytest.mark.parametrize(
        "family", ["gaussian", "lognormal", "binomial", "poisson", "cure", "exponentialsurv", "weibullsurv"]
    )
    def test_eta_derivatives_match_central_differences(self, family, rng):
        group, theta = _family_group(family, rng)
        errors = fd_check_group(group, rng.normal(0.0, 0.4, group.n_rows), theta)
        assert errors["gradient_error"] < 1e-5
        assert errors["hessian_error"] < 1e-4
