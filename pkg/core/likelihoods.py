from __future__ import annotations

from typing import Any

import numpy as np
from scipy.special import expit, gammaln

from core.models import (
    EVENT_EXACT,
    EVENT_INTERVAL,
    EVENT_LEFT,
    EVENT_RIGHT,
    LOG_2PI,
    RowGroup,
    SurvPayload,
)

GLM_FAMILIES = ("poisson", "gaussian", "lognormal", "binomial")
SURV_FAMILIES = ("weibullsurv", "exponentialsurv", "cure")

LoglikTriple = tuple[np.ndarray, np.ndarray, np.ndarray]


class LikelihoodError(ValueError):
    """Raised for invalid responses or a non-finite log-likelihood; names the offending row."""


def validate_surv_payload(payload: SurvPayload, labels: Any = None, context: str = "survival data") -> None:
    labels = np.arange(len(payload)) if labels is None else np.asarray(labels)
    t, t2, ev = payload.time, payload.time2, payload.event
    left, right = payload.trunc_left, payload.trunc_right

    checks = [
        (~np.isin(ev, [EVENT_RIGHT, EVENT_EXACT, EVENT_LEFT, EVENT_INTERVAL]), "unknown event code"),
        (~np.isfinite(t) | (t < 0), "time must be finite and >= 0"),
        (np.isin(ev, [EVENT_EXACT, EVENT_LEFT]) & (t <= 0), "time must be > 0 for exact or left-censored rows"),
        ((ev == EVENT_INTERVAL) & ~(np.isfinite(t2) & (t2 > t)), "interval-censored rows need time < time2"),
        ((left < 0) | ~np.isfinite(left), "trunc-left must be finite and >= 0"),
        ((left > 0) & (left >= t), "trunc-left must be < time"),
        (right <= left, "trunc-right must be > trunc-left"),
    ]
    for mask, message in checks:
        if np.any(mask):
            offending = [str(label) for label in labels[mask][:3]]
            raise LikelihoodError(f"{context}: {message}; offending rows: {offending}")


def _log1mexp_terms(cumhaz: np.ndarray) -> LoglikTriple:
    """log(1 - exp(-L)) with derivatives in eta, where dL/deta = L."""
    tail = -np.expm1(-cumhaz)
    value = np.log(tail)
    grad = cumhaz * np.exp(-cumhaz) / tail
    ratio = cumhaz / tail
    return value, grad, grad * (1.0 - ratio)


def loglik_weibull_surv(payload: SurvPayload, eta: Any, alpha: float) -> LoglikTriple:
    """Weibull PH log-likelihood, hazard exp(eta)*alpha*t^(alpha-1), per row with eta-derivatives."""
    eta = np.broadcast_to(np.asarray(eta, dtype=float), payload.time.shape)
    scale = np.exp(eta)
    t, ev = payload.time, payload.event

    with np.errstate(all="ignore"):
        cumhaz = scale * t**alpha
        ll = -cumhaz
        d1 = -cumhaz
        d2 = -cumhaz

        exact = ev == EVENT_EXACT
        if np.any(exact):
            ll = np.where(exact, np.log(alpha) + (alpha - 1.0) * np.log(t) + eta - cumhaz, ll)
            d1 = np.where(exact, 1.0 - cumhaz, d1)

        left_censored = ev == EVENT_LEFT
        if np.any(left_censored):
            value, grad, curv = _log1mexp_terms(cumhaz)
            ll = np.where(left_censored, value, ll)
            d1 = np.where(left_censored, grad, d1)
            d2 = np.where(left_censored, curv, d2)

        interval = ev == EVENT_INTERVAL
        if np.any(interval):
            gap = scale * payload.time2**alpha - cumhaz
            value, grad, curv = _log1mexp_terms(gap)
            ll = np.where(interval, -cumhaz + value, ll)
            d1 = np.where(interval, -cumhaz + grad, d1)
            d2 = np.where(interval, -cumhaz + curv, d2)

        has_left = payload.trunc_left > 0
        has_right = np.isfinite(payload.trunc_right)
        cumhaz_left = np.where(has_left, scale * payload.trunc_left**alpha, 0.0)
        if np.any(has_left):
            ll = np.where(has_left, ll + cumhaz_left, ll)
            d1 = np.where(has_left, d1 + cumhaz_left, d1)
            d2 = np.where(has_left, d2 + cumhaz_left, d2)
        if np.any(has_right):
            gap = scale * payload.trunc_right**alpha - cumhaz_left
            value, grad, curv = _log1mexp_terms(gap)
            ll = np.where(has_right, ll - value, ll)
            d1 = np.where(has_right, d1 - grad, d1)
            d2 = np.where(has_right, d2 - curv, d2)

    return ll, d1, d2


def loglik_exp_surv(payload: SurvPayload, eta: Any) -> LoglikTriple:
    return loglik_weibull_surv(payload, eta, 1.0)


def loglik_glm(
    family: str,
    payload: dict[str, Any],
    eta: Any,
    precision: float | None = None,
) -> LoglikTriple:
    y = np.asarray(payload["y"], dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), y.shape)
    if "offset" in payload:
        eta = eta + np.asarray(payload["offset"], dtype=float)

    if family == "poisson":
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise LikelihoodError("poisson response must be a nonnegative integer count")
        with np.errstate(over="ignore"):
            mean = np.exp(eta)
        return y * eta - mean - gammaln(y + 1.0), y - mean, -mean

    if family in {"gaussian", "lognormal"}:
        if precision is None or not precision > 0:
            raise LikelihoodError(f"{family} likelihood requires a positive precision")
        if family == "lognormal":
            if np.any(y <= 0):
                raise LikelihoodError("lognormal response must be > 0")
            value = np.log(y)
            jacobian = -value
        else:
            value = y
            jacobian = 0.0
        resid = value - eta
        ll = 0.5 * np.log(precision) - 0.5 * LOG_2PI - 0.5 * precision * resid**2 + jacobian
        return ll, precision * resid, np.full_like(resid, -precision)

    if family == "binomial":
        trials = np.asarray(payload.get("trials", np.ones_like(y)), dtype=float)
        if np.any(y < 0) or np.any(y > trials):
            raise LikelihoodError("binomial response must lie in [0, trials]")
        prob = expit(eta)
        log_choose = gammaln(trials + 1.0) - gammaln(y + 1.0) - gammaln(trials - y + 1.0)
        ll = y * eta - trials * np.logaddexp(0.0, eta) + log_choose
        return ll, y - trials * prob, -trials * prob * (1.0 - prob)

    raise LikelihoodError(f"Unknown likelihood family: '{family}'")


def loglik_cure(payload: SurvPayload, eta: Any, alpha: float, cure_eta: Any) -> LoglikTriple:
    """Mixture cure: exact -> log((1-pi) f_u), right-censored -> log(pi + (1-pi) S_u)."""
    if np.any(~np.isin(payload.event, [EVENT_EXACT, EVENT_RIGHT])):
        raise LikelihoodError("cure likelihood supports only exact and right-censored rows")
    if np.any(payload.trunc_left > 0) or np.any(np.isfinite(payload.trunc_right)):
        raise LikelihoodError("cure likelihood does not support truncation")

    eta = np.broadcast_to(np.asarray(eta, dtype=float), payload.time.shape)
    cure_eta = np.broadcast_to(np.asarray(cure_eta, dtype=float), payload.time.shape)
    log_cured = -np.logaddexp(0.0, -cure_eta)
    log_susceptible = -np.logaddexp(0.0, cure_eta)

    base_ll, base_d1, base_d2 = loglik_weibull_surv(payload, eta, alpha)
    with np.errstate(all="ignore"):
        cumhaz = np.exp(eta) * payload.time**alpha
        right_ll = np.logaddexp(log_cured, log_susceptible - cumhaz)
        share = np.exp(log_susceptible - cumhaz - right_ll)
        right_d1 = -cumhaz * share
        right_d2 = -cumhaz * share + cumhaz**2 * share * (1.0 - share)

    exact = payload.event == EVENT_EXACT
    ll = np.where(exact, log_susceptible + base_ll, right_ll)
    d1 = np.where(exact, base_d1, right_d1)
    d2 = np.where(exact, base_d2, right_d2)
    return ll, d1, d2


def evaluate_group(group: RowGroup, eta: np.ndarray, theta: np.ndarray, strict: bool = True) -> LoglikTriple:
    """Per-row log-likelihood and eta-derivatives for one row group at the given predictor."""
    family = group.family
    if family in GLM_FAMILIES:
        precision = None
        if group.precision_hyper is not None:
            precision = float(np.exp(theta[group.precision_hyper]))
        triple = loglik_glm(family, group.response, eta, precision)
    elif family in SURV_FAMILIES:
        if group.surv is None:
            raise LikelihoodError(f"{group.name}: survival family '{family}' without survival payload")
        alpha = 1.0 if group.shape_hyper is None else float(np.exp(theta[group.shape_hyper]))
        if family == "cure":
            triple = loglik_cure(group.surv, eta, alpha, group.cure_eta(theta))
        elif family == "exponentialsurv":
            triple = loglik_exp_surv(group.surv, eta)
        else:
            triple = loglik_weibull_surv(group.surv, eta, alpha)
    else:
        raise LikelihoodError(f"{group.name}: unknown likelihood family '{family}'")

    if strict:
        bad = ~np.isfinite(triple[0])
        if np.any(bad):
            offending = [str(label) for label in group.row_labels[bad][:3]]
            raise LikelihoodError(
                f"{group.name}: non-finite {family} log-likelihood; offending rows: {offending}"
            )
    return triple
