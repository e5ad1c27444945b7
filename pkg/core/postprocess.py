from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from core.inference import lincomb_marginals, sample_hyperpar as _sample_theta, sample_posterior
from core.marginals import quantile_key, summarize_density, transform_marginal
from core.models import (
    QUANTILE_LEVELS,
    FitResult,
    LatentModel,
    Marginal,
    SubmodelInfo,
    SummaryRow,
    SummaryTable,
    Transform,
)
from core.priors import group_dimension, marginal_prior_density
from core.transforms import EXP, EXP_NEGATE, NEGATE, TRANSFORM_NAMES, apply, derivative, exp_scaled

CURVE_LEVELS = (0.025, 0.5, 0.975)
TRANSITION_SCHEMES = ("fixed-end", "cumsum", "convolution")
CIF_METHODS = ("exact", "riemann")
DEFAULT_CURVE_STEPS = 2000
COVARIANCE_DRAWS = 4000


def tmarginal(marginal: Marginal, transform: Transform) -> Marginal:
    if transform.name not in TRANSFORM_NAMES:
        raise ValueError(f"Unknown transform '{transform.name}'; expected one of {TRANSFORM_NAMES}")
    return transform_marginal(marginal, transform)


def zmarginal(marginal: Marginal) -> dict[str, float]:
    """Summary statistics of a tabulated marginal: mean, sd and quantiles."""
    summary = summarize_density(marginal.support, marginal.density)
    summary.pop("mode", None)
    return summary


def display_name(model: LatentModel, symbol: str) -> str:
    """Single-submodel models drop the _S1 / _L1 suffix, per component of a:b names."""
    if len(model.submodels) != 1:
        return symbol
    parts = []
    for part in symbol.split(":"):
        for suffix in ("_S1", "_L1"):
            if part.endswith(suffix):
                part = part[: -len(suffix)]
                break
        parts.append(part)
    return ":".join(parts)


def _row(name: str, marginal: Marginal) -> SummaryRow:
    summary = marginal.summary
    return SummaryRow(
        name=name,
        mean=float(summary["mean"]),
        sd=float(summary["sd"]),
        q025=float(summary[quantile_key(0.025)]),
        q50=float(summary[quantile_key(0.5)]),
        q975=float(summary[quantile_key(0.975)]),
    )


def _sample_row(name: str, values: np.ndarray) -> SummaryRow:
    q025, q50, q975 = np.quantile(values, [0.025, 0.5, 0.975])
    return SummaryRow(name, float(np.mean(values)), float(np.std(values)), float(q025), float(q50), float(q975))


def _submodel_hypers(info: SubmodelInfo) -> list[int]:
    indices: list[int] = []
    for index in (info.shape_hyper, info.precision_hyper, info.baseline_hyper, info.frailty_hyper):
        if index is not None:
            indices.append(index)
    for mapping in (info.re_hypers, info.cure_hypers, info.association_hypers):
        indices.extend(mapping.values())
    return indices


def _covariance_row(fit: FitResult, index: int, draws: np.ndarray) -> SummaryRow:
    model = fit.model
    decl = model.hypers[index]
    left, right = decl.name.split(":", 1)
    a = model.lookup(left)[1]
    b = model.lookup(right)[1]
    values = np.tanh(draws[:, index]) * np.exp(-0.5 * draws[:, a]) * np.exp(-0.5 * draws[:, b])
    return _sample_row(display_name(model, decl.name), values)


def summarise(fit: FitResult, hr: bool = False, sdcor: bool = False) -> SummaryTable:
    """Posterior summary per submodel: fixed effects first, then hyperparameters on the user scale.

    hr reports exp(beta) for survival covariate effects. sdcor reports residual and random-effect
    standard deviations and correlations instead of variances and covariances.
    """
    model = fit.model
    groups: dict[str, list[SummaryRow]] = {}
    emitted: set[int] = set()
    draws: np.ndarray | None = None

    for info in model.submodels:
        rows: list[SummaryRow] = []
        for symbol, index in info.intercepts.items():
            rows.append(_row(display_name(model, symbol), fit.latent_marginals[index]))
        for symbol, index in info.fixed_effects.items():
            marginal = fit.latent_marginals[index]
            if hr and info.kind == "survival":
                marginal = tmarginal(marginal, EXP)
            rows.append(_row(display_name(model, symbol), marginal))

        for index in _submodel_hypers(info):
            if index in emitted:
                continue
            emitted.add(index)
            decl = model.hypers[index]
            name = display_name(model, decl.name)
            random_component = decl.role == "re-matrix-component" or index in info.re_hypers.values()
            if decl.scale == "fisher-z" and not sdcor:
                if draws is None:
                    draws = _sample_theta(fit.theta_posterior, COVARIANCE_DRAWS, fit.seed)
                rows.append(_covariance_row(fit, index, draws))
            elif decl.scale == "log-precision" and sdcor and (random_component or index == info.precision_hyper):
                marginal = tmarginal(fit.hyper_marginals_internal[index], exp_scaled(-0.5))
                rows.append(_row(name.replace("(variance)", "(sd)"), marginal))
            else:
                rows.append(_row(name, fit.hyper_marginals[index]))
            if index == info.shape_hyper and len(info.intercepts) == 1:
                intercept = next(iter(info.intercepts.values()))
                scale = tmarginal(fit.latent_marginals[intercept], EXP)
                rows.append(_row(display_name(model, f"Weibull (scale)_{info.name}"), scale))
        groups[info.name] = rows

    criteria = {key: value for key, value in fit.criteria.items() if key != "criteria_samples"}
    return SummaryTable(groups=groups, criteria=criteria)


def hazard_ratios(fit: FitResult) -> SummaryTable:
    return summarise(fit, hr=True)


def gumbel_convert(fit: FitResult) -> tuple[SummaryTable, dict[str, Marginal]]:
    """Weibull PH fit to the Gumbel AFT parameterisation: coefficients negated, scale = 1 / shape."""
    model = fit.model
    survival = [info for info in model.submodels if info.kind == "survival"]
    if not survival:
        raise ValueError("Gumbel conversion needs a survival submodel")
    groups: dict[str, list[SummaryRow]] = {}
    marginals: dict[str, Marginal] = {}
    for info in survival:
        if info.baseline != "weibull" or info.augmented or info.shape_hyper is None:
            raise ValueError(
                f"Gumbel conversion needs a non-augmented Weibull submodel; {info.name} has baseline "
                f"'{info.baseline}'{' (augmented)' if info.augmented else ''}"
            )
        rows = []
        for symbol, index in {**info.intercepts, **info.fixed_effects}.items():
            name = display_name(model, symbol)
            marginals[name] = tmarginal(fit.latent_marginals[index], NEGATE)
            rows.append(_row(name, marginals[name]))
        name = display_name(model, f"Gumbel scale_{info.name}")
        marginals[name] = tmarginal(fit.hyper_marginals_internal[info.shape_hyper], EXP_NEGATE)
        rows.append(_row(name, marginals[name]))
        groups[info.name] = rows
    return SummaryTable(groups=groups, criteria=dict(fit.criteria)), marginals


def _rw_submodels(model: LatentModel, submodel: str | None) -> list[SubmodelInfo]:
    selected = [
        info
        for info in model.submodels
        if info.kind == "survival" and (submodel is None or info.name == submodel)
    ]
    if submodel is not None and not selected:
        raise KeyError(f"Unknown survival submodel '{submodel}'")
    rw = [info for info in selected if info.baseline in {"rw1", "rw2"}]
    if not rw:
        raise ValueError("baseline curves need an rw1/rw2 baseline; use hazard_eval for parametric baselines")
    return rw


def baseline_curve(fit: FitResult, submodel: str | None = None, log10: bool = False) -> dict[str, pd.DataFrame]:
    """Baseline hazard exp(intercept + rw node) per stratum, as a step function over the cutpoints."""
    model = fit.model
    curves: dict[str, pd.DataFrame] = {}
    for info in _rw_submodels(model, submodel):
        cutpoints = info.cutpoints
        n_intervals = cutpoints.shape[0] - 1
        strata = list(info.intercepts) if len(info.intercepts) > 1 else [None]
        for position, stratum in enumerate(strata):
            intercept = list(info.intercepts.values())[position]
            level = "" if stratum is None else stratum[stratum.index("[") + 1 : -1]
            block = model.blocks[info.baseline_blocks[level]] if info.baseline_blocks else None
            weights = np.zeros((cutpoints.shape[0], model.n_latent))
            for k in range(cutpoints.shape[0]):
                weights[k, intercept] = 1.0
                if block is not None:
                    weights[k, block.start + min(k, n_intervals - 1)] = 1.0
            marginals = [tmarginal(m, EXP) for m in lincomb_marginals(model, fit.theta_posterior, fit.approxs, weights)]
            table = pd.DataFrame(
                {
                    "time": cutpoints,
                    "lower": [m.summary[quantile_key(0.025)] for m in marginals],
                    "median": [m.summary[quantile_key(0.5)] for m in marginals],
                    "upper": [m.summary[quantile_key(0.975)] for m in marginals],
                }
            )
            if log10:
                for column in ("lower", "median", "upper"):
                    table[column] = np.log10(table[column])
            key = info.name if stratum is None else f"{info.name}[{level}]"
            curves[key] = table
    return curves


@dataclass(slots=True)
class _HazardParts:
    name: str
    weights: np.ndarray
    shape_hyper: int | None


def _hazard_parts(model: LatentModel, info: SubmodelInfo, profile: dict[str, float]) -> _HazardParts:
    if info.kind != "survival" or info.baseline not in {"weibull", "exponential"}:
        raise ValueError(f"{info.name}: hazard evaluation needs a parametric (weibull/exponential) baseline")
    if len(info.intercepts) != 1:
        raise ValueError(f"{info.name}: hazard evaluation does not support stratified intercepts")
    weights = np.zeros(model.n_latent)
    weights[next(iter(info.intercepts.values()))] = 1.0
    suffix = f"_{info.name}"
    missing = []
    for symbol, index in info.fixed_effects.items():
        name = symbol[: -len(suffix)] if symbol.endswith(suffix) else symbol
        if name in profile:
            weights[index] = float(profile[name])
        elif symbol in profile:
            weights[index] = float(profile[symbol])
        else:
            missing.append(name)
    if missing:
        raise ValueError(f"{info.name}: covariate profile does not resolve {missing}")
    return _HazardParts(info.name, weights, info.shape_hyper)


def _parametric_parts(model: LatentModel, profile: dict[str, float]) -> list[_HazardParts]:
    return [_hazard_parts(model, info, profile) for info in model.submodels if info.kind == "survival"]


def _plugin_values(fit: FitResult, parts: list[_HazardParts]) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean linear predictor and shape per cause."""
    latent_mean = np.array([m.summary["mean"] for m in fit.latent_marginals])
    eta = np.array([part.weights @ latent_mean for part in parts])
    alpha = np.array(
        [1.0 if part.shape_hyper is None else fit.hyper_marginals[part.shape_hyper].summary["mean"] for part in parts]
    )
    return eta, alpha


def _cumulative_hazard(eta: np.ndarray, alpha: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.exp(eta)[:, None] * grid[None, :] ** alpha[:, None]


def _hazard(eta: np.ndarray, alpha: np.ndarray, grid: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return alpha[:, None] * np.exp(eta)[:, None] * grid[None, :] ** (alpha[:, None] - 1.0)


def hazard_eval(fit: FitResult, submodel: str, profile: dict[str, float], times: Any) -> np.ndarray:
    """Plug-in hazard of a parametric survival submodel at posterior means."""
    info = fit.model.submodel(submodel)
    part = _hazard_parts(fit.model, info, profile)
    eta, alpha = _plugin_values(fit, [part])
    return _hazard(eta, alpha, np.asarray(times, dtype=float))[0]


def _time_grid(times: Any, step: float | None) -> tuple[np.ndarray, np.ndarray]:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.ndim != 1 or times.shape[0] == 0 or not np.all(np.isfinite(times)):
        raise ValueError("times must be a non-empty list of finite numbers")
    if np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be non-negative and strictly increasing")
    end = float(times[-1])
    if end == 0.0:
        return times, np.array([0.0])
    step = end / DEFAULT_CURVE_STEPS if step is None else float(step)
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    n_steps = max(1, int(math.ceil(end / step - 1e-9)))
    return times, np.linspace(0.0, end, n_steps + 1)


def _cif_path(eta: np.ndarray, alpha: np.ndarray, grid: np.ndarray, method: str) -> tuple[np.ndarray, np.ndarray]:
    """CIF per cause (K x G) and overall survival on the grid."""
    n_causes = eta.shape[0]
    if grid.shape[0] == 1:
        return np.zeros((n_causes, 1)), np.ones(1)
    if method == "exact":
        steps = np.diff(_cumulative_hazard(eta, alpha, grid), axis=1)
        total = steps.sum(axis=0)
        survival = np.concatenate([[1.0], np.exp(-np.cumsum(total))])
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(total > 0, steps / total, 1.0 / n_causes)
        increments = share * survival[:-1] * -np.expm1(-total)
    else:
        width = np.diff(grid)
        left = grid[:-1].copy()
        hazards = _hazard(eta, alpha, left)
        if not np.all(np.isfinite(hazards)):
            left[0] = 0.5 * width[0]
            hazards = _hazard(eta, alpha, left)
        steps = hazards * width[None, :]
        survival = np.concatenate([[1.0], np.exp(-np.cumsum(steps.sum(axis=0)))])
        increments = steps * survival[None, :-1]
    cif = np.concatenate([np.zeros((n_causes, 1)), np.cumsum(increments, axis=1)], axis=1)
    return cif, survival


def _draw_values(fit: FitResult, parts: list[_HazardParts], samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    draws = sample_posterior(fit.model, fit.theta_posterior, fit.approxs, samples, seed, recompute=True)
    eta = np.column_stack([draws.latent @ part.weights for part in parts])
    alpha = np.column_stack(
        [
            np.ones(samples) if part.shape_hyper is None else np.exp(draws.theta[:, part.shape_hyper])
            for part in parts
        ]
    )
    return eta, alpha


def cif(
    fit: FitResult,
    profile: dict[str, float],
    times: Any,
    step: float | None = None,
    method: str = "exact",
    samples: int = 0,
    seed: int = 0,
) -> pd.DataFrame:
    """Cumulative incidence of each cause for a covariate profile.

    "exact" integrates each step with the hazards' exact cumulative increments, so the CIFs and the
    overall survival sum to one. "riemann" is the left Riemann sum with step width included.
    """
    if method not in CIF_METHODS:
        raise ValueError(f"Unknown CIF method '{method}'; expected one of {CIF_METHODS}")
    parts = _parametric_parts(fit.model, profile)
    times, grid = _time_grid(times, step)
    eta, alpha = _plugin_values(fit, parts)
    curves, survival = _cif_path(eta, alpha, grid, method)

    table = {"time": times}
    for part, curve in zip(parts, curves):
        table[f"cif_{part.name}"] = np.interp(times, grid, curve)
    table["survival"] = np.interp(times, grid, survival)
    if samples > 0:
        eta_draws, alpha_draws = _draw_values(fit, parts, samples, seed)
        paths = np.stack([_cif_path(e, a, grid, method)[0] for e, a in zip(eta_draws, alpha_draws)])
        for k, part in enumerate(parts):
            lower, upper = np.quantile(paths[:, k, :], [CURVE_LEVELS[0], CURVE_LEVELS[-1]], axis=0)
            table[f"cif_{part.name}_lower"] = np.interp(times, grid, lower)
            table[f"cif_{part.name}_upper"] = np.interp(times, grid, upper)
    return pd.DataFrame(table)


def _transition_path(eta: np.ndarray, alpha: np.ndarray, grid: np.ndarray, scheme: str) -> dict[str, np.ndarray]:
    cumhaz = _cumulative_hazard(eta, alpha, grid)
    p11 = np.exp(-(cumhaz[0] + cumhaz[1]))
    p22 = np.exp(-cumhaz[2])
    if grid.shape[0] == 1:
        return {"p11": p11, "p12": np.zeros(1), "p22": p22}
    steps = np.diff(cumhaz, axis=1)
    leaving = steps[0] + steps[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(leaving > 0, steps[0] / leaving, 0.0)
    entering = share * p11[:-1] * -np.expm1(-leaving)
    if scheme == "fixed-end":
        p12 = p22 * np.concatenate([[0.0], np.cumsum(entering)])
    elif scheme == "cumsum":
        p12 = np.concatenate([[0.0], np.cumsum(entering * p22[:-1])])
    else:
        # p22 at lag t_i - t_(j+1) on the uniform grid
        p12 = np.concatenate([[0.0], np.convolve(entering, p22)[: grid.shape[0] - 1]])
    return {"p11": p11, "p12": p12, "p22": p22}


def transition_probs(
    fit: FitResult,
    profile: dict[str, float],
    times: Any,
    step: float | None = None,
    scheme: str = "fixed-end",
    samples: int = 0,
    seed: int = 0,
) -> pd.DataFrame:
    """Illness-death transition probabilities from transitions S1 (1->2), S2 (1->3) and S3 (2->3).

    scheme "fixed-end" takes the stay-in-state-2 probability at the evaluation time, "cumsum" at the
    entry time, and "convolution" over the time spent in state 2 (clock reset).
    """
    if scheme not in TRANSITION_SCHEMES:
        raise ValueError(f"Unknown transition scheme '{scheme}'; expected one of {TRANSITION_SCHEMES}")
    parts = _parametric_parts(fit.model, profile)
    if len(parts) != 3:
        raise ValueError(f"transition probabilities need exactly 3 transitions, the model has {len(parts)}")
    times, grid = _time_grid(times, step)
    eta, alpha = _plugin_values(fit, parts)
    path = _transition_path(eta, alpha, grid, scheme)

    p11 = np.interp(times, grid, path["p11"])
    p12 = np.interp(times, grid, path["p12"])
    p22 = np.interp(times, grid, path["p22"])
    table = {"time": times, "p11": p11, "p12": p12, "p13": 1.0 - p11 - p12, "p22": p22, "p23": 1.0 - p22}
    if samples > 0:
        eta_draws, alpha_draws = _draw_values(fit, parts, samples, seed)
        paths = [_transition_path(e, a, grid, scheme) for e, a in zip(eta_draws, alpha_draws)]
        for key in ("p11", "p12", "p22"):
            stacked = np.stack([p[key] for p in paths])
            lower, upper = np.quantile(stacked, [CURVE_LEVELS[0], CURVE_LEVELS[-1]], axis=0)
            table[f"{key}_lower"] = np.interp(times, grid, lower)
            table[f"{key}_upper"] = np.interp(times, grid, upper)
    return pd.DataFrame(table)


def _to_user_scale(support: np.ndarray, densities: list[np.ndarray], transform: Transform) -> tuple[np.ndarray, list[np.ndarray]]:
    with np.errstate(all="ignore"):
        values = apply(transform, support)
        jacobian = np.abs(derivative(transform, support))
    usable = np.isfinite(values) & (jacobian > 0)
    order = np.argsort(values[usable])
    mapped = [(density[usable] / jacobian[usable])[order] for density in densities]
    return values[usable][order], mapped


def prior_vs_posterior(fit: FitResult) -> list[dict[str, Any]]:
    """Prior and posterior densities on a shared user-scale support, per fixed effect and hyperparameter."""
    model = fit.model
    report: list[dict[str, Any]] = []
    labels = model.latent_labels()
    for block in model.blocks:
        if block.kind != "fixed-effect":
            continue
        for offset in range(block.size):
            index = block.start + offset
            marginal = fit.latent_marginals[index]
            mean = 0.0 if block.prior_mean is None else float(block.prior_mean[offset])
            precision = 0.01 if block.prior_precision is None else float(block.prior_precision[offset])
            report.append(
                {
                    "name": display_name(model, labels[index]),
                    "support": marginal.support,
                    "prior": stats.norm.pdf(marginal.support, loc=mean, scale=1.0 / math.sqrt(precision)),
                    "posterior": marginal.density,
                }
            )
    for index, decl in enumerate(model.hypers):
        internal = fit.hyper_marginals_internal[index]
        prior = marginal_prior_density(decl.prior, internal.support, decl.prior_component, group_dimension(model, decl))
        support, (prior_user, posterior_user) = _to_user_scale(
            internal.support, [prior, internal.density], decl.user_transform
        )
        report.append(
            {"name": display_name(model, decl.name), "support": support, "prior": prior_user, "posterior": posterior_user}
        )
    return report


def sample_hyperpar(fit: FitResult, n: int, seed: int = 0, user_scale: bool = True) -> pd.DataFrame:
    """Hyperparameter draws, one column per hyperparameter."""
    model = fit.model
    draws = _sample_theta(fit.theta_posterior, n, seed)
    columns = {}
    for index, decl in enumerate(model.hypers):
        values = draws[:, index]
        columns[display_name(model, decl.name)] = apply(decl.user_transform, values) if user_scale else values
    return pd.DataFrame(columns)


def cure_fraction(fit: FitResult, profile: dict[str, float], n: int = 4000, seed: int = 0) -> dict[str, float]:
    """Posterior summary of the cured proportion expit(sum of cure coefficients times the profile)."""
    model = fit.model
    cure = [info for info in model.submodels if info.cure_hypers]
    if not cure:
        raise ValueError("cure fraction needs a mixture cure submodel")
    info = cure[0]
    draws = _sample_theta(fit.theta_posterior, n, seed)
    suffix = f"(cure)_{info.name}"
    eta = np.zeros(n)
    missing = []
    for symbol, index in info.cure_hypers.items():
        name = symbol[: -len(suffix)]
        if name == "Int":
            eta += draws[:, index]
        elif name in profile:
            eta += draws[:, index] * float(profile[name])
        else:
            missing.append(name)
    if missing:
        raise ValueError(f"{info.name}: covariate profile does not resolve cure terms {missing}")
    fraction = expit(eta)
    summary = {"mean": float(np.mean(fraction)), "sd": float(np.std(fraction))}
    for level, value in zip(QUANTILE_LEVELS, np.quantile(fraction, QUANTILE_LEVELS)):
        summary[quantile_key(level)] = float(value)
    return summary
