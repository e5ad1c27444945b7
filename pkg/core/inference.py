from __future__ import annotations

import itertools
import math
from typing import Any

import numpy as np
from scipy import linalg, optimize, stats
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from core.lgm import (
    InferenceError,
    evaluate_theta,
    gaussian_approx,
    row_loglik,
    safe_log_post_theta,
)
from core.marginals import (
    density_marginal,
    mixture_marginals,
    normal_marginal,
    transform_marginal,
)
from core.models import (
    LOG_2PI,
    FitResult,
    GaussianApprox,
    LatentModel,
    Marginal,
    PosteriorSamples,
    ThetaPosterior,
)
from core.priors import group_dimension, prior_median, prior_moments, priors_used

STRATEGIES = ("auto", "grid", "empirical-bayes")
_STRATEGY_ALIASES = {"eb": "empirical-bayes", "empirical-bayes": "empirical-bayes", "grid": "grid", "auto": "auto"}
_MAX_AXIS_STEPS = 12


def resolve_strategy(model: LatentModel, strategy: str) -> str:
    key = _STRATEGY_ALIASES.get(strategy)
    if key is None:
        raise ValueError(f"Unknown integration strategy '{strategy}'; expected one of {STRATEGIES} or 'eb'")
    if key == "auto":
        return "grid" if model.n_hyper <= model.settings.grid_max_dim else "empirical-bayes"
    return key


def starting_point(model: LatentModel) -> np.ndarray:
    """Prior medians on the internal scale, clipped to the initial search window."""
    low, high = model.settings.initial_window
    start = []
    for decl in model.hypers:
        value = decl.initial
        if decl.prior.family != "flat":
            median = prior_median(decl.prior, decl.prior_component, group_dimension(model, decl))
            if math.isfinite(median):
                value = median
        start.append(min(max(value, low), high))
    return np.asarray(start, dtype=float)


class _Objective:
    """Negative log pi~(theta|y) with a warm start from the best latent mode seen so far."""

    def __init__(self, model: LatentModel) -> None:
        self.model = model
        self.best_value = -math.inf
        self.best_mode: np.ndarray | None = None
        self.evaluations = 0

    def log_density(self, theta: np.ndarray) -> tuple[float, GaussianApprox | None]:
        self.evaluations += 1
        value, approx = safe_log_post_theta(self.model, np.asarray(theta, dtype=float), self.best_mode)
        if approx is not None and value > self.best_value:
            self.best_value = value
            self.best_mode = approx.mode
        return value, approx

    def __call__(self, theta: np.ndarray) -> float:
        value, _ = self.log_density(theta)
        return -value if math.isfinite(value) else math.inf


def find_mode(model: LatentModel, objective: _Objective | None = None) -> tuple[np.ndarray, float]:
    settings = model.settings
    objective = objective or _Objective(model)
    start = starting_point(model)
    if start.shape[0] == 0:
        value, _ = objective.log_density(start)
        if not math.isfinite(value):
            raise InferenceError("log posterior is not finite for the model without hyperparameters")
        return start, value

    dim = start.shape[0]
    options = {
        "xatol": 1e-4,
        "fatol": settings.mode_tol,
        "maxiter": 1000 * dim,
        "maxfev": 2000 * dim,
    }
    result = None
    point = start
    for _ in range(2):
        simplex = np.vstack([point, point + settings.simplex_step * np.eye(dim)])
        result = optimize.minimize(
            objective,
            point,
            method="Nelder-Mead",
            options={**options, "initial_simplex": simplex},
        )
        point = np.asarray(result.x, dtype=float)
    if result is None or not math.isfinite(result.fun):
        raise InferenceError("hyperparameter mode search found no point with a finite log posterior")
    if not result.success:
        raise InferenceError(f"hyperparameter mode search did not converge: {result.message}")
    return point, -float(result.fun)


def numeric_hessian(function: Any, point: np.ndarray, step: float, centre_value: float) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    dim = point.shape[0]
    hessian = np.zeros((dim, dim))
    unit = np.eye(dim) * step
    for i in range(dim):
        forward = function(point + unit[i])
        backward = function(point - unit[i])
        hessian[i, i] = (forward - 2.0 * centre_value + backward) / (step * step)
        for j in range(i):
            value = (
                function(point + unit[i] + unit[j])
                - function(point + unit[i] - unit[j])
                - function(point - unit[i] + unit[j])
                + function(point - unit[i] - unit[j])
            ) / (4.0 * step * step)
            hessian[i, j] = hessian[j, i] = value
    return hessian


def _standardised_axes(hessian: np.ndarray, warnings: list[str]) -> np.ndarray:
    """theta = mode + axes @ z, with axes @ axes.T the inverse negative Hessian."""
    curvature = -0.5 * (hessian + hessian.T)
    if np.all(np.isfinite(curvature)):
        eigenvalues, eigenvectors = np.linalg.eigh(curvature)
        if eigenvalues.shape[0] == 0 or eigenvalues.min() > 0:
            return eigenvectors / np.sqrt(eigenvalues)[None, :]
    warnings.append(
        "negative Hessian of log pi(theta|y) is not positive definite at the mode; "
        "using diagonal curvature for the hyperparameter grid"
    )
    diagonal = np.diag(curvature).copy()
    diagonal[~(np.isfinite(diagonal) & (diagonal > 0))] = 1.0
    return np.diag(1.0 / np.sqrt(diagonal))


def _grid_points(
    model: LatentModel,
    mode: np.ndarray,
    mode_value: float,
    axes: np.ndarray,
    mode_latent: np.ndarray | None,
) -> tuple[list[np.ndarray], list[float], list[GaussianApprox]]:
    settings = model.settings
    dim = mode.shape[0]
    dz = settings.grid_dz
    drop = settings.grid_log_drop
    cache: dict[tuple[int, ...], tuple[float, GaussianApprox | None]] = {}

    def evaluate(index: tuple[int, ...]) -> tuple[float, GaussianApprox | None]:
        if index not in cache:
            theta = mode + axes @ (dz * np.asarray(index, dtype=float))
            cache[index] = safe_log_post_theta(model, theta, mode_latent)
        return cache[index]

    axis_drops: list[dict[int, float]] = []
    ranges = []
    for j in range(dim):
        drops = {0: 0.0}
        extent = []
        for direction in (-1, 1):
            step = 0
            while step < _MAX_AXIS_STEPS:
                step += 1
                index = tuple(direction * step if axis == j else 0 for axis in range(dim))
                value, _ = evaluate(index)
                drops[direction * step] = mode_value - value
                if not mode_value - value <= drop:
                    break
            extent.append(step)
        axis_drops.append(drops)
        ranges.append(range(-extent[0], extent[1] + 1))

    thetas: list[np.ndarray] = []
    values: list[float] = []
    approxs: list[GaussianApprox] = []
    for index in itertools.product(*ranges):
        on_axis = sum(1 for k in index if k != 0) <= 1
        if not on_axis:
            predicted = sum(axis_drops[axis][k] for axis, k in enumerate(index))
            if not predicted <= 1.5 * drop:
                continue
        value, approx = evaluate(index)
        if approx is None or not math.isfinite(value):
            continue
        if not on_axis and mode_value - value > drop:
            continue
        thetas.append(approx.theta)
        values.append(value)
        approxs.append(approx)
    return thetas, values, approxs


def explore(model: LatentModel, strategy: str = "auto") -> tuple[ThetaPosterior, list[GaussianApprox]]:
    """Locate the hyperparameter mode, integrate around it, and keep per-point Gaussian approximations."""
    settings = model.settings
    resolved = resolve_strategy(model, strategy)
    warnings: list[str] = []
    objective = _Objective(model)
    mode, mode_value = find_mode(model, objective)
    dim = mode.shape[0]

    def log_density(theta: np.ndarray) -> float:
        value, _ = safe_log_post_theta(model, theta, objective.best_mode)
        return value

    if dim:
        hessian = numeric_hessian(log_density, mode, settings.hessian_step, mode_value)
    else:
        hessian = np.zeros((0, 0))
    axes = _standardised_axes(hessian, warnings)

    if resolved == "grid" and dim:
        thetas, values, approxs = _grid_points(model, mode, mode_value, axes, objective.best_mode)
        if not thetas:
            raise InferenceError("hyperparameter grid has no point with a finite log posterior")
    else:
        value, approx = evaluate_theta(model, mode, objective.best_mode)
        thetas, values, approxs = [approx.theta], [value], [approx]
        mode_value = value
        if resolved == "empirical-bayes" and dim:
            warnings.append(
                f"empirical Bayes strategy used for {dim} hyperparameters; "
                "hyperparameter marginals are Gaussian approximations"
            )

    log_density_values = np.asarray(values, dtype=float)
    weights = np.exp(log_density_values - log_density_values.max())
    weights = weights / weights.sum()
    cell_volume = settings.grid_dz**dim * abs(float(np.linalg.det(axes))) if dim else 1.0

    # Variances only at the kept points; the warm start makes this a single Newton step.
    approxs = [
        gaussian_approx(model, approx.theta, init=approx.mode, with_variances=True) for approx in approxs
    ]
    posterior = ThetaPosterior(
        points=np.vstack(thetas) if dim else np.zeros((1, 0)),
        log_density=log_density_values,
        weights=weights,
        strategy="grid" if resolved == "grid" and dim else "empirical-bayes",
        mode=mode,
        hessian=hessian,
        axes=axes,
        cell_volume=cell_volume if resolved == "grid" and dim else 1.0,
        dz=settings.grid_dz,
        mode_log_density=mode_value,
        warnings=warnings,
    )
    return posterior, approxs


def explore_theta(model: LatentModel, strategy: str = "auto") -> ThetaPosterior:
    return explore(model, strategy)[0]


def latent_marginals(model: LatentModel, tp: ThetaPosterior, approxs: list[GaussianApprox]) -> list[Marginal]:
    if model.n_latent == 0:
        return []
    if any(approx.marginal_variances is None for approx in approxs):
        raise InferenceError("latent marginals need the marginal variances of every Gaussian approximation")
    means = np.vstack([approx.mode for approx in approxs])
    variances = np.vstack([approx.marginal_variances for approx in approxs])
    settings = model.settings
    return mixture_marginals(means, variances, tp.weights, settings.marginal_points, settings.marginal_sd_span)


def _one_dimensional_marginal(model: LatentModel, tp: ThetaPosterior) -> Marginal:
    settings = model.settings
    order = np.argsort(tp.points[:, 0])
    nodes = tp.points[order, 0]
    log_values = tp.log_density[order] - tp.log_density.max()
    sd = math.sqrt(float(tp.covariance[0, 0]))
    centre = float(tp.mode[0])
    support = np.linspace(
        centre - settings.marginal_sd_span * sd,
        centre + settings.marginal_sd_span * sd,
        settings.marginal_points,
    )
    if nodes.shape[0] < 3:
        return normal_marginal(centre, sd, settings.marginal_points, settings.marginal_sd_span)

    spline = CubicSpline(nodes, log_values)
    slope = spline.derivative()
    curvature = 1.0 / (sd * sd)
    log_density = spline(np.clip(support, nodes[0], nodes[-1]))
    below = support < nodes[0]
    above = support > nodes[-1]
    # Gaussian tail continuation beyond the explored range.
    left_slope = max(float(slope(nodes[0])), 0.0)
    right_slope = min(float(slope(nodes[-1])), 0.0)
    offset_left = support[below] - nodes[0]
    offset_right = support[above] - nodes[-1]
    log_density[below] = log_values[0] + left_slope * offset_left - 0.5 * curvature * offset_left**2
    log_density[above] = log_values[-1] + right_slope * offset_right - 0.5 * curvature * offset_right**2
    return density_marginal(support, np.exp(log_density - log_density.max()))


def _smoothed_marginal(model: LatentModel, tp: ThetaPosterior, axis: int) -> Marginal:
    """Grid weights collapsed onto one coordinate, Gaussian-kernel smoothed with the variance preserved."""
    settings = model.settings
    values = tp.points[:, axis]
    weights = tp.weights
    mean = float(weights @ values)
    variance = float(weights @ (values - mean) ** 2)
    sd_axis = math.sqrt(float(tp.covariance[axis, axis]))
    if not variance > 0:
        return normal_marginal(mean, sd_axis, settings.marginal_points, settings.marginal_sd_span, True)
    bandwidth = 0.5 * tp.dz * sd_axis
    if bandwidth**2 >= variance:
        bandwidth = math.sqrt(0.5 * variance)
    shrink = math.sqrt((variance - bandwidth**2) / variance)
    centres = mean + shrink * (values - mean)
    sd = math.sqrt(variance)
    support = np.linspace(
        mean - settings.marginal_sd_span * sd,
        mean + settings.marginal_sd_span * sd,
        settings.marginal_points,
    )
    density = weights @ stats.norm.pdf(support[None, :], loc=centres[:, None], scale=bandwidth)
    return density_marginal(support, density)


def hyper_marginals_internal(model: LatentModel, tp: ThetaPosterior) -> list[Marginal]:
    settings = model.settings
    if tp.dim == 0:
        return []
    if tp.strategy == "empirical-bayes":
        covariance = tp.covariance
        return [
            normal_marginal(
                float(tp.mode[j]),
                math.sqrt(float(covariance[j, j])),
                settings.marginal_points,
                settings.marginal_sd_span,
                approximate=True,
            )
            for j in range(tp.dim)
        ]
    if tp.dim == 1:
        return [_one_dimensional_marginal(model, tp)]
    return [_smoothed_marginal(model, tp, axis) for axis in range(tp.dim)]


def hyper_marginals(
    model: LatentModel,
    tp: ThetaPosterior,
    internal: list[Marginal] | None = None,
) -> list[Marginal]:
    """Hyperparameter marginals on the user scale (for example variance instead of log-precision)."""
    internal = hyper_marginals_internal(model, tp) if internal is None else internal
    return [transform_marginal(marginal, decl.user_transform) for marginal, decl in zip(internal, model.hypers)]


def ensure_factors(
    model: LatentModel,
    approxs: list[GaussianApprox],
    indices: list[int] | None = None,
) -> list[GaussianApprox]:
    """Recompute the Gaussian approximations that lack a retained factorisation (warm-started at their mode)."""
    indices = list(range(len(approxs))) if indices is None else indices
    result = list(approxs)
    for index in indices:
        approx = result[index]
        if approx.factor is None:
            result[index] = gaussian_approx(
                model,
                approx.theta,
                init=approx.mode,
                keep_factor=True,
                with_variances=approx.marginal_variances is not None,
            )
    return result


def _draw_from(approx: GaussianApprox, normals: np.ndarray) -> np.ndarray:
    """Draws (rows) from N(mode, H^-1) with the sum-to-zero constraints imposed by kriging."""
    lower = approx.factor[0]
    draws = approx.mode[:, None] + linalg.solve_triangular(lower, normals, lower=True, trans="T", check_finite=False)
    correction = approx.constraint_correction
    if correction is not None:
        draws = draws - correction.weights @ linalg.cho_solve(
            correction.gram_factor, correction.matrix @ draws, check_finite=False
        )
    return draws.T


def sample_posterior(
    model: LatentModel,
    tp: ThetaPosterior,
    approxs: list[GaussianApprox],
    n: int,
    seed: int = 0,
    recompute: bool = False,
) -> PosteriorSamples:
    """Joint draws of (theta, x): theta by grid weight, x from the matching Gaussian conditional."""
    if n < 0:
        raise ValueError(f"Number of posterior samples must be >= 0, got {n}")
    if n == 0:
        return PosteriorSamples(
            theta=np.zeros((0, tp.dim)),
            latent=np.zeros((0, model.n_latent)),
            theta_index=np.zeros(0, dtype=int),
        )
    rng = np.random.default_rng(seed)
    index = rng.choice(tp.weights.shape[0], size=n, p=tp.weights)
    latent = np.empty((n, model.n_latent))
    for point in np.unique(index):
        rows = np.flatnonzero(index == point)
        approx = approxs[point]
        if approx.factor is None:
            if not recompute:
                raise InferenceError(
                    "posterior sampling needs retained factorisations; fit the model with keep_config=True"
                )
            approx = ensure_factors(model, [approx])[0]
        normals = rng.standard_normal((model.n_latent, rows.shape[0]))
        latent[rows] = _draw_from(approx, normals)
    return PosteriorSamples(theta=tp.points[index].copy(), latent=latent, theta_index=index)


def sample_hyperpar(tp: ThetaPosterior, n: int, seed: int = 0) -> np.ndarray:
    """Draws of theta (internal scale): grid cells jittered uniformly in z-space, or the Hessian Gaussian."""
    rng = np.random.default_rng(seed)
    if tp.dim == 0:
        return np.zeros((n, 0))
    if tp.strategy == "empirical-bayes":
        return tp.mode[None, :] + rng.standard_normal((n, tp.dim)) @ tp.axes.T
    index = rng.choice(tp.weights.shape[0], size=n, p=tp.weights)
    jitter = rng.uniform(-0.5 * tp.dz, 0.5 * tp.dz, size=(n, tp.dim))
    return tp.points[index] + jitter @ tp.axes.T


def lincomb_marginals(
    model: LatentModel,
    tp: ThetaPosterior,
    approxs: list[GaussianApprox],
    weights: np.ndarray,
) -> list[Marginal]:
    """Marginals of fixed linear combinations (rows of `weights`) of the latent field."""
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    if weights.shape[1] != model.n_latent:
        raise ValueError(f"linear combination has {weights.shape[1]} weights, latent field has {model.n_latent}")
    factored = ensure_factors(model, approxs)
    means = []
    variances = []
    for approx in factored:
        means.append(weights @ approx.mode)
        solved = linalg.cho_solve(approx.factor, weights.T, check_finite=False)
        variance = np.sum(weights.T * solved, axis=0)
        correction = approx.constraint_correction
        if correction is not None:
            projected = correction.weights.T @ weights.T
            variance = variance - np.sum(
                projected * linalg.cho_solve(correction.gram_factor, projected, check_finite=False), axis=0
            )
        variances.append(np.maximum(variance, 0.0))
    settings = model.settings
    return mixture_marginals(
        np.vstack(means),
        np.vstack(variances),
        tp.weights,
        settings.marginal_points,
        settings.marginal_sd_span,
    )


def lincomb_marginal(
    model: LatentModel,
    tp: ThetaPosterior,
    approxs: list[GaussianApprox],
    weights: np.ndarray | dict[str, float],
) -> Marginal:
    if isinstance(weights, dict):
        vector = np.zeros(model.n_latent)
        for symbol, coefficient in weights.items():
            kind, index = model.lookup(symbol)
            if kind != "latent":
                raise ValueError(f"'{symbol}' is a hyperparameter; linear combinations use latent symbols")
            vector[index] += coefficient
        weights = vector
    return lincomb_marginals(model, tp, approxs, np.asarray(weights, dtype=float))[0]


def _deviance(model: LatentModel, latent: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return -2.0 * np.sum(row_loglik(model, latent, theta), axis=1)


def fit_criteria(
    model: LatentModel,
    tp: ThetaPosterior,
    approxs: list[GaussianApprox],
    samples: PosteriorSamples | None,
) -> dict[str, Any]:
    """Log marginal likelihood (integration and Gaussian), DIC and WAIC."""
    dim = tp.dim
    gaussian = tp.mode_log_density + 0.5 * dim * LOG_2PI
    if dim:
        gaussian += math.log(abs(float(np.linalg.det(tp.axes))))
    if tp.strategy == "grid":
        integration = float(logsumexp(tp.log_density) + math.log(tp.cell_volume))
    else:
        integration = gaussian
    criteria: dict[str, Any] = {
        "log_mlik_integration": float(integration),
        "log_mlik_gaussian": float(gaussian),
        "log_mlik_approximate": tp.strategy == "empirical-bayes" and dim > 0,
    }
    if samples is None or samples.n == 0 or model.n_rows == 0:
        return criteria

    loglik = np.empty((samples.n, model.n_rows))
    for point in np.unique(samples.theta_index):
        rows = np.flatnonzero(samples.theta_index == point)
        loglik[rows] = row_loglik(model, samples.latent[rows], tp.points[point])

    deviance = -2.0 * np.sum(loglik, axis=1)
    mean_deviance = float(np.mean(deviance))
    mean_latent = tp.weights @ np.vstack([approx.mode for approx in approxs])
    mean_theta = tp.weights @ tp.points
    plug_in = float(_deviance(model, mean_latent, mean_theta)[0])
    p_d = mean_deviance - plug_in

    lppd = float(np.sum(logsumexp(loglik, axis=0) - math.log(samples.n)))
    p_waic = float(np.sum(np.var(loglik, axis=0, ddof=1))) if samples.n > 1 else 0.0
    criteria.update(
        {
            "dic": mean_deviance + p_d,
            "p_d": p_d,
            "mean_deviance": mean_deviance,
            "deviance_at_mean": plug_in,
            "waic": -2.0 * (lppd - p_waic),
            "p_waic": p_waic,
            "lppd": lppd,
            "criteria_samples": samples.n,
        }
    )
    return criteria


def _symmetric_kl(mean_a: float, var_a: float, mean_b: float, var_b: float) -> float:
    delta = (mean_a - mean_b) ** 2
    return (var_a + delta) / (2.0 * var_b) + (var_b + delta) / (2.0 * var_a) - 1.0


def diagnostics(model: LatentModel, fit: FitResult) -> list[str]:
    settings = model.settings
    warnings: list[str] = []
    tp = fit.theta_posterior

    if tp.dim >= 2:
        covariance = tp.covariance
        sd = np.sqrt(np.diag(covariance))
        for i in range(tp.dim):
            for j in range(i):
                correlation = covariance[i, j] / (sd[i] * sd[j])
                if abs(correlation) > settings.correlation_warning:
                    warnings.append(
                        f"hyperparameters '{model.hypers[j].label}' and '{model.hypers[i].label}' are highly "
                        f"correlated (correlation {correlation:.4f})"
                    )

    random_count = sum(block.size for block in model.blocks if block.is_random)
    if random_count > model.n_rows:
        warnings.append(
            f"number of random effects ({random_count}) is larger than the number of data rows ({model.n_rows})"
        )

    labels = model.latent_labels()
    for block in model.blocks:
        if block.kind != "fixed-effect":
            continue
        precisions = np.full(block.size, 0.01) if block.prior_precision is None else block.prior_precision
        for offset in range(block.size):
            index = block.start + offset
            prior_mean = 0.0 if block.prior_mean is None else float(block.prior_mean[offset])
            summary = fit.latent_marginals[index].summary
            kl = _symmetric_kl(summary["mean"], summary["sd"] ** 2, prior_mean, 1.0 / float(precisions[offset]))
            if kl < settings.kl_warning:
                warnings.append(_prior_match_message(labels[index], kl, settings.kl_warning))

    for index, decl in enumerate(model.hypers):
        if index >= len(fit.hyper_marginals_internal):
            break
        moments = prior_moments(decl.prior, decl.prior_component, group_dimension(model, decl))
        if moments is None:
            continue
        summary = fit.hyper_marginals_internal[index].summary
        kl = _symmetric_kl(summary["mean"], summary["sd"] ** 2, moments[0], moments[1])
        if kl < settings.kl_warning:
            warnings.append(_prior_match_message(decl.label, kl, settings.kl_warning))
    return warnings


def _prior_match_message(label: str, kl: float, threshold: float) -> str:
    return (
        f"posterior of '{label}' matches its prior (symmetric KL {kl:.3g} < {threshold:g}); "
        "the parameter may not be identified by the data"
    )


def fit(
    model: LatentModel,
    strategy: str = "auto",
    seed: int = 0,
    keep_config: bool = False,
    criteria: bool = True,
    criteria_samples: int | None = None,
) -> FitResult:
    tp, approxs = explore(model, strategy)
    if keep_config:
        approxs = ensure_factors(model, approxs)
    latent = latent_marginals(model, tp, approxs)
    internal = hyper_marginals_internal(model, tp)
    user = hyper_marginals(model, tp, internal)

    samples = None
    if criteria:
        count = model.settings.criteria_samples if criteria_samples is None else criteria_samples
        samples = sample_posterior(model, tp, approxs, count, seed, recompute=True)
    result = FitResult(
        model=model,
        theta_posterior=tp,
        approxs=approxs,
        latent_marginals=latent,
        hyper_marginals_internal=internal,
        hyper_marginals=user,
        criteria=fit_criteria(model, tp, approxs, samples),
        warnings=list(tp.warnings),
        priors=priors_used(model),
        seed=seed,
        samples=samples if keep_config else None,
    )
    result.warnings.extend(diagnostics(model, result))
    return result
