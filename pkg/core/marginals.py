from __future__ import annotations

import math

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import CubicSpline

from core.models import QUANTILE_LEVELS, Marginal, Transform
from core.transforms import apply, check_monotone, derivative

_LINEAR_TRANSFORMS = {"identity", "negate", "affine"}
_REFINE = 20


def quantile_key(level: float) -> str:
    return f"{level:g}quant"


def summarize_density(support: np.ndarray, density: np.ndarray) -> dict[str, float]:
    """Trapezoid moments and inverse-CDF quantiles of a density tabulated on a grid."""
    support = np.asarray(support, dtype=float)
    density = np.asarray(density, dtype=float)
    mass = trapezoid(density, support)
    if not mass > 0:
        raise ValueError("density grid has no mass")
    density = density / mass
    mean = float(trapezoid(support * density, support))
    variance = float(trapezoid((support - mean) ** 2 * density, support))

    if support.shape[0] >= 4:
        fine = np.linspace(support[0], support[-1], _REFINE * (support.shape[0] - 1) + 1)
        fine_density = np.clip(CubicSpline(support, density)(fine), 0.0, None)
    else:
        fine, fine_density = support, density
    cdf = cumulative_trapezoid(fine_density, fine, initial=0.0)
    cdf = np.maximum.accumulate(cdf / cdf[-1])

    summary = {"mean": mean, "sd": math.sqrt(max(variance, 0.0))}
    for level in QUANTILE_LEVELS:
        summary[quantile_key(level)] = float(np.interp(level, cdf, fine))
    summary["mode"] = float(support[int(np.argmax(density))])
    return summary


def _normalised(support: np.ndarray, density: np.ndarray) -> np.ndarray:
    mass = trapezoid(density, support)
    return density / mass


def density_marginal(support: np.ndarray, density: np.ndarray, approximate: bool = False) -> Marginal:
    support = np.asarray(support, dtype=float)
    density = _normalised(support, np.clip(np.asarray(density, dtype=float), 0.0, None))
    return Marginal(support, density, summarize_density(support, density), approximate)


def normal_marginal(
    mean: float,
    sd: float,
    points: int = 75,
    span: float = 6.0,
    approximate: bool = False,
) -> Marginal:
    sd = max(float(sd), 1e-12 * max(1.0, abs(mean)))
    support = np.linspace(mean - span * sd, mean + span * sd, points)
    density = _normalised(support, stats.norm.pdf(support, loc=mean, scale=sd))
    summary = {"mean": float(mean), "sd": float(sd)}
    for level in QUANTILE_LEVELS:
        summary[quantile_key(level)] = float(stats.norm.ppf(level, loc=mean, scale=sd))
    summary["mode"] = float(mean)
    return Marginal(support, density, summary, approximate)


def mixture_quantiles(
    means: np.ndarray,
    sds: np.ndarray,
    weights: np.ndarray,
    levels: tuple[float, ...] = QUANTILE_LEVELS,
    iterations: int = 80,
) -> np.ndarray:
    """Quantiles of Gaussian mixtures by vectorised bisection; means/sds are (components, coordinates)."""
    weights = np.asarray(weights, dtype=float)
    levels_arr = np.asarray(levels, dtype=float)
    if means.shape[0] == 1:
        return means[0][:, None] + sds[0][:, None] * stats.norm.ppf(levels_arr)[None, :]
    lower = np.min(means - 12.0 * sds, axis=0)[:, None] * np.ones((1, levels_arr.shape[0]))
    upper = np.max(means + 12.0 * sds, axis=0)[:, None] * np.ones((1, levels_arr.shape[0]))
    for _ in range(iterations):
        middle = 0.5 * (lower + upper)
        cdf = np.einsum(
            "k,kjl->jl",
            weights,
            stats.norm.cdf((middle[None, :, :] - means[:, :, None]) / sds[:, :, None]),
        )
        below = cdf < levels_arr[None, :]
        lower = np.where(below, middle, lower)
        upper = np.where(below, upper, middle)
    return 0.5 * (lower + upper)


def mixture_marginals(
    means: np.ndarray,
    variances: np.ndarray,
    weights: np.ndarray,
    points: int = 75,
    span: float = 6.0,
) -> list[Marginal]:
    """Per-coordinate weight-mixtures of Gaussians; means/variances are (components, coordinates)."""
    weights = np.asarray(weights, dtype=float)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    variances = np.atleast_2d(np.asarray(variances, dtype=float))
    mix_mean = weights @ means
    mix_var = np.maximum(weights @ (variances + means**2) - mix_mean**2, 0.0)
    floor = 1e-12 * np.maximum(1.0, np.abs(mix_mean))
    mix_sd = np.maximum(np.sqrt(mix_var), floor)
    sds = np.maximum(np.sqrt(np.maximum(variances, 0.0)), floor[None, :])

    quantiles = mixture_quantiles(means, sds, weights)
    grid = np.linspace(-span, span, points)
    marginals: list[Marginal] = []
    for j in range(means.shape[1]):
        support = mix_mean[j] + mix_sd[j] * grid
        density = weights @ stats.norm.pdf(support[None, :], loc=means[:, j, None], scale=sds[:, j, None])
        density = _normalised(support, density)
        summary = {"mean": float(mix_mean[j]), "sd": float(mix_sd[j])}
        for index, level in enumerate(QUANTILE_LEVELS):
            summary[quantile_key(level)] = float(quantiles[j, index])
        summary["mode"] = float(support[int(np.argmax(density))])
        marginals.append(Marginal(support, density, summary))
    return marginals


def transform_marginal(marginal: Marginal, transform: Transform) -> Marginal:
    """Change of variables through a strictly monotone transform, Jacobian applied."""
    support = marginal.support
    direction = check_monotone(transform, support)
    summary = marginal.summary

    if transform.name in _LINEAR_TRANSFORMS:
        if transform.name == "identity":
            scale, shift = 1.0, 0.0
        elif transform.name == "negate":
            scale, shift = -1.0, 0.0
        else:
            scale, shift = transform.params
        new_support = scale * support + shift
        new_density = marginal.density / abs(scale)
        new_summary = {"mean": scale * summary["mean"] + shift, "sd": abs(scale) * summary["sd"]}
        for level in QUANTILE_LEVELS:
            source = level if scale > 0 else 1.0 - level
            new_summary[quantile_key(level)] = scale * summary[quantile_key(source)] + shift
        new_summary["mode"] = scale * summary["mode"] + shift
        if scale < 0:
            new_support, new_density = new_support[::-1], new_density[::-1]
        return Marginal(new_support, new_density, new_summary, marginal.approximate)

    with np.errstate(all="ignore"):
        values = apply(transform, support)
        jacobian = np.abs(derivative(transform, support))
        density = marginal.density / jacobian
    usable = np.isfinite(values) & np.isfinite(density) & (jacobian > 0)
    values, density = values[usable], density[usable]
    if direction < 0:
        values, density = values[::-1], density[::-1]
    keep = np.concatenate([[True], np.diff(values) > 0])
    values, density = values[keep], density[keep]
    if values.shape[0] < 2:
        raise ValueError(f"Transform '{transform.name}' collapses the marginal support")
    density = _normalised(values, density)

    with np.errstate(all="ignore"):
        mapped = apply(transform, support)
    finite = np.isfinite(mapped)
    source_density = marginal.density[finite]
    source_support = support[finite]
    mass = trapezoid(source_density, source_support)
    mean = float(trapezoid(mapped[finite] * source_density, source_support) / mass)
    second = float(trapezoid(mapped[finite] ** 2 * source_density, source_support) / mass)
    new_summary = {"mean": mean, "sd": math.sqrt(max(second - mean * mean, 0.0))}
    for level in QUANTILE_LEVELS:
        source = level if direction > 0 else 1.0 - level
        new_summary[quantile_key(level)] = float(apply(transform, np.array([summary[quantile_key(source)]]))[0])
    new_summary["mode"] = float(values[int(np.argmax(density))])
    return Marginal(values, density, new_summary, marginal.approximate)
