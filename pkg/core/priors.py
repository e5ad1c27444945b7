from __future__ import annotations

import math
from typing import Any

import numpy as np
from scipy import integrate, special, stats

from core.models import HyperDecl, LatentModel, PriorSpec

PRIOR_FAMILIES = (
    "normal",
    "pc-precision",
    "gamma-on-precision",
    "pc-weibull-shape",
    "wishart-re",
    "flat",
)

_PRIOR_DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "normal": {"mean": 0.0, "prec": 0.01},
    "pc-precision": {"u": 0.5, "alpha": 0.01},
    "gamma-on-precision": {"a": 1.0, "b": 5e-5},
    "pc-weibull-shape": {"lambda": 5.0},
    "wishart-re": {"r": 10.0, "scale": 1.0},
    "flat": {},
}

# Second derivative of the Weibull-to-exponential KL divergence at shape 1.
_KLD_CURVATURE_AT_ONE = (1.0 - np.euler_gamma) ** 2 + math.pi**2 / 6.0


class PriorError(ValueError):
    """Raised when a prior specification or its argument is out of domain."""


def validate_prior(spec: PriorSpec, dim: int = 1) -> PriorSpec:
    """Return a copy of the spec with defaults filled in, after domain checks."""
    if spec.family not in PRIOR_FAMILIES:
        raise PriorError(f"Unknown prior family '{spec.family}'; expected one of {PRIOR_FAMILIES}")

    params = dict(_PRIOR_DEFAULT_PARAMS[spec.family])
    for key, value in spec.params.items():
        if key not in params:
            raise PriorError(f"Prior '{spec.family}' has no parameter '{key}'")
        params[key] = float(value)

    family = spec.family
    if family == "normal" and not params["prec"] > 0:
        raise PriorError(f"normal prior requires prec > 0, got {params['prec']}")
    if family == "pc-precision":
        if not params["u"] > 0:
            raise PriorError(f"pc-precision prior requires u > 0, got {params['u']}")
        if not 0 < params["alpha"] < 1:
            raise PriorError(f"pc-precision prior requires 0 < alpha < 1, got {params['alpha']}")
    if family == "gamma-on-precision" and not (params["a"] > 0 and params["b"] > 0):
        raise PriorError(f"gamma prior requires a, b > 0, got a={params['a']}, b={params['b']}")
    if family == "pc-weibull-shape" and not params["lambda"] > 0:
        raise PriorError(f"pc-weibull-shape prior requires lambda > 0, got {params['lambda']}")
    if family == "wishart-re":
        if not params["r"] > dim - 1:
            raise PriorError(f"wishart-re prior requires r > dim - 1 = {dim - 1}, got r={params['r']}")
        if not params["scale"] > 0:
            raise PriorError(f"wishart-re prior requires scale > 0, got {params['scale']}")

    return PriorSpec(family=family, params=params)


def wishart_dimension(n_params: int) -> int:
    """Matrix dimension k for a vector of k log-precisions plus k(k-1)/2 fisher-z values."""
    for k in (1, 2, 3):
        if k + k * (k - 1) // 2 == n_params:
            return k
    raise PriorError(f"wishart-re expects 1, 3 or 6 internal parameters, got {n_params}")


def log_prior(spec: PriorSpec, theta: float | np.ndarray) -> float:
    """Log density on the internal scale, Jacobian included."""
    family = spec.family
    params = {**_PRIOR_DEFAULT_PARAMS.get(family, {}), **spec.params}

    if family == "wishart-re":
        vector = np.atleast_1d(np.asarray(theta, dtype=float))
        return _wishart_log_density(vector, params["r"], params["scale"])

    value = float(np.asarray(theta, dtype=float).reshape(-1)[0])
    if family == "normal":
        prec = params["prec"]
        return 0.5 * math.log(prec / (2.0 * math.pi)) - 0.5 * prec * (value - params["mean"]) ** 2
    if family == "pc-precision":
        lam = -math.log(params["alpha"]) / params["u"]
        return math.log(lam / 2.0) - 0.5 * value - lam * math.exp(-0.5 * value)
    if family == "gamma-on-precision":
        a, b = params["a"], params["b"]
        return a * math.log(b) - special.gammaln(a) + a * value - b * math.exp(value)
    if family == "pc-weibull-shape":
        return _pc_weibull_log_density(value, params["lambda"])
    if family == "flat":
        return 0.0
    raise PriorError(f"Unknown prior family '{family}'")


def weibull_kld(alpha: float) -> float:
    """KL divergence of a unit-rate Weibull(alpha) from the unit exponential."""
    inv = 1.0 / alpha
    return (
        math.log(alpha)
        - (alpha - 1.0) * np.euler_gamma * inv
        - 1.0
        + math.exp(special.gammaln(1.0 + inv))
    )


def _weibull_kld_derivative(alpha: float) -> float:
    u = 1.0 + 1.0 / alpha
    gamma_u = math.exp(special.gammaln(u))
    with np.errstate(over="ignore"):
        return 1.0 / alpha - np.euler_gamma / alpha**2 - gamma_u * special.digamma(u) / alpha**2


def _pc_weibull_log_density(log_alpha: float, lam: float) -> float:
    alpha = math.exp(log_alpha)
    if abs(alpha - 1.0) < 1e-5:
        slope = math.sqrt(_KLD_CURVATURE_AT_ONE)
        distance = slope * abs(alpha - 1.0)
    else:
        try:
            kld = weibull_kld(alpha)
        except OverflowError:
            return -math.inf
        if not math.isfinite(kld):
            return -math.inf
        distance = math.sqrt(2.0 * max(kld, 0.0))
        derivative = float(_weibull_kld_derivative(alpha))
        if not (math.isfinite(derivative) and math.isfinite(distance)):
            return -math.inf
        slope = abs(derivative) / distance
    if slope <= 0.0:
        return -math.inf
    # Half of the mass on each side of the base model.
    return math.log(lam / 2.0) - lam * distance + math.log(slope) + log_alpha


def _wishart_log_density(theta: np.ndarray, r: float, scale: float) -> float:
    k = wishart_dimension(theta.shape[0])
    log_tau = theta[:k]
    sigma2 = np.exp(-log_tau)
    if k == 1:
        return float(stats.gamma.logpdf(math.exp(log_tau[0]), a=r / 2.0, scale=2.0 * scale) + log_tau[0])

    correlation = correlation_matrix(theta[k:], k)
    try:
        np.linalg.cholesky(correlation)
    except np.linalg.LinAlgError:
        return -math.inf

    sd = np.sqrt(sigma2)
    covariance = correlation * np.outer(sd, sd)
    precision = np.linalg.inv(covariance)
    precision = 0.5 * (precision + precision.T)
    log_density = stats.wishart.logpdf(precision, df=r, scale=scale * np.eye(k))

    _, log_det_cov = np.linalg.slogdet(covariance)
    rho = np.tanh(theta[k:])
    log_jacobian = -(k + 1) * log_det_cov + float(np.sum(np.log(sigma2)))
    for (i, j), value in zip(_pairs(k), rho):
        log_jacobian += math.log(sd[i] * sd[j]) + math.log1p(-value * value)
    return float(log_density + log_jacobian)


def _pairs(k: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(k) for j in range(i + 1, k)]


def correlation_matrix(fisher_z: np.ndarray, k: int) -> np.ndarray:
    matrix = np.eye(k)
    for (i, j), value in zip(_pairs(k), np.tanh(np.asarray(fisher_z, dtype=float))):
        matrix[i, j] = matrix[j, i] = value
    return matrix


def re_precision_matrix(theta: np.ndarray) -> np.ndarray:
    """Precision of a correlated random-effect vector from (log tau_1..k, fisher-z pairs)."""
    theta = np.asarray(theta, dtype=float)
    k = wishart_dimension(theta.shape[0])
    sd = np.exp(-0.5 * theta[:k])
    covariance = correlation_matrix(theta[k:], k) * np.outer(sd, sd)
    precision = np.linalg.inv(covariance)
    return 0.5 * (precision + precision.T)


def wishart_internal_draws(spec: PriorSpec, k: int, n: int, seed: int = 0) -> np.ndarray:
    """Prior draws mapped to the internal (log-precision, fisher-z) scale."""
    params = {**_PRIOR_DEFAULT_PARAMS["wishart-re"], **spec.params}
    rng = np.random.default_rng(seed)
    if k == 1:
        tau = stats.gamma.rvs(a=params["r"] / 2.0, scale=2.0 * params["scale"], size=n, random_state=rng)
        return np.log(tau).reshape(n, 1)
    precisions = stats.wishart.rvs(df=params["r"], scale=params["scale"] * np.eye(k), size=n, random_state=rng)
    covariances = np.linalg.inv(precisions)
    variances = np.diagonal(covariances, axis1=1, axis2=2)
    columns = [-np.log(variances[:, i]) for i in range(k)]
    for i, j in _pairs(k):
        rho = covariances[:, i, j] / np.sqrt(variances[:, i] * variances[:, j])
        columns.append(np.arctanh(np.clip(rho, -1 + 1e-12, 1 - 1e-12)))
    return np.column_stack(columns)


def prior_median(spec: PriorSpec, component: int = 0, k: int = 1) -> float:
    family = spec.family
    params = {**_PRIOR_DEFAULT_PARAMS.get(family, {}), **spec.params}
    if family == "normal":
        return params["mean"]
    if family == "pc-precision":
        lam = -math.log(params["alpha"]) / params["u"]
        return 2.0 * math.log(lam / math.log(2.0))
    if family == "gamma-on-precision":
        median = stats.gamma.ppf(0.5, params["a"], scale=1.0 / params["b"])
        return math.log(median) if median > 0 else -math.inf
    if family == "wishart-re":
        if component >= k:
            return 0.0
        return math.log(max(params["r"] - k - 1.0, 1.0) / params["scale"])
    return 0.0


def prior_moments(spec: PriorSpec, component: int = 0, k: int = 1) -> tuple[float, float] | None:
    """Mean and variance on the internal scale; None for improper priors."""
    family = spec.family
    params = {**_PRIOR_DEFAULT_PARAMS.get(family, {}), **spec.params}
    if family == "flat":
        return None
    if family == "normal":
        return params["mean"], 1.0 / params["prec"]
    if family == "gamma-on-precision":
        return float(special.digamma(params["a"]) - math.log(params["b"])), float(special.polygamma(1, params["a"]))
    if family == "pc-precision":
        lam = -math.log(params["alpha"]) / params["u"]
        return 2.0 * (np.euler_gamma + math.log(lam)), 4.0 * math.pi**2 / 6.0
    if family == "pc-weibull-shape":
        density = lambda x: math.exp(_pc_weibull_log_density(x, params["lambda"]))  # noqa: E731
        mass = integrate.quad(density, -8.0, 8.0, points=[0.0], limit=200)[0]
        mean = integrate.quad(lambda x: x * density(x), -8.0, 8.0, points=[0.0], limit=200)[0] / mass
        second = integrate.quad(lambda x: x * x * density(x), -8.0, 8.0, points=[0.0], limit=200)[0] / mass
        return mean, second - mean * mean
    if family == "wishart-re":
        draws = wishart_internal_draws(spec, k, 20000)[:, component]
        return float(np.mean(draws)), float(np.var(draws))
    raise PriorError(f"Unknown prior family '{family}'")


def marginal_prior_density(
    spec: PriorSpec,
    grid: np.ndarray,
    component: int = 0,
    k: int = 1,
) -> np.ndarray:
    """Prior density of one internal coordinate on a grid (joint priors by prior draws + KDE)."""
    grid = np.asarray(grid, dtype=float)
    if spec.family == "flat":
        width = float(grid[-1] - grid[0]) if grid.shape[0] > 1 else 1.0
        return np.full(grid.shape, 1.0 / width)
    if spec.family == "wishart-re" and k > 1:
        draws = wishart_internal_draws(spec, k, 20000)[:, component]
        return stats.gaussian_kde(draws)(grid)
    return np.exp([log_prior(spec, value) for value in grid])


def hyper_groups(model: LatentModel) -> list[tuple[PriorSpec, list[int]]]:
    """Hyperparameter indices grouped by the prior that governs them jointly."""
    groups: list[tuple[PriorSpec, list[int]]] = []
    by_key: dict[str, int] = {}
    for index, decl in enumerate(model.hypers):
        if decl.prior_group is None:
            groups.append((decl.prior, [index]))
            continue
        if decl.prior_group not in by_key:
            by_key[decl.prior_group] = len(groups)
            groups.append((decl.prior, []))
        groups[by_key[decl.prior_group]][1].append(index)
    for _, indices in groups:
        indices.sort(key=lambda i: model.hypers[i].prior_component)
    return groups


def log_prior_theta(model: LatentModel, theta: np.ndarray) -> float:
    total = 0.0
    for spec, indices in hyper_groups(model):
        total += log_prior(spec, theta[indices] if len(indices) > 1 else theta[indices[0]])
    return total


def group_dimension(model: LatentModel, decl: HyperDecl) -> int:
    if decl.prior_group is None:
        return 1
    count = sum(1 for other in model.hypers if other.prior_group == decl.prior_group)
    return wishart_dimension(count)


def priors_used(model: LatentModel) -> list[dict[str, Any]]:
    report: list[dict[str, Any]] = []
    for block in model.blocks:
        if block.kind == "fixed-effect":
            labels = block.labels or tuple(f"{block.name}[{i}]" for i in range(block.size))
            for offset, label in enumerate(labels):
                mean = 0.0 if block.prior_mean is None else float(block.prior_mean[offset])
                prec = float(block.prior_precision[offset]) if block.prior_precision is not None else 0.01
                spec = PriorSpec("normal", {"mean": mean, "prec": prec})
                report.append(
                    {
                        "symbol": label,
                        "kind": "latent",
                        "block": block.name,
                        "prior": spec.describe(),
                        **spec.to_dict(),
                    }
                )
        else:
            report.append(
                {
                    "symbol": block.name,
                    "kind": "latent-block",
                    "block": block.name,
                    "prior": f"gaussian {block.kind} (size {block.size})",
                    "hyperparameters": [model.hypers[i].label for i in block.hyper_links],
                }
            )

    for spec, indices in hyper_groups(model):
        names = [model.hypers[i].label for i in indices]
        report.append(
            {
                "symbol": names[0] if len(names) == 1 else model.hypers[indices[0]].prior_group,
                "kind": "hyper",
                "scale": model.hypers[indices[0]].scale,
                "components": names,
                "prior": spec.describe(),
                **spec.to_dict(),
            }
        )
    return report
