from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from core.likelihoods import evaluate_group
from core.lgm import log_joint
from core.marginals import density_marginal
from core.models import LOG_2PI, LatentModel, Marginal, RowGroup
from core.priors import group_dimension, log_prior_theta, prior_median, prior_moments, re_precision_matrix

MAX_LATENT_DIM = 2
MAX_HYPER_DIM = 2
QUAD_BLOCK_KINDS = ("fixed-effect", "iid-random", "iid-kd")


@dataclass(slots=True)
class QuadResult:
    latent: list[Marginal]
    hyper: list[Marginal]
    log_evidence: float
    box: np.ndarray


def _check_model(model: LatentModel) -> None:
    if model.n_latent > MAX_LATENT_DIM or model.n_hyper > MAX_HYPER_DIM:
        raise ValueError(
            f"quadrature oracle handles at most {MAX_LATENT_DIM} latent and {MAX_HYPER_DIM} hyperparameter "
            f"dimensions; model has {model.n_latent} and {model.n_hyper}"
        )
    for block in model.blocks:
        if block.kind not in QUAD_BLOCK_KINDS or block.constraint:
            raise ValueError(f"quadrature oracle does not support block '{block.name}' of kind '{block.kind}'")


def _latent_log_prior(model: LatentModel, theta: np.ndarray, points: np.ndarray) -> np.ndarray:
    """log p(x | theta) for every row of `points`, written out per block kind."""
    total = np.zeros(points.shape[0])
    for block in model.blocks:
        x = points[:, block.start : block.stop]
        if block.kind == "fixed-effect":
            mean = np.zeros(block.size) if block.prior_mean is None else block.prior_mean
            precision = np.full(block.size, 0.01) if block.prior_precision is None else block.prior_precision
            total += np.sum(0.5 * np.log(precision) - 0.5 * LOG_2PI - 0.5 * precision * (x - mean) ** 2, axis=1)
        elif block.kind == "iid-random":
            log_tau = float(theta[block.hyper_links[0]])
            total += block.size * (0.5 * log_tau - 0.5 * LOG_2PI) - 0.5 * math.exp(log_tau) * np.sum(x**2, axis=1)
        else:
            local = re_precision_matrix(theta[list(block.hyper_links)])
            precision = np.kron(np.eye(block.size // block.group_dim), local)
            log_det = (block.size // block.group_dim) * np.linalg.slogdet(local)[1]
            total += 0.5 * log_det - 0.5 * block.size * LOG_2PI - 0.5 * np.einsum("mi,ij,mj->m", x, precision, x)
    return total


def _tiled(group: RowGroup, copies: int) -> RowGroup:
    index = np.tile(np.arange(group.n_rows), copies)
    return dataclasses.replace(
        group,
        design=sparse.csr_matrix((index.shape[0], group.design.shape[1])),
        offset=np.zeros(index.shape[0]),
        row_labels=group.row_labels[index],
        response={key: np.asarray(value)[index] for key, value in group.response.items()},
        surv=None if group.surv is None else group.surv.take(index),
        scaled_designs=(),
        offset_terms=(),
        cure_design=None if group.cure_design is None else group.cure_design[index],
    )


def _log_posterior(model: LatentModel, theta_points: np.ndarray, latent_points: np.ndarray) -> np.ndarray:
    """Unnormalised log posterior on the (theta, x) tensor grid, shape (len(theta_points), len(latent_points))."""
    copies = latent_points.shape[0]
    tiled = [_tiled(group, copies) for group in model.groups]
    values = np.empty((theta_points.shape[0], copies))
    for row, theta in enumerate(theta_points):
        value = _latent_log_prior(model, theta, latent_points) + log_prior_theta(model, theta)
        for group, big in zip(model.groups, tiled):
            eta = latent_points @ group.design_at(theta).T.toarray() + group.offset_at(theta)[None, :]
            loglik = evaluate_group(big, eta.reshape(-1), theta, strict=False)[0]
            value = value + loglik.reshape(copies, group.n_rows).sum(axis=1)
        values[row] = np.where(np.isfinite(value), value, -np.inf)
    return values


def _initial_box(model: LatentModel) -> np.ndarray:
    """Hyperparameter bounds first, then latent bounds, from prior spreads."""
    hyper_bounds = []
    hyper_centre = []
    for decl in model.hypers:
        k = group_dimension(model, decl)
        moments = prior_moments(decl.prior, decl.prior_component, k)
        centre = prior_median(decl.prior, decl.prior_component, k) if moments is not None else 0.0
        spread = 6.0 * math.sqrt(moments[1]) if moments is not None else 8.0
        hyper_centre.append(centre)
        hyper_bounds.append((centre - spread, centre + spread))
    latent_bounds = []
    for block in model.blocks:
        for offset in range(block.size):
            if block.kind == "fixed-effect":
                mean = 0.0 if block.prior_mean is None else float(block.prior_mean[offset])
                precision = 0.01 if block.prior_precision is None else float(block.prior_precision[offset])
                spread = 6.0 / math.sqrt(precision)
            else:
                log_tau = min(hyper_centre[link] for link in block.hyper_links[: block.group_dim])
                mean, spread = 0.0, 6.0 * math.exp(-0.5 * log_tau)
            latent_bounds.append((mean - spread, mean + spread))
    return np.asarray(hyper_bounds + latent_bounds, dtype=float).reshape(-1, 2)


def quad_posterior(model: LatentModel, resolution: int = 41, rounds: int = 4, window: float = 25.0) -> QuadResult:
    """Brute-force tensor-grid quadrature of the exact posterior of a tiny model.

    Each round re-centres the box on the cells within `window` log units of the maximum.
    """
    _check_model(model)
    if resolution < 5:
        raise ValueError(f"resolution must be >= 5, got {resolution}")
    box = _initial_box(model)
    n_hyper = model.n_hyper

    for round_index in range(rounds + 1):
        axes = [np.linspace(low, high, resolution) for low, high in box]
        theta_points = np.array(list(itertools.product(*axes[:n_hyper]))) if n_hyper else np.zeros((1, 0))
        latent_points = np.array(list(itertools.product(*axes[n_hyper:])))
        values = _log_posterior(model, theta_points, latent_points)
        if not np.any(np.isfinite(values)):
            raise ValueError("posterior is -inf everywhere in the integration box")
        if round_index == rounds:
            break
        shape = [resolution] * box.shape[0]
        keep = (values >= np.max(values) - window).reshape(shape)
        new_box = box.copy()
        for axis in range(box.shape[0]):
            hits = np.flatnonzero(np.any(keep, axis=tuple(a for a in range(box.shape[0]) if a != axis)))
            step = axes[axis][1] - axes[axis][0]
            new_box[axis] = (axes[axis][hits[0]] - step, axes[axis][hits[-1]] + step)
        box = new_box

    shape = [resolution] * box.shape[0]
    log_grid = values.reshape(shape)
    widths = np.array([axis[1] - axis[0] for axis in axes])
    log_evidence = float(logsumexp(values) + np.sum(np.log(widths)))
    weights = np.exp(log_grid - np.max(log_grid))

    marginals = []
    for axis in range(box.shape[0]):
        density = weights.sum(axis=tuple(a for a in range(box.shape[0]) if a != axis))
        marginals.append(density_marginal(axes[axis], density))
    return QuadResult(latent=marginals[n_hyper:], hyper=marginals[:n_hyper], log_evidence=log_evidence, box=box)


def fd_check(model: LatentModel, x: np.ndarray, theta: np.ndarray, h: float = 1e-5) -> dict[str, float]:
    """Central differences of log_joint against its analytic gradient and Hessian."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    at = log_joint(model, x, theta)
    hessian = -at.precision.toarray() + (at.design.T @ sparse.diags(at.curvature) @ at.design)
    hessian = np.asarray(hessian)
    gradient_fd = np.empty_like(x)
    hessian_fd = np.empty((x.shape[0], x.shape[0]))
    for i in range(x.shape[0]):
        step = np.zeros_like(x)
        step[i] = h
        up = log_joint(model, x + step, theta)
        down = log_joint(model, x - step, theta)
        gradient_fd[i] = (up.value - down.value) / (2.0 * h)
        hessian_fd[:, i] = (up.gradient - down.gradient) / (2.0 * h)
    return {
        "gradient_error": _relative_error(at.gradient, gradient_fd),
        "hessian_error": _relative_error(hessian, hessian_fd),
    }


def fd_check_group(group: RowGroup, eta: np.ndarray, theta: np.ndarray, h: float = 1e-5) -> dict[str, float]:
    """Per-row eta-derivatives of one row group against central differences."""
    eta = np.asarray(eta, dtype=float)
    ll, d1, d2 = evaluate_group(group, eta, theta)
    up = evaluate_group(group, eta + h, theta)
    down = evaluate_group(group, eta - h, theta)
    return {
        "gradient_error": _relative_error(d1, (up[0] - down[0]) / (2.0 * h)),
        "hessian_error": _relative_error(d2, (up[1] - down[1]) / (2.0 * h)),
    }


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
