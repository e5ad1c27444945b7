from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse

from core.likelihoods import LikelihoodError, evaluate_group
from core.models import (
    BLOCK_KINDS,
    LOG_2PI,
    ConstraintCorrection,
    GaussianApprox,
    InferenceSettings,
    LatentBlock,
    LatentModel,
)
from core.priors import log_prior_theta, re_precision_matrix



class InferenceError(RuntimeError):
    """Raised when a Gaussian approximation or hyperparameter search cannot be completed."""


@dataclass(slots=True)
class JointEval:
    value: float
    gradient: np.ndarray
    curvature: np.ndarray
    design: sparse.csr_matrix
    precision: sparse.csr_matrix


@dataclass(slots=True)
class _ThetaState:
    theta: np.ndarray
    precision: sparse.csr_matrix
    log_det_prior: float
    design: sparse.csr_matrix
    offset: np.ndarray
    slices: list[slice]


def rw_structure(kind: str, size: int, scaled: bool = False) -> np.ndarray:
    """Dense random-walk structure matrix D^T D (first or second differences)."""
    order = 1 if kind == "rw1" else 2
    if size <= order:
        raise ValueError(f"{kind} block needs more than {order} nodes, got {size}")
    difference = np.diff(np.eye(size), n=order, axis=0)
    structure = difference.T @ difference
    if scaled:
        # Geometric mean of the generalised marginal variances becomes 1.
        variances = np.diag(np.linalg.pinv(structure))
        structure = structure * math.exp(float(np.mean(np.log(variances))))
    return structure


def _block_kind_check(block: LatentBlock) -> None:
    if block.kind not in BLOCK_KINDS:
        raise ValueError(f"Unknown latent block kind '{block.kind}' for block '{block.name}'")
    if block.size < 0:
        raise ValueError(f"Block '{block.name}' has negative size {block.size}")
    if block.constraint and block.kind not in {"rw1", "rw2"}:
        raise ValueError(f"Sum-to-zero constraint is only allowed on rw blocks, not on '{block.name}'")


def _fixed_precisions(block: LatentBlock) -> np.ndarray:
    if block.prior_precision is None:
        return np.full(block.size, 0.01)
    return np.asarray(block.prior_precision, dtype=float)


def build_precision(
    blocks: list[LatentBlock],
    theta: np.ndarray,
    settings: InferenceSettings | None = None,
) -> sparse.csr_matrix:
    settings = settings or InferenceSettings()
    theta = np.asarray(theta, dtype=float)
    n = sum(block.size for block in blocks)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def put(matrix: np.ndarray | sparse.spmatrix, row0: int, col0: int) -> None:
        coo = sparse.coo_matrix(matrix)
        rows.append(coo.row + row0)
        cols.append(coo.col + col0)
        vals.append(coo.data)

    for block in blocks:
        _block_kind_check(block)
        if block.size == 0:
            continue
        for link in block.hyper_links:
            if link >= theta.shape[0]:
                raise ValueError(f"Block '{block.name}' links hyperparameter {link}, theta has {theta.shape[0]}")
        start = block.start
        if block.kind == "fixed-effect":
            put(sparse.diags(_fixed_precisions(block)), start, start)
        elif block.kind == "iid-random":
            put(sparse.identity(block.size) * math.exp(theta[block.hyper_links[0]]), start, start)
        elif block.kind in {"rw1", "rw2"}:
            structure = math.exp(theta[block.hyper_links[0]]) * rw_structure(block.kind, block.size, block.scaled)
            put(structure + settings.rw_jitter * np.eye(block.size), start, start)
        elif block.kind == "iid-kd":
            groups = block.size // block.group_dim
            local = re_precision_matrix(theta[list(block.hyper_links)])
            put(sparse.kron(sparse.identity(groups), local), start, start)
        elif block.kind == "copy-scaled":
            source = _source_block(blocks, block)
            gamma = float(theta[block.hyper_links[0]])
            kappa = settings.copy_precision
            eye = sparse.identity(block.size)
            put(kappa * eye, start, start)
            put(-kappa * gamma * eye, start, source.start)
            put(-kappa * gamma * eye, source.start, start)
            put(kappa * gamma * gamma * eye, source.start, source.start)

    if not rows:
        return sparse.csr_matrix((n, n))
    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return matrix.tocsr()


def _source_block(blocks: list[LatentBlock], block: LatentBlock) -> LatentBlock:
    if block.source is None or not 0 <= block.source < len(blocks):
        raise ValueError(f"copy-scaled block '{block.name}' must reference a source block")
    source = blocks[block.source]
    if source.size != block.size:
        raise ValueError(f"copy-scaled block '{block.name}' and source '{source.name}' differ in size")
    if len(block.hyper_links) != 1:
        raise ValueError(f"copy-scaled block '{block.name}' needs exactly one scale hyperparameter")
    return source


def prior_log_det(blocks: list[LatentBlock], theta: np.ndarray, settings: InferenceSettings) -> float:
    total = 0.0
    for block in blocks:
        if block.size == 0:
            continue
        if block.kind == "fixed-effect":
            total += float(np.sum(np.log(_fixed_precisions(block))))
        elif block.kind == "iid-random":
            total += block.size * float(theta[block.hyper_links[0]])
        elif block.kind in {"rw1", "rw2"}:
            eigen = np.linalg.eigvalsh(rw_structure(block.kind, block.size, block.scaled))
            tau = math.exp(theta[block.hyper_links[0]])
            total += float(np.sum(np.log(tau * np.clip(eigen, 0.0, None) + settings.rw_jitter)))
        elif block.kind == "iid-kd":
            local = re_precision_matrix(theta[list(block.hyper_links)])
            total += (block.size // block.group_dim) * float(np.linalg.slogdet(local)[1])
        elif block.kind == "copy-scaled":
            total += block.size * math.log(settings.copy_precision)
    return total


def linear_predictor_map(model: LatentModel, theta: np.ndarray) -> tuple[sparse.csr_matrix, np.ndarray, list[slice]]:
    """Stacked design A(theta), offsets and the row slice of every row group."""
    designs = []
    offsets = []
    slices = []
    cursor = 0
    for group in model.groups:
        designs.append(group.design_at(theta))
        offsets.append(group.offset_at(theta))
        slices.append(slice(cursor, cursor + group.n_rows))
        cursor += group.n_rows
    if not designs:
        return sparse.csr_matrix((0, model.n_latent)), np.zeros(0), slices
    return sparse.csr_matrix(sparse.vstack(designs)), np.concatenate(offsets), slices


def _prepare(model: LatentModel, theta: np.ndarray) -> _ThetaState:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] != model.n_hyper:
        raise ValueError(f"theta has {theta.shape[0]} entries, model declares {model.n_hyper}")
    design, offset, slices = linear_predictor_map(model, theta)
    return _ThetaState(
        theta=theta,
        precision=build_precision(model.blocks, theta, model.settings),
        log_det_prior=prior_log_det(model.blocks, theta, model.settings),
        design=design,
        offset=offset,
        slices=slices,
    )


def row_loglik(model: LatentModel, latent: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-row log-likelihood for one or many latent vectors (rows of `latent`) at a single theta."""
    theta = np.asarray(theta, dtype=float)
    latent = np.atleast_2d(np.asarray(latent, dtype=float))
    design, offset, slices = linear_predictor_map(model, theta)
    eta = (design @ latent.T).T + offset[None, :]
    result = np.empty_like(eta)
    for row in range(eta.shape[0]):
        for group, rows in zip(model.groups, slices):
            result[row, rows] = evaluate_group(group, eta[row, rows], theta, strict=False)[0]
    return result


def _evaluate(
    model: LatentModel,
    state: _ThetaState,
    x: np.ndarray,
    strict: bool,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    centred = x - model.prior_mean
    q_centred = state.precision @ centred
    value = -0.5 * float(centred @ q_centred) + 0.5 * state.log_det_prior - 0.5 * x.shape[0] * LOG_2PI

    eta = state.design @ x + state.offset
    d1 = np.zeros_like(eta)
    d2 = np.zeros_like(eta)
    for group, rows in zip(model.groups, state.slices):
        ll, g1, g2 = evaluate_group(group, eta[rows], state.theta, strict=strict)
        total = float(np.sum(ll))
        if not math.isfinite(total):
            return -math.inf, np.zeros_like(x), d2, eta
        value += total
        d1[rows] = g1
        d2[rows] = g2

    gradient = -q_centred + state.design.T @ d1
    return value, gradient, d2, eta


def log_joint(model: LatentModel, x: np.ndarray, theta: np.ndarray) -> JointEval:
    """log p(x|theta) + sum_i log f(y_i|eta_i, theta), with gradient and per-row eta-curvature."""
    state = _prepare(model, theta)
    x = np.asarray(x, dtype=float)
    if x.shape[0] != model.n_latent:
        raise ValueError(f"x has {x.shape[0]} entries, model latent field has {model.n_latent}")
    value, gradient, curvature, _ = _evaluate(model, state, x, strict=True)
    return JointEval(value, gradient, curvature, state.design, state.precision)


def _posterior_precision(state: _ThetaState, curvature: np.ndarray) -> np.ndarray:
    weights = np.maximum(-curvature, 0.0)
    likelihood_part = state.design.T @ sparse.diags(weights) @ state.design
    matrix = state.precision.toarray() + sparse.csr_matrix(likelihood_part).toarray()
    return 0.5 * (matrix + matrix.T)


def _factor(matrix: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        return linalg.cho_factor(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise InferenceError(
            f"posterior precision is not positive definite at theta={np.round(theta, 6).tolist()}"
        ) from exc


def _project(constraints: np.ndarray | None, vector: np.ndarray) -> np.ndarray:
    if constraints is None:
        return vector
    gram = constraints @ constraints.T
    return vector - constraints.T @ np.linalg.solve(gram, constraints @ vector)


def _correction(factor: tuple[np.ndarray, bool], constraints: np.ndarray) -> ConstraintCorrection:
    weights = linalg.cho_solve(factor, constraints.T, check_finite=False)
    gram = constraints @ weights
    gram = 0.5 * (gram + gram.T)
    gram_factor = linalg.cho_factor(gram, lower=True, check_finite=False)
    log_det = 2.0 * float(np.sum(np.log(np.diag(gram_factor[0]))))
    return ConstraintCorrection(constraints, weights, gram_factor, log_det)


def _newton_step(
    factor: tuple[np.ndarray, bool],
    gradient: np.ndarray,
    constraints: np.ndarray | None,
) -> np.ndarray:
    step = linalg.cho_solve(factor, gradient, check_finite=False)
    if constraints is not None:
        correction = _correction(factor, constraints)
        step = step - correction.weights @ linalg.cho_solve(
            correction.gram_factor, constraints @ step, check_finite=False
        )
    return step


def gaussian_approx(
    model: LatentModel,
    theta: np.ndarray,
    init: np.ndarray | None = None,
    keep_factor: bool = False,
    with_variances: bool = False,
) -> GaussianApprox:
    """Newton search for the mode of pi(x|y,theta) and the Gaussian approximation around it."""
    settings = model.settings
    state = _prepare(model, theta)
    n = model.n_latent
    constraints = model.constraints

    x = model.prior_mean.copy() if init is None else np.asarray(init, dtype=float).copy()
    if constraints is not None:
        x = _project(constraints, x)

    value, gradient, curvature, _ = _evaluate(model, state, x, strict=True)
    if n == 0:
        return GaussianApprox(
            theta=state.theta,
            mode=x,
            log_det=0.0,
            log_joint_at_mode=value,
            iterations=0,
            marginal_variances=np.zeros(0) if with_variances else None,
        )

    iterations = 0
    converged = False
    for _ in range(settings.newton_max_iter + 1):
        residual = float(np.max(np.abs(_project(constraints, gradient))))
        if residual < settings.newton_tol:
            converged = True
            break
        if iterations == settings.newton_max_iter:
            break
        factor = _factor(_posterior_precision(state, curvature), state.theta)
        step = _newton_step(factor, gradient, constraints)
        accepted = False
        scale = 1.0
        for _ in range(settings.max_step_halvings):
            candidate = x + scale * step
            new_value, new_gradient, new_curvature, _ = _evaluate(model, state, candidate, strict=False)
            if new_value >= value - 1e-12 * max(1.0, abs(value)):
                accepted = True
                break
            scale *= 0.5
        iterations += 1
        if not accepted:
            if residual < 1e3 * settings.newton_tol:
                converged = True
                break
            raise InferenceError(
                f"Newton line search failed at theta={np.round(state.theta, 6).tolist()} "
                f"(gradient sup-norm {residual:.3g})"
            )
        x, value, gradient, curvature = candidate, new_value, new_gradient, new_curvature

    if not converged:
        raise InferenceError(
            f"Newton iterations did not converge in {settings.newton_max_iter} steps "
            f"at theta={np.round(state.theta, 6).tolist()}"
        )

    factor = _factor(_posterior_precision(state, curvature), state.theta)
    if float(np.max(np.abs(gradient))) > 1e-3 * settings.newton_tol:
        candidate = x + _newton_step(factor, gradient, constraints)
        new_value, new_gradient, new_curvature, _ = _evaluate(model, state, candidate, strict=False)
        if new_value >= value:
            x, value, gradient, curvature = candidate, new_value, new_gradient, new_curvature
            factor = _factor(_posterior_precision(state, curvature), state.theta)

    correction = _correction(factor, constraints) if constraints is not None else None
    variances = None
    if with_variances:
        covariance_diag = np.diag(linalg.cho_solve(factor, np.eye(n), check_finite=False)).copy()
        if correction is not None:
            solved = linalg.cho_solve(correction.gram_factor, correction.weights.T, check_finite=False)
            covariance_diag -= np.sum(correction.weights * solved.T, axis=1)
        variances = np.maximum(covariance_diag, 0.0)

    return GaussianApprox(
        theta=state.theta,
        mode=x,
        log_det=2.0 * float(np.sum(np.log(np.diag(factor[0])))),
        log_joint_at_mode=value,
        iterations=iterations,
        factor=factor if keep_factor else None,
        marginal_variances=variances,
        constraint_correction=correction,
    )


def _constraint_prior_term(model: LatentModel, theta: np.ndarray) -> float:
    """-log N(0; C m, C Q^-1 C^T) without the 2*pi term, per constrained block."""
    total = 0.0
    for block in model.blocks:
        if not block.constraint or block.size == 0:
            continue
        local = math.exp(theta[block.hyper_links[0]]) * rw_structure(block.kind, block.size, block.scaled)
        local = local + model.settings.rw_jitter * np.eye(block.size)
        ones = np.ones(block.size)
        variance = float(ones @ np.linalg.solve(local, ones))
        mean = float(np.sum(model.prior_mean[block.start : block.stop]))
        total += 0.5 * math.log(variance) + 0.5 * mean * mean / variance
    return total


def log_post_theta_from(model: LatentModel, approx: GaussianApprox) -> float:
    theta = approx.theta
    value = (
        approx.log_joint_at_mode
        + log_prior_theta(model, theta)
        - 0.5 * approx.log_det
        + 0.5 * model.n_latent * LOG_2PI
    )
    if approx.constraint_correction is not None:
        value += _constraint_prior_term(model, theta) - 0.5 * approx.constraint_correction.log_det_gram
    return float(value)


def log_post_theta(model: LatentModel, theta: np.ndarray, init: np.ndarray | None = None) -> float:
    """Unnormalised log pi~(theta|y) = log joint at the mode + log prior - log Gaussian density at its mode."""
    return log_post_theta_from(model, gaussian_approx(model, theta, init))


def evaluate_theta(
    model: LatentModel,
    theta: np.ndarray,
    init: np.ndarray | None = None,
) -> tuple[float, GaussianApprox]:
    approx = gaussian_approx(model, theta, init)
    return log_post_theta_from(model, approx), approx


def safe_log_post_theta(
    model: LatentModel,
    theta: np.ndarray,
    init: np.ndarray | None = None,
) -> tuple[float, GaussianApprox | None]:
    try:
        value, approx = evaluate_theta(model, theta, init)
    except (InferenceError, LikelihoodError, FloatingPointError, OverflowError):
        return -math.inf, None
    if not math.isfinite(value):
        return -math.inf, None
    return value, approx
