from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import sparse

BLOCK_KINDS = ("fixed-effect", "iid-random", "rw1", "rw2", "copy-scaled", "iid-kd")
HYPER_SCALES = ("log-precision", "log-shape", "identity", "fisher-z")
HYPER_ROLES = (
    "likelihood",
    "block-precision",
    "association",
    "cure-coefficient",
    "re-matrix-component",
)
FAMILIES = (
    "poisson",
    "gaussian",
    "lognormal",
    "binomial",
    "weibullsurv",
    "exponentialsurv",
    "cure",
)

LOG_2PI = math.log(2.0 * math.pi)

# Survival event codes (right, exact, left, interval).
EVENT_RIGHT = 0
EVENT_EXACT = 1
EVENT_LEFT = 2
EVENT_INTERVAL = 3
EVENT_CODES = {
    "right-censored": EVENT_RIGHT,
    "exact": EVENT_EXACT,
    "left-censored": EVENT_LEFT,
    "interval-censored": EVENT_INTERVAL,
}

QUANTILE_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)


@dataclass(slots=True)
class PriorSpec:
    family: str
    params: dict[str, float] = field(default_factory=dict)

    def describe(self) -> str:
        inner = ", ".join(f"{key}={value:g}" for key, value in sorted(self.params.items()))
        return f"{self.family}({inner})"

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "params": dict(sorted(self.params.items()))}


@dataclass(slots=True, frozen=True)
class Transform:
    """Strictly monotone function descriptor from a fixed menu (see core.transforms)."""

    name: str
    params: tuple[float, ...] = ()


@dataclass(slots=True)
class InferenceSettings:
    newton_tol: float = 1e-8
    newton_max_iter: int = 100
    max_step_halvings: int = 30
    rw_jitter: float = 1e-5
    copy_precision: float = float(np.exp(15.0))
    grid_dz: float = 0.75
    grid_log_drop: float = 3.5
    grid_max_dim: int = 4
    hessian_step: float = 1e-4
    mode_tol: float = 1e-6
    simplex_step: float = 0.5
    marginal_points: int = 75
    marginal_sd_span: float = 6.0
    criteria_samples: int = 1000
    default_cutpoints: int = 15
    correlation_warning: float = 0.99
    kl_warning: float = 0.1
    initial_window: tuple[float, float] = (-3.0, 5.0)


@dataclass(slots=True)
class LatentBlock:
    name: str
    kind: str
    size: int
    hyper_links: tuple[int, ...] = ()
    constraint: bool = False
    labels: tuple[str, ...] = ()
    start: int = 0
    prior_mean: np.ndarray | None = None
    prior_precision: np.ndarray | None = None
    source: int | None = None
    group_dim: int = 1
    scaled: bool = False

    @property
    def stop(self) -> int:
        return self.start + self.size

    @property
    def is_random(self) -> bool:
        return self.kind in {"iid-random", "iid-kd"}


@dataclass(slots=True)
class HyperDecl:
    name: str
    scale: str
    prior: PriorSpec
    role: str
    initial: float = 0.0
    prior_group: str | None = None
    prior_component: int = 0
    user_transform: Transform = Transform("identity")
    user_name: str = ""

    @property
    def label(self) -> str:
        return self.user_name or self.name


@dataclass(slots=True)
class SurvPayload:
    """Survival responses stored column-wise; one entry per row."""

    time: np.ndarray
    event: np.ndarray
    time2: np.ndarray
    trunc_left: np.ndarray
    trunc_right: np.ndarray

    @classmethod
    def build(
        cls,
        time: Any,
        event: Any,
        time2: Any = None,
        trunc_left: Any = None,
        trunc_right: Any = None,
    ) -> SurvPayload:
        t = np.atleast_1d(np.asarray(time, dtype=float))
        n = t.shape[0]
        ev = np.atleast_1d(np.asarray(event))
        if ev.dtype.kind in {"U", "S", "O"}:
            ev = np.array([EVENT_CODES[str(code)] for code in ev], dtype=int)
        ev = np.broadcast_to(ev.astype(int), (n,)).copy()
        return cls(
            time=t,
            event=ev,
            time2=_column_or_fill(time2, n, np.nan),
            trunc_left=_column_or_fill(trunc_left, n, 0.0),
            trunc_right=_column_or_fill(trunc_right, n, np.inf),
        )

    def __len__(self) -> int:
        return int(self.time.shape[0])

    def take(self, index: np.ndarray) -> SurvPayload:
        return SurvPayload(
            time=self.time[index],
            event=self.event[index],
            time2=self.time2[index],
            trunc_left=self.trunc_left[index],
            trunc_right=self.trunc_right[index],
        )


def _column_or_fill(values: Any, n: int, fill: float) -> np.ndarray:
    if values is None:
        return np.full(n, fill, dtype=float)
    column = np.atleast_1d(np.asarray(values, dtype=float))
    column = np.broadcast_to(column, (n,)).copy()
    column[np.isnan(column)] = fill
    return column


@dataclass(slots=True)
class ScaledDesign:
    """Design entries multiplied by one identity-scale hyperparameter."""

    hyper: int
    matrix: sparse.csr_matrix


@dataclass(slots=True)
class OffsetTerm:
    kind: str  # "linear" or "weibull-log-hazard"
    hyper: int
    data: np.ndarray


@dataclass(slots=True)
class RowGroup:
    """Data rows sharing one likelihood family; row i has predictor (A x)_i + offset_i."""

    name: str
    family: str
    design: sparse.csr_matrix
    offset: np.ndarray
    row_labels: np.ndarray
    response: dict[str, np.ndarray] = field(default_factory=dict)
    surv: SurvPayload | None = None
    scaled_designs: tuple[ScaledDesign, ...] = ()
    offset_terms: tuple[OffsetTerm, ...] = ()
    precision_hyper: int | None = None
    shape_hyper: int | None = None
    cure_hypers: tuple[int, ...] = ()
    cure_design: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return int(self.design.shape[0])

    def design_at(self, theta: np.ndarray) -> sparse.csr_matrix:
        if not self.scaled_designs:
            return self.design
        matrix = self.design.copy()
        for term in self.scaled_designs:
            matrix = matrix + float(theta[term.hyper]) * term.matrix
        return sparse.csr_matrix(matrix)

    def offset_at(self, theta: np.ndarray) -> np.ndarray:
        if not self.offset_terms:
            return self.offset
        total = self.offset.copy()
        for term in self.offset_terms:
            value = float(theta[term.hyper])
            if term.kind == "linear":
                total = total + value * term.data
            elif term.kind == "weibull-log-hazard":
                total = total + value + np.expm1(value) * term.data
            else:
                raise ValueError(f"Unknown offset term kind: '{term.kind}'")
        return total

    def cure_eta(self, theta: np.ndarray) -> np.ndarray:
        if self.cure_design is None:
            return np.full(self.n_rows, -np.inf)
        coefficients = np.asarray([theta[index] for index in self.cure_hypers], dtype=float)
        return self.cure_design @ coefficients


@dataclass(slots=True)
class SubmodelInfo:
    name: str
    kind: str  # "survival" or "longitudinal"
    family: str
    baseline: str | None = None
    augmented: bool = False
    fixed_effects: dict[str, int] = field(default_factory=dict)
    intercepts: dict[str, int] = field(default_factory=dict)
    shape_hyper: int | None = None
    precision_hyper: int | None = None
    cutpoints: np.ndarray | None = None
    baseline_blocks: dict[str, int] = field(default_factory=dict)
    baseline_hyper: int | None = None
    cure_hypers: dict[str, int] = field(default_factory=dict)
    frailty_block: int | None = None
    frailty_hyper: int | None = None
    re_terms: tuple[str, ...] = ()
    re_hypers: dict[str, int] = field(default_factory=dict)
    association_hypers: dict[str, int] = field(default_factory=dict)
    n_rows: int = 0


@dataclass(slots=True)
class LatentModel:
    blocks: list[LatentBlock]
    hypers: list[HyperDecl]
    groups: list[RowGroup]
    settings: InferenceSettings = field(default_factory=InferenceSettings)
    submodels: list[SubmodelInfo] = field(default_factory=list)
    symbols: dict[str, tuple[str, int]] = field(default_factory=dict)
    name: str = "model"
    constraints: np.ndarray | None = field(init=False, default=None)
    prior_mean: np.ndarray = field(init=False, default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        start = 0
        for block in self.blocks:
            if block.size < 0:
                raise ValueError(f"Block '{block.name}' has negative size {block.size}")
            block.start = start
            start += block.size

        rows = []
        mean = np.zeros(start)
        for block in self.blocks:
            if block.prior_mean is not None:
                mean[block.start : block.stop] = block.prior_mean
            if block.constraint and block.size > 0:
                row = np.zeros(start)
                row[block.start : block.stop] = 1.0
                rows.append(row)
        self.constraints = np.vstack(rows) if rows else None
        self.prior_mean = mean

    @property
    def n_latent(self) -> int:
        return int(sum(block.size for block in self.blocks))

    @property
    def n_hyper(self) -> int:
        return len(self.hypers)

    @property
    def n_rows(self) -> int:
        return int(sum(group.n_rows for group in self.groups))

    def latent_labels(self) -> list[str]:
        labels: list[str] = []
        for block in self.blocks:
            if len(block.labels) == block.size:
                labels.extend(block.labels)
            else:
                labels.extend(f"{block.name}[{index}]" for index in range(block.size))
        return labels

    def lookup(self, symbol: str) -> tuple[str, int]:
        try:
            return self.symbols[symbol]
        except KeyError as exc:
            raise KeyError(f"Unknown model symbol: '{symbol}'") from exc

    def submodel(self, name: str) -> SubmodelInfo:
        for info in self.submodels:
            if info.name == name:
                return info
        raise KeyError(f"Unknown submodel: '{name}'")


@dataclass(slots=True)
class ConstraintCorrection:
    """Kriging data for sum-to-zero constraints: W = H^-1 A^T, S = A W."""

    matrix: np.ndarray
    weights: np.ndarray
    gram_factor: tuple[np.ndarray, bool]
    log_det_gram: float


@dataclass(slots=True)
class GaussianApprox:
    theta: np.ndarray
    mode: np.ndarray
    log_det: float
    log_joint_at_mode: float
    iterations: int
    factor: tuple[np.ndarray, bool] | None = None
    marginal_variances: np.ndarray | None = None
    constraint_correction: ConstraintCorrection | None = None


@dataclass(slots=True)
class ThetaPosterior:
    points: np.ndarray
    log_density: np.ndarray
    weights: np.ndarray
    strategy: str
    mode: np.ndarray
    hessian: np.ndarray
    axes: np.ndarray
    cell_volume: float
    dz: float
    mode_log_density: float = float("nan")
    warnings: list[str] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.mode.shape[0])

    @property
    def covariance(self) -> np.ndarray:
        return self.axes @ self.axes.T


@dataclass(slots=True)
class Marginal:
    support: np.ndarray
    density: np.ndarray
    summary: dict[str, float]
    approximate: bool = False


@dataclass(slots=True)
class PosteriorSamples:
    theta: np.ndarray
    latent: np.ndarray
    theta_index: np.ndarray

    @property
    def n(self) -> int:
        return int(self.latent.shape[0])


@dataclass(slots=True)
class FitResult:
    model: LatentModel
    theta_posterior: ThetaPosterior
    approxs: list[GaussianApprox]
    latent_marginals: list[Marginal]
    hyper_marginals_internal: list[Marginal]
    hyper_marginals: list[Marginal]
    criteria: dict[str, Any]
    warnings: list[str]
    priors: list[dict[str, Any]]
    seed: int = 0
    samples: PosteriorSamples | None = None


@dataclass(slots=True)
class SummaryRow:
    name: str
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "mean": self.mean,
            "sd": self.sd,
            "0.025quant": self.q025,
            "0.5quant": self.q50,
            "0.975quant": self.q975,
        }


@dataclass(slots=True)
class SummaryTable:
    groups: dict[str, list[SummaryRow]]
    criteria: dict[str, Any] = field(default_factory=dict)

    def row(self, name: str) -> SummaryRow:
        for rows in self.groups.values():
            for row in rows:
                if row.name == name:
                    return row
        raise KeyError(f"No summary row named '{name}'")

    def to_dict(self) -> dict[str, Any]:
        return {
            "groups": {key: [row.to_dict() for row in rows] for key, rows in self.groups.items()},
            "criteria": self.criteria,
        }


@dataclass(slots=True)
class SurvFormula:
    """One survival submodel: payload columns, covariates, baseline and optional frailty/cure/strata."""

    data: str
    time: str
    event: Any
    covariates: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    standardize: tuple[str, ...] = ()
    baseline: str = "weibull"
    n_cutpoints: int | None = None
    cutpoints: tuple[float, ...] | None = None
    strata: str | None = None
    frailty: str | None = None
    cure: tuple[str, ...] = ()
    id: str | None = None
    time2: str | None = None
    trunc_left: str | None = None
    trunc_right: str | None = None
    scale_baseline: bool = True

    def formula_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "time": self.time,
            "event": self.event,
            "time2": self.time2,
            "trunc_left": self.trunc_left,
            "trunc_right": self.trunc_right,
            "covariates": list(self.covariates),
            "categorical": list(self.categorical),
            "standardize": list(self.standardize),
            "strata": self.strata,
            "cure": list(self.cure),
        }


@dataclass(slots=True)
class LongFormula:
    data: str
    response: str
    family: str
    id: str
    time: str | None = None
    covariates: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    standardize: tuple[str, ...] = ()
    random_effects: tuple[str, ...] = ()
    cor_re: bool = True
    trials: str | None = None


@dataclass(slots=True)
class ModelSpec:
    name: str
    survival: list[SurvFormula] = field(default_factory=list)
    longitudinal: list[LongFormula] = field(default_factory=list)
    assoc: list[list[str]] = field(default_factory=list)
    assoc_surv: list[tuple[int, int]] = field(default_factory=list)
    cor_long: bool = False
    priors: dict[str, Any] = field(default_factory=dict)
    strategy: str = "auto"
    outputs: dict[str, Any] = field(default_factory=dict)
    source: str = ""
