from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from scipy import sparse

from core.config_loader import PRIOR_ROLES, EngineConfig, SpecError, default_engine_config
from core.models import (
    HyperDecl,
    LatentBlock,
    LatentModel,
    LongFormula,
    ModelSpec,
    OffsetTerm,
    PriorSpec,
    RowGroup,
    ScaledDesign,
    SubmodelInfo,
    SurvFormula,
    SurvPayload,
    Transform,
)
from core.survdata import (
    DataError,
    SurvDataset,
    augment,
    build_surv_dataset,
    design_columns,
    make_cutpoints,
    numeric_column,
    require_columns,
)
from core.transforms import EXP, EXP_NEGATE, IDENTITY, TANH

PARAMETRIC_BASELINES = ("weibull", "exponential")
RW_BASELINES = ("rw1", "rw2")
SUPPORTED_ASSOC = ("none", "SRE", "SRE_ind")


def natural_levels(values: np.ndarray) -> list[str]:
    """Distinct labels, numerically ordered when every label is a number."""
    unique = sorted({str(value) for value in values})
    try:
        return sorted(unique, key=float)
    except ValueError:
        return unique


@dataclass
class _RowDraft:
    """Design triplets of one row group; finalised once the latent field size is known."""

    name: str
    family: str
    row_labels: np.ndarray
    offset: np.ndarray
    response: dict[str, np.ndarray] = field(default_factory=dict)
    surv: SurvPayload | None = None
    offset_terms: list[OffsetTerm] = field(default_factory=list)
    precision_hyper: int | None = None
    shape_hyper: int | None = None
    cure_hypers: tuple[int, ...] = ()
    cure_design: np.ndarray | None = None
    entries: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    scaled: dict[int, list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return int(self.row_labels.shape[0])

    def add(self, rows: np.ndarray, cols: np.ndarray, values: np.ndarray, hyper: int | None = None) -> None:
        rows = np.asarray(rows, dtype=int)
        cols = np.broadcast_to(np.asarray(cols, dtype=int), rows.shape)
        values = np.broadcast_to(np.asarray(values, dtype=float), rows.shape)
        keep = values != 0.0
        triplet = (rows[keep], cols[keep], values[keep])
        if hyper is None:
            self.entries.append(triplet)
        else:
            self.scaled.setdefault(hyper, []).append(triplet)

    def _matrix(self, triplets: list[tuple[np.ndarray, np.ndarray, np.ndarray]], n_latent: int) -> sparse.csr_matrix:
        if not triplets:
            return sparse.csr_matrix((self.n_rows, n_latent))
        rows = np.concatenate([t[0] for t in triplets])
        cols = np.concatenate([t[1] for t in triplets])
        values = np.concatenate([t[2] for t in triplets])
        return sparse.csr_matrix(sparse.coo_matrix((values, (rows, cols)), shape=(self.n_rows, n_latent)))

    def finalise(self, n_latent: int) -> RowGroup:
        return RowGroup(
            name=self.name,
            family=self.family,
            design=self._matrix(self.entries, n_latent),
            offset=self.offset,
            row_labels=self.row_labels,
            response=self.response,
            surv=self.surv,
            scaled_designs=tuple(
                ScaledDesign(hyper, self._matrix(triplets, n_latent)) for hyper, triplets in sorted(self.scaled.items())
            ),
            offset_terms=tuple(self.offset_terms),
            precision_hyper=self.precision_hyper,
            shape_hyper=self.shape_hyper,
            cure_hypers=self.cure_hypers,
            cure_design=self.cure_design,
        )


@dataclass
class _RandomEffects:
    """Random-effect coordinates of one longitudinal submodel: coord = start + position * stride + offset."""

    levels: list[str]
    position: dict[str, int]
    terms: tuple[str, ...]
    starts: dict[str, int]
    strides: dict[str, int]
    offsets: dict[str, int]
    time_column: str | None

    def coords(self, term: str, positions: np.ndarray) -> np.ndarray:
        return self.starts[term] + positions * self.strides[term] + self.offsets[term]


class _Builder:
    def __init__(self, spec: ModelSpec, config: EngineConfig) -> None:
        self.spec = spec
        self.config = config
        self.blocks: list[LatentBlock] = []
        self.hypers: list[HyperDecl] = []
        self.drafts: list[_RowDraft] = []
        self.symbols: dict[str, tuple[str, int]] = {}
        self.submodels: list[SubmodelInfo] = []
        self.n_latent = 0
        self.priors = _role_priors(config, spec.priors)
        fixed = self.priors["fixed_effect"].params
        intercept = self.priors["intercept"].params
        self.fixed_mean = spec.priors.get("mean", fixed["mean"])
        self.fixed_prec = spec.priors.get("prec", fixed["prec"])
        self.intercept_mean = spec.priors.get("mean_intercept", intercept["mean"])
        self.intercept_prec = spec.priors.get("prec_intercept", intercept["prec"])

    def _register(self, symbol: str, kind: str, index: int) -> None:
        if symbol in self.symbols:
            raise SpecError(f"{self.spec.source}: symbol '{symbol}' is declared twice")
        self.symbols[symbol] = (kind, index)

    def block(
        self,
        name: str,
        kind: str,
        size: int,
        labels: list[str],
        hyper_links: tuple[int, ...] = (),
        **options: Any,
    ) -> tuple[int, int]:
        start = self.n_latent
        block = LatentBlock(
            name=name,
            kind=kind,
            size=size,
            hyper_links=hyper_links,
            labels=tuple(labels),
            start=start,
            **options,
        )
        self.blocks.append(block)
        for offset, label in enumerate(labels):
            self._register(label, "latent", start + offset)
        self.n_latent += size
        return len(self.blocks) - 1, start

    def hyper(
        self,
        name: str,
        scale: str,
        prior: PriorSpec,
        role: str,
        user_transform: Transform = IDENTITY,
        prior_group: str | None = None,
        component: int = 0,
    ) -> int:
        index = len(self.hypers)
        self.hypers.append(
            HyperDecl(
                name=name,
                scale=scale,
                prior=prior,
                role=role,
                prior_group=prior_group,
                prior_component=component,
                user_transform=user_transform,
            )
        )
        self._register(name, "hyper", index)
        return index

    def fixed_block(self, suffix: str, intercepts: list[str], covariates: list[str]) -> tuple[int, dict[str, int], dict[str, int]]:
        labels = intercepts + [f"{name}{suffix}" for name in covariates]
        means = np.array([self.intercept_mean] * len(intercepts) + [self.fixed_mean] * len(covariates))
        precisions = np.array([self.intercept_prec] * len(intercepts) + [self.fixed_prec] * len(covariates))
        _, start = self.block(
            f"fixed{suffix}",
            "fixed-effect",
            len(labels),
            labels,
            prior_mean=means,
            prior_precision=precisions,
        )
        intercept_index = {label: start + i for i, label in enumerate(intercepts)}
        covariate_index = {f"{name}{suffix}": start + len(intercepts) + i for i, name in enumerate(covariates)}
        return start, intercept_index, covariate_index

    def finish(self) -> LatentModel:
        model = LatentModel(
            blocks=self.blocks,
            hypers=self.hypers,
            groups=[draft.finalise(self.n_latent) for draft in self.drafts],
            settings=self.config.settings,
            submodels=self.submodels,
            symbols=dict(self.symbols),
            name=self.spec.name,
        )
        if len(self.submodels) == 1:
            suffix = "_S1" if self.submodels[0].kind == "survival" else "_L1"
            for symbol, target in self.symbols.items():
                if symbol.endswith(suffix):
                    model.symbols.setdefault(symbol[: -len(suffix)], target)
        return model


def _role_priors(config: EngineConfig, overrides: dict[str, Any]) -> dict[str, PriorSpec]:
    priors = dict(config.priors)
    for role in PRIOR_ROLES:
        if isinstance(overrides.get(role), PriorSpec):
            priors[role] = overrides[role]
    if overrides.get("weibull_shape_fallback"):
        priors["weibull_shape"] = priors["weibull_shape_fallback"]
    return priors


def _frame(datasets: dict[str, pd.DataFrame], name: str, where: str, source: str) -> pd.DataFrame:
    if name not in datasets:
        raise SpecError(f"{source}: {where}.data references unknown dataset '{name}'; loaded: {sorted(datasets)}")
    return datasets[name]


def _check_assoc(spec: ModelSpec) -> None:
    for i, row in enumerate(spec.assoc):
        for j, kind in enumerate(row):
            if kind not in SUPPORTED_ASSOC:
                raise SpecError(
                    f"{spec.source}: assoc[{i}][{j}]: association '{kind}' is out of scope "
                    f"(supported: {', '.join(SUPPORTED_ASSOC)})"
                )


def _shares(spec: ModelSpec, surv_index: int) -> list[tuple[int, str]]:
    return [
        (long_index, row[surv_index])
        for long_index, row in enumerate(spec.assoc)
        if surv_index < len(row) and row[surv_index] != "none"
    ]


def _add_longitudinal_rows(
    builder: _Builder,
    index: int,
    formula: LongFormula,
    frame: pd.DataFrame,
) -> tuple[_RowDraft, np.ndarray, dict[str, np.ndarray]]:
    where = f"longitudinal[{index}]"
    suffix = f"_L{index + 1}"
    dataset = formula.data
    require_columns(frame, [formula.id, formula.response], dataset)
    ids = frame[formula.id].astype(str).str.strip().to_numpy()
    covariates, names = design_columns(
        frame, list(formula.covariates), dataset, list(formula.categorical), list(formula.standardize)
    )
    response = numeric_column(frame, formula.response, dataset)

    start, intercepts, covariate_index = builder.fixed_block(suffix, [f"Intercept{suffix}"], names)
    info = SubmodelInfo(
        name=f"L{index + 1}",
        kind="longitudinal",
        family=formula.family,
        fixed_effects=covariate_index,
        intercepts=intercepts,
        n_rows=len(frame),
    )
    labels = np.array([f"{subject}#{row + 1}" for row, subject in enumerate(ids)])
    draft = _RowDraft(name=f"longitudinal{suffix}", family=formula.family, row_labels=labels, offset=np.zeros(len(frame)))
    if formula.family == "lognormal" and np.any(response <= 0):
        bad = labels[response <= 0][:3].tolist()
        raise DataError(f"Dataset '{dataset}': lognormal response '{formula.response}' must be > 0; rows {bad}")
    if formula.family == "binomial":
        trials = numeric_column(frame, formula.trials, dataset) if formula.trials else np.ones(len(frame))
        if np.any((response < 0) | (response > trials)):
            bad = labels[(response < 0) | (response > trials)][:3].tolist()
            raise DataError(f"Dataset '{dataset}': binomial response outside [0, trials]; rows {bad}")
        draft.response = {"y": response, "trials": trials}
    else:
        draft.response = {"y": response}
        draft.precision_hyper = builder.hyper(
            f"Res. err. (variance){suffix}",
            "log-precision",
            builder.priors["residual_precision"],
            "likelihood",
            EXP_NEGATE,
        )
        info.precision_hyper = draft.precision_hyper

    rows = np.arange(len(frame))
    draft.add(rows, start, 1.0)
    for column, name in enumerate(names):
        draft.add(rows, covariate_index[f"{name}{suffix}"], covariates[:, column])

    term_values: dict[str, np.ndarray] = {}
    for term in formula.random_effects:
        if term.lower() == "intercept":
            term_values[term] = np.ones(len(frame))
        else:
            term_values[term] = numeric_column(frame, term, dataset)
    if formula.time and formula.time not in frame.columns:
        raise DataError(f"Dataset '{dataset}': {where}.time column '{formula.time}' is missing.")
    builder.submodels.append(info)
    builder.drafts.append(draft)
    return draft, ids, term_values


def _re_label(term: str) -> str:
    return "Intercept" if term.lower() == "intercept" else term


def _add_random_effects(
    builder: _Builder,
    spec: ModelSpec,
    long_parts: list[tuple[_RowDraft, np.ndarray, dict[str, np.ndarray]]],
    extra_ids: dict[int, list[np.ndarray]],
) -> list[_RandomEffects | None]:
    """RE blocks per longitudinal submodel (or one merged block under cor_long)."""
    result: list[_RandomEffects | None] = [None] * len(spec.longitudinal)
    with_re = [i for i, formula in enumerate(spec.longitudinal) if formula.random_effects]
    if not with_re:
        return result

    def levels_for(indices: list[int]) -> list[str]:
        pool = [long_parts[i][1] for i in indices]
        for i in indices:
            pool.extend(extra_ids.get(i, []))
        return natural_levels(np.concatenate(pool))

    merged = spec.cor_long and len(with_re) > 1
    batches = [with_re] if merged else [[i] for i in with_re]
    for batch in batches:
        levels = levels_for(batch)
        position = {level: pos for pos, level in enumerate(levels)}
        terms = [(i, term) for i in batch for term in spec.longitudinal[i].random_effects]
        k = len(terms)
        if merged and k > 3:
            raise SpecError(f"{spec.source}: cor_long merges {k} random effects; at most 3 are supported")
        correlated = merged or (k > 1 and spec.longitudinal[batch[0]].cor_re)
        names = [f"ID{_re_label(term)}_L{i + 1}" for i, term in terms]
        starts: dict[tuple[int, str], int] = {}
        strides: dict[tuple[int, str], int] = {}
        offsets: dict[tuple[int, str], int] = {}

        batch_hypers: dict[str, int] = {}
        if correlated:
            group = "RE_" + "_".join(f"L{i + 1}" for i in batch)
            labels_hyper = list(names) + [f"{names[a]}:{names[b]}" for a in range(k) for b in range(a + 1, k)]
            for c, label in enumerate(labels_hyper):
                scale, transform = ("log-precision", EXP_NEGATE) if c < k else ("fisher-z", TANH)
                batch_hypers[label] = builder.hyper(
                    label, scale, builder.priors["random_effects"], "re-matrix-component",
                    transform, prior_group=group, component=c,
                )
            labels = [f"{name}[{level}]" for level in levels for name in names]
            _, start = builder.block(group, "iid-kd", len(levels) * k, labels, tuple(batch_hypers.values()), group_dim=k)
            for c, key in enumerate(terms):
                starts[key], strides[key], offsets[key] = start, k, c
        else:
            for key, name in zip(terms, names):
                batch_hypers[name] = builder.hyper(
                    name, "log-precision", builder.priors["random_effects"], "block-precision", EXP_NEGATE
                )
                labels = [f"{name}[{level}]" for level in levels]
                _, start = builder.block(name, "iid-random", len(levels), labels, (batch_hypers[name],))
                starts[key], strides[key], offsets[key] = start, 1, 0

        for i in batch:
            draft, ids, values = long_parts[i]
            positions = np.array([position[subject] for subject in ids])
            formula = spec.longitudinal[i]
            rows = np.arange(ids.shape[0])
            for term in formula.random_effects:
                key = (i, term)
                draft.add(rows, starts[key] + positions * strides[key] + offsets[key], values[term])
            builder.submodels[i].re_terms = tuple(formula.random_effects)
            builder.submodels[i].re_hypers = {
                label: index for label, index in batch_hypers.items() if f"_L{i + 1}" in label
            }
            result[i] = _RandomEffects(
                levels=levels,
                position=position,
                terms=formula.random_effects,
                starts={term: starts[(i, term)] for term in formula.random_effects},
                strides={term: strides[(i, term)] for term in formula.random_effects},
                offsets={term: offsets[(i, term)] for term in formula.random_effects},
                time_column=formula.time,
            )
    return result


def _time_dependent(spec: ModelSpec, surv_index: int) -> bool:
    for long_index, kind in _shares(spec, surv_index):
        formula = spec.longitudinal[long_index]
        if formula.time and formula.time in formula.random_effects:
            return True
    return False


@dataclass
class _SurvRows:
    draft: _RowDraft
    subject: np.ndarray
    t_row: np.ndarray
    dataset: SurvDataset
    frame: pd.DataFrame


def _add_survival(
    builder: _Builder,
    spec: ModelSpec,
    index: int,
    dataset: SurvDataset,
    frame: pd.DataFrame,
    random_effects: list[_RandomEffects | None],
) -> _SurvRows:
    formula = spec.survival[index]
    where = f"survival[{index}]"
    suffix = f"_S{index + 1}"
    settings = builder.config.settings
    rw = formula.baseline in RW_BASELINES
    augmented = rw or _time_dependent(spec, index)
    if formula.cure and augmented:
        raise SpecError(f"{spec.source}: {where}: a cure submodel cannot be combined with time-dependent association")
    if formula.strata and not rw:
        raise SpecError(f"{spec.source}: {where}.strata requires an rw1/rw2 baseline")

    info = SubmodelInfo(
        name=f"S{index + 1}",
        kind="survival",
        family=formula.baseline,
        baseline=formula.baseline,
        augmented=augmented,
        n_rows=len(dataset),
    )

    strata_levels: list[str] = []
    if rw and dataset.strata is not None:
        strata_levels = natural_levels(dataset.strata)
    intercepts = (
        [f"Intercept{suffix}[{level}]" for level in strata_levels] if strata_levels else [f"Intercept{suffix}"]
    )
    start, intercept_index, covariate_index = builder.fixed_block(suffix, intercepts, list(dataset.covariate_names))
    info.intercepts = intercept_index
    info.fixed_effects = covariate_index

    if augmented:
        cutpoints = make_cutpoints(dataset, formula.n_cutpoints or settings.default_cutpoints, formula.cutpoints)
        aug = augment(dataset, cutpoints)
        info.cutpoints = cutpoints
        subject = aug.subject_index
        t_row = aug.t_mid
        covariates = aug.covariates
        labels = np.array([f"{sid}@{k}" for sid, k in zip(aug.subject_ids, aug.interval)])
        draft = _RowDraft(name=f"survival{suffix}", family="poisson", row_labels=labels, offset=aug.log_dt.copy())
        draft.response = {"y": aug.event_count}
    else:
        subject = np.arange(len(dataset))
        t_row = dataset.payload.time
        covariates = dataset.covariates
        if formula.cure:
            family = "cure"
        else:
            family = "weibullsurv" if formula.baseline == "weibull" else "exponentialsurv"
        draft = _RowDraft(
            name=f"survival{suffix}",
            family=family,
            row_labels=np.asarray(dataset.subject_ids),
            offset=np.zeros(len(dataset)),
            surv=dataset.payload,
        )
    rows = np.arange(draft.n_rows)

    if formula.baseline == "weibull":
        shape = builder.hyper(f"Weibull (shape){suffix}", "log-shape", builder.priors["weibull_shape"], "likelihood", EXP)
        info.shape_hyper = shape
        if augmented:
            draft.offset_terms.append(OffsetTerm("weibull-log-hazard", shape, np.log(t_row)))
        else:
            draft.shape_hyper = shape

    if strata_levels:
        stratum_position = {level: pos for pos, level in enumerate(strata_levels)}
        stratum_of_row = np.array([stratum_position[value] for value in dataset.strata[subject]])
        draft.add(rows, start + stratum_of_row, 1.0)
    else:
        stratum_of_row = np.zeros(draft.n_rows, dtype=int)
        draft.add(rows, start, 1.0)
    for column, name in enumerate(dataset.covariate_names):
        draft.add(rows, covariate_index[f"{name}{suffix}"], covariates[:, column])

    if rw:
        n_intervals = int(info.cutpoints.shape[0] - 1)
        order = 1 if formula.baseline == "rw1" else 2
        if n_intervals > 1:
            if n_intervals <= order:
                raise DataError(f"{where}: {formula.baseline} baseline needs more than {order} intervals, got {n_intervals}")
            precision = builder.hyper(
                f"Baseline risk (variance){suffix}",
                "log-precision",
                builder.priors["baseline_precision"],
                "block-precision",
                EXP_NEGATE,
            )
            info.baseline_hyper = precision
            interval = aug.interval
            for s, level in enumerate(strata_levels or [None]):
                name = f"Baseline risk{suffix}" if level is None else f"Baseline risk{suffix}[{level}]"
                block_index, block_start = builder.block(
                    name,
                    formula.baseline,
                    n_intervals,
                    [f"{name}[{k}]" for k in range(n_intervals)],
                    (precision,),
                    constraint=True,
                    scaled=formula.scale_baseline,
                )
                info.baseline_blocks["" if level is None else level] = block_index
                mask = stratum_of_row == s
                draft.add(rows[mask], block_start + interval[mask], 1.0)

    if formula.frailty:
        require_columns(frame, [formula.frailty], formula.data)
        groups = frame[formula.frailty].astype(str).str.strip().to_numpy()
        levels = natural_levels(groups)
        if not levels:
            raise DataError(f"Dataset '{formula.data}': frailty column '{formula.frailty}' has no groups.")
        precision = builder.hyper(
            f"IDIntercept{suffix}",
            "log-precision",
            builder.priors["frailty_precision"],
            "block-precision",
            EXP_NEGATE,
        )
        block_index, block_start = builder.block(
            f"IDIntercept{suffix}",
            "iid-random",
            len(levels),
            [f"IDIntercept{suffix}[{level}]" for level in levels],
            (precision,),
        )
        info.frailty_block = block_index
        info.frailty_hyper = precision
        position = {level: pos for pos, level in enumerate(levels)}
        draft.add(rows, block_start + np.array([position[g] for g in groups[subject]]), 1.0)

    if formula.cure:
        hypers = []
        for name in dataset.cure_names:
            label = f"{name}(cure){suffix}"
            hypers.append(builder.hyper(label, "identity", builder.priors["cure_coefficient"], "cure-coefficient"))
            info.cure_hypers[label] = hypers[-1]
        draft.cure_hypers = tuple(hypers)
        draft.cure_design = dataset.cure

    for long_index, kind in _shares(spec, index):
        effects = random_effects[long_index]
        if effects is None:
            raise SpecError(f"{spec.source}: assoc[{long_index}][{index}]: longitudinal formula has no random effects")
        if formula.id is None:
            raise SpecError(f"{spec.source}: {where}.id is required to link subjects to random effects")
        positions = np.array([effects.position[str(s)] for s in dataset.subject_ids[subject]])
        share_suffix = f"_L{long_index + 1}{suffix}"

        def coefficient(term: str) -> np.ndarray:
            if term.lower() == "intercept":
                return np.ones(draft.n_rows)
            if term == effects.time_column:
                return t_row
            raise SpecError(
                f"{spec.source}: assoc[{long_index}][{index}]: random effect '{term}' can only be shared "
                "when it is 'Intercept' or the longitudinal time column"
            )

        if kind == "SRE":
            gamma = builder.hyper(f"SRE{share_suffix}", "identity", builder.priors["association"], "association")
            info.association_hypers[f"SRE{share_suffix}"] = gamma
            for term in effects.terms:
                draft.add(rows, effects.coords(term, positions), coefficient(term), hyper=gamma)
        else:
            for term in effects.terms:
                label = f"SRE_{_re_label(term)}{share_suffix}"
                gamma = builder.hyper(label, "identity", builder.priors["association"], "association")
                info.association_hypers[label] = gamma
                draft.add(rows, effects.coords(term, positions), coefficient(term), hyper=gamma)

    builder.submodels.append(info)
    builder.drafts.append(draft)
    return _SurvRows(draft=draft, subject=subject, t_row=t_row, dataset=dataset, frame=frame)


def _add_frailty_shares(builder: _Builder, spec: ModelSpec, parts: dict[int, _SurvRows]) -> None:
    """Copy of a source frailty, scaled by its own hyperparameter, added to a target survival predictor."""
    for source_index, target_index in spec.assoc_surv:
        source_formula = spec.survival[source_index]
        source_info = builder.submodels[_surv_position(builder, source_index)]
        if source_info.frailty_block is None or source_formula.frailty is None:
            raise SpecError(
                f"{spec.source}: assoc_surv shares the frailty of survival[{source_index}], which has no frailty"
            )
        source_block = builder.blocks[source_info.frailty_block]
        levels = [label[len(source_block.name) + 1 : -1] for label in source_block.labels]
        position = {level: pos for pos, level in enumerate(levels)}

        target = parts[target_index]
        require_columns(target.frame, [source_formula.frailty], spec.survival[target_index].data)
        groups = target.frame[source_formula.frailty].astype(str).str.strip().to_numpy()[target.subject]
        missing = sorted({g for g in groups if g not in position})
        if missing:
            raise DataError(
                f"survival[{target_index}]: groups {missing[:3]} have no frailty in survival[{source_index}]"
            )
        name = f"IDIntercept_S{source_index + 1}_S{target_index + 1}"
        gamma = builder.hyper(name, "identity", builder.priors["association"], "association")
        copy_labels = [f"{name}[{level}]" for level in levels]
        _, start = builder.block(
            f"{name} copy",
            "copy-scaled",
            len(levels),
            copy_labels,
            (gamma,),
            source=source_info.frailty_block,
        )
        rows = np.arange(target.draft.n_rows)
        target.draft.add(rows, start + np.array([position[g] for g in groups]), 1.0)
        builder.submodels[_surv_position(builder, target_index)].association_hypers[name] = gamma


def _surv_position(builder: _Builder, surv_index: int) -> int:
    name = f"S{surv_index + 1}"
    for position, info in enumerate(builder.submodels):
        if info.name == name:
            return position
    raise KeyError(name)


def _assemble(spec: ModelSpec, datasets: dict[str, pd.DataFrame], config: EngineConfig | None) -> LatentModel:
    config = config or default_engine_config()
    _check_assoc(spec)
    builder = _Builder(spec, config)

    surv_frames = [
        _frame(datasets, formula.data, f"survival[{i}]", spec.source) for i, formula in enumerate(spec.survival)
    ]
    surv_data = [
        build_surv_dataset(frame, formula.formula_dict(), formula.data)
        for frame, formula in zip(surv_frames, spec.survival)
    ]

    long_parts = []
    for i, formula in enumerate(spec.longitudinal):
        frame = _frame(datasets, formula.data, f"longitudinal[{i}]", spec.source)
        long_parts.append(_add_longitudinal_rows(builder, i, formula, frame))

    extra_ids: dict[int, list[np.ndarray]] = {}
    for surv_index, dataset in enumerate(surv_data):
        for long_index, _ in _shares(spec, surv_index):
            extra_ids.setdefault(long_index, []).append(np.asarray(dataset.subject_ids, dtype=str))
    random_effects = _add_random_effects(builder, spec, long_parts, extra_ids)

    parts = {
        i: _add_survival(builder, spec, i, dataset, frame, random_effects)
        for i, (dataset, frame) in enumerate(zip(surv_data, surv_frames))
    }
    _add_frailty_shares(builder, spec, parts)
    return builder.finish()


def _single(spec: ModelSpec, operation: str) -> SurvFormula:
    if len(spec.survival) != 1 or spec.longitudinal:
        raise SpecError(f"{spec.source}: {operation} expects exactly one survival formula and no longitudinal part")
    return spec.survival[0]


def _as_datasets(spec: ModelSpec, data: pd.DataFrame | dict[str, pd.DataFrame]) -> dict[str, pd.DataFrame]:
    if isinstance(data, pd.DataFrame):
        return {formula.data: data for formula in [*spec.survival, *spec.longitudinal]}
    return data


def assemble_parametric_surv(spec: ModelSpec, dataset: Any, config: EngineConfig | None = None) -> LatentModel:
    formula = _single(spec, "assemble_parametric_surv")
    if formula.baseline not in PARAMETRIC_BASELINES:
        raise SpecError(f"{spec.source}: survival[0].baseline must be weibull or exponential, got '{formula.baseline}'")
    return _assemble(spec, _as_datasets(spec, dataset), config)


def assemble_pwc_cox(spec: ModelSpec, dataset: Any, config: EngineConfig | None = None) -> LatentModel:
    formula = _single(spec, "assemble_pwc_cox")
    if formula.baseline not in RW_BASELINES:
        raise SpecError(f"{spec.source}: survival[0].baseline must be rw1 or rw2, got '{formula.baseline}'")
    return _assemble(spec, _as_datasets(spec, dataset), config)


def assemble_cure(spec: ModelSpec, dataset: Any, config: EngineConfig | None = None) -> LatentModel:
    formula = _single(spec, "assemble_cure")
    if not formula.cure:
        raise SpecError(f"{spec.source}: survival[0].cure must list the cure terms")
    if formula.baseline not in PARAMETRIC_BASELINES:
        raise SpecError(f"{spec.source}: cure models need a parametric baseline; '{formula.baseline}' is unsupported")
    return _assemble(spec, _as_datasets(spec, dataset), config)


def assemble_frailty(spec: ModelSpec, dataset: Any, config: EngineConfig | None = None) -> LatentModel:
    formula = _single(spec, "assemble_frailty")
    if not formula.frailty:
        raise SpecError(f"{spec.source}: survival[0].frailty must name the grouping column")
    return _assemble(spec, _as_datasets(spec, dataset), config)


def assemble_multi_hazard(spec: ModelSpec, datasets: Any, config: EngineConfig | None = None) -> LatentModel:
    if len(spec.survival) < 2 or spec.longitudinal:
        raise SpecError(f"{spec.source}: assemble_multi_hazard needs at least two survival formulas and no longitudinal part")
    return _assemble(spec, _as_datasets(spec, datasets), config)


def assemble_longitudinal(spec: ModelSpec, datasets: Any, config: EngineConfig | None = None) -> LatentModel:
    if not spec.longitudinal or spec.survival:
        raise SpecError(f"{spec.source}: assemble_longitudinal needs longitudinal formulas only")
    return _assemble(spec, _as_datasets(spec, datasets), config)


def assemble_joint(spec: ModelSpec, datasets: Any, config: EngineConfig | None = None) -> LatentModel:
    if not spec.longitudinal or not spec.survival:
        raise SpecError(f"{spec.source}: assemble_joint needs both longitudinal and survival formulas")
    return _assemble(spec, _as_datasets(spec, datasets), config)


def assemble(spec: ModelSpec, datasets: Any, config: EngineConfig | None = None) -> LatentModel:
    """Dispatch a model spec to the assembler for its family."""
    if spec.longitudinal:
        if spec.survival:
            return assemble_joint(spec, datasets, config)
        return assemble_longitudinal(spec, datasets, config)
    if len(spec.survival) > 1:
        return assemble_multi_hazard(spec, datasets, config)
    formula = spec.survival[0]
    if formula.cure:
        return assemble_cure(spec, datasets, config)
    if formula.frailty:
        return assemble_frailty(spec, datasets, config)
    if formula.baseline in RW_BASELINES:
        return assemble_pwc_cox(spec, datasets, config)
    return assemble_parametric_surv(spec, datasets, config)
