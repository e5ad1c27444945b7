from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from core.likelihoods import validate_surv_payload
from core.models import EVENT_EXACT, EVENT_RIGHT, SurvPayload


class DataError(ValueError):
    """Raised when a dataset is missing columns or holds values of the wrong kind."""


@dataclass(slots=True)
class SurvDataset:
    name: str
    subject_ids: np.ndarray
    payload: SurvPayload
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    strata: np.ndarray | None = None
    cure: np.ndarray | None = None
    cure_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.payload)


@dataclass(slots=True)
class AugmentedDataset:
    subject_index: np.ndarray
    subject_ids: np.ndarray
    interval: np.ndarray
    t_mid: np.ndarray
    width: np.ndarray
    log_dt: np.ndarray
    event_count: np.ndarray
    covariates: np.ndarray
    strata: np.ndarray | None
    cutpoints: np.ndarray

    def __len__(self) -> int:
        return int(self.subject_index.shape[0])


def read_dataset_csv(path: str | Path) -> pd.DataFrame:
    """Read a dataset CSV keeping raw text; columns are converted on use."""
    return pd.read_csv(
        path,
        dtype=str,
        encoding="utf-8",
        keep_default_na=False,
        na_filter=False,
    )


def require_columns(df: pd.DataFrame, columns: list[str], dataset: str) -> None:
    for column in columns:
        if column not in df.columns:
            raise DataError(f"Dataset '{dataset}': required column is missing: '{column}'.")


def numeric_column(df: pd.DataFrame, column: str, dataset: str, allow_missing: bool = False) -> np.ndarray:
    require_columns(df, [column], dataset)
    raw = df[column].astype(str).str.strip()
    missing = raw.isin(["", "NA", "NaN"])
    values = pd.to_numeric(raw.where(~missing), errors="coerce")
    bad = values.isna() & ~missing
    if bad.any():
        examples = raw[bad].head(3).tolist()
        raise DataError(f"Dataset '{dataset}': column '{column}' has non-numeric values, e.g. {examples}.")
    if missing.any() and not allow_missing:
        rows = [str(index) for index in raw.index[missing][:3]]
        raise DataError(f"Dataset '{dataset}': column '{column}' has missing values in rows {rows}.")
    return values.to_numpy(dtype=float)


def _is_numeric(df: pd.DataFrame, column: str) -> bool:
    raw = df[column].astype(str).str.strip()
    return bool(pd.to_numeric(raw, errors="coerce").notna().all())


def _main_effect(
    df: pd.DataFrame,
    column: str,
    dataset: str,
    categorical: set[str],
    standardize: set[str],
) -> tuple[list[np.ndarray], list[str]]:
    require_columns(df, [column], dataset)
    if column in categorical or not _is_numeric(df, column):
        labels = df[column].astype(str).str.strip()
        levels = sorted(labels.unique())
        # First level (lexicographic) is the reference category.
        return [(labels == level).to_numpy(dtype=float) for level in levels[1:]], [
            f"{column}{level}" for level in levels[1:]
        ]
    values = numeric_column(df, column, dataset)
    if column in standardize:
        sd = float(np.std(values, ddof=1)) if values.shape[0] > 1 else 0.0
        values = (values - values.mean()) / (sd if sd > 0 else 1.0)
    return [values], [column]


def design_columns(
    df: pd.DataFrame,
    terms: list[str],
    dataset: str,
    categorical: list[str] | None = None,
    standardize: list[str] | None = None,
) -> tuple[np.ndarray, list[str]]:
    """Covariate design matrix; "a*b" adds both main effects and their products, "a:b" only the products."""
    categorical_set = set(categorical or [])
    standardize_set = set(standardize or [])
    columns: dict[str, np.ndarray] = {}

    def add_main(column: str) -> tuple[list[np.ndarray], list[str]]:
        values, names = _main_effect(df, column, dataset, categorical_set, standardize_set)
        for value, name in zip(values, names):
            columns.setdefault(name, value)
        return values, names

    for term in terms:
        text = term.replace(" ", "")
        if "*" in text or ":" in text:
            separator = "*" if "*" in text else ":"
            parts = text.split(separator)
            if len(parts) != 2 or not all(parts):
                raise DataError(f"Dataset '{dataset}': interaction term '{term}' must name two columns.")
            if separator == "*":
                left_values, left_names = add_main(parts[0])
                right_values, right_names = add_main(parts[1])
            else:
                left_values, left_names = _main_effect(df, parts[0], dataset, categorical_set, standardize_set)
                right_values, right_names = _main_effect(df, parts[1], dataset, categorical_set, standardize_set)
            for lv, ln in zip(left_values, left_names):
                for rv, rn in zip(right_values, right_names):
                    columns.setdefault(f"{ln}:{rn}", lv * rv)
        else:
            add_main(text)

    names = list(columns)
    if not names:
        return np.zeros((len(df), 0)), []
    return np.column_stack([columns[name] for name in names]), names


def event_column(df: pd.DataFrame, event: Any, dataset: str) -> np.ndarray:
    """Event codes from a code column (0 right, 1 exact, 2 left, 3 interval) or a status match."""
    if isinstance(event, dict):
        column = event.get("column")
        if not isinstance(column, str):
            raise DataError(f"Dataset '{dataset}': event mapping needs a 'column' name.")
        require_columns(df, [column], dataset)
        target = str(event.get("equals")).strip()
        raw = df[column].astype(str).str.strip()
        matches = raw == target
        if not matches.any():
            numeric = pd.to_numeric(raw, errors="coerce")
            try:
                matches = numeric == float(target)
            except ValueError:
                pass
        if not matches.any():
            observed = sorted(raw.unique())[:5]
            raise DataError(
                f"Dataset '{dataset}': event column '{column}' has no value equal to '{target}'; "
                f"observed values include {observed}"
            )
        return np.where(matches.to_numpy(), EVENT_EXACT, EVENT_RIGHT).astype(int)
    codes = numeric_column(df, str(event), dataset)
    if np.any(codes != np.floor(codes)):
        raise DataError(f"Dataset '{dataset}': event column '{event}' must hold integer codes.")
    return codes.astype(int)


def build_surv_dataset(df: pd.DataFrame, formula: dict[str, Any], dataset: str) -> SurvDataset:
    id_column = formula.get("id")
    if id_column:
        require_columns(df, [id_column], dataset)
        subject_ids = df[id_column].astype(str).str.strip().to_numpy()
        if np.any(subject_ids == ""):
            raise DataError(f"Dataset '{dataset}': subject id column '{id_column}' has empty values.")
    else:
        subject_ids = np.array([str(index + 1) for index in range(len(df))])

    def optional(key: str) -> np.ndarray | None:
        column = formula.get(key)
        return numeric_column(df, column, dataset, allow_missing=True) if column else None

    payload = SurvPayload.build(
        time=numeric_column(df, formula["time"], dataset),
        event=event_column(df, formula["event"], dataset),
        time2=optional("time2"),
        trunc_left=optional("trunc_left"),
        trunc_right=optional("trunc_right"),
    )
    validate_surv_payload(payload, subject_ids, context=f"Dataset '{dataset}'")

    covariates, names = design_columns(
        df,
        list(formula.get("covariates", [])),
        dataset,
        formula.get("categorical"),
        formula.get("standardize"),
    )

    strata = None
    if formula.get("strata"):
        require_columns(df, [formula["strata"]], dataset)
        strata = df[formula["strata"]].astype(str).str.strip().to_numpy()

    cure = None
    cure_names: list[str] = []
    if formula.get("cure"):
        cure_terms = list(formula["cure"])
        pieces = []
        for term in cure_terms:
            if term.lower() in {"int", "intercept", "1"}:
                pieces.append(np.ones(len(df)))
                cure_names.append("Int")
            else:
                values, term_names = design_columns(df, [term], dataset, formula.get("categorical"))
                pieces.extend(values.T)
                cure_names.extend(term_names)
        cure = np.column_stack(pieces)
        zero = ~np.any(cure != 0, axis=0)
        if np.any(zero):
            bad = [name for name, flag in zip(cure_names, zero) if flag]
            raise DataError(f"Dataset '{dataset}': cure design column(s) {bad} are all zero.")

    return SurvDataset(
        name=dataset,
        subject_ids=subject_ids,
        payload=payload,
        covariates=covariates,
        covariate_names=tuple(names),
        strata=strata,
        cure=cure,
        cure_names=tuple(cure_names),
    )


def make_cutpoints(dataset: SurvDataset, n: int, manual: Any = None) -> np.ndarray:
    max_time = float(np.max(dataset.payload.time)) if len(dataset) else 0.0
    if manual is not None:
        cutpoints = np.asarray(manual, dtype=float)
        if cutpoints.ndim != 1 or cutpoints.shape[0] < 2:
            raise DataError("Manual cutpoints need at least two values.")
        if cutpoints[0] != 0.0 or np.any(np.diff(cutpoints) <= 0):
            raise DataError("Manual cutpoints must start at 0 and be strictly increasing.")
        if cutpoints[-1] < max_time:
            raise DataError(
                f"Manual cutpoints end at {cutpoints[-1]:g}, before the maximum observed time {max_time:g}."
            )
        return cutpoints
    if int(n) < 1:
        raise DataError(f"Number of cutpoint intervals must be >= 1, got {n}.")
    if not max_time > 0:
        raise DataError("Cannot place cutpoints: the maximum observed time is not positive.")
    return np.linspace(0.0, max_time, int(n) + 1)


def augment(dataset: SurvDataset, cutpoints: np.ndarray) -> AugmentedDataset:
    """Split follow-up (L, time] into one Poisson row per overlapped interval."""
    payload = dataset.payload
    unsupported = ~np.isin(payload.event, [EVENT_EXACT, EVENT_RIGHT])
    if np.any(unsupported) or np.any(np.isfinite(payload.trunc_right)):
        offending = [str(label) for label in dataset.subject_ids[unsupported][:3]]
        raise DataError(
            f"Dataset '{dataset.name}': augmented models support exact/right-censored rows with "
            f"optional left truncation only; offending rows: {offending}"
        )
    cutpoints = np.asarray(cutpoints, dtype=float)
    if np.any(payload.time > cutpoints[-1]):
        raise DataError(f"Dataset '{dataset.name}': cutpoints end before the maximum observed time.")

    lower = np.maximum(cutpoints[None, :-1], payload.trunc_left[:, None])
    upper = np.minimum(cutpoints[None, 1:], payload.time[:, None])
    width = upper - lower
    subject_index, interval = np.nonzero(width > 0)
    widths = width[subject_index, interval]
    t_mid = 0.5 * (lower[subject_index, interval] + upper[subject_index, interval])

    is_last = np.ones(subject_index.shape[0], dtype=bool)
    if subject_index.shape[0] > 1:
        is_last[:-1] = subject_index[1:] != subject_index[:-1]
    event_count = (is_last & (payload.event[subject_index] == EVENT_EXACT)).astype(float)

    return AugmentedDataset(
        subject_index=subject_index,
        subject_ids=dataset.subject_ids[subject_index],
        interval=interval,
        t_mid=t_mid,
        width=widths,
        log_dt=np.log(widths),
        event_count=event_count,
        covariates=dataset.covariates[subject_index],
        strata=None if dataset.strata is None else dataset.strata[subject_index],
        cutpoints=cutpoints,
    )
