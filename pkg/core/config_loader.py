from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from core.models import InferenceSettings, LongFormula, ModelSpec, PriorSpec, SurvFormula
from core.priors import PriorError, validate_prior

SUPPORTED_CONFIG_VERSION = 1
SUPPORTED_SPEC_VERSION = 1

PRIOR_ROLES = (
    "fixed_effect",
    "intercept",
    "weibull_shape",
    "weibull_shape_fallback",
    "baseline_precision",
    "frailty_precision",
    "residual_precision",
    "random_effects",
    "association",
    "cure_coefficient",
)
BASELINES = ("weibull", "exponential", "rw1", "rw2")
LONG_FAMILIES = ("gaussian", "lognormal", "binomial")
ASSOC_KINDS = ("none", "SRE", "SRE_ind", "CV", "CS")
STRATEGY_NAMES = ("auto", "grid", "eb", "empirical-bayes")
OUTPUT_KEYS = ("baseline", "cif", "transition_probs", "gumbel", "prior_vs_posterior", "hazard", "cure_fraction")
FIXED_EFFECT_CONTROLS = ("mean", "prec", "mean_intercept", "prec_intercept")

DEFAULT_ROLE_PRIORS: dict[str, PriorSpec] = {
    "fixed_effect": PriorSpec("normal", {"mean": 0.0, "prec": 0.01}),
    "intercept": PriorSpec("normal", {"mean": 0.0, "prec": 0.01}),
    "weibull_shape": PriorSpec("pc-weibull-shape", {"lambda": 5.0}),
    "weibull_shape_fallback": PriorSpec("gamma-on-precision", {"a": 25.0, "b": 5.0}),
    "baseline_precision": PriorSpec("pc-precision", {"u": 0.5, "alpha": 0.01}),
    "frailty_precision": PriorSpec("gamma-on-precision", {"a": 0.01, "b": 0.01}),
    "residual_precision": PriorSpec("gamma-on-precision", {"a": 1.0, "b": 5e-5}),
    "random_effects": PriorSpec("wishart-re", {"r": 10.0, "scale": 1.0}),
    "association": PriorSpec("normal", {"mean": 0.0, "prec": 0.01}),
    "cure_coefficient": PriorSpec("normal", {"mean": 0.0, "prec": 0.01}),
}


class ConfigError(Exception):
    """Raised when configuration files are invalid."""


class SpecError(ConfigError):
    """Raised when a model specification is invalid; the message names the JSON path."""


@dataclass(slots=True)
class EngineConfig:
    settings: InferenceSettings = field(default_factory=InferenceSettings)
    priors: dict[str, PriorSpec] = field(default_factory=lambda: dict(DEFAULT_ROLE_PRIORS))
    paths: tuple[str, ...] = ()


def default_engine_config() -> EngineConfig:
    return EngineConfig()


def load_all_configs(config_root: str) -> EngineConfig:
    root = Path(config_root)
    if not root.exists() or not root.is_dir():
        raise ConfigError(f"Config root does not exist or is not a directory: {config_root}")

    loaded_by_type = _load_and_validate_jsons(root)
    inference_defaults = _get_single_config(loaded_by_type, "inference_defaults")
    prior_defaults = _get_single_config(loaded_by_type, "prior_defaults")

    return EngineConfig(
        settings=_validate_inference_defaults(inference_defaults),
        priors=_validate_prior_defaults(prior_defaults),
        paths=(inference_defaults["_path"], prior_defaults["_path"]),
    )


def _load_and_validate_jsons(root: Path) -> dict[str, list[dict[str, Any]]]:
    loaded_by_type: dict[str, list[dict[str, Any]]] = {}

    for json_path in sorted(root.rglob("*.json")):
        payload = _read_json(json_path)
        config_type = payload.get("config_type")
        config_version = payload.get("config_version")

        if not isinstance(config_type, str) or not config_type:
            raise ConfigError(
                f"{json_path}: missing/invalid required key 'config_type' (string expected)"
            )

        if not isinstance(config_version, int):
            raise ConfigError(
                f"{json_path}: missing/invalid required key 'config_version' (int expected)"
            )

        if config_version != SUPPORTED_CONFIG_VERSION:
            raise ConfigError(
                f"{json_path}: unsupported config_version={config_version}; "
                f"supported version is {SUPPORTED_CONFIG_VERSION}"
            )

        payload["_path"] = str(json_path)
        loaded_by_type.setdefault(config_type, []).append(payload)

    return loaded_by_type


def _read_json(path: Path) -> dict[str, Any]:
    try:
        parsed = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc

    if not isinstance(parsed, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return parsed


def _get_single_config(
    loaded_by_type: dict[str, list[dict[str, Any]]],
    config_type: str,
) -> dict[str, Any]:
    entries = loaded_by_type.get(config_type, [])
    if len(entries) != 1:
        raise ConfigError(f"Expected exactly one '{config_type}' config, found {len(entries)}")
    return entries[0]


def _validate_inference_defaults(config: dict[str, Any]) -> InferenceSettings:
    path = config["_path"]
    values = config.get("settings")
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: 'settings' must be an object")

    defaults = InferenceSettings()
    known = {item.name: getattr(defaults, item.name) for item in fields(InferenceSettings)}
    kwargs: dict[str, Any] = {}
    for key, value in values.items():
        if key not in known:
            warnings.warn(f"{path}: settings.{key} is not a known inference setting; ignored", stacklevel=2)
            continue
        default = known[key]
        if key == "initial_window":
            if (
                not isinstance(value, list)
                or len(value) != 2
                or not all(_is_number(item) for item in value)
                or not value[0] < value[1]
            ):
                raise ConfigError(f"{path}: settings.initial_window must be [low, high] with low < high")
            kwargs[key] = (float(value[0]), float(value[1]))
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{path}: settings.{key} must be a positive integer")
            kwargs[key] = value
        else:
            if not _is_number(value) or not value > 0:
                raise ConfigError(f"{path}: settings.{key} must be a positive number")
            kwargs[key] = float(value)

    settings = InferenceSettings(**kwargs)
    if settings.correlation_warning >= 1.0:
        raise ConfigError(f"{path}: settings.correlation_warning must be < 1")
    return settings


def _validate_prior_defaults(config: dict[str, Any]) -> dict[str, PriorSpec]:
    path = config["_path"]
    roles = config.get("roles")
    if not isinstance(roles, dict):
        raise ConfigError(f"{path}: 'roles' must be an object")

    priors = dict(DEFAULT_ROLE_PRIORS)
    for role, entry in roles.items():
        if role not in PRIOR_ROLES:
            warnings.warn(f"{path}: roles.{role} is not a known prior role; ignored", stacklevel=2)
            continue
        priors[role] = _parse_prior(entry, f"roles.{role}", path, ConfigError)
    missing = [role for role in PRIOR_ROLES if role not in roles]
    if missing:
        raise ConfigError(f"{path}: roles is missing entries for {missing}")
    return priors


def _parse_prior(entry: Any, where: str, source: str, error: type[ConfigError], base: PriorSpec | None = None) -> PriorSpec:
    if not isinstance(entry, dict):
        raise error(f"{source}: {where} must be an object")
    if "family" in entry:
        family = entry["family"]
        params = entry.get("params", {})
    elif base is not None:
        family = base.family
        params = {**base.params, **entry}
    else:
        raise error(f"{source}: {where}.family is required")
    if not isinstance(family, str) or not isinstance(params, dict):
        raise error(f"{source}: {where} must have a string 'family' and an object 'params'")
    for key, value in params.items():
        if not _is_number(value):
            raise error(f"{source}: {where}.params.{key} must be a number")
    try:
        return validate_prior(PriorSpec(family, {key: float(value) for key, value in params.items()}))
    except PriorError as exc:
        raise error(f"{source}: {where}: {exc}") from exc


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _non_empty_string(value: Any) -> bool:
    return isinstance(value, str) and bool(value.strip())


def load_model_spec(path: str | Path) -> ModelSpec:
    spec_path = Path(path)
    if not spec_path.is_file():
        raise SpecError(f"Model spec file does not exist: {path}")
    try:
        payload = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SpecError(f"{spec_path}: invalid JSON ({exc.msg})") from exc
    return validate_model_spec(payload, str(spec_path))


def validate_model_spec(payload: Any, source: str = "<spec>") -> ModelSpec:
    """Schema checks for a spec_version 1 document; returns the normalised ModelSpec."""
    if not isinstance(payload, dict):
        raise SpecError(f"{source}: top-level JSON value must be an object")
    version = payload.get("spec_version")
    if not isinstance(version, int) or isinstance(version, bool):
        raise SpecError(f"{source}: missing/invalid required key 'spec_version' (int expected)")
    if version != SUPPORTED_SPEC_VERSION:
        raise SpecError(
            f"{source}: unsupported spec_version={version}; supported version is {SUPPORTED_SPEC_VERSION}"
        )

    known = {"spec_version", "name", "survival", "longitudinal", "assoc", "assoc_surv", "cor_long",
             "priors", "strategy", "outputs", "description"}
    for key in payload:
        if key not in known:
            warnings.warn(f"{source}: unknown key '{key}' ignored", stacklevel=2)

    name = payload.get("name", Path(source).stem if source != "<spec>" else "model")
    if not _non_empty_string(name):
        raise SpecError(f"{source}: name must be a non-empty string")

    survival_raw = payload.get("survival", [])
    longitudinal_raw = payload.get("longitudinal", [])
    if not isinstance(survival_raw, list) or not isinstance(longitudinal_raw, list):
        raise SpecError(f"{source}: survival and longitudinal must be lists")
    if not survival_raw and not longitudinal_raw:
        raise SpecError(f"{source}: at least one survival or longitudinal formula is required")

    survival = [_parse_surv(entry, f"survival[{i}]", source) for i, entry in enumerate(survival_raw)]
    longitudinal = [_parse_long(entry, f"longitudinal[{i}]", source) for i, entry in enumerate(longitudinal_raw)]

    strategy = payload.get("strategy", "auto")
    if strategy not in STRATEGY_NAMES:
        raise SpecError(f"{source}: strategy must be one of {STRATEGY_NAMES}")

    cor_long = payload.get("cor_long", False)
    if not isinstance(cor_long, bool):
        raise SpecError(f"{source}: cor_long must be true or false")

    return ModelSpec(
        name=name.strip(),
        survival=survival,
        longitudinal=longitudinal,
        assoc=_parse_assoc(payload.get("assoc"), len(longitudinal), len(survival), source),
        assoc_surv=_parse_assoc_surv(payload.get("assoc_surv"), len(survival), source),
        cor_long=cor_long,
        priors=_parse_spec_priors(payload.get("priors", {}), source),
        strategy=strategy,
        outputs=_parse_outputs(payload.get("outputs", {}), source),
        source=source,
    )


def _string_list(entry: dict[str, Any], key: str, where: str, source: str) -> tuple[str, ...]:
    value = entry.get(key, [])
    if not isinstance(value, list) or not all(_non_empty_string(item) for item in value):
        raise SpecError(f"{source}: {where}.{key} must be a list of column names")
    return tuple(item.strip() for item in value)


def _optional_string(entry: dict[str, Any], key: str, where: str, source: str) -> str | None:
    value = entry.get(key)
    if value is None:
        return None
    if not _non_empty_string(value):
        raise SpecError(f"{source}: {where}.{key} must be a non-empty string")
    return value.strip()


def _required_string(entry: dict[str, Any], key: str, where: str, source: str) -> str:
    value = _optional_string(entry, key, where, source)
    if value is None:
        raise SpecError(f"{source}: {where}.{key} is required")
    return value


def _check_keys(entry: dict[str, Any], allowed: set[str], where: str, source: str) -> None:
    for key in entry:
        if key not in allowed:
            raise SpecError(f"{source}: {where}.{key} is not a recognised key")


def _parse_surv(entry: Any, where: str, source: str) -> SurvFormula:
    if not isinstance(entry, dict):
        raise SpecError(f"{source}: {where} must be an object")
    _check_keys(
        entry,
        {"data", "time", "event", "covariates", "categorical", "standardize", "baseline", "n_cutpoints",
         "cutpoints", "strata", "frailty", "cure", "id", "time2", "trunc_left", "trunc_right", "scale_baseline"},
        where,
        source,
    )
    event = entry.get("event")
    if isinstance(event, dict):
        if not _non_empty_string(event.get("column")) or "equals" not in event:
            raise SpecError(f"{source}: {where}.event mapping needs 'column' and 'equals'")
    elif not _non_empty_string(event):
        raise SpecError(f"{source}: {where}.event must be a column name or a {{column, equals}} mapping")

    baseline = entry.get("baseline", "weibull")
    if baseline not in BASELINES:
        raise SpecError(f"{source}: {where}.baseline must be one of {BASELINES}")

    n_cutpoints = entry.get("n_cutpoints")
    if n_cutpoints is not None and (not isinstance(n_cutpoints, int) or isinstance(n_cutpoints, bool) or n_cutpoints < 1):
        raise SpecError(f"{source}: {where}.n_cutpoints must be a positive integer")
    cutpoints = entry.get("cutpoints")
    if cutpoints is not None:
        if not isinstance(cutpoints, list) or len(cutpoints) < 2 or not all(_is_number(c) for c in cutpoints):
            raise SpecError(f"{source}: {where}.cutpoints must be a list of at least two numbers")
        if cutpoints[0] != 0 or any(b <= a for a, b in zip(cutpoints, cutpoints[1:])):
            raise SpecError(f"{source}: {where}.cutpoints must start at 0 and be strictly increasing")
        cutpoints = tuple(float(c) for c in cutpoints)
    if baseline in {"weibull", "exponential"} and (n_cutpoints is not None or cutpoints is not None):
        warnings.warn(f"{source}: {where} cutpoints only apply to rw baselines or augmented submodels", stacklevel=2)

    cure = _string_list(entry, "cure", where, source)
    if cure and baseline not in {"weibull", "exponential"}:
        raise SpecError(f"{source}: {where}.cure requires a weibull or exponential baseline, not '{baseline}'")

    scale_baseline = entry.get("scale_baseline", True)
    if not isinstance(scale_baseline, bool):
        raise SpecError(f"{source}: {where}.scale_baseline must be true or false")

    return SurvFormula(
        data=_required_string(entry, "data", where, source),
        time=_required_string(entry, "time", where, source),
        event=event if isinstance(event, dict) else event.strip(),
        covariates=_string_list(entry, "covariates", where, source),
        categorical=_string_list(entry, "categorical", where, source),
        standardize=_string_list(entry, "standardize", where, source),
        baseline=baseline,
        n_cutpoints=n_cutpoints,
        cutpoints=cutpoints,
        strata=_optional_string(entry, "strata", where, source),
        frailty=_optional_string(entry, "frailty", where, source),
        cure=cure,
        id=_optional_string(entry, "id", where, source),
        time2=_optional_string(entry, "time2", where, source),
        trunc_left=_optional_string(entry, "trunc_left", where, source),
        trunc_right=_optional_string(entry, "trunc_right", where, source),
        scale_baseline=scale_baseline,
    )


def _parse_long(entry: Any, where: str, source: str) -> LongFormula:
    if not isinstance(entry, dict):
        raise SpecError(f"{source}: {where} must be an object")
    _check_keys(
        entry,
        {"data", "response", "family", "id", "time", "covariates", "categorical", "standardize",
         "random_effects", "cor_re", "trials"},
        where,
        source,
    )
    family = entry.get("family", "gaussian")
    if family not in LONG_FAMILIES:
        raise SpecError(f"{source}: {where}.family must be one of {LONG_FAMILIES}")
    random_effects = _string_list(entry, "random_effects", where, source)
    if len(random_effects) > 3:
        raise SpecError(f"{source}: {where}.random_effects has {len(random_effects)} terms; at most 3 are supported")
    if len(set(random_effects)) != len(random_effects):
        raise SpecError(f"{source}: {where}.random_effects lists a term twice")
    cor_re = entry.get("cor_re", True)
    if not isinstance(cor_re, bool):
        raise SpecError(f"{source}: {where}.cor_re must be true or false")
    return LongFormula(
        data=_required_string(entry, "data", where, source),
        response=_required_string(entry, "response", where, source),
        family=family,
        id=_required_string(entry, "id", where, source),
        time=_optional_string(entry, "time", where, source),
        covariates=_string_list(entry, "covariates", where, source),
        categorical=_string_list(entry, "categorical", where, source),
        standardize=_string_list(entry, "standardize", where, source),
        random_effects=random_effects,
        cor_re=cor_re,
        trials=_optional_string(entry, "trials", where, source),
    )


def _parse_assoc(value: Any, n_long: int, n_surv: int, source: str) -> list[list[str]]:
    if value is None:
        return [["SRE" if n_surv else "none"] * n_surv for _ in range(n_long)]
    if isinstance(value, str) and n_long == 1 and n_surv == 1:
        value = [[value]]
    elif isinstance(value, list) and n_long == 1 and all(isinstance(item, str) for item in value):
        value = [value]
    if not isinstance(value, list) or len(value) != n_long:
        raise SpecError(f"{source}: assoc must have one row per longitudinal formula ({n_long})")
    rows: list[list[str]] = []
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) != n_surv:
            raise SpecError(f"{source}: assoc[{i}] must list one association per survival formula ({n_surv})")
        for j, kind in enumerate(row):
            if kind not in ASSOC_KINDS:
                raise SpecError(f"{source}: assoc[{i}][{j}] must be one of {ASSOC_KINDS}")
        rows.append(list(row))
    return rows


def _parse_assoc_surv(value: Any, n_surv: int, source: str) -> list[tuple[int, int]]:
    if value is None or value is False:
        return []
    if value is True:
        if n_surv < 2:
            raise SpecError(f"{source}: assoc_surv needs at least two survival formulas")
        return [(0, target) for target in range(1, n_surv)]
    if not isinstance(value, list):
        raise SpecError(f"{source}: assoc_surv must be true/false or a list of [from, to] pairs")
    pairs: list[tuple[int, int]] = []
    for i, pair in enumerate(value):
        if (
            not isinstance(pair, list)
            or len(pair) != 2
            or not all(isinstance(item, int) and not isinstance(item, bool) for item in pair)
        ):
            raise SpecError(f"{source}: assoc_surv[{i}] must be a [from, to] pair of survival indices (1-based)")
        source_index, target_index = pair[0] - 1, pair[1] - 1
        if not (0 <= source_index < n_surv and 0 <= target_index < n_surv) or source_index == target_index:
            raise SpecError(f"{source}: assoc_surv[{i}] references invalid survival formulas {pair}")
        pairs.append((source_index, target_index))
    return pairs


def _parse_spec_priors(value: Any, source: str) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise SpecError(f"{source}: priors must be an object")
    parsed: dict[str, Any] = {}
    for key, entry in value.items():
        if key in FIXED_EFFECT_CONTROLS:
            if not _is_number(entry) or (key.startswith("prec") and not entry > 0):
                raise SpecError(f"{source}: priors.{key} must be a {'positive ' if key.startswith('prec') else ''}number")
            parsed[key] = float(entry)
        elif key == "weibull_shape_fallback":
            if not isinstance(entry, bool):
                raise SpecError(f"{source}: priors.weibull_shape_fallback must be true or false")
            parsed[key] = entry
        elif key in PRIOR_ROLES:
            parsed[key] = _parse_prior(entry, f"priors.{key}", source, SpecError, DEFAULT_ROLE_PRIORS[key])
        else:
            raise SpecError(f"{source}: priors.{key} is not a recognised prior setting")
    return parsed


def _parse_outputs(value: Any, source: str) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise SpecError(f"{source}: outputs must be an object")
    for key, entry in value.items():
        if key not in OUTPUT_KEYS:
            raise SpecError(f"{source}: outputs.{key} is not a recognised output; expected one of {OUTPUT_KEYS}")
        if key in {"gumbel", "prior_vs_posterior"} and not isinstance(entry, bool):
            raise SpecError(f"{source}: outputs.{key} must be true or false")
        if key == "baseline" and not isinstance(entry, (bool, dict)):
            raise SpecError(f"{source}: outputs.baseline must be true/false or an object with 'log10'")
        if key in {"cif", "transition_probs", "hazard", "cure_fraction"}:
            if not isinstance(entry, dict):
                raise SpecError(f"{source}: outputs.{key} must be an object")
            times = entry.get("times")
            if times is not None and (not isinstance(times, list) or not all(_is_number(t) for t in times)):
                raise SpecError(f"{source}: outputs.{key}.times must be a list of numbers")
            if "step" in entry and (not _is_number(entry["step"]) or not entry["step"] > 0):
                raise SpecError(f"{source}: outputs.{key}.step must be a positive number")
            if "profile" in entry and not isinstance(entry["profile"], dict):
                raise SpecError(f"{source}: outputs.{key}.profile must be an object of covariate values")
    return dict(value)
