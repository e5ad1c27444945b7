from __future__ import annotations

import json
import math

import pytest

from core.config_loader import (
    DEFAULT_ROLE_PRIORS,
    ConfigError,
    SpecError,
    load_all_configs,
    load_model_spec,
    validate_model_spec,
)
from core.default_configs import DEFAULT_FILES, restore_default_configs
from tests.conftest import ROOT, SPEC_DIR


def _write(path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload), encoding="utf-8")


def _shipped(tmp_path):
    restore_default_configs(str(tmp_path))
    return tmp_path / "configs"


def _spec(**extra):
    return {
        "spec_version": 1,
        "name": "m",
        "survival": [{"data": "d", "time": "time", "event": "delta"}],
        **extra,
    }


class TestEngineConfigs:
    def test_repository_configs_load(self):
        config = load_all_configs(str(ROOT / "configs"))
        assert config.settings.grid_dz == 0.75
        assert config.settings.initial_window == (-3.0, 5.0)
        assert config.settings.copy_precision == pytest.approx(math.exp(15.0))
        assert config.priors["weibull_shape"].family == "pc-weibull-shape"

    def test_restored_defaults_match_the_repository(self, tmp_path):
        written = restore_default_configs(str(tmp_path))
        assert len(written) == len(DEFAULT_FILES)
        for rel_path in DEFAULT_FILES:
            shipped = json.loads((ROOT / rel_path).read_text(encoding="utf-8"))
            restored = json.loads((tmp_path / rel_path).read_text(encoding="utf-8"))
            assert restored == shipped

    def test_role_priors_match_code_defaults(self, tmp_path):
        config = load_all_configs(str(_shipped(tmp_path)))
        assert config.priors == DEFAULT_ROLE_PRIORS

    def test_missing_root(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_all_configs(str(tmp_path / "nope"))

    def test_unsupported_version(self, tmp_path):
        root = _shipped(tmp_path)
        _write(root / "extra.json", {"config_type": "inference_defaults", "config_version": 2, "settings": {}})
        with pytest.raises(ConfigError, match="unsupported config_version=2"):
            load_all_configs(str(root))

    def test_duplicate_type(self, tmp_path):
        root = _shipped(tmp_path)
        _write(root / "more" / "copy.json", {"config_type": "prior_defaults", "config_version": 1, "roles": {}})
        with pytest.raises(ConfigError, match="exactly one 'prior_defaults'"):
            load_all_configs(str(root))

    def test_invalid_setting(self, tmp_path):
        root = _shipped(tmp_path)
        path = root / "inference-defaults.json"
        payload = json.loads(path.read_text(encoding="utf-8"))
        payload["settings"]["newton_max_iter"] = 0
        _write(path, payload)
        with pytest.raises(ConfigError, match="newton_max_iter must be a positive integer"):
            load_all_configs(str(root))

    def test_unknown_setting_warns(self, tmp_path):
        root = _shipped(tmp_path)
        path = root / "inference-defaults.json"
        payload = json.loads(path.read_text(encoding="utf-8"))
        payload["settings"]["turbo"] = 1
        _write(path, payload)
        with pytest.warns(UserWarning, match="turbo"):
            load_all_configs(str(root))

    def test_invalid_prior_role(self, tmp_path):
        root = _shipped(tmp_path)
        path = root / "prior-defaults.json"
        payload = json.loads(path.read_text(encoding="utf-8"))
        payload["roles"]["frailty_precision"] = {"family": "gamma-on-precision", "params": {"a": -1.0, "b": 1.0}}
        _write(path, payload)
        with pytest.raises(ConfigError, match="roles.frailty_precision"):
            load_all_configs(str(root))


class TestModelSpec:
    def test_shipped_specs_validate(self):
        names = sorted(path.stem for path in SPEC_DIR.glob("*.json"))
        assert "larynx_ph" in names
        for path in SPEC_DIR.glob("*.json"):
            spec = load_model_spec(path)
            assert spec.name == path.stem

    def test_defaults(self):
        spec = validate_model_spec(_spec())
        formula = spec.survival[0]
        assert formula.baseline == "weibull"
        assert formula.scale_baseline is True
        assert spec.strategy == "auto"
        assert spec.assoc == []

    @pytest.mark.parametrize(
        ("change", "message"),
        [
            ({"spec_version": 2}, "unsupported spec_version"),
            ({"survival": [], "longitudinal": []}, "at least one"),
            ({"survival": [{"data": "d", "time": "time", "event": "delta", "baseline": "gompertz"}]}, r"survival\[0\]\.baseline"),
            ({"survival": [{"data": "d", "event": "delta"}]}, r"survival\[0\]\.time is required"),
            ({"survival": [{"data": "d", "time": "t", "event": "e", "cutpoints": [1, 2]}]}, "start at 0"),
            ({"survival": [{"data": "d", "time": "t", "event": "e", "baseline": "rw1", "cure": ["Int"]}]}, "cure requires"),
            ({"survival": [{"data": "d", "time": "t", "event": {"column": "status"}}]}, "'column' and 'equals'"),
            ({"survival": [{"data": "d", "time": "t", "event": "e", "colour": "red"}]}, "not a recognised key"),
            ({"strategy": "mcmc"}, "strategy must be one of"),
            ({"outputs": {"movie": True}}, r"outputs\.movie"),
            ({"outputs": {"cif": {"times": ["soon"]}}}, r"outputs\.cif\.times"),
            ({"priors": {"prec": -1}}, r"priors\.prec"),
        ],
    )
    def test_schema_errors_name_the_path(self, change, message):
        with pytest.raises(SpecError, match=message):
            validate_model_spec({**_spec(), **change})

    def test_unknown_top_level_key_warns(self):
        with pytest.warns(UserWarning, match="unknown key 'colour'"):
            validate_model_spec(_spec(colour="red"))

    def test_random_effects_limit(self):
        payload = {
            "spec_version": 1,
            "longitudinal": [
                {"data": "l", "response": "y", "id": "id", "random_effects": ["Intercept", "a", "b", "c"]}
            ],
        }
        with pytest.raises(SpecError, match="at most 3"):
            validate_model_spec(payload)

    def test_association_shapes(self):
        payload = {
            "spec_version": 1,
            "longitudinal": [{"data": "l", "response": "y", "id": "id", "random_effects": ["Intercept"]}],
            "survival": [{"data": "s", "time": "t", "event": "e", "id": "id"}],
        }
        assert validate_model_spec(payload).assoc == [["SRE"]]
        assert validate_model_spec({**payload, "assoc": "SRE_ind"}).assoc == [["SRE_ind"]]
        with pytest.raises(SpecError, match="assoc must have one row"):
            validate_model_spec({**payload, "assoc": [["SRE"], ["SRE"]]})
        with pytest.raises(SpecError, match=r"assoc\[0\]\[0\]"):
            validate_model_spec({**payload, "assoc": [["shared"]]})

    def test_frailty_sharing_pairs(self):
        two = [{"data": "d", "time": "t", "event": "e"}] * 3
        assert validate_model_spec({"spec_version": 1, "survival": two, "assoc_surv": True}).assoc_surv == [(0, 1), (0, 2)]
        assert validate_model_spec({"spec_version": 1, "survival": two, "assoc_surv": [[2, 3]]}).assoc_surv == [(1, 2)]
        with pytest.raises(SpecError, match=r"assoc_surv\[0\]"):
            validate_model_spec({"spec_version": 1, "survival": two, "assoc_surv": [[1, 1]]})

    def test_prior_overrides(self):
        spec = validate_model_spec(
            _spec(priors={"baseline_precision": {"u": 1.0}, "weibull_shape_fallback": True, "prec_intercept": 0.001})
        )
        assert spec.priors["baseline_precision"].params == {"u": 1.0, "alpha": 0.01}
        assert spec.priors["weibull_shape_fallback"] is True
        assert spec.priors["prec_intercept"] == 0.001

    def test_spec_file_errors(self, tmp_path):
        with pytest.raises(SpecError, match="does not exist"):
            load_model_spec(tmp_path / "missing.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{", encoding="utf-8")
        with pytest.raises(SpecError, match="invalid JSON"):
            load_model_spec(broken)
