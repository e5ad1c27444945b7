from __future__ import annotations
from pathlib import Path

DEFAULT_FILES: dict[str, str] = {
    'configs/inference-defaults.json': '{\n    "config_type": "inference_defaults",\n    "config_version": 1,\n    "description": "Numerical settings for the nested Laplace engine: Newton mode search, hyperparameter grid, marginal grids and diagnostics thresholds.",\n    "settings": {\n        "newton_tol": 1e-08,\n        "newton_max_iter": 100,\n        "max_step_halvings": 30,\n        "rw_jitter": 1e-05,\n        "copy_precision": 3269017.3724721107,\n        "grid_dz": 0.75,\n        "grid_log_drop": 3.5,\n        "grid_max_dim": 4,\n        "hessian_step": 0.0001,\n        "mode_tol": 1e-06,\n        "simplex_step": 0.5,\n        "marginal_points": 75,\n        "marginal_sd_span": 6.0,\n        "criteria_samples": 1000,\n        "default_cutpoints": 15,\n        "correlation_warning": 0.99,\n        "kl_warning": 0.1,\n        "initial_window": [-3.0, 5.0]\n    }\n}',
    'configs/prior-defaults.json': '{\n    "config_type": "prior_defaults",\n    "config_version": 1,\n    "description": "Default prior per parameter role. Model specs may override any role in their \'priors\' block.",\n    "roles": {\n        "fixed_effect": {"family": "normal", "params": {"mean": 0.0, "prec": 0.01}},\n        "intercept": {"family": "normal", "params": {"mean": 0.0, "prec": 0.01}},\n        "weibull_shape": {"family": "pc-weibull-shape", "params": {"lambda": 5.0}},\n        "weibull_shape_fallback": {"family": "gamma-on-precision", "params": {"a": 25.0, "b": 5.0}},\n        "baseline_precision": {"family": "pc-precision", "params": {"u": 0.5, "alpha": 0.01}},\n        "frailty_precision": {"family": "gamma-on-precision", "params": {"a": 0.01, "b": 0.01}},\n        "residual_precision": {"family": "gamma-on-precision", "params": {"a": 1.0, "b": 5e-05}},\n        "random_effects": {"family": "wishart-re", "params": {"r": 10.0, "scale": 1.0}},\n        "association": {"family": "normal", "params": {"mean": 0.0, "prec": 0.01}},\n        "cure_coefficient": {"family": "normal", "params": {"mean": 0.0, "prec": 0.01}}\n    }\n}',
}


def restore_default_configs(base_dir: str) -> list[str]:
    written = []
    for rel_path, content in DEFAULT_FILES.items():
        target = Path(base_dir) / rel_path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content + "\n", encoding="utf-8")
        written.append(str(target))
    return written
