from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import pytest

from core.config_loader import EngineConfig, validate_model_spec
from core.models import InferenceSettings, ModelSpec

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = ROOT / "data"
SPEC_DIR = ROOT / "specs"


def simulate_weibull(
    rng: np.random.Generator,
    n: int = 120,
    shape: float = 1.5,
    intercept: float = -1.0,
    beta: float = 0.8,
    censor: float = 3.0,
) -> pd.DataFrame:
    """Weibull PH times with hazard exp(intercept + beta * x) * shape * t^(shape - 1), uniform censoring."""
    x = rng.standard_normal(n)
    scale = np.exp(intercept + beta * x)
    event_time = (rng.exponential(size=n) / scale) ** (1.0 / shape)
    censor_time = rng.uniform(0.5, censor, size=n)
    time = np.minimum(event_time, censor_time)
    return pd.DataFrame(
        {
            "id": np.arange(1, n + 1),
            "time": np.round(time, 6) + 1e-6,
            "delta": (event_time <= censor_time).astype(int),
            "x": x,
            "group": rng.integers(0, 2, size=n),
        }
    )


def simulate_longitudinal(
    rng: np.random.Generator,
    n_subjects: int = 40,
    visits: int = 4,
    intercept: float = 1.0,
    slope: float = -0.3,
    re_sd: float = 0.6,
    noise_sd: float = 0.3,
) -> pd.DataFrame:
    subject = np.repeat(np.arange(1, n_subjects + 1), visits)
    time = np.tile(np.arange(visits, dtype=float), n_subjects)
    random_intercept = np.repeat(rng.normal(0.0, re_sd, n_subjects), visits)
    y = intercept + slope * time + random_intercept + rng.normal(0.0, noise_sd, subject.shape[0])
    return pd.DataFrame({"id": subject, "time": time, "y": y})


def surv_spec(name: str = "test", **survival: Any) -> ModelSpec:
    entry = {"data": "d", "time": "time", "event": "delta", "covariates": ["x"], **survival}
    return validate_model_spec({"spec_version": 1, "name": name, "survival": [entry]})


def fast_config(**settings: Any) -> EngineConfig:
    return EngineConfig(settings=InferenceSettings(criteria_samples=200, **settings))


def dataset_csv(name: str) -> Path:
    path = DATA_DIR / f"{name}.csv"
    if not path.is_file():
        pytest.skip(f"dataset {path} not exported; see docs/DATASETS.md")
    return path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture
def weibull_frame(rng: np.random.Generator) -> pd.DataFrame:
    return simulate_weibull(rng)
