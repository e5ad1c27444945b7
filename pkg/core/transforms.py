from __future__ import annotations

import numpy as np
from scipy.special import expit

from core.models import Transform

TRANSFORM_NAMES = (
    "identity",
    "negate",
    "exp",
    "exp-negate",
    "exp-scaled",
    "reciprocal",
    "affine",
    "inverse-logit",
    "tanh",
)

IDENTITY = Transform("identity")
NEGATE = Transform("negate")
EXP = Transform("exp")
EXP_NEGATE = Transform("exp-negate")
RECIPROCAL = Transform("reciprocal")
INVERSE_LOGIT = Transform("inverse-logit")
TANH = Transform("tanh")


def affine(scale: float, shift: float = 0.0) -> Transform:
    if scale == 0.0:
        raise ValueError("Affine transform requires a non-zero scale")
    return Transform("affine", (float(scale), float(shift)))


def exp_scaled(scale: float) -> Transform:
    """exp(scale * x); scale -0.5 turns a log-precision into a standard deviation."""
    if scale == 0.0:
        raise ValueError("exp-scaled transform requires a non-zero scale")
    return Transform("exp-scaled", (float(scale),))


def apply(transform: Transform, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    name = transform.name
    if name == "identity":
        return x.copy()
    if name == "negate":
        return -x
    if name == "exp":
        return np.exp(x)
    if name == "exp-negate":
        return np.exp(-x)
    if name == "exp-scaled":
        return np.exp(transform.params[0] * x)
    if name == "reciprocal":
        return 1.0 / x
    if name == "affine":
        scale, shift = transform.params
        return scale * x + shift
    if name == "inverse-logit":
        return expit(x)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"Unknown transform: '{name}'")


def derivative(transform: Transform, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    name = transform.name
    if name == "identity":
        return np.ones_like(x)
    if name == "negate":
        return -np.ones_like(x)
    if name == "exp":
        return np.exp(x)
    if name == "exp-negate":
        return -np.exp(-x)
    if name == "exp-scaled":
        scale = transform.params[0]
        return scale * np.exp(scale * x)
    if name == "reciprocal":
        return -1.0 / (x * x)
    if name == "affine":
        return np.full_like(x, transform.params[0])
    if name == "inverse-logit":
        p = expit(x)
        return p * (1.0 - p)
    if name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    raise ValueError(f"Unknown transform: '{name}'")


def check_monotone(transform: Transform, support: np.ndarray) -> int:
    """Return +1 or -1 for the direction of the transform on the support."""
    if transform.name not in TRANSFORM_NAMES:
        raise ValueError(f"Unknown transform: '{transform.name}'")
    support = np.asarray(support, dtype=float)
    if transform.name == "reciprocal" and support[0] <= 0.0 <= support[-1]:
        raise ValueError("Reciprocal transform is not monotone on a support containing 0")
    slope = derivative(transform, support)
    if np.all(slope >= 0) and np.any(slope > 0):
        return 1
    if np.all(slope <= 0) and np.any(slope < 0):
        return -1
    raise ValueError(f"Transform '{transform.name}' is not strictly monotone on the support")


def compose_label(transform: Transform) -> str:
    if not transform.params:
        return transform.name
    return f"{transform.name}({', '.join(f'{p:g}' for p in transform.params)})"
