"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.utils.validation import check_is_fitted  # noqa: F401  (re-exported)

from .degradations import to_unit
from .numerics import ContractError


def check_samples(X, name: str = "X", image: bool = False, min_samples: int = 1) -> np.ndarray:
    """Return ``X`` as an array of samples, rejecting empty or non-finite input.

    Vector data must be 2-D ``(n, d)``; image data ``(n, C, H, W)``.  Image
    data may be ``uint8`` and is then returned unchanged.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X)
    want = 4 if image else 2
    if X.ndim != want:
        kind = "(n, C, H, W)" if image else "(n, d)"
        raise ContractError(f"{name} must have shape {kind}, got {X.shape}")
    if X.shape[0] < min_samples:
        raise ContractError(f"{name} needs at least {min_samples} sample(s), got {X.shape[0]}")
    if X.dtype == np.uint8 and image:
        return X
    if not np.issubdtype(X.dtype, np.number):
        raise ContractError(f"{name} must be numeric, got dtype {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise ContractError(f"{name} contains NaN or infinite values")
    return X


def as_float_tensor(X) -> torch.Tensor:
    """``uint8`` images go to bin centres in [0, 1); anything else to float32."""
    if isinstance(X, np.ndarray) and X.dtype == np.uint8:
        return to_unit(X)
    return torch.as_tensor(np.asarray(X), dtype=torch.float32)


def check_feature_shape(X, expected: tuple, name: str = "X"):
    if tuple(X.shape[1:]) != tuple(expected):
        raise ContractError(f"{name} has per-sample shape {tuple(X.shape[1:])}, expected {tuple(expected)}")
