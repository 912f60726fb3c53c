"""Small input-validation helpers shared by the estimators and environments."""

from __future__ import annotations

import numpy as np


def check_array(x, name: str, ndim: int | None = None,
                last_dim: int | None = None) -> np.ndarray:
    """Coerce to a float64 array and validate rank / trailing width / finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim} dimensions, got {arr.ndim}")
    if last_dim is not None and (arr.ndim == 0 or arr.shape[-1] != last_dim):
        raise ValueError(f"{name}: expected trailing dimension {last_dim}, "
                         f"got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


def check_batch_2d(x, name: str, width: int) -> np.ndarray:
    """Accept a single row or a batch; always return shape (n, width)."""
    arr = check_array(x, name)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{name}: expected shape (n, {width}), got {arr.shape}")
    return arr


def check_probability_rows(mat, name: str, atol: float = 1e-12) -> np.ndarray:
    arr = check_array(mat, name, ndim=2)
    if np.any(arr < -atol):
        raise ValueError(f"{name}: negative probabilities")
    sums = arr.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ValueError(f"{name}: rows must sum to 1 (got sums {sums})")
    return arr


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first")
