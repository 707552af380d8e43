"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_grouped(values, groups) -> tuple[np.ndarray, np.ndarray]:
    """Validate a grouped sample: parallel values and binary group labels.

    Returns float values and boolean group labels (True = protected).
    Both groups must be non-empty.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    groups = np.asarray(groups).ravel()
    if values.shape != groups.shape:
        raise ValueError(
            f"values and groups must have the same length, got {values.shape[0]} and {groups.shape[0]}"
        )
    if not np.isin(groups, (0, 1, False, True)).all():
        raise ValueError("group labels must be binary (0/1)")
    groups = groups.astype(bool)
    if not groups.any():
        raise ValueError("protected group is empty")
    if groups.all():
        raise ValueError("unprotected group is empty")
    return values, groups


def check_Xy(X, y=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Coerce a feature matrix (and optional target) to float arrays."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be a 2-d matrix, got shape {X.shape}")
    if y is None:
        return X, None
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X and y disagree on sample count: {X.shape[0]} vs {y.shape[0]}")
    return X, y


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.isfinite(np.asarray(a, dtype=np.float64)).all():
            raise ValueError(f"{name} contains non-finite values")
