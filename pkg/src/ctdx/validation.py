"""Input validation helpers.

All array-accepting functions in the package funnel their inputs through
these checks so error messages are uniform and the accepted formats are
documented in one place.
"""

from __future__ import annotations

import numpy as np

#: Tolerance on the sum of a probability vector.
PROB_ATOL = 1e-6


def as_image(arr, name: str = "image") -> np.ndarray:
    """Coerce to a 2D float64 array with intensities in [0, 1]."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.size == 0:
        raise ValueError(f"{name} must be a non-empty 2D array, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    if out.min() < 0.0 or out.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return out


def as_volume_array(arr, name: str = "volume") -> np.ndarray:
    """Coerce to a (n_slices, height, width) float64 stack in [0, 1]."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 3 or out.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty 3D array, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    if out.min() < 0.0 or out.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return out


def as_prob_vector(vec, n_classes: int | None = None, name: str = "probs") -> np.ndarray:
    """Coerce to a 1D probability vector (non-negative, sums to 1 +- 1e-6)."""
    out = np.asarray(vec, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"{name} must be 1D, got shape {out.shape}")
    if n_classes is not None and out.shape[0] != n_classes:
        raise ValueError(f"{name} must have {n_classes} entries, got {out.shape[0]}")
    if not np.all(np.isfinite(out)) or out.min() < 0.0:
        raise ValueError(f"{name} entries must be finite and non-negative")
    if abs(out.sum() - 1.0) > PROB_ATOL:
        raise ValueError(f"{name} must sum to 1 within {PROB_ATOL}, got {out.sum()!r}")
    return out


def as_prob_matrix(mat, n_classes: int = 3, name: str = "slice_probs") -> np.ndarray:
    """Coerce to a (n_rows, n_classes) matrix whose rows are distributions."""
    out = np.asarray(mat, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] == 0 or out.shape[1] != n_classes:
        raise ValueError(
            f"{name} must be a non-empty (n, {n_classes}) array, got shape {out.shape}"
        )
    if not np.all(np.isfinite(out)) or out.min() < 0.0:
        raise ValueError(f"{name} entries must be finite and non-negative")
    sums = out.sum(axis=1)
    bad = np.nonzero(np.abs(sums - 1.0) > PROB_ATOL)[0]
    if bad.size:
        raise ValueError(
            f"{name} row {bad[0]} sums to {sums[bad[0]]!r}, not 1 within {PROB_ATOL}"
        )
    return out


def check_probability(x: float, name: str = "value") -> float:
    x = float(x)
    if not np.isfinite(x) or x < 0.0 or x > 1.0:
        raise ValueError(f"{name} must be a probability in [0, 1], got {x!r}")
    return x


def check_fraction(x: float, name: str = "fraction") -> float:
    """A fraction in the half-open interval (0, 1]."""
    x = float(x)
    if not np.isfinite(x) or x <= 0.0 or x > 1.0:
        raise ValueError(f"{name} must lie in (0, 1], got {x!r}")
    return x
