"""Deterministic float64 math primitives used by every other module.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation

# Norms below this are treated as zero when computing cosine similarity.
ZERO_NORM_EPS = 1e-12


def as_vector(values) -> np.ndarray:
    """Coerce input to a contiguous float64 1-D array."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolation(f"expected a 1-D vector, got shape {v.shape}")
    return v


def cosine(a, b) -> float:
    """Cosine similarity in [-1, 1]; 0 if either vector is (near-)zero.

    Near-zero inputs are legal (early prototype banks may hold tiny
    features), so a norm below ZERO_NORM_EPS yields the neutral value 0
    instead of an error.
    """
    a = as_vector(a)
    b = as_vector(b)
    if a.shape[0] != b.shape[0]:
        raise ContractViolation(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


def softmax(v) -> np.ndarray:
    """Shift-stabilized softmax. Output sums to 1 within 1e-9."""
    v = as_vector(v)
    if v.shape[0] == 0:
        raise ContractViolation("softmax of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def sigmoid(x: float) -> float:
    """Logistic function, stable for |x| up to ~700."""
    x = float(x)
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def entropy(p) -> float:
    """Shannon entropy in nats, with the 0*log(0) := 0 convention."""
    p = as_vector(p)
    mask = p > 0.0
    if not mask.any():
        return 0.0
    q = p[mask]
    return float(-(q * np.log(q)).sum())


def check_distribution(p, num_classes: int | None = None, tol: float = 1e-9) -> np.ndarray:
    """Validate a probability vector: entries in [0,1], sum 1 within tol."""
    p = as_vector(p)
    if num_classes is not None and p.shape[0] != num_classes:
        raise ContractViolation(f"expected {num_classes} classes, got {p.shape[0]}")
    if p.shape[0] < 2:
        raise ContractViolation("a phase distribution needs at least 2 classes")
    if not np.isfinite(p).all():
        raise ContractViolation("distribution has non-finite entries")
    if (p < -tol).any() or (p > 1.0 + tol).any():
        raise ContractViolation("distribution entries outside [0, 1]")
    s = float(p.sum())
    if abs(s - 1.0) > tol:
        raise ContractViolation(f"distribution sums to {s}, not 1")
    return p
