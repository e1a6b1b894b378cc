"""Confidence-driven gating of the two refinement pathways.

Both gates open as baseline confidence falls: an uncertain frame leans on
memory and prototypes, a confident one passes through nearly untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numerics import as_vector, sigmoid, softmax


@dataclass
class GateParams:
    """Gate steepness (learnable) and confidence thresholds (fixed)."""

    a_m: float = 4.0
    a_u: float = 4.0
    tau_m: float = 0.7
    tau_u: float = 0.7

    def validate(self) -> "GateParams":
        vals = (self.a_m, self.a_u, self.tau_m, self.tau_u)
        if not all(np.isfinite(v) for v in vals):
            raise ContractViolation("gate parameters must be finite")
        if not (0.0 < self.tau_m < 1.0 and 0.0 < self.tau_u < 1.0):
            raise ContractViolation("gate thresholds must lie in (0, 1)")
        return self

    def copy(self) -> "GateParams":
        return GateParams(self.a_m, self.a_u, self.tau_m, self.tau_u)


@dataclass
class ClassifierHead:
    """Bias-free linear classifier over features; rows are phase logits."""

    weight: np.ndarray  # (C, D)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ContractViolation("classifier weight must be a matrix")
        if not np.isfinite(self.weight).all():
            raise ContractViolation("classifier weight must be finite")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weight.copy())


def gates(c_t: float, params: GateParams) -> tuple[float, float]:
    """Openness of the memory and prototype gates at confidence c_t."""
    if not (np.isfinite(c_t) and 0.0 <= c_t <= 1.0):
        raise ContractViolation(f"confidence {c_t} outside [0, 1]")
    g_m = sigmoid(params.a_m * (params.tau_m - c_t))
    g_u = sigmoid(params.a_u * (params.tau_u - c_t))
    return g_m, g_u


def integrate(f_t, f_m, f_u, g_m: float, g_u: float) -> np.ndarray:
    """Add the gated pathway features onto the current frame feature."""
    f_t = as_vector(f_t)
    f_m = as_vector(f_m)
    f_u = as_vector(f_u)
    if not (f_t.shape == f_m.shape == f_u.shape):
        raise ContractViolation("pathway features must share the frame feature's dim")
    return f_t + g_m * f_m + g_u * f_u


def classify(f, head: ClassifierHead) -> np.ndarray:
    """Phase distribution for a feature under the linear head."""
    f = as_vector(f)
    if f.shape[0] != head.feature_dim:
        raise ContractViolation(
            f"feature dim {f.shape[0]} does not match head dim {head.feature_dim}"
        )
    return softmax(head.weight @ f)
