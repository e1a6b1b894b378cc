"""Sliding-window feature memory with reliability-filtered propagation.

A bounded FIFO bank keeps the most recent frame features together with
their baseline phase distributions. Each stored entry is scored against
the current frame on three criteria (feature similarity, class
consistency, temporal proximity); entries above a threshold are fused
into a temporally stabilized feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numerics import ZERO_NORM_EPS, as_vector, cosine


@dataclass(frozen=True)
class MemoryConfig:
    """Memory-pathway settings.

    capacity: bank window size (frames).
    threshold: reliability cutoff; scores are in (-1, 3].
    decay: temporal decay constant, in frames.
    """

    capacity: int = 60
    threshold: float = 0.75
    decay: float = 10.0

    def validate(self) -> "MemoryConfig":
        if self.capacity < 1:
            raise ContractViolation("memory capacity must be >= 1")
        if not (-1.0 < self.threshold <= 3.0):
            raise ContractViolation("reliability threshold must lie in (-1, 3]")
        if not (self.decay > 0.0 and math.isfinite(self.decay)):
            raise ContractViolation("temporal decay must be positive and finite")
        return self


@dataclass
class MemoryEntry:
    """One remembered frame: feature, baseline distribution, timestep."""

    feature: np.ndarray
    dist: np.ndarray
    timestep: int


class FusionLayer:
    """Linear map from concat(current, memory context) back to feature space.

    Initialized to [I | 0] with zero bias so the memory pathway starts as
    an exact identity on the current feature.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.ascontiguousarray(weight, dtype=np.float64)
        bias = np.ascontiguousarray(bias, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] * 2 != weight.shape[1]:
            raise ContractViolation(f"fusion weight must be (D, 2D), got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ContractViolation("fusion bias length must match feature dim")
        if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
            raise ContractViolation("fusion parameters must be finite")
        self.weight = weight
        self.bias = bias

    @classmethod
    def identity(cls, dim: int) -> "FusionLayer":
        w = np.zeros((dim, 2 * dim))
        w[:, :dim] = np.eye(dim)
        return cls(w, np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "FusionLayer":
        return FusionLayer(self.weight.copy(), self.bias.copy())


class MemoryBank:
    """Fixed-capacity FIFO of (feature, distribution, timestep) entries.

    Backed by preallocated ring-buffer arrays so the compiled kernel can
    operate on it directly. Single-writer: one sequence session owns a
    bank; snapshots may be shared read-only.
    """

    def __init__(self, capacity: int, feature_dim: int, num_phases: int):
        if capacity < 1:
            raise ContractViolation("memory capacity must be >= 1")
        self.capacity = int(capacity)
        self.feature_dim = int(feature_dim)
        self.num_phases = int(num_phases)
        self.feats = np.zeros((capacity, feature_dim))
        self.dists = np.zeros((capacity, num_phases))
        self.tsteps = np.zeros(capacity, dtype=np.int64)
        self.norms = np.zeros(capacity)
        # state[0] = entry count, state[1] = ring index of the oldest entry
        self.state = np.zeros(2, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.state[0])

    @property
    def head(self) -> int:
        return int(self.state[1])

    def newest_timestep(self) -> int | None:
        n = len(self)
        if n == 0:
            return None
        slot = (self.head + n - 1) % self.capacity
        return int(self.tsteps[slot])

    def push(self, feature, dist, timestep: int) -> None:
        """Append an entry, evicting the oldest once capacity is reached."""
        feature = as_vector(feature)
        dist = as_vector(dist)
        if feature.shape[0] != self.feature_dim or dist.shape[0] != self.num_phases:
            raise ContractViolation("entry shape does not match bank layout")
        newest = self.newest_timestep()
        if newest is not None and timestep <= newest:
            raise ContractViolation(
                f"timestep {timestep} is not after newest stored timestep {newest}"
            )
        n, head = len(self), self.head
        if n < self.capacity:
            slot = (head + n) % self.capacity
            self.state[0] = n + 1
        else:
            slot = head
            self.state[1] = (head + 1) % self.capacity
        self.feats[slot] = feature
        self.dists[slot] = dist
        self.tsteps[slot] = timestep
        self.norms[slot] = math.sqrt(float(feature @ feature))

    def ordered_views(self):
        """Copies of (features, dists, timesteps, norms), oldest to newest."""
        n = len(self)
        idx = (self.head + np.arange(n)) % self.capacity
        return self.feats[idx], self.dists[idx], self.tsteps[idx], self.norms[idx]

    def entries(self) -> list[MemoryEntry]:
        feats, dists, tsteps, _ = self.ordered_views()
        return [
            MemoryEntry(feats[i].copy(), dists[i].copy(), int(tsteps[i]))
            for i in range(len(self))
        ]

    def clear(self) -> None:
        self.state[:] = 0


def push(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    """FIFO insert; mutates and returns the bank."""
    bank.push(entry.feature, entry.dist, entry.timestep)
    return bank


def reliability_scores(
    feats: np.ndarray,
    dists: np.ndarray,
    tsteps: np.ndarray,
    norms: np.ndarray,
    f_t: np.ndarray,
    p_t: np.ndarray,
    t: int,
    decay: float,
) -> np.ndarray:
    """Vectorized reliability of each memory row against the current frame.

    score = cos(f_t, f_i) + p_t . p_i + exp(-(t - t_i)/decay), one row each.
    """
    f_norm = math.sqrt(float(f_t @ f_t))
    sims = feats @ f_t
    denom = norms * f_norm
    ok = denom >= ZERO_NORM_EPS * ZERO_NORM_EPS
    # match cosine(): either near-zero norm yields similarity 0
    ok &= (norms >= ZERO_NORM_EPS) & (f_norm >= ZERO_NORM_EPS)
    sims = np.where(ok, sims / np.where(denom == 0.0, 1.0, denom), 0.0)
    np.clip(sims, -1.0, 1.0, out=sims)
    cls = dists @ p_t
    temp = np.exp(-np.abs(t - tsteps) / decay)
    return sims + cls + temp


def reliability(f_t, p_t, entry: MemoryEntry, t: int, cfg: MemoryConfig) -> float:
    """Reliability of one stored entry for the current frame at time t."""
    if t <= entry.timestep:
        raise ContractViolation(f"current t={t} must exceed entry timestep {entry.timestep}")
    s_sim = cosine(f_t, entry.feature)
    s_cls = float(as_vector(p_t) @ as_vector(entry.dist))
    s_temp = math.exp(-abs(t - entry.timestep) / cfg.decay)
    return s_sim + s_cls + s_temp


def select_and_weight(
    bank: MemoryBank, f_t, p_t, t: int, cfg: MemoryConfig
) -> list[tuple[float, np.ndarray]]:
    """Entries scoring above the threshold, softmax-weighted.

    Returns (weight, feature) pairs; the empty list is a valid outcome.
    Features are copies, so later bank pushes cannot alias them.
    """
    f_t = as_vector(f_t)
    p_t = as_vector(p_t)
    feats, dists, tsteps, norms = bank.ordered_views()
    if len(bank) == 0:
        return []
    r = reliability_scores(feats, dists, tsteps, norms, f_t, p_t, t, cfg.decay)
    mask = r > cfg.threshold
    if not mask.any():
        return []
    rs = r[mask]
    w = np.exp(rs - rs.max())
    w /= w.sum()
    sel = feats[mask]
    return [(float(w[i]), sel[i].copy()) for i in range(len(w))]


def refine(f_t, selected: list[tuple[float, np.ndarray]], fusion: FusionLayer) -> np.ndarray:
    """Fuse the current feature with the weighted memory context.

    With nothing selected the current feature passes through unchanged;
    propagating nothing must not perturb the prediction.
    """
    f_t = as_vector(f_t)
    if f_t.shape[0] != fusion.dim:
        raise ContractViolation("feature dim does not match fusion layer")
    if not selected:
        return f_t.copy()
    ctx = np.zeros_like(f_t)
    for w, feat in selected:
        feat = as_vector(feat)
        if feat.shape[0] != f_t.shape[0]:
            raise ContractViolation("selected feature dim mismatch")
        ctx += w * feat
    return fusion.weight @ np.concatenate([f_t, ctx]) + fusion.bias
