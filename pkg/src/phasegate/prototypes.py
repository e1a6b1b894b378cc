"""Class-wise banks of hard (high-uncertainty) samples and their retrieval.

During training, frames the classifier is unsure about are proposed for
insertion into a bounded per-class bank; a full bank only admits a new
sample by displacing its least uncertain entry. At inference the banks
are frozen and queried: the k most relevant prototypes, scored by class
probability times feature similarity, are blended into the current
feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .numerics import ZERO_NORM_EPS, as_vector, entropy, sigmoid


@dataclass
class PolicyNet:
    """Tiny perceptron mapping a 4-value policy state to an add-probability.

    One hidden tanh layer of width 8, sigmoid output. Weights stay fixed
    during training; they are either seeded noise or loaded values.
    """

    w1: np.ndarray  # (8, 4)
    b1: np.ndarray  # (8,)
    w2: np.ndarray  # (8,)
    b2: float

    def __post_init__(self):
        self.w1 = np.ascontiguousarray(self.w1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(self.b1, dtype=np.float64)
        self.w2 = np.ascontiguousarray(self.w2, dtype=np.float64)
        self.b2 = float(self.b2)
        if self.w1.shape != (8, 4) or self.b1.shape != (8,) or self.w2.shape != (8,):
            raise ContractViolation("policy net has layer shapes (8,4), (8,), (8,)")

    @classmethod
    def seeded(cls, seed: int) -> "PolicyNet":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x706F6C])))
        return cls(
            w1=rng.normal(0.0, 0.5, (8, 4)),
            b1=np.zeros(8),
            w2=rng.normal(0.0, 0.5, 8),
            b2=0.0,
        )

    def probability(self, state: "PolicyState") -> float:
        h = np.tanh(self.w1 @ state.as_array() + self.b1)
        return sigmoid(float(self.w2 @ h) + self.b2)


@dataclass(frozen=True)
class PrototypeConfig:
    """Prototype-pathway settings: per-class capacity, retrieval depth, policy."""

    capacity: int = 64
    retrieval_k: int = 8
    policy_mode: str = "deterministic"
    policy_net: PolicyNet | None = field(default=None, compare=False)

    def validate(self) -> "PrototypeConfig":
        if self.capacity < 1:
            raise ContractViolation("prototype capacity must be >= 1")
        if self.retrieval_k < 1:
            raise ContractViolation("retrieval k must be >= 1")
        if self.policy_mode not in ("deterministic", "stochastic"):
            raise ContractViolation(f"unknown policy mode {self.policy_mode!r}")
        return self


@dataclass
class Prototype:
    feature: np.ndarray
    class_label: int
    uncertainty: float
    insert_step: int


@dataclass(frozen=True)
class PolicyState:
    """Snapshot the insertion policy conditions on."""

    uncertainty: float
    entropy: float
    margin: float
    occupancy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.uncertainty, self.entropy, self.margin, self.occupancy])


class PrototypeBankSet:
    """All per-class prototype banks, stored as flat preallocated arrays.

    Layout (C classes, N capacity, D feature dim):
      feats (C,N,D), uncs (C,N), steps (C,N) int64, counts (C,) int64,
      norms (C,N) cached feature norms.
    Slots [0, counts[c]) of bank c are live; slot order is append order
    with in-place replacement, so it carries no ranking meaning.
    """

    def __init__(self, num_classes: int, capacity: int, feature_dim: int):
        if num_classes < 1 or capacity < 1 or feature_dim < 1:
            raise ContractViolation("bank set dimensions must be positive")
        self.num_classes = int(num_classes)
        self.capacity = int(capacity)
        self.feature_dim = int(feature_dim)
        self.feats = np.zeros((num_classes, capacity, feature_dim))
        self.uncs = np.zeros((num_classes, capacity))
        self.steps = np.zeros((num_classes, capacity), dtype=np.int64)
        self.counts = np.zeros(num_classes, dtype=np.int64)
        self.norms = np.zeros((num_classes, capacity))

    def __len__(self) -> int:
        return int(self.counts.sum())

    def bank_size(self, c: int) -> int:
        return int(self.counts[c])

    def occupancy(self, c: int) -> float:
        return self.bank_size(c) / self.capacity

    def insert(self, c: int, feature, u: float, step: int) -> bool:
        """Append below capacity, else displace the weakest entry.

        The weakest entry is the one with the lowest uncertainty, oldest
        insert_step breaking ties; it is displaced only when the incoming
        uncertainty is strictly higher. Returns True when stored.
        """
        if not (0 <= c < self.num_classes):
            raise ContractViolation(f"class {c} out of range")
        if not (0.0 <= u <= 1.0):
            raise ContractViolation(f"uncertainty {u} outside [0, 1]")
        feature = as_vector(feature)
        if feature.shape[0] != self.feature_dim:
            raise ContractViolation("prototype feature dim mismatch")
        n = int(self.counts[c])
        if n < self.capacity:
            slot = n
            self.counts[c] = n + 1
        else:
            slot = 0
            for j in range(1, n):
                if (self.uncs[c, j], self.steps[c, j]) < (self.uncs[c, slot], self.steps[c, slot]):
                    slot = j
            if not (u > self.uncs[c, slot]):
                return False
        self.feats[c, slot] = feature
        self.uncs[c, slot] = u
        self.steps[c, slot] = step
        self.norms[c, slot] = math.sqrt(float(feature @ feature))
        return True

    def prototypes(self, c: int | None = None) -> list[Prototype]:
        classes = range(self.num_classes) if c is None else [c]
        out = []
        for ci in classes:
            for j in range(int(self.counts[ci])):
                out.append(
                    Prototype(
                        self.feats[ci, j].copy(),
                        ci,
                        float(self.uncs[ci, j]),
                        int(self.steps[ci, j]),
                    )
                )
        return out

    def flat_live(self):
        """Live rows across all classes as flat arrays.

        Returns (feats, class_labels, uncs, steps, norms, flat_ids) where
        flat id = class * capacity + slot, the last-resort selection
        tiebreak.
        """
        parts_idx = [
            c * self.capacity + np.arange(int(self.counts[c]))
            for c in range(self.num_classes)
        ]
        flat = np.concatenate(parts_idx) if parts_idx else np.zeros(0, dtype=np.int64)
        flat = flat.astype(np.int64)
        c_idx = flat // self.capacity
        s_idx = flat % self.capacity
        return (
            self.feats[c_idx, s_idx],
            c_idx,
            self.uncs[c_idx, s_idx],
            self.steps[c_idx, s_idx],
            self.norms[c_idx, s_idx],
            flat,
        )

    def clear(self) -> None:
        self.counts[:] = 0

    def copy(self) -> "PrototypeBankSet":
        out = PrototypeBankSet(self.num_classes, self.capacity, self.feature_dim)
        out.feats[...] = self.feats
        out.uncs[...] = self.uncs
        out.steps[...] = self.steps
        out.counts[...] = self.counts
        out.norms[...] = self.norms
        return out

    def to_lists(self):
        """Checkpoint form: per class, a list of (feature, uncertainty, step)."""
        return [
            [
                [self.feats[c, j].tolist(), float(self.uncs[c, j]), int(self.steps[c, j])]
                for j in range(int(self.counts[c]))
            ]
            for c in range(self.num_classes)
        ]

    @classmethod
    def from_lists(cls, data, capacity: int, feature_dim: int) -> "PrototypeBankSet":
        out = cls(len(data), capacity, feature_dim)
        for c, bank in enumerate(data):
            if len(bank) > capacity:
                raise ContractViolation(f"bank {c} exceeds capacity {capacity}")
            for j, (feat, u, step) in enumerate(bank):
                feat = as_vector(np.asarray(feat, dtype=np.float64))
                if feat.shape[0] != feature_dim:
                    raise ContractViolation("stored prototype feature dim mismatch")
                out.feats[c, j] = feat
                out.uncs[c, j] = float(u)
                out.steps[c, j] = int(step)
                out.norms[c, j] = math.sqrt(float(feat @ feat))
            out.counts[c] = len(bank)
        return out


def uncertainty(p) -> float:
    """1 minus the top probability; 0 at full confidence."""
    p = as_vector(p)
    if p.shape[0] == 0:
        raise ContractViolation("empty distribution")
    return float(1.0 - p.max())


def policy_state(p, bank_size: int, capacity: int) -> PolicyState:
    """Summarize the current prediction and bank fill for the add policy."""
    p = as_vector(p)
    if not (0 <= bank_size <= capacity):
        raise ContractViolation("bank size outside [0, capacity]")
    u = float(1.0 - p.max())
    if p.shape[0] >= 2:
        two = np.sort(p)[-2:]
        margin = float(two[1] - two[0])
    else:
        margin = 1.0
    return PolicyState(u, entropy(p), margin, bank_size / capacity)


def policy_decide(
    state: PolicyState,
    cfg: PrototypeConfig,
    rng: np.random.Generator | None = None,
    uniform: float | None = None,
) -> bool:
    """Whether to propose the current frame for insertion.

    Deterministic mode proposes unless the bank is full and the frame is
    fully confident. Stochastic mode samples from the perceptron's
    probability using `uniform` when supplied, otherwise one draw from
    `rng`; passing explicit uniforms keeps long runs replayable.
    """
    if cfg.policy_mode == "deterministic":
        return state.occupancy < 1.0 or state.uncertainty > 0.0
    net = cfg.policy_net
    if net is None:
        raise ContractViolation("stochastic policy mode requires a policy net")
    pi = net.probability(state)
    if uniform is None:
        if rng is None:
            raise ContractViolation("stochastic policy needs a uniform or an rng")
        uniform = float(rng.random())
    return uniform < pi


def retrieval_plan(
    f_t: np.ndarray,
    p_t: np.ndarray,
    feats: np.ndarray,
    class_labels: np.ndarray,
    steps: np.ndarray,
    norms: np.ndarray,
    flat_ids: np.ndarray,
    k: int,
):
    """Select up to k prototypes and their blend weights for one frame.

    Scores are class probability times cosine similarity. Ranking is by
    score, then raw cosine, then earlier insert_step, then flat id, all
    descending-score-first; weights are a softmax over the raw cosines of
    the selected rows. Returns (positions into the flat arrays, weights,
    cosines of all rows).
    """
    m = feats.shape[0]
    if m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    f_norm = math.sqrt(float(f_t @ f_t))
    sims = feats @ f_t
    denom = norms * f_norm
    ok = (norms >= ZERO_NORM_EPS) & (f_norm >= ZERO_NORM_EPS)
    sims = np.where(ok, sims / np.where(denom == 0.0, 1.0, denom), 0.0)
    np.clip(sims, -1.0, 1.0, out=sims)
    scores = p_t[class_labels] * sims
    order = np.lexsort((flat_ids, steps, -sims, -scores))
    sel = order[: min(k, m)]
    s_sims = sims[sel]
    w = np.exp(s_sims - s_sims.max())
    w /= w.sum()
    return sel.astype(np.int64), w, sims


def retrieve(f_t, p_t, banks: PrototypeBankSet, k: int) -> np.ndarray:
    """Blend the k best-matching stored prototypes into the current feature.

    Empty banks leave the feature unchanged.
    """
    f_t = as_vector(f_t)
    p_t = as_vector(p_t)
    if f_t.shape[0] != banks.feature_dim:
        raise ContractViolation("query feature dim mismatch")
    if p_t.shape[0] != banks.num_classes:
        raise ContractViolation("query distribution length mismatch")
    if k < 1:
        raise ContractViolation("retrieval k must be >= 1")
    feats, cls, _, steps, norms, flat = banks.flat_live()
    if feats.shape[0] == 0:
        return f_t.copy()
    sel, w, _ = retrieval_plan(f_t, p_t, feats, cls, steps, norms, flat, k)
    return f_t + w @ feats[sel]
