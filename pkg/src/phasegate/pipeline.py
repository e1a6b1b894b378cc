"""End-to-end streaming pipeline.

Per frame: baseline linear head, memory-pathway refinement, prototype
retrieval, confidence-gated blending, final classification, then a push
of the frame into the memory bank so only strictly past frames are ever
consulted. Two interchangeable engines run the loop: a compiled kernel
and a vectorized Python fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend as _backend
from .errors import ContractViolation
from .gating import ClassifierHead, GateParams, classify, gates, integrate
from .memory import FusionLayer, MemoryBank, MemoryConfig, refine, reliability_scores, select_and_weight
from .numerics import ZERO_NORM_EPS, as_vector, sigmoid, softmax
from .prototypes import PrototypeBankSet, PrototypeConfig, policy_decide, policy_state, retrieval_plan

GATE_LEARNED = 0
GATE_FORCE0 = 1
GATE_FORCE1 = 2

_GATE_NAMES = {"learned": GATE_LEARNED, "off": GATE_FORCE0, "on": GATE_FORCE1}


def gate_mode(name: str) -> int:
    try:
        return _GATE_NAMES[name]
    except KeyError:
        raise ContractViolation(f"unknown gate mode {name!r}") from None


@dataclass
class PipelineParams:
    """Everything learnable plus the pathway configs, dims tied together."""

    head: ClassifierHead
    fusion: FusionLayer
    gate: GateParams
    memory: MemoryConfig
    proto: PrototypeConfig

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def feature_dim(self) -> int:
        return self.head.feature_dim

    def validate(self) -> "PipelineParams":
        if self.fusion.dim != self.head.feature_dim:
            raise ContractViolation("fusion layer dim must match classifier feature dim")
        self.gate.validate()
        self.memory.validate()
        self.proto.validate()
        return self

    @classmethod
    def identity_start(
        cls,
        head: ClassifierHead,
        memory: MemoryConfig | None = None,
        proto: PrototypeConfig | None = None,
        gate: GateParams | None = None,
    ) -> "PipelineParams":
        return cls(
            head=head,
            fusion=FusionLayer.identity(head.feature_dim),
            gate=gate or GateParams(),
            memory=memory or MemoryConfig(),
            proto=proto or PrototypeConfig(),
        ).validate()

    def copy(self) -> "PipelineParams":
        return PipelineParams(
            self.head.copy(), self.fusion.copy(), self.gate.copy(), self.memory, self.proto
        )


@dataclass
class SequenceResult:
    """Per-frame diagnostics for one sequence."""

    base_dist: np.ndarray   # (T, C)
    final_dist: np.ndarray  # (T, C)
    g_m: np.ndarray         # (T,)
    g_u: np.ndarray         # (T,)
    mem_count: np.ndarray   # (T,) memories passing the reliability filter
    proto_ids: np.ndarray   # (T, k) flat prototype ids, -1 padded
    proto_n: np.ndarray     # (T,) retrieved count

    @property
    def pred_base(self) -> np.ndarray:
        return self.base_dist.argmax(axis=1)

    @property
    def pred_final(self) -> np.ndarray:
        return self.final_dist.argmax(axis=1)

    def __len__(self) -> int:
        return self.base_dist.shape[0]


@dataclass
class SequencePlan:
    """Forward-pass quantities frozen for the straight-through backward pass.

    Selections, blend weights, the confidence argmax, and the smoothness
    targets are constants of the recorded pass; only the classifier head,
    the fusion layer, and the gate slopes stay differentiable.
    """

    features: np.ndarray      # (T, D) inputs
    labels: np.ndarray | None
    conf_idx: np.ndarray      # (T,) argmax of the baseline distribution
    has_ctx: np.ndarray       # (T,) uint8, 1 when memories were fused
    ctx: np.ndarray           # (T, D) weighted memory context (zero rows when unused)
    f_u: np.ndarray           # (T, D) prototype-refined feature, parameter-free
    frozen_final: np.ndarray  # (T, C) forward-pass final distributions (KL targets)
    mode_m: int
    mode_u: int


@dataclass
class FrameRecord:
    base_dist: np.ndarray
    final_dist: np.ndarray
    g_m: float
    g_u: float
    mem_count: int
    proto_ids: np.ndarray
    f_m: np.ndarray
    f_u: np.ndarray
    f_final: np.ndarray


def _gate_value(mode: int, a: float, tau: float, c_t: float) -> float:
    if mode == GATE_FORCE0:
        return 0.0
    if mode == GATE_FORCE1:
        return 1.0
    return sigmoid(a * (tau - c_t))


class SequenceSession:
    """Incremental frame-by-frame interface over one sequence.

    Composes the public module operations directly, so it doubles as the
    readable reference for what the bulk engines compute. Prototype banks
    are read-only here; insertion happens only in the training loop.
    """

    def __init__(
        self,
        params: PipelineParams,
        *,
        bank: MemoryBank | None = None,
        banks: PrototypeBankSet | None = None,
        mode_m: int = GATE_LEARNED,
        mode_u: int = GATE_LEARNED,
    ):
        params.validate()
        self.params = params
        D, C = params.feature_dim, params.num_classes
        self.bank = bank if bank is not None else MemoryBank(params.memory.capacity, D, C)
        self.banks = banks if banks is not None else PrototypeBankSet(C, params.proto.capacity, D)
        if self.banks.feature_dim != D or self.banks.num_classes != C:
            raise ContractViolation("prototype bank layout does not match params")
        self.mode_m = mode_m
        self.mode_u = mode_u
        self._last_t: int | None = None

    def forward_frame(self, f_t, t: int) -> FrameRecord:
        if self._last_t is not None and t <= self._last_t:
            raise ContractViolation(f"frame timestep {t} not after previous {self._last_t}")
        self._last_t = t
        p = self.params
        f_t = as_vector(f_t)
        p_base = classify(f_t, p.head)
        selected = select_and_weight(self.bank, f_t, p_base, t, p.memory)
        f_m = refine(f_t, selected, p.fusion)
        feats, cls, _, steps, norms, flat = self.banks.flat_live()
        if feats.shape[0]:
            sel, w, _ = retrieval_plan(f_t, p_base, feats, cls, steps, norms, flat, p.proto.retrieval_k)
            f_u = f_t + w @ feats[sel]
            ids = flat[sel]
        else:
            f_u = f_t.copy()
            ids = np.zeros(0, dtype=np.int64)
        c_t = float(p_base.max())
        g_m = _gate_value(self.mode_m, p.gate.a_m, p.gate.tau_m, c_t)
        g_u = _gate_value(self.mode_u, p.gate.a_u, p.gate.tau_u, c_t)
        f_final = integrate(f_t, f_m, f_u, g_m, g_u)
        y = classify(f_final, p.head)
        self.bank.push(f_t, p_base, t)
        return FrameRecord(p_base, y, g_m, g_u, len(selected), ids, f_m, f_u, f_final)


def _run_arrays_py(
    W, Fw, Fb, a_m, a_u, tau_m, tau_u, mode_m, mode_u,
    theta, decay,
    k,
    X,
    mem_feats, mem_dists, mem_tsteps, mem_norms, mem_state,
    pro_feats, pro_uncs, pro_steps, pro_norms, pro_counts,
    insert_enabled, labels, stochastic, pol_w1, pol_b1, pol_w2, pol_b2, uniforms,
    insert_step,
    base_dist, final_dist, gm_arr, gu_arr, mem_cnt, proto_ids, proto_n,
    ctx_arr, has_ctx, fu_arr, conf_idx,
):
    """Python engine. Argument-for-argument mirror of the compiled kernel."""
    T, D = X.shape
    C = W.shape[0]
    K = mem_feats.shape[0]
    N = pro_feats.shape[1]
    flat_cache = None
    counts_seen = pro_counts.copy()
    for t in range(T):
        f = X[t]
        z = W @ f
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        base_dist[t] = p
        m = int(np.argmax(p))
        conf_idx[t] = m
        c_t = float(p[m])

        n_mem = int(mem_state[0])
        fm = f
        if n_mem > 0:
            order = (int(mem_state[1]) + np.arange(n_mem)) % K
            r = reliability_scores(
                mem_feats[order], mem_dists[order], mem_tsteps[order],
                mem_norms[order], f, p, t, decay,
            )
            mask = r > theta
            n_sel = int(mask.sum())
            mem_cnt[t] = n_sel
            if n_sel > 0:
                rs = r[mask]
                w = np.exp(rs - rs.max())
                w /= w.sum()
                ctx = w @ mem_feats[order][mask]
                ctx_arr[t] = ctx
                has_ctx[t] = 1
                fm = Fw @ np.concatenate([f, ctx]) + Fb

        total = int(pro_counts.sum())
        fu = f
        if total > 0:
            if flat_cache is None or not np.array_equal(counts_seen, pro_counts):
                c_idx = np.repeat(np.arange(C), pro_counts)
                s_idx = np.concatenate(
                    [np.arange(int(pro_counts[c])) for c in range(C)]
                ).astype(np.int64)
                flat_cache = (c_idx, s_idx, c_idx * N + s_idx)
                counts_seen = pro_counts.copy()
            c_idx, s_idx, flat = flat_cache
            sel, w_u, _ = retrieval_plan(
                f, p, pro_feats[c_idx, s_idx], c_idx, pro_steps[c_idx, s_idx],
                pro_norms[c_idx, s_idx], flat, k,
            )
            fu = f + w_u @ pro_feats[c_idx[sel], s_idx[sel]]
            proto_n[t] = len(sel)
            proto_ids[t, : len(sel)] = flat[sel]
        fu_arr[t] = fu

        g_m = _gate_value(mode_m, a_m, tau_m, c_t)
        g_u = _gate_value(mode_u, a_u, tau_u, c_t)
        gm_arr[t] = g_m
        gu_arr[t] = g_u
        F = f + g_m * fm + g_u * fu
        zf = W @ F
        zf = zf - zf.max()
        q = np.exp(zf)
        q /= q.sum()
        final_dist[t] = q

        # store the frame after predicting so the bank holds only the past
        if int(mem_state[0]) < K:
            slot = (int(mem_state[1]) + int(mem_state[0])) % K
            mem_state[0] += 1
        else:
            slot = int(mem_state[1])
            mem_state[1] = (slot + 1) % K
        mem_feats[slot] = f
        mem_dists[slot] = p
        mem_tsteps[slot] = t
        mem_norms[slot] = np.sqrt(f @ f)

        if insert_enabled:
            c_gt = int(labels[t])
            u = 1.0 - c_t
            occ = pro_counts[c_gt] / N
            if stochastic:
                pmask = p > 0.0
                ent = float(-(p[pmask] * np.log(p[pmask])).sum())
                if C >= 2:
                    second = np.partition(p, C - 2)[C - 2]
                    margin = float(c_t - second)
                else:
                    margin = 1.0
                s_vec = np.array([u, ent, margin, occ])
                h = np.tanh(pol_w1 @ s_vec + pol_b1)
                pi = sigmoid(float(pol_w2 @ h) + pol_b2)
                add = uniforms[t] < pi
            else:
                add = occ < 1.0 or u > 0.0
            if add:
                n_c = int(pro_counts[c_gt])
                if n_c < N:
                    slot = n_c
                    pro_counts[c_gt] = n_c + 1
                    store = True
                else:
                    slot = 0
                    for j in range(1, n_c):
                        if pro_uncs[c_gt, j] < pro_uncs[c_gt, slot] or (
                            pro_uncs[c_gt, j] == pro_uncs[c_gt, slot]
                            and pro_steps[c_gt, j] < pro_steps[c_gt, slot]
                        ):
                            slot = j
                    store = u > pro_uncs[c_gt, slot]
                if store:
                    pro_feats[c_gt, slot] = f
                    pro_uncs[c_gt, slot] = u
                    pro_steps[c_gt, slot] = insert_step
                    pro_norms[c_gt, slot] = np.sqrt(f @ f)
                insert_step += 1
    return insert_step


def run_sequence(
    params: PipelineParams,
    X,
    *,
    bank: MemoryBank | None = None,
    banks: PrototypeBankSet | None = None,
    labels=None,
    insert_enabled: bool = False,
    policy_uniforms=None,
    insert_step: int = 0,
    mode_m: int = GATE_LEARNED,
    mode_u: int = GATE_LEARNED,
    backend: str | None = None,
):
    """Run one full sequence through the pipeline.

    Returns (SequenceResult, SequencePlan, next insert_step). The memory
    bank defaults to a fresh one (sequences do not share memory). When
    insert_enabled, frames are proposed to the ground-truth class's
    prototype bank after prediction; `banks` is then mutated in place.
    """
    params.validate()
    D, C = params.feature_dim, params.num_classes
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != D:
        raise ContractViolation(f"feature block must be (T, {D}), got {X.shape}")
    T = X.shape[0]
    if bank is None:
        bank = MemoryBank(params.memory.capacity, D, C)
    if bank.feature_dim != D or bank.num_phases != C:
        raise ContractViolation("memory bank layout does not match params")
    if banks is None:
        banks = PrototypeBankSet(C, params.proto.capacity, D)
    if banks.feature_dim != D or banks.num_classes != C:
        raise ContractViolation("prototype bank layout does not match params")
    stochastic = params.proto.policy_mode == "stochastic"
    if insert_enabled:
        if labels is None:
            raise ContractViolation("insertion needs ground-truth labels")
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if labels.shape != (T,):
            raise ContractViolation("labels must be one per frame")
        if labels.size and (labels.min() < 0 or labels.max() >= C):
            raise ContractViolation("labels out of range")
        if stochastic:
            if params.proto.policy_net is None:
                raise ContractViolation("stochastic policy mode requires a policy net")
            if policy_uniforms is None:
                raise ContractViolation("stochastic insertion needs per-frame uniforms")
            policy_uniforms = np.ascontiguousarray(policy_uniforms, dtype=np.float64)
            if policy_uniforms.shape != (T,):
                raise ContractViolation("need one uniform draw per frame")
    lab_arr = labels if labels is not None else np.zeros(T, dtype=np.int64)
    uni_arr = (
        policy_uniforms
        if (insert_enabled and stochastic)
        else np.zeros(T, dtype=np.float64)
    )
    net = params.proto.policy_net
    if net is not None:
        pol_w1, pol_b1, pol_w2, pol_b2 = net.w1, net.b1, net.w2, net.b2
    else:
        pol_w1 = np.zeros((8, 4))
        pol_b1 = np.zeros(8)
        pol_w2 = np.zeros(8)
        pol_b2 = 0.0
    k = params.proto.retrieval_k

    base_dist = np.zeros((T, C))
    final_dist = np.zeros((T, C))
    gm_arr = np.zeros(T)
    gu_arr = np.zeros(T)
    mem_cnt = np.zeros(T, dtype=np.int64)
    proto_ids = np.full((T, k), -1, dtype=np.int64)
    proto_n = np.zeros(T, dtype=np.int64)
    ctx_arr = np.zeros((T, D))
    has_ctx = np.zeros(T, dtype=np.uint8)
    fu_arr = np.zeros((T, D))
    conf_idx = np.zeros(T, dtype=np.int64)

    args = (
        params.head.weight, params.fusion.weight, params.fusion.bias,
        float(params.gate.a_m), float(params.gate.a_u),
        float(params.gate.tau_m), float(params.gate.tau_u),
        int(mode_m), int(mode_u),
        float(params.memory.threshold), float(params.memory.decay),
        int(k),
        X,
        bank.feats, bank.dists, bank.tsteps, bank.norms, bank.state,
        banks.feats, banks.uncs, banks.steps, banks.norms, banks.counts,
        1 if insert_enabled else 0, lab_arr,
        1 if stochastic else 0, pol_w1, pol_b1, pol_w2, float(pol_b2), uni_arr,
        int(insert_step),
        base_dist, final_dist, gm_arr, gu_arr, mem_cnt, proto_ids, proto_n,
        ctx_arr, has_ctx, fu_arr, conf_idx,
    )
    resolved = _backend.resolve(backend)
    if resolved == "compiled":
        next_step = _backend.kernel().run_sequence_kernel(*args)
    else:
        next_step = _run_arrays_py(*args)

    result = SequenceResult(base_dist, final_dist, gm_arr, gu_arr, mem_cnt, proto_ids, proto_n)
    plan = SequencePlan(
        features=X,
        labels=labels if insert_enabled or labels is not None else None,
        conf_idx=conf_idx,
        has_ctx=has_ctx,
        ctx=ctx_arr,
        f_u=fu_arr,
        frozen_final=final_dist,
        mode_m=int(mode_m),
        mode_u=int(mode_u),
    )
    return result, plan, int(next_step)
