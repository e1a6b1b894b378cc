"""Losses, hand-derived gradients, and the training loop.

The objective per sequence is class-balanced cross-entropy on every
frame plus a temporal smoothness penalty: the KL divergence from each
frame's predecessor distribution (held constant) to the current one.

Backpropagation uses the straight-through convention recorded in
SequencePlan: memory selections and their softmax weights, retrieval
choices and weights, the confidence argmax, and the KL targets are
constants of the forward pass. Gradients reach the classifier head (via
both the final logits and the confidence term), the fusion layer, and
the gate slopes. Finite differences on the identical frozen-plan
objective verify the algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, TrainingDivergence
from .gating import ClassifierHead, GateParams
from .memory import FusionLayer, MemoryBank
from .numerics import as_vector, check_distribution, sigmoid
from .pipeline import (
    GATE_FORCE0,
    GATE_FORCE1,
    GATE_LEARNED,
    PipelineParams,
    SequencePlan,
    run_sequence,
)
from .prototypes import PrototypeBankSet

CE_EPS = 1e-12

_DOMAIN_INIT = 0x696E6974
_DOMAIN_POLICY = 0x706C6379
_DOMAIN_GRADCHECK = 0x67726463


def class_balanced_weights(label_arrays, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights, mean 1 over classes present in the data.

    Classes absent from the data get weight 1 (they contribute no loss
    terms, so the value only matters if the weights are reused on other
    data).
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_arrays:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractViolation("label out of range in weight computation")
        counts += np.bincount(labels, minlength=num_classes)
    w = np.ones(num_classes)
    present = counts > 0
    if present.any():
        w[present] = 1.0 / counts[present]
        w[present] *= present.sum() / w[present].sum()
    return w


def loss_ce(pred, label: int, class_weights) -> float:
    """Class-balanced cross-entropy of one frame."""
    pred = as_vector(pred)
    class_weights = as_vector(class_weights)
    if not (0 <= label < pred.shape[0]):
        raise ContractViolation(f"label {label} out of range")
    return float(-class_weights[label] * math.log(pred[label] + CE_EPS))


def loss_kl(p_prev, p_curr) -> float:
    """KL(prev || curr), prev treated as a constant target."""
    p_prev = as_vector(p_prev)
    p_curr = as_vector(p_curr)
    if p_prev.shape != p_curr.shape:
        raise ContractViolation("distributions must have equal length")
    mask = p_prev > 0.0
    pp = p_prev[mask]
    return float(np.sum(pp * (np.log(pp) - np.log(p_curr[mask] + CE_EPS))))


def _row_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _gate_vector(mode: int, a: float, tau: float, conf: np.ndarray) -> np.ndarray:
    if mode == GATE_FORCE0:
        return np.zeros_like(conf)
    if mode == GATE_FORCE1:
        return np.ones_like(conf)
    x = a * (tau - conf)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _plan_forward(params: PipelineParams, plan: SequencePlan):
    """Recompute the differentiable part of the pipeline from a frozen plan."""
    X = plan.features
    T = X.shape[0]
    W = params.head.weight
    Z = X @ W.T
    P = _row_softmax(Z)
    conf = P[np.arange(T), plan.conf_idx]
    g_m = _gate_vector(plan.mode_m, params.gate.a_m, params.gate.tau_m, conf)
    g_u = _gate_vector(plan.mode_u, params.gate.a_u, params.gate.tau_u, conf)
    D = X.shape[1]
    Fw, Fb = params.fusion.weight, params.fusion.bias
    fused = X @ Fw[:, :D].T + plan.ctx @ Fw[:, D:].T + Fb
    hc = plan.has_ctx.astype(bool)
    f_m = np.where(hc[:, None], fused, X)
    F = X + g_m[:, None] * f_m + g_u[:, None] * plan.f_u
    Q = _row_softmax(F @ W.T)
    return P, conf, g_m, g_u, f_m, F, Q


def sequence_loss(final_dist: np.ndarray, labels, class_weights) -> float:
    """Mean CE plus mean adjacent-frame KL for one sequence's outputs."""
    labels = np.asarray(labels, dtype=np.int64)
    T = final_dist.shape[0]
    if labels.shape != (T,):
        raise ContractViolation("one label per frame required")
    w = np.asarray(class_weights)[labels]
    ce = float(-(w * np.log(final_dist[np.arange(T), labels] + CE_EPS)).mean())
    if T < 2:
        return ce
    prev = final_dist[:-1]
    curr = final_dist[1:]
    mask = prev > 0.0
    terms = np.where(mask, prev * (np.log(np.where(mask, prev, 1.0)) - np.log(curr + CE_EPS)), 0.0)
    kl = float(terms.sum() / (T - 1))
    return ce + kl


def plan_loss(params: PipelineParams, plan: SequencePlan, labels, class_weights) -> float:
    """Frozen-plan objective as a function of the learnable parameters.

    The KL targets come from the recorded forward pass, not from the
    recomputed distributions, so this is exactly the function the
    analytic gradients differentiate.
    """
    labels = np.asarray(labels, dtype=np.int64)
    X = plan.features
    T = X.shape[0]
    _, _, _, _, _, _, Q = _plan_forward(params, plan)
    w = np.asarray(class_weights)[labels]
    ce = float(-(w * np.log(Q[np.arange(T), labels] + CE_EPS)).mean())
    if T < 2:
        return ce
    tgt = plan.frozen_final[:-1]
    mask = tgt > 0.0
    terms = np.where(mask, tgt * (np.log(np.where(mask, tgt, 1.0)) - np.log(Q[1:] + CE_EPS)), 0.0)
    return ce + float(terms.sum() / (T - 1))


@dataclass
class Gradients:
    d_head: np.ndarray
    d_fusion_w: np.ndarray
    d_fusion_b: np.ndarray
    d_a_m: float
    d_a_u: float

    def finite(self) -> bool:
        return bool(
            np.isfinite(self.d_head).all()
            and np.isfinite(self.d_fusion_w).all()
            and np.isfinite(self.d_fusion_b).all()
            and np.isfinite(self.d_a_m)
            and np.isfinite(self.d_a_u)
        )

    def accumulate(self, other: "Gradients", scale: float = 1.0) -> None:
        self.d_head += scale * other.d_head
        self.d_fusion_w += scale * other.d_fusion_w
        self.d_fusion_b += scale * other.d_fusion_b
        self.d_a_m += scale * other.d_a_m
        self.d_a_u += scale * other.d_a_u


def plan_backward(params: PipelineParams, plan: SequencePlan, labels, class_weights) -> Gradients:
    """Analytic gradient of plan_loss at the given parameters."""
    labels = np.asarray(labels, dtype=np.int64)
    X = plan.features
    T, D = X.shape
    C = params.num_classes
    W = params.head.weight
    P, conf, g_m, g_u, f_m, F, Q = _plan_forward(params, plan)
    ar = np.arange(T)

    # d loss / d final logits
    w = np.asarray(class_weights)[labels]
    q_y = Q[ar, labels]
    rho_y = q_y / (q_y + CE_EPS)
    onehot = np.zeros((T, C))
    onehot[ar, labels] = 1.0
    d_zeta = (w * rho_y)[:, None] * (Q - onehot) / T
    if T >= 2:
        tgt = plan.frozen_final[:-1]
        rho = Q[1:] / (Q[1:] + CE_EPS)
        inner = (tgt * rho).sum(axis=1, keepdims=True)
        d_zeta[1:] += (-tgt * rho + Q[1:] * inner) / (T - 1)

    d_head = d_zeta.T @ F
    delta_f = d_zeta @ W

    hc = plan.has_ctx.astype(bool)
    G = (g_m[:, None] * delta_f)[hc]
    d_fusion_w = np.zeros_like(params.fusion.weight)
    d_fusion_b = np.zeros(D)
    if G.shape[0]:
        d_fusion_w[:, :D] = G.T @ X[hc]
        d_fusion_w[:, D:] = G.T @ plan.ctx[hc]
        d_fusion_b = G.sum(axis=0)

    d_conf = np.zeros(T)
    d_a_m = 0.0
    d_a_u = 0.0
    if plan.mode_m == GATE_LEARNED:
        d_gm = (delta_f * f_m).sum(axis=1)
        s_prime = g_m * (1.0 - g_m)
        d_h = d_gm * s_prime
        d_a_m = float((d_h * (params.gate.tau_m - conf)).sum())
        d_conf -= d_h * params.gate.a_m
    if plan.mode_u == GATE_LEARNED:
        d_gu = (delta_f * plan.f_u).sum(axis=1)
        s_prime = g_u * (1.0 - g_u)
        d_h = d_gu * s_prime
        d_a_u = float((d_h * (params.gate.tau_u - conf)).sum())
        d_conf -= d_h * params.gate.a_u

    if d_conf.any():
        m_onehot = np.zeros((T, C))
        m_onehot[ar, plan.conf_idx] = 1.0
        d_z = (d_conf * conf)[:, None] * (m_onehot - P)
        d_head += d_z.T @ X

    return Gradients(d_head, d_fusion_w, d_fusion_b, d_a_m, d_a_u)


# parameter flattening, used by the finite-difference checker and the optimizer

def pack_params(params: PipelineParams) -> np.ndarray:
    return np.concatenate(
        [
            params.head.weight.ravel(),
            params.fusion.weight.ravel(),
            params.fusion.bias,
            [params.gate.a_m, params.gate.a_u],
        ]
    )


def unpack_params(vec: np.ndarray, template: PipelineParams) -> PipelineParams:
    D, C = template.feature_dim, template.num_classes
    n_w = C * D
    n_f = D * 2 * D
    head = ClassifierHead(vec[:n_w].reshape(C, D).copy())
    fusion = FusionLayer(
        vec[n_w : n_w + n_f].reshape(D, 2 * D).copy(),
        vec[n_w + n_f : n_w + n_f + D].copy(),
    )
    gate = GateParams(
        a_m=float(vec[n_w + n_f + D]),
        a_u=float(vec[n_w + n_f + D + 1]),
        tau_m=template.gate.tau_m,
        tau_u=template.gate.tau_u,
    )
    return PipelineParams(head, fusion, gate, template.memory, template.proto)


def pack_gradients(g: Gradients) -> np.ndarray:
    return np.concatenate(
        [g.d_head.ravel(), g.d_fusion_w.ravel(), g.d_fusion_b, [g.d_a_m, g.d_a_u]]
    )


def max_relative_fd_error(loss_fn, grad_vec, theta0, h, coords) -> float:
    """Worst relative mismatch between grad_vec and central differences.

    loss_fn maps a flat parameter vector to a scalar; grad_vec is the
    claimed gradient at theta0; coords are the indices to probe.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ContractViolation("finite-difference step must lie in [1e-7, 1e-3]")
    worst = 0.0
    for i in coords:
        up = theta0.copy()
        up[i] += h
        dn = theta0.copy()
        dn[i] -= h
        numeric = (loss_fn(up) - loss_fn(dn)) / (2.0 * h)
        analytic = grad_vec[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def grad_check(
    params: PipelineParams,
    sequences,
    class_weights=None,
    h: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
    mode_m: int = GATE_LEARNED,
    mode_u: int = GATE_LEARNED,
    backend: str | None = None,
) -> float:
    """Finite-difference audit of the analytic gradients on real plans.

    Runs one insertion pass to populate the prototype banks, records
    plans with the banks frozen, then compares plan_backward against
    central differences of plan_loss for n_coords sampled coordinates.
    Returns the worst relative error.
    """
    params = params.copy()
    C, D = params.num_classes, params.feature_dim
    if class_weights is None:
        class_weights = class_balanced_weights([s.labels for s in sequences], C)
    banks = PrototypeBankSet(C, params.proto.capacity, D)
    step = 0
    for i, seq in enumerate(sequences):
        uni = _policy_uniforms(params, seed, 0, i, len(seq))
        _, _, step = run_sequence(
            params, seq.features, banks=banks, labels=seq.labels,
            insert_enabled=True, policy_uniforms=uni, insert_step=step,
            mode_m=mode_m, mode_u=mode_u, backend=backend,
        )
    plans = []
    for seq in sequences:
        _, plan, _ = run_sequence(
            params, seq.features, banks=banks, labels=seq.labels,
            mode_m=mode_m, mode_u=mode_u, backend=backend,
        )
        plans.append(plan)

    n_seq = len(plans)
    lab = [s.labels for s in sequences]

    def batch_loss(vec: np.ndarray) -> float:
        p = unpack_params(vec, params)
        return sum(plan_loss(p, plans[i], lab[i], class_weights) for i in range(n_seq)) / n_seq

    grads = Gradients(np.zeros((C, D)), np.zeros((D, 2 * D)), np.zeros(D), 0.0, 0.0)
    for i in range(n_seq):
        grads.accumulate(plan_backward(params, plans[i], lab[i], class_weights), 1.0 / n_seq)

    theta0 = pack_params(params)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _DOMAIN_GRADCHECK])))
    n_coords = min(n_coords, theta0.size)
    coords = rng.choice(theta0.size, size=n_coords, replace=False)
    return max_relative_fd_error(batch_loss, pack_gradients(grads), theta0, h, coords)


def init_params(cfg, feature_dim: int | None = None, proto=None) -> PipelineParams:
    """Seeded initial parameters: small random head, identity fusion."""
    D = feature_dim if feature_dim is not None else cfg.feature_dim
    C = cfg.num_phases
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, _DOMAIN_INIT])))
    head = ClassifierHead(0.05 * rng.standard_normal((C, D)))
    return PipelineParams(
        head=head,
        fusion=FusionLayer.identity(D),
        gate=cfg.gate_params(),
        memory=cfg.memory_config(),
        proto=proto if proto is not None else cfg.prototype_config(),
    ).validate()


def _policy_uniforms(params: PipelineParams, seed: int, epoch: int, seq_index: int, T: int):
    if params.proto.policy_mode != "stochastic":
        return None
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, _DOMAIN_POLICY, epoch, seq_index]))
    )
    return rng.random(T)


@dataclass
class TrainResult:
    params: PipelineParams
    banks: PrototypeBankSet
    class_weights: np.ndarray
    log: dict


def train(
    sequences,
    cfg,
    seed: int | None = None,
    mode_m: int = GATE_LEARNED,
    mode_u: int = GATE_LEARNED,
    params: PipelineParams | None = None,
    backend: str | None = None,
) -> TrainResult:
    """Gradient descent over the full pipeline, one step per sequence.

    Sequences are visited in fixed order with a cosine-annealed step
    size. Prototype banks fill during training (insertion happens after
    each frame's prediction, into the ground-truth class); with
    cfg.proto_refresh_per_epoch the banks restart each epoch so stale
    early-training uncertainties cannot crowd out later ones. Gate slopes
    are clamped to [cfg.a_clamp_min, cfg.a_clamp_max] after every step.

    Raises TrainingDivergence (with the epoch index) if the loss or any
    parameter goes non-finite.
    """
    if not sequences:
        raise ContractViolation("training needs at least one sequence")
    if seed is None:
        seed = cfg.seed
    C = cfg.num_phases
    D = sequences[0].features.shape[1]
    for s in sequences:
        if s.features.shape[1] != D:
            raise ContractViolation("sequences disagree on feature dim")
        if s.labels.size and (s.labels.min() < 0 or s.labels.max() >= C):
            raise ContractViolation("label out of range for configured num_phases")
    if params is None:
        params = init_params(cfg, feature_dim=D)
    else:
        params = params.copy()
    cw = class_balanced_weights([s.labels for s in sequences], C)
    banks = PrototypeBankSet(C, params.proto.capacity, D)
    mem_bank = MemoryBank(params.memory.capacity, D, C)
    # a force-closed prototype gate means the banks are never consulted,
    # so skip filling them and keep retrieval trivially empty
    inserting = mode_u != GATE_FORCE0

    lr0 = cfg.learning_rate
    total_steps = cfg.epochs * len(sequences)
    step = 0
    insert_step = 0
    epoch_losses = []
    backend = backend or (cfg.backend or None)
    for epoch in range(cfg.epochs):
        if cfg.proto_refresh_per_epoch:
            banks.clear()
        epoch_loss = 0.0
        for i, seq in enumerate(sequences):
            lr = lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            mem_bank.clear()
            uni = _policy_uniforms(params, seed, epoch, i, len(seq))
            result, plan, insert_step = run_sequence(
                params, seq.features, bank=mem_bank, banks=banks,
                labels=seq.labels, insert_enabled=inserting, policy_uniforms=uni,
                insert_step=insert_step, mode_m=mode_m, mode_u=mode_u,
                backend=backend,
            )
            loss = sequence_loss(result.final_dist, seq.labels, cw)
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch)
            grads = plan_backward(params, plan, seq.labels, cw)
            if not grads.finite():
                raise TrainingDivergence(epoch)
            params.head.weight -= lr * grads.d_head
            params.fusion.weight -= lr * grads.d_fusion_w
            params.fusion.bias -= lr * grads.d_fusion_b
            params.gate.a_m = min(
                max(params.gate.a_m - lr * grads.d_a_m, cfg.a_clamp_min), cfg.a_clamp_max
            )
            params.gate.a_u = min(
                max(params.gate.a_u - lr * grads.d_a_u, cfg.a_clamp_min), cfg.a_clamp_max
            )
            if not (
                np.isfinite(params.head.weight).all()
                and np.isfinite(params.fusion.weight).all()
                and np.isfinite(params.fusion.bias).all()
            ):
                raise TrainingDivergence(epoch)
            epoch_loss += loss
            step += 1
        epoch_losses.append(epoch_loss / len(sequences))
    log = {
        "epoch_loss": epoch_losses,
        "steps": step,
        "prototype_insertions_attempted": insert_step,
        "prototype_count": len(banks),
        "final_a_m": params.gate.a_m,
        "final_a_u": params.gate.a_u,
    }
    return TrainResult(params=params, banks=banks, class_weights=cw, log=log)
