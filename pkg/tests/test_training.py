"""Loss arithmetic, hand-derived gradients, and the training loop."""

import dataclasses
import hashlib
import math

import numpy as np
import pytest

from phasegate.config import RunConfig
from phasegate.errors import TrainingDivergence
from phasegate.pipeline import GATE_FORCE0, GATE_LEARNED, run_sequence
from phasegate.synthetic import LabeledSequence, WorkflowSpec, generate
from phasegate.training import (
    class_balanced_weights,
    grad_check,
    init_params,
    loss_ce,
    loss_kl,
    max_relative_fd_error,
    pack_params,
    train,
)

SMALL_CFG = RunConfig(
    seed=0,
    feature_dim=8,
    num_phases=3,
    num_sequences=6,
    mean_durations=[30.0, 20.0, 25.0],
    confusable_pairs=[[0, 1]],
    memory_capacity=10,
    prototype_capacity=6,
    retrieval_k=3,
    epochs=4,
)


def test_loss_ce_hand_values():
    w = np.ones(7)
    onehot = np.zeros(7)
    onehot[2] = 1.0
    assert loss_ce(onehot, 2, w) < 1e-10
    assert abs(loss_ce(np.full(7, 1 / 7), 3, w) - math.log(7.0)) < 1e-9
    w2 = np.array([1.0, 2.0])
    assert abs(loss_ce(np.array([0.75, 0.25]), 1, w2) - 2 * math.log(4.0)) < 1e-9


def test_loss_kl_hand_values():
    p = np.array([0.5, 0.5])
    # the epsilon guard inside the log leaves a sub-1e-11 residue at equality
    assert abs(loss_kl(p, p.copy())) < 1e-11
    got = loss_kl(p, np.array([0.9, 0.1]))
    assert abs(got - math.log(5.0 / 3.0)) < 1e-9
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.dirichlet(np.ones(4))
        b = rng.dirichlet(np.ones(4))
        assert loss_kl(a, b) >= 0.0


def test_class_balanced_weights_mean_one_inverse_frequency():
    labels = [np.array([0, 0, 0, 1]), np.array([1, 2, 2, 2])]
    w = class_balanced_weights(labels, 3)
    # pooled counts over both sequences: 3, 2, 3
    counts = np.array([3.0, 2.0, 3.0])
    want = (1.0 / counts) / (1.0 / counts).mean()
    np.testing.assert_allclose(w, want, atol=1e-12)
    assert abs(w.mean() - 1.0) < 1e-12


def test_class_weights_absent_class_defaults_to_one():
    w = class_balanced_weights([np.array([0, 0, 2])], 4)
    assert w[1] == 1.0 and w[3] == 1.0


def test_fd_checker_self_test_on_quadratic():
    # wiring sanity: a quadratic has exact analytic gradients
    A = np.diag([1.0, 4.0, 9.0])

    def loss_fn(th):
        return 0.5 * float(th @ A @ th)

    theta0 = np.array([1.0, -2.0, 0.5])
    grad = A @ theta0
    err = max_relative_fd_error(loss_fn, grad, theta0, h=1e-5, coords=[0, 1, 2])
    assert err < 1e-8


def test_fd_checker_rejects_out_of_range_h():
    with pytest.raises(Exception):
        max_relative_fd_error(lambda t: 0.0, np.zeros(2), np.zeros(2), 1e-2, [0])


def test_grad_check_small_pipeline():
    cfg = dataclasses.replace(
        SMALL_CFG, feature_dim=4, num_phases=3,
        mean_durations=[12.0, 8.0, 10.0], memory_capacity=6,
        prototype_capacity=4, retrieval_k=2,
    )
    spec = WorkflowSpec.from_config(cfg)
    seqs = generate(spec, 3, seed=0)
    params = init_params(cfg)
    err = grad_check(params, seqs, h=1e-5, n_coords=64, seed=0,
                     mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    assert err < 1e-4


def test_grad_check_at_perturbed_points():
    cfg = dataclasses.replace(
        SMALL_CFG, feature_dim=4, num_phases=3,
        mean_durations=[12.0, 8.0, 10.0], memory_capacity=6,
        prototype_capacity=4, retrieval_k=2,
    )
    spec = WorkflowSpec.from_config(cfg)
    seqs = generate(spec, 2, seed=1)
    for point_seed in (1, 2):
        params = init_params(dataclasses.replace(cfg, seed=point_seed))
        err = grad_check(params, seqs, h=1e-5, n_coords=48, seed=point_seed,
                         mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
        assert err < 1e-4


def _separable_sequences(n=6, frames=40, dim=8, seed=0):
    """Two far-apart clusters, zero noise overlap: trivially learnable."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        half = frames // 2
        labels = np.array([0] * half + [1] * (frames - half), dtype=np.int64)
        mu = np.zeros((2, dim))
        mu[0, 0] = 4.0
        mu[1, 1] = 4.0
        feats = mu[labels] + 0.05 * rng.normal(size=(frames, dim))
        out.append(LabeledSequence(f"sep{i:03d}", feats, labels))
    return out


def test_training_separable_sanity_and_monotone_loss():
    seqs = _separable_sequences()
    cfg = dataclasses.replace(
        SMALL_CFG, feature_dim=8, num_phases=2, epochs=12,
        mean_durations=[20.0, 20.0], confusable_pairs=[],
    )
    res = train(seqs, cfg, seed=0, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    losses = res.log["epoch_loss"]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    correct = total = 0
    for seq in seqs:
        r, _, _ = run_sequence(res.params, seq.features, banks=res.banks,
                               mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
        correct += int((r.pred_final == seq.labels).sum())
        total += len(seq.labels)
    assert correct / total >= 0.99


def test_training_replay_is_bitwise():
    spec = WorkflowSpec.from_config(SMALL_CFG)
    seqs = generate(spec, SMALL_CFG.num_sequences, seed=0)
    a = train(seqs, SMALL_CFG, seed=0, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    b = train(seqs, SMALL_CFG, seed=0, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    np.testing.assert_array_equal(pack_params(a.params), pack_params(b.params))
    assert a.banks.to_lists() == b.banks.to_lists()
    assert a.log["epoch_loss"] == b.log["epoch_loss"]


def test_training_divergence_raises_with_epoch():
    seqs = _separable_sequences(n=2, frames=20)
    # near the float64 ceiling the very first update either overflows a
    # parameter to inf outright or parks it around 1e307, in which case the
    # next forward pass overflows the logits and the softmax goes NaN
    cfg = dataclasses.replace(
        SMALL_CFG, feature_dim=8, num_phases=2, epochs=5,
        mean_durations=[20.0, 20.0], confusable_pairs=[],
        learning_rate=1e308,
    )
    with pytest.raises(TrainingDivergence) as exc:
        with np.errstate(over="ignore"):
            train(seqs, cfg, seed=0, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    assert exc.value.epoch >= 0


def test_evaluation_never_mutates_prototype_banks():
    spec = WorkflowSpec.from_config(SMALL_CFG)
    seqs = generate(spec, 4, seed=3)
    res = train(seqs[:3], SMALL_CFG, seed=3, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)

    def bank_hash(banks):
        return hashlib.sha256(repr(banks.to_lists()).encode()).hexdigest()

    before = bank_hash(res.banks)
    run_sequence(res.params, seqs[3].features, banks=res.banks,
                 mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    assert bank_hash(res.banks) == before


def test_memory_only_training_skips_prototype_insertion():
    spec = WorkflowSpec.from_config(SMALL_CFG)
    seqs = generate(spec, 3, seed=5)
    res = train(seqs, SMALL_CFG, seed=5, mode_m=GATE_LEARNED, mode_u=GATE_FORCE0)
    assert res.log["prototype_insertions_attempted"] == 0
    total = sum(res.banks.bank_size(c) for c in range(SMALL_CFG.num_phases))
    assert total == 0
