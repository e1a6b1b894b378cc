"""End-to-end streaming pipeline checks against scripted module composition."""

import numpy as np
import pytest

from phasegate.config import RunConfig
from phasegate.errors import ContractViolation
from phasegate.gating import ClassifierHead, GateParams, classify, gates, integrate
from phasegate.memory import (
    FusionLayer,
    MemoryBank,
    MemoryEntry,
    MemoryConfig,
    push,
    refine,
    select_and_weight,
)
from phasegate.pipeline import (
    GATE_FORCE0,
    GATE_FORCE1,
    GATE_LEARNED,
    PipelineParams,
    SequenceSession,
    gate_mode,
    run_sequence,
)
from phasegate.prototypes import PrototypeBankSet, PrototypeConfig, retrieve
from phasegate.training import init_params


def _toy_params():
    W = np.array([[1.0, 0.2], [-0.3, 0.8]])
    fusion = FusionLayer(
        np.concatenate([np.eye(2), 0.5 * np.eye(2)], axis=1),
        np.array([0.05, -0.02]),
    )
    gate = GateParams(a_m=4.0, a_u=4.0, tau_m=0.7, tau_u=0.7)
    mem = MemoryConfig(capacity=2, threshold=0.75, decay=10.0)
    pro = PrototypeConfig(capacity=1, retrieval_k=1)
    return PipelineParams(ClassifierHead(W), fusion, gate, mem, pro)


def _toy_banks():
    banks = PrototypeBankSet(2, 1, 2)
    banks.insert(0, np.array([0.9, 0.1]), 0.6, 0)
    banks.insert(1, np.array([-0.2, 1.1]), 0.5, 1)
    return banks


def _scripted_trace(params, banks, X, mode_m, mode_u):
    """Independent composition of the module operations, frame by frame."""
    bank = MemoryBank(params.memory.capacity, 2, 2)
    out = []
    for t, f in enumerate(X):
        p = classify(f, params.head)
        conf = float(p.max())
        selected = select_and_weight(bank, f, p, t, params.memory)
        f_m = refine(f, selected, params.fusion)
        f_u = retrieve(f, p, banks, params.proto.retrieval_k)
        g_m, g_u = gates(conf, params.gate)
        if mode_m == GATE_FORCE0:
            g_m = 0.0
        elif mode_m == GATE_FORCE1:
            g_m = 1.0
        if mode_u == GATE_FORCE0:
            g_u = 0.0
        elif mode_u == GATE_FORCE1:
            g_u = 1.0
        f_final = integrate(f, f_m, f_u, g_m, g_u)
        y = classify(f_final, params.head)
        push(bank, MemoryEntry(f.copy(), p.copy(), t))
        out.append((p, y, g_m, g_u, len(selected)))
    return out


@pytest.mark.parametrize("mode_m,mode_u", [
    (GATE_LEARNED, GATE_LEARNED),
    (GATE_FORCE1, GATE_FORCE0),
    (GATE_FORCE0, GATE_FORCE1),
    (GATE_FORCE1, GATE_FORCE1),
])
def test_three_frame_trace_matches_scripted_oracle(mode_m, mode_u):
    params = _toy_params()
    banks = _toy_banks()
    X = np.array([[1.0, 0.0], [0.8, 0.3], [-0.1, 1.0]])
    result, _, _ = run_sequence(params, X, banks=banks, mode_m=mode_m, mode_u=mode_u)
    want = _scripted_trace(params, banks, X, mode_m, mode_u)
    for t, (p, y, g_m, g_u, n_sel) in enumerate(want):
        np.testing.assert_allclose(result.base_dist[t], p, atol=1e-12)
        np.testing.assert_allclose(result.final_dist[t], y, atol=1e-12)
        assert abs(result.g_m[t] - g_m) < 1e-12
        assert abs(result.g_u[t] - g_u) < 1e-12
        assert result.mem_count[t] == n_sel


def test_scripted_oracle_on_random_sequences():
    rng = np.random.default_rng(12)
    params = _toy_params()
    banks = _toy_banks()
    X = rng.normal(size=(40, 2))
    result, _, _ = run_sequence(params, X, banks=banks,
                                mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    want = _scripted_trace(params, banks, X, GATE_LEARNED, GATE_LEARNED)
    for t, (p, y, g_m, g_u, n_sel) in enumerate(want):
        np.testing.assert_allclose(result.final_dist[t], y, atol=1e-12)
        assert result.mem_count[t] == n_sel


def _default_init(seed=0):
    cfg = RunConfig(seed=seed, feature_dim=8, num_phases=3,
                    mean_durations=[30.0, 20.0, 25.0], confusable_pairs=[[0, 1]])
    return cfg, init_params(cfg)


def test_identity_start_argmax_matches_baseline():
    """At init (identity fusion, empty banks) refinement cannot change argmax."""
    cfg, params = _default_init()
    rng = np.random.default_rng(100)
    for _ in range(10):
        X = rng.normal(size=(30, cfg.feature_dim))
        result, _, _ = run_sequence(params, X, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
        np.testing.assert_array_equal(result.pred_base, result.pred_final)


def test_near_closed_gates_reproduce_baseline_distribution():
    # a=100 with a tiny threshold drives both gates below 1e-6 for any
    # reachable confidence (c_t >= 1/C), per the closed-gate consistency claim
    cfg, params = _default_init()
    params = PipelineParams(
        params.head,
        params.fusion,
        GateParams(a_m=100.0, a_u=100.0, tau_m=0.001, tau_u=0.001),
        params.memory,
        params.proto,
    )
    rng = np.random.default_rng(7)
    banks = PrototypeBankSet(cfg.num_phases, 4, cfg.feature_dim)
    for step in range(8):
        banks.insert(step % 3, rng.normal(size=cfg.feature_dim), float(rng.uniform()), step)
    X = rng.normal(size=(50, cfg.feature_dim))
    result, _, _ = run_sequence(params, X, banks=banks,
                                mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    assert result.g_m.max() < 1e-6 and result.g_u.max() < 1e-6
    np.testing.assert_allclose(result.final_dist, result.base_dist, atol=1e-6)


def test_forced_zero_gates_match_baseline_bitwise():
    cfg, params = _default_init()
    rng = np.random.default_rng(8)
    X = rng.normal(size=(25, cfg.feature_dim))
    result, _, _ = run_sequence(params, X, mode_m=GATE_FORCE0, mode_u=GATE_FORCE0)
    np.testing.assert_array_equal(result.final_dist, result.base_dist)
    assert (result.g_m == 0.0).all() and (result.g_u == 0.0).all()


def test_causality_by_truncation():
    cfg, params = _default_init(seed=3)
    rng = np.random.default_rng(9)
    banks = PrototypeBankSet(cfg.num_phases, 4, cfg.feature_dim)
    for step in range(6):
        banks.insert(step % 3, rng.normal(size=cfg.feature_dim), float(rng.uniform()), step)
    X = rng.normal(size=(60, cfg.feature_dim))
    full, _, _ = run_sequence(params, X, banks=banks,
                              mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    for T in (1, 17, 42):
        part, _, _ = run_sequence(params, X[:T], banks=banks,
                                  mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
        np.testing.assert_array_equal(part.final_dist, full.final_dist[:T])
        np.testing.assert_array_equal(part.base_dist, full.base_dist[:T])
        np.testing.assert_array_equal(part.proto_ids, full.proto_ids[:T])


def test_run_is_deterministic():
    cfg, params = _default_init(seed=5)
    rng = np.random.default_rng(11)
    X = rng.normal(size=(40, cfg.feature_dim))
    a, _, _ = run_sequence(params, X, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    b, _, _ = run_sequence(params, X, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    np.testing.assert_array_equal(a.final_dist, b.final_dist)
    np.testing.assert_array_equal(a.g_m, b.g_m)


def test_streaming_session_matches_batch_run():
    cfg, params = _default_init(seed=6)
    rng = np.random.default_rng(13)
    banks = PrototypeBankSet(cfg.num_phases, 4, cfg.feature_dim)
    for step in range(5):
        banks.insert(step % 3, rng.normal(size=cfg.feature_dim), float(rng.uniform()), step)
    X = rng.normal(size=(30, cfg.feature_dim))
    # the session composes the pure-python module ops, so it is bitwise
    # against the python engine and tolerance-level against any backend
    batch, _, _ = run_sequence(params, X, banks=banks, backend="python",
                               mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    default, _, _ = run_sequence(params, X, banks=banks,
                                 mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    session = SequenceSession(params, banks=banks,
                              mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    for t in range(len(X)):
        rec = session.forward_frame(X[t], t)
        np.testing.assert_array_equal(rec.final_dist, batch.final_dist[t])
        np.testing.assert_array_equal(rec.base_dist, batch.base_dist[t])
        np.testing.assert_allclose(rec.final_dist, default.final_dist[t], atol=1e-12)
        assert rec.mem_count == batch.mem_count[t]


def test_session_rejects_non_monotone_time():
    cfg, params = _default_init()
    session = SequenceSession(params)
    f = np.zeros(cfg.feature_dim)
    session.forward_frame(f, 0)
    session.forward_frame(f, 1)
    with pytest.raises(ContractViolation):
        session.forward_frame(f, 1)


def test_insertion_advances_step_and_mutates_banks():
    cfg, params = _default_init(seed=7)
    rng = np.random.default_rng(15)
    X = rng.normal(size=(20, cfg.feature_dim))
    labels = rng.integers(0, cfg.num_phases, size=20)
    banks = PrototypeBankSet(cfg.num_phases, 4, cfg.feature_dim)
    _, _, next_step = run_sequence(
        params, X, banks=banks, labels=labels, insert_enabled=True,
        mode_m=GATE_LEARNED, mode_u=GATE_LEARNED,
    )
    total = sum(banks.bank_size(c) for c in range(cfg.num_phases))
    assert next_step > 0
    assert 0 < total <= next_step


def test_insertion_requires_labels():
    cfg, params = _default_init()
    X = np.zeros((4, cfg.feature_dim))
    banks = PrototypeBankSet(cfg.num_phases, 4, cfg.feature_dim)
    with pytest.raises(ContractViolation):
        run_sequence(params, X, banks=banks, insert_enabled=True)


def test_proto_ids_padded_with_minus_one():
    cfg, params = _default_init()
    X = np.random.default_rng(16).normal(size=(10, cfg.feature_dim))
    result, _, _ = run_sequence(params, X, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    assert result.proto_ids.shape == (10, params.proto.retrieval_k)
    assert (result.proto_ids == -1).all()  # no banks attached
    assert (result.proto_n == 0).all()


def test_gate_mode_names():
    assert gate_mode("learned") == GATE_LEARNED
    assert gate_mode("off") == GATE_FORCE0
    assert gate_mode("on") == GATE_FORCE1
    with pytest.raises(Exception):
        gate_mode("sideways")
