"""Acceptance gauntlet: one test per shipping criterion.

Every test prints a single "CRITERION n: PASS/FAIL - detail" line before
its asserts fire, so a red run still reports a verdict for each
criterion. Criteria 4 and 5 share one module-scoped ten-seed ablation.
"""

import dataclasses
import hashlib
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from phasegate.config import RunConfig
from phasegate.experiments import ablation_run, sweep_run
from phasegate.gating import GateParams
from phasegate.memory import MemoryBank
from phasegate.numerics import cosine, softmax
from phasegate.pipeline import GATE_LEARNED, PipelineParams, run_sequence
from phasegate.prototypes import PrototypeBankSet, retrieve, retrieval_plan
from phasegate.synthetic import WorkflowSpec, generate
from phasegate.training import grad_check, init_params, pack_params, unpack_params


def _verdict(n: int, ok: bool, detail: str) -> bool:
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


# ------------------------------------------------------------ criterion 1


def _fifo_mismatches(rng, n_ops: int) -> int:
    """Ring-buffer bank against a plain-list replay."""
    cap, dim, ncls = 13, 5, 3
    bank = MemoryBank(capacity=cap, feature_dim=dim, num_phases=ncls)
    sim = []
    bad = 0
    t = 0
    for op in range(n_ops):
        t += int(rng.integers(1, 4))
        f = rng.normal(size=dim)
        p = rng.dirichlet(np.ones(ncls))
        bank.push(f, p, t)
        sim.append((f, p, t))
        if len(sim) > cap:
            sim.pop(0)
        if len(bank) != len(sim) or bank.newest_timestep() != sim[-1][2]:
            bad += 1
        got_t = bank.ordered_views()[2]
        if not np.array_equal(got_t, np.array([e[2] for e in sim])):
            bad += 1
        if op % 250 == 0 or op == n_ops - 1:
            feats = bank.ordered_views()[0]
            want = np.array([e[0] for e in sim])
            if not np.array_equal(feats, want):
                bad += 1
    return bad


def _replacement_mismatches(rng, n_ops: int) -> int:
    """Bounded per-class banks against a naive keep-most-uncertain replay."""
    C, N, dim = 3, 4, 5
    banks = PrototypeBankSet(C, N, dim)
    naive = {c: [] for c in range(C)}
    bad = 0
    for step in range(n_ops):
        c = int(rng.integers(C))
        u = float(rng.integers(0, 8)) / 10.0  # coarse grid to force ties
        f = rng.normal(size=dim)
        got = banks.insert(c, f, u, step)
        bank = naive[c]
        if len(bank) < N:
            bank.append((u, step))
            want = True
        else:
            j = min(range(N), key=lambda i: (bank[i][0], bank[i][1]))
            want = u > bank[j][0]
            if want:
                bank[j] = (u, step)
        if got != want:
            bad += 1
    for c in range(C):
        got = sorted((p.uncertainty, p.insert_step) for p in banks.prototypes(c))
        if got != sorted(naive[c]):
            bad += 1
    return bad


def _retrieval_mismatches(rng, n_ops: int) -> int:
    """Top-k blend against an exhaustive per-row rank-and-softmax oracle."""
    dim, ncls = 5, 3
    bad = 0
    for _ in range(n_ops):
        m = int(rng.integers(2, 13))
        feats = rng.normal(size=(m, dim))
        if m >= 4:  # duplicated rows force ties on similarity and score
            feats[1] = feats[0]
            feats[3] = feats[2]
        cls = rng.integers(0, ncls, size=m)
        steps = np.arange(m, dtype=np.int64)
        flat = np.arange(m, dtype=np.int64)
        norms = np.array([math.sqrt(float(v @ v)) for v in feats])
        f = rng.normal(size=dim)
        p = rng.dirichlet(np.ones(ncls))
        k = int(rng.integers(1, 6))

        sel, w, _ = retrieval_plan(f, p, feats, cls, steps, norms, flat, k)
        scored = sorted(
            ((-(p[cls[i]] * cosine(f, feats[i])), -cosine(f, feats[i]), steps[i], flat[i], i)
             for i in range(m)),
        )[: min(k, m)]
        want_sel = [row[4] for row in scored]
        want_w = softmax([-row[1] for row in scored])
        if list(sel) != want_sel or np.max(np.abs(w - want_w)) > 1e-9:
            bad += 1
    return bad


def test_criterion_1_structure_oracles():
    n_ops = 10_000
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    bad = _fifo_mismatches(rng, n_ops)
    bad += _replacement_mismatches(rng, n_ops)
    bad += _retrieval_mismatches(rng, n_ops)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 30.0
    _verdict(
        1, ok,
        f"fifo/replacement/retrieval {n_ops} ops each, "
        f"{bad} mismatches, {elapsed:.1f}s (limit 30s)",
    )
    assert bad == 0
    assert elapsed < 30.0


# ------------------------------------------------------------ criterion 2


def test_criterion_2_gradients_match_finite_differences():
    cfg = RunConfig(
        seed=0, feature_dim=4, num_phases=3, mean_durations=[12.0, 8.0, 10.0],
        confusable_pairs=[], memory_capacity=6, prototype_capacity=4, retrieval_k=2,
    )
    spec = WorkflowSpec.from_config(cfg)
    seqs = generate(spec, 2, seed=5)
    errs = []
    for point_seed in (1, 2, 3):
        rng = np.random.default_rng(point_seed)
        params = init_params(cfg)
        theta = pack_params(params) + 0.25 * rng.standard_normal(pack_params(params).shape)
        params = unpack_params(theta, params)
        errs.append(
            grad_check(params, seqs, h=1e-5, n_coords=64, seed=point_seed,
                       mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
        )
    worst = max(errs)
    ok = worst < 1e-4
    _verdict(2, ok, f"worst relative error {worst:.3e} over 3 random points (limit 1e-4)")
    assert worst < 1e-4


# ------------------------------------------------------------ criterion 3


def test_criterion_3_refinement_consistency():
    cfg = RunConfig(seed=0, feature_dim=8, num_phases=3,
                    mean_durations=[30.0, 20.0, 25.0], confusable_pairs=[[0, 1]])
    params = init_params(cfg)
    rng = np.random.default_rng(100)
    argmax_equal = True
    for _ in range(10):
        X = rng.normal(size=(30, cfg.feature_dim))
        result, _, _ = run_sequence(params, X, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
        argmax_equal &= bool((result.pred_base == result.pred_final).all())

    # slope 100 with threshold 0.001 pins both gates under 1e-6 for any
    # reachable confidence (max prob is at least 1/C)
    closed = PipelineParams(
        params.head, params.fusion,
        GateParams(a_m=100.0, a_u=100.0, tau_m=0.001, tau_u=0.001),
        params.memory, params.proto,
    )
    banks = PrototypeBankSet(cfg.num_phases, 4, cfg.feature_dim)
    for step in range(8):
        banks.insert(step % 3, rng.normal(size=cfg.feature_dim), float(rng.uniform()), step)
    X = rng.normal(size=(50, cfg.feature_dim))
    result, _, _ = run_sequence(closed, X, banks=banks,
                                mode_m=GATE_LEARNED, mode_u=GATE_LEARNED)
    g_max = float(max(result.g_m.max(), result.g_u.max()))
    dev = float(np.max(np.abs(result.final_dist - result.base_dist)))
    ok = argmax_equal and g_max < 1e-6 and dev < 1e-6
    _verdict(
        3, ok,
        f"identity-start argmax equal on 10 sequences: {argmax_equal}; "
        f"gate max {g_max:.2e}, output deviation {dev:.2e} (limit 1e-6)",
    )
    assert argmax_equal
    assert g_max < 1e-6
    assert dev < 1e-6


# ------------------------------------------------------ criteria 4 and 5


@pytest.fixture(scope="module")
def ablation():
    """Ten-seed five-variant ablation at shipping defaults."""
    t0 = time.perf_counter()
    table = ablation_run(RunConfig(), seeds=list(range(10)))
    elapsed = time.perf_counter() - t0
    acc = {name: [r["accuracy"] for r in block["per_seed"]]
           for name, block in table["variants"].items()}
    jit = {name: [r["jitter_ratio"] for r in block["per_seed"]]
           for name, block in table["variants"].items()}
    return {"acc": acc, "jit": jit, "elapsed": elapsed}


def test_criterion_4_pathway_contributions(ablation):
    """Known shortfall: at this scale the fully gated model trails the
    memory-only variant by about one accuracy point on every seed, so the
    third leg fails while the other three hold."""
    acc = ablation["acc"]
    base, mem, pro = acc["baseline"], acc["memory_only"], acc["prototype_only"]
    full = acc["gated_full"]
    n = len(base)
    legs = {
        "base<memory": sum(b < m for b, m in zip(base, mem)),
        "base<prototype": sum(b < u for b, u in zip(base, pro)),
        "full>=memory": sum(f >= m for f, m in zip(full, mem)),
        "full>=prototype": sum(f >= u for f, u in zip(full, pro)),
    }
    elapsed = ablation["elapsed"]
    ok = all(v >= 8 for v in legs.values()) and elapsed < 900.0
    detail = ", ".join(f"{k} {v}/{n}" for k, v in legs.items())
    _verdict(4, ok, f"{detail}, {elapsed:.0f}s (limit 900s, each leg needs 8/{n})")
    assert elapsed < 900.0
    assert all(v >= 8 for v in legs.values()), detail


def test_criterion_5_memory_pathway_stabilizes(ablation):
    acc, jit = ablation["acc"], ablation["jit"]
    base_j, rmp_j = jit["baseline"], jit["memory_only"]
    n = len(base_j)
    smoother = sum(m < b for m, b in zip(rmp_j, base_j))
    delta = float(np.mean(acc["memory_only"]) - np.mean(acc["baseline"]))
    ok = smoother >= 8 and delta >= -0.5
    _verdict(
        5, ok,
        f"jitter lower on {smoother}/{n} seeds (needs 8), "
        f"accuracy delta {delta:+.2f} points (floor -0.5)",
    )
    assert smoother >= 8
    assert delta >= -0.5


# ------------------------------------------------------------ criterion 6


def test_criterion_6_reliability_threshold_sweep():
    table = sweep_run(RunConfig())
    rows = table["threshold_rows"]
    thetas = [row["threshold"] for row in rows]
    counts = {row["threshold"]: row["memories_selected"] for row in rows}
    spread = table["threshold_accuracy_spread"]
    ok = (
        thetas == [0.25, 0.5, 0.75, 1.0]
        and counts[1.0] <= counts[0.25]
        and math.isfinite(spread)
    )
    _verdict(
        6, ok,
        f"thresholds {thetas}, accuracy spread {spread:.3f}, "
        f"memories selected {counts[0.25]} at 0.25 vs {counts[1.0]} at 1.0",
    )
    assert thetas == [0.25, 0.5, 0.75, 1.0]
    assert counts[1.0] <= counts[0.25]
    assert math.isfinite(spread)


# ------------------------------------------------------------ criterion 7


TINY = {
    "seed": 0, "feature_dim": 8, "num_phases": 3, "num_sequences": 4,
    "mean_durations": [30.0, 20.0, 25.0], "confusable_pairs": [[0, 1]],
    "memory_capacity": 10, "prototype_capacity": 8, "retrieval_k": 3, "epochs": 2,
}


def _pipeline_hashes(cfg_path, root):
    data, ckpt, ev = root / "data", root / "ckpt", root / "eval"
    for argv in (
        ["synth", "--config", cfg_path, "--out", str(data)],
        ["train", "--config", cfg_path, "--data", str(data), "--out", str(ckpt)],
        ["eval", "--checkpoint", str(ckpt / "checkpoint.json"),
         "--data", str(data), "--out", str(ev)],
    ):
        r = subprocess.run([sys.executable, "-m", "phasegate.cli", *argv],
                           capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
    hashes = {}
    for d in (data, ckpt, ev):
        for name in sorted(os.listdir(d)):
            with open(os.path.join(d, name), "rb") as fh:
                hashes[f"{d.name}/{name}"] = hashlib.sha256(fh.read()).hexdigest()
    return hashes


def test_criterion_7_rerun_is_bitwise_identical(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(TINY) + "\n")
    first = _pipeline_hashes(str(cfg_path), tmp_path / "a")
    second = _pipeline_hashes(str(cfg_path), tmp_path / "b")
    same = set(first) == set(second) and all(first[k] == second[k] for k in first)
    _verdict(7, same, f"{len(first)} output files hashed, reruns identical: {same}")
    assert same
