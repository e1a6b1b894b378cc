"""Experiment drivers: model evaluation, the five-variant ablation, and
inference-time threshold / retrieval-depth sweeps."""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError
from .memory import MemoryBank, MemoryConfig
from .metrics import MetricsReport, evaluate
from .pipeline import (
    GATE_FORCE0,
    GATE_FORCE1,
    GATE_LEARNED,
    PipelineParams,
    run_sequence,
)
from .prototypes import PrototypeConfig
from .synthetic import WorkflowSpec, generate, split
from .training import TrainResult, train

# name, memory gate mode, prototype gate mode
# Single-pathway variants keep their own gate learned and force only the
# disabled pathway to zero; the combined variant forces both fully open.
VARIANTS = (
    ("baseline", GATE_FORCE0, GATE_FORCE0),
    ("memory_only", GATE_LEARNED, GATE_FORCE0),
    ("prototype_only", GATE_FORCE0, GATE_LEARNED),
    ("combined_ungated", GATE_FORCE1, GATE_FORCE1),
    ("gated_full", GATE_LEARNED, GATE_LEARNED),
)

VARIANT_MODES = {name: (m, u) for name, m, u in VARIANTS}

SWEEP_THRESHOLDS = (0.25, 0.5, 0.75, 1.0)
SWEEP_KS = (4, 8, 16)

_SUMMARY_KEYS = (
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "macro_jaccard",
    "jitter_ratio",
)


def evaluate_model(params, banks, sequences, mode_m=GATE_LEARNED, mode_u=GATE_LEARNED,
                   backend=None):
    """Frozen-parameter evaluation over sequences.

    Returns (MetricsReport, frame_rows, diagnostics) where frame_rows
    carry per-frame (sequence_id, t, gt, baseline_pred, final_pred, g_m,
    g_u) for timeline plotting and diagnostics aggregates pathway usage.
    """
    preds, gts, rows = [], [], []
    mem_selected_total = 0
    proto_retrieved_total = 0
    D, C = params.feature_dim, params.num_classes
    bank = MemoryBank(params.memory.capacity, D, C)
    for seq in sequences:
        bank.clear()
        result, _, _ = run_sequence(
            params, seq.features, bank=bank, banks=banks,
            mode_m=mode_m, mode_u=mode_u, backend=backend,
        )
        final = result.pred_final
        base = result.pred_base
        preds.append(final)
        gts.append(seq.labels)
        mem_selected_total += int(result.mem_count.sum())
        proto_retrieved_total += int(result.proto_n.sum())
        for t in range(len(seq)):
            rows.append(
                (
                    seq.id,
                    t,
                    int(seq.labels[t]),
                    int(base[t]),
                    int(final[t]),
                    float(result.g_m[t]),
                    float(result.g_u[t]),
                )
            )
    report = evaluate(preds, gts, num_classes=C)
    diagnostics = {
        "memories_selected": mem_selected_total,
        "prototypes_retrieved": proto_retrieved_total,
    }
    return report, rows, diagnostics


def _summary(report: MetricsReport) -> dict:
    d = report.to_dict()
    return {k: d[k] for k in _SUMMARY_KEYS} | {
        "jitter_pred": d["jitter_pred"],
        "jitter_gt": d["jitter_gt"],
    }


def run_benchmark_once(cfg, seed: int, mode_m: int, mode_u: int, backend=None):
    """generate -> split -> train -> evaluate for one seed and variant."""
    spec = WorkflowSpec.from_config(cfg)
    seqs = generate(spec, cfg.num_sequences, seed)
    train_seqs, test_seqs = split(seqs, cfg.train_fraction, seed)
    cfg_seed = dataclasses.replace(cfg, seed=seed)
    tr: TrainResult = train(train_seqs, cfg_seed, seed=seed, mode_m=mode_m, mode_u=mode_u,
                            backend=backend)
    report, _, diagnostics = evaluate_model(
        tr.params, tr.banks, test_seqs, mode_m=mode_m, mode_u=mode_u, backend=backend
    )
    return report, tr, diagnostics


def ablation_run(cfg, seeds, backend=None) -> dict:
    """Train and evaluate every variant on identical data for each seed.

    Returns per-variant per-seed summaries plus mean/std rows, keyed for
    stable JSON output.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("ablation needs at least 2 seeds")
    out = {"seeds": seeds, "variants": {}}
    for name, mode_m, mode_u in VARIANTS:
        per_seed = []
        for seed in seeds:
            report, _, diagnostics = run_benchmark_once(cfg, seed, mode_m, mode_u, backend)
            per_seed.append(_summary(report) | diagnostics)
        stats = {}
        for key in _SUMMARY_KEYS:
            vals = np.asarray([r[key] for r in per_seed], dtype=float)
            stats[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
        out["variants"][name] = {"per_seed": per_seed, "stats": stats}
    return out


def sweep_run(cfg, backend=None) -> dict:
    """Inference-time sweeps of the reliability threshold and retrieval k.

    One model is trained at the configured settings; each grid point then
    re-evaluates the same trained parameters and banks on the same test
    split, so rows differ only in the swept knob.
    """
    spec = WorkflowSpec.from_config(cfg)
    seqs = generate(spec, cfg.num_sequences, cfg.seed)
    train_seqs, test_seqs = split(seqs, cfg.train_fraction, cfg.seed)
    tr = train(train_seqs, cfg, backend=backend)

    def eval_with(params: PipelineParams):
        report, _, diagnostics = evaluate_model(params, tr.banks, test_seqs, backend=backend)
        return _summary(report) | diagnostics

    theta_rows = []
    for theta in SWEEP_THRESHOLDS:
        p = tr.params.copy()
        p.memory = MemoryConfig(cfg.memory_capacity, theta, cfg.temporal_decay)
        theta_rows.append({"threshold": theta} | eval_with(p))
    k_rows = []
    for k in SWEEP_KS:
        p = tr.params.copy()
        p.proto = PrototypeConfig(cfg.prototype_capacity, k, cfg.policy_mode, tr.params.proto.policy_net)
        k_rows.append({"retrieval_k": k} | eval_with(p))
    acc = [row["accuracy"] for row in theta_rows]
    return {
        "threshold_rows": theta_rows,
        "k_rows": k_rows,
        "threshold_accuracy_spread": max(acc) - min(acc),
    }
