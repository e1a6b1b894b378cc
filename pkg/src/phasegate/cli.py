"""Command-line entry point.

Subcommands: synth, train, eval, ablate, sweep. Every run writes its
fully resolved config beside its outputs; rerunning any command with the
same config and seed reproduces the output files byte for byte.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, ContractViolation, TrainingDivergence
from .experiments import VARIANT_MODES, ablation_run, evaluate_model, sweep_run
from .metrics import write_report
from .synthetic import WorkflowSpec, generate, load_dataset, save_dataset, split
from .training import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg.validate()


def _prepare_out(args, cfg: RunConfig) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "resolved_config.json"))
    return out


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_frames_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence_id", "t", "gt", "baseline_pred", "final_pred", "g_m", "g_u"])
        for sid, t, gt, bp, fp, gm, gu in rows:
            writer.writerow([sid, t, gt, bp, fp, repr(gm), repr(gu)])


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    spec = WorkflowSpec.from_config(cfg)
    seqs = generate(spec, cfg.num_sequences, cfg.seed)
    save_dataset(seqs, spec, cfg.seed, out)
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    seqs, spec, _ = load_dataset(args.data)
    if spec.num_phases != cfg.num_phases or spec.feature_dim != cfg.feature_dim:
        raise ConfigError(
            "dataset shape "
            f"(C={spec.num_phases}, D={spec.feature_dim}) does not match config "
            f"(C={cfg.num_phases}, D={cfg.feature_dim})"
        )
    train_seqs, test_seqs = split(seqs, cfg.train_fraction, cfg.seed)
    mode_m, mode_u = VARIANT_MODES[args.variant]
    backend = cfg.backend or None
    result = train(train_seqs, cfg, mode_m=mode_m, mode_u=mode_u, backend=backend)
    extra = {
        "variant": args.variant,
        "train_ids": [s.id for s in train_seqs],
        "test_ids": [s.id for s in test_seqs],
        "log": result.log,
    }
    ckpt_path = os.path.join(out, "checkpoint.json")
    digest = save_checkpoint(
        ckpt_path, result.params, result.banks, cfg, cfg.seed,
        class_weights=result.class_weights, extra=extra,
    )
    _write_json(os.path.join(out, "train_log.json"), result.log)
    print(f"checkpoint {ckpt_path} ({digest[:12]})")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, banks, cfg, _, doc = load_checkpoint(args.checkpoint)
    if args.set:
        cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    out = args.out
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "resolved_config.json"))
    seqs, spec, _ = load_dataset(args.data)
    if spec.feature_dim != params.feature_dim or spec.num_phases != params.num_classes:
        raise ConfigError("dataset shape does not match checkpoint")
    chosen = _pick_split(seqs, doc, args.split)
    variant = doc.get("extra", {}).get("variant", "gated_full")
    mode_m, mode_u = VARIANT_MODES[variant]
    report, rows, diagnostics = evaluate_model(
        params, banks, chosen, mode_m=mode_m, mode_u=mode_u, backend=cfg.backend or None
    )
    write_report(report, out)
    _write_frames_csv(os.path.join(out, "frames.csv"), rows)
    _write_json(os.path.join(out, "diagnostics.json"), diagnostics)
    print(
        f"accuracy {report.accuracy:.2f} macro_f1 {report.macro_f1:.2f} "
        f"jitter_ratio {report.jitter_ratio:.3f} over {len(chosen)} sequences"
    )
    return EXIT_OK


def _pick_split(seqs, doc, which: str):
    if which == "all":
        return seqs
    ids = doc.get("extra", {}).get(f"{which}_ids")
    if not ids:
        raise ConfigError(f"checkpoint does not record a {which} split; use --split all")
    by_id = {s.id: s for s in seqs}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigError(f"dataset is missing sequences {missing[:5]} from the {which} split")
    return [by_id[i] for i in ids]


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    table = ablation_run(cfg, seeds, backend=cfg.backend or None)
    _write_json(os.path.join(out, "ablation.json"), table)
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "metric", "mean", "std"])
        for name, block in table["variants"].items():
            for metric, ms in block["stats"].items():
                writer.writerow([name, metric, repr(ms["mean"]), repr(ms["std"])])
    for name, block in table["variants"].items():
        acc = block["stats"]["accuracy"]
        jit = block["stats"]["jitter_ratio"]
        print(
            f"{name:18s} accuracy {acc['mean']:6.2f} ± {acc['std']:5.2f}   "
            f"jitter_ratio {jit['mean']:6.3f} ± {jit['std']:5.3f}"
        )
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    table = sweep_run(cfg, backend=cfg.backend or None)
    _write_json(os.path.join(out, "sweep.json"), table)
    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grid", "value", "accuracy", "macro_f1", "jitter_ratio", "memories_selected"])
        for row in table["threshold_rows"]:
            writer.writerow(
                ["threshold", repr(row["threshold"]), repr(row["accuracy"]),
                 repr(row["macro_f1"]), repr(row["jitter_ratio"]), row["memories_selected"]]
            )
        for row in table["k_rows"]:
            writer.writerow(
                ["retrieval_k", row["retrieval_k"], repr(row["accuracy"]),
                 repr(row["macro_f1"]), repr(row["jitter_ratio"]), row["memories_selected"]]
            )
    print(
        f"threshold accuracy spread {table['threshold_accuracy_spread']:.3f} "
        f"over {len(table['threshold_rows'])} settings"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasegate",
        description="Streaming phase classification with memory, prototypes, and gating.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config field (repeatable; value parsed as JSON)",
        )

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from `synth`")
    p.add_argument(
        "--variant",
        default="gated_full",
        choices=sorted(VARIANT_MODES),
        help="pathway configuration to train",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON from `train`")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="five-variant ablation over seeds")
    common(p)
    p.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="threshold and retrieval-depth sweeps")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergence as e:
        print(f"error: training diverged at epoch {e.epoch}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractViolation, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
