"""Synthetic streaming-workflow generator.

Produces labeled feature sequences that mimic the failure modes the
pipeline targets: heavy class imbalance, pairs of phases with nearly
parallel centroids, and gradual transitions where features blend between
adjacent phases while the ground-truth label stays crisp.

Everything is a pure function of (spec, seed); per-sequence child seeds
make parallel generation equal to serial.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation

_DOMAIN_CENTROIDS = 0x63656E74
_DOMAIN_SEQUENCE = 0x73657175
_DOMAIN_SPLIT = 0x73706C69


@dataclass(frozen=True)
class WorkflowSpec:
    num_phases: int = 7
    feature_dim: int = 32
    mean_durations: tuple = (120.0, 90.0, 110.0, 80.0, 20.0, 100.0, 80.0)
    duration_jitter: float = 0.4
    noise_sigma: float = 0.35
    confusable_pairs: tuple = ((1, 2), (5, 6))
    confusable_cosine: float = 0.9
    ramp_frames: int = 8
    skip_prob: float = 0.1

    def validate(self) -> "WorkflowSpec":
        if self.num_phases < 2:
            raise ConfigError("need at least two phases")
        if self.feature_dim < self.num_phases:
            raise ConfigError("feature_dim must be >= num_phases for orthonormal centroids")
        if len(self.mean_durations) != self.num_phases:
            raise ConfigError("one mean duration per phase required")
        if any(d < 1 for d in self.mean_durations):
            raise ConfigError("mean durations must be >= 1")
        if self.duration_jitter < 0 or self.noise_sigma < 0 or self.ramp_frames < 0:
            raise ConfigError("jitter, sigma and ramp must be non-negative")
        if not (0.0 <= self.skip_prob < 1.0):
            raise ConfigError("skip_prob must lie in [0, 1)")
        if not (-1.0 <= self.confusable_cosine <= 1.0):
            raise ConfigError(
                f"confusable cosine {self.confusable_cosine} is not a feasible geometry"
            )
        seen = set()
        for a, b in self.confusable_pairs:
            if not (0 <= a < self.num_phases and 0 <= b < self.num_phases) or a == b:
                raise ConfigError(f"bad confusable pair ({a}, {b})")
            if a in seen or b in seen:
                raise ConfigError("confusable pairs must not share phases")
            seen.update((a, b))
        return self

    @classmethod
    def from_config(cls, cfg) -> "WorkflowSpec":
        return cls(
            num_phases=cfg.num_phases,
            feature_dim=cfg.feature_dim,
            mean_durations=tuple(float(d) for d in cfg.mean_durations),
            duration_jitter=cfg.duration_jitter,
            noise_sigma=cfg.noise_sigma,
            confusable_pairs=tuple((int(a), int(b)) for a, b in cfg.confusable_pairs),
            confusable_cosine=cfg.confusable_cosine,
            ramp_frames=cfg.ramp_frames,
            skip_prob=cfg.skip_prob,
        ).validate()

    def to_dict(self) -> dict:
        return {
            "num_phases": self.num_phases,
            "feature_dim": self.feature_dim,
            "mean_durations": list(self.mean_durations),
            "duration_jitter": self.duration_jitter,
            "noise_sigma": self.noise_sigma,
            "confusable_pairs": [list(p) for p in self.confusable_pairs],
            "confusable_cosine": self.confusable_cosine,
            "ramp_frames": self.ramp_frames,
            "skip_prob": self.skip_prob,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorkflowSpec":
        return cls(
            num_phases=data["num_phases"],
            feature_dim=data["feature_dim"],
            mean_durations=tuple(data["mean_durations"]),
            duration_jitter=data["duration_jitter"],
            noise_sigma=data["noise_sigma"],
            confusable_pairs=tuple(tuple(p) for p in data["confusable_pairs"]),
            confusable_cosine=data["confusable_cosine"],
            ramp_frames=data["ramp_frames"],
            skip_prob=data["skip_prob"],
        ).validate()


@dataclass
class LabeledSequence:
    id: str
    features: np.ndarray  # (T, D)
    labels: np.ndarray    # (T,) int64

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ContractViolation("sequence arrays have wrong rank")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractViolation("features and labels must have equal length")

    def __len__(self) -> int:
        return self.labels.shape[0]


def phase_centroids(spec: WorkflowSpec, seed: int) -> np.ndarray:
    """Unit-norm phase centroids, orthogonal except for the confusable pairs.

    Starts from an orthonormal frame and rotates each pair's second
    centroid toward the first inside their shared plane, which fixes the
    pairwise cosine exactly while leaving all other inner products zero.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _DOMAIN_CENTROIDS])))
    a = rng.normal(size=(spec.feature_dim, spec.num_phases))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    cents = np.ascontiguousarray(q.T)
    cos_a = spec.confusable_cosine
    sin_a = math.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    for a_idx, b_idx in spec.confusable_pairs:
        cents[b_idx] = cos_a * cents[a_idx] + sin_a * cents[b_idx]
    return cents


def _sample_order(spec: WorkflowSpec, rng) -> list:
    order = [0]
    for p in range(1, spec.num_phases - 1):
        if spec.skip_prob == 0.0 or rng.random() >= spec.skip_prob:
            order.append(p)
    order.append(spec.num_phases - 1)
    return order


def _sample_durations(spec: WorkflowSpec, order, rng) -> list:
    out = []
    for p in order:
        factor = math.exp(spec.duration_jitter * rng.standard_normal()) if spec.duration_jitter else 1.0
        out.append(max(1, int(round(spec.mean_durations[p] * factor))))
    return out


def _blended_base(spec: WorkflowSpec, order, durations, cents) -> tuple:
    """Per-frame base features (pre-noise) and labels for one sequence.

    Each phase boundary gets a ramp window of `ramp_frames` frames
    centered on it; features inside the window interpolate linearly
    between the adjacent centroids while labels switch exactly at the
    boundary. A frame claimed by both of its segment's boundaries (only
    possible when a segment is shorter than the ramp) goes to the nearer
    one, earlier boundary on ties.
    """
    total = int(sum(durations))
    labels = np.repeat(np.asarray(order, dtype=np.int64), durations)
    base = cents[labels].copy()
    ramp = spec.ramp_frames
    if ramp == 0 or len(order) < 2:
        return base, labels
    h1 = ramp // 2
    h2 = ramp - h1
    starts = np.concatenate([[0], np.cumsum(durations)]).astype(int)
    # owner[t] = index of the boundary whose window claims frame t
    owner = np.full(total, -1, dtype=np.int64)
    owner_dist = np.full(total, np.iinfo(np.int64).max, dtype=np.int64)
    n_bounds = len(order) - 1
    for j in range(n_bounds):
        b = starts[j + 1]
        lo = max(b - h1, starts[j])
        hi = min(b + h2, starts[j + 2])
        for t in range(lo, hi):
            dist = (b - 1 - t) if t < b else (t - b)
            if dist < owner_dist[t]:
                owner[t] = j
                owner_dist[t] = dist
    for j in range(n_bounds):
        b = starts[j + 1]
        ts = np.nonzero(owner == j)[0]
        if ts.size == 0:
            continue
        lam = (ts - (b - h1) + 0.5) / ramp
        c_old = cents[order[j]]
        c_new = cents[order[j + 1]]
        base[ts] = np.outer(1.0 - lam, c_old) + np.outer(lam, c_new)
    return base, labels


def generate(spec: WorkflowSpec, n_sequences: int, seed: int) -> list:
    """Deterministically generate labeled sequences for (spec, seed)."""
    spec.validate()
    if n_sequences < 1:
        raise ConfigError("n_sequences must be >= 1")
    cents = phase_centroids(spec, seed)
    out = []
    for i in range(n_sequences):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, _DOMAIN_SEQUENCE, i]))
        )
        order = _sample_order(spec, rng)
        durations = _sample_durations(spec, order, rng)
        base, labels = _blended_base(spec, order, durations, cents)
        if spec.noise_sigma > 0:
            feats = base + spec.noise_sigma * rng.standard_normal(base.shape)
        else:
            feats = base
        out.append(LabeledSequence(id=f"seq{i:04d}", features=feats, labels=labels))
    return out


def split(sequences, train_fraction: float, seed: int) -> tuple:
    """Sequence-level train/test split, deterministic per seed."""
    if not (0.0 < train_fraction < 1.0):
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    n = len(sequences)
    if n < 2:
        raise ConfigError("need at least 2 sequences to split")
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _DOMAIN_SPLIT])))
    perm = rng.permutation(n)
    train_idx = sorted(int(i) for i in perm[:n_train])
    test_idx = sorted(int(i) for i in perm[n_train:])
    return [sequences[i] for i in train_idx], [sequences[i] for i in test_idx]


def save_dataset(sequences, spec: WorkflowSpec, seed: int, out_dir) -> None:
    """One CSV per sequence plus a JSON manifest holding spec and seed."""
    os.makedirs(out_dir, exist_ok=True)
    d = spec.feature_dim
    header = ["sequence_id", "t", "label"] + [f"f{i}" for i in range(d)]
    files = []
    for seq in sequences:
        fname = f"{seq.id}.csv"
        files.append(fname)
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(len(seq)):
                row = [seq.id, t, int(seq.labels[t])]
                row.extend(repr(float(v)) for v in seq.features[t])
                writer.writerow(row)
    manifest = {
        "spec": spec.to_dict(),
        "seed": seed,
        "sequences": [
            {"id": seq.id, "file": files[i], "frames": len(seq)}
            for i, seq in enumerate(sequences)
        ],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir):
    """Read back (sequences, spec, seed) written by save_dataset.

    The same CSV schema also serves as the ingestion path for real
    precomputed features from any upstream feature extractor.
    """
    manifest_path = os.path.join(in_dir, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read dataset manifest {manifest_path}: {e}") from e
    spec = WorkflowSpec.from_dict(manifest["spec"])
    sequences = []
    for entry in manifest["sequences"]:
        path = os.path.join(in_dir, entry["file"])
        feats, labels = [], []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if len(header) != 3 + spec.feature_dim:
                raise ConfigError(f"{path}: column count does not match feature_dim")
            for row in reader:
                labels.append(int(row[2]))
                feats.append([float(v) for v in row[3:]])
        sequences.append(
            LabeledSequence(
                id=entry["id"],
                features=np.asarray(feats, dtype=np.float64).reshape(len(labels), spec.feature_dim),
                labels=np.asarray(labels, dtype=np.int64),
            )
        )
    return sequences, spec, manifest["seed"]
