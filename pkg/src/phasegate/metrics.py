"""Frame-level evaluation: accuracy, per-class rates, and jitter counts.

All rates are reported on a 0..100 percent scale. Macro averages run
over classes that actually occur in the ground truth; a class present in
the ground truth but never predicted contributes precision 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass
class ClassMetrics:
    class_id: int
    present: bool
    support: int
    predicted: int
    precision: float
    recall: float
    f1: float
    jaccard: float


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_jaccard: float
    per_class: list
    confusion: np.ndarray
    jitter_pred: int
    jitter_gt: int
    jitter_ratio: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "macro_jaccard": self.macro_jaccard,
            "per_class": [
                {
                    "class": c.class_id,
                    "present": c.present,
                    "support": c.support,
                    "predicted": c.predicted,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "jaccard": c.jaccard,
                }
                for c in self.per_class
            ],
            "confusion": self.confusion.tolist(),
            "jitter_pred": self.jitter_pred,
            "jitter_gt": self.jitter_gt,
            "jitter_ratio": self.jitter_ratio,
        }


def _as_sequence_list(x):
    if isinstance(x, (list, tuple)) and (len(x) == 0 or np.ndim(x[0]) >= 1):
        return [np.asarray(s, dtype=np.int64) for s in x]
    return [np.asarray(x, dtype=np.int64)]


def _jitter(seqs) -> int:
    total = 0
    for s in seqs:
        if len(s) > 1:
            total += int((s[1:] != s[:-1]).sum())
    return total


def evaluate(preds, gts, num_classes: int | None = None) -> MetricsReport:
    """Pooled frame-level metrics over one or more sequences.

    preds and gts are label arrays or lists of per-sequence label arrays;
    corresponding entries must have equal length.
    """
    pred_seqs = _as_sequence_list(preds)
    gt_seqs = _as_sequence_list(gts)
    if len(pred_seqs) != len(gt_seqs):
        raise ContractViolation("prediction and ground-truth sequence counts differ")
    for p, g in zip(pred_seqs, gt_seqs):
        if p.shape != g.shape:
            raise ContractViolation("prediction and ground-truth lengths differ")
    all_p = np.concatenate(pred_seqs) if pred_seqs else np.zeros(0, dtype=np.int64)
    all_g = np.concatenate(gt_seqs) if gt_seqs else np.zeros(0, dtype=np.int64)
    if all_g.size == 0:
        raise ContractViolation("nothing to evaluate")
    if num_classes is None:
        num_classes = int(max(all_p.max(), all_g.max())) + 1
    if all_p.min() < 0 or all_g.min() < 0 or max(all_p.max(), all_g.max()) >= num_classes:
        raise ContractViolation("labels out of range for the class count")

    C = num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (all_g, all_p), 1)

    total = int(confusion.sum())
    accuracy = 100.0 * float(np.trace(confusion)) / total

    per_class = []
    macro = {"precision": [], "recall": [], "f1": [], "jaccard": []}
    for c in range(C):
        tp = int(confusion[c, c])
        support = int(confusion[c].sum())
        predicted = int(confusion[:, c].sum())
        fp = predicted - tp
        fn = support - tp
        precision = 100.0 * tp / predicted if predicted > 0 else 0.0
        recall = 100.0 * tp / support if support > 0 else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        denom = tp + fp + fn
        jaccard = 100.0 * tp / denom if denom > 0 else 0.0
        present = support > 0
        per_class.append(
            ClassMetrics(c, present, support, predicted, precision, recall, f1, jaccard)
        )
        if present:
            macro["precision"].append(precision)
            macro["recall"].append(recall)
            macro["f1"].append(f1)
            macro["jaccard"].append(jaccard)

    jitter_pred = _jitter(pred_seqs)
    jitter_gt = _jitter(gt_seqs)
    return MetricsReport(
        accuracy=accuracy,
        macro_precision=float(np.mean(macro["precision"])),
        macro_recall=float(np.mean(macro["recall"])),
        macro_f1=float(np.mean(macro["f1"])),
        macro_jaccard=float(np.mean(macro["jaccard"])),
        per_class=per_class,
        confusion=confusion,
        jitter_pred=jitter_pred,
        jitter_gt=jitter_gt,
        jitter_ratio=jitter_pred / max(jitter_gt, 1),
    )


def write_report(report: MetricsReport, out_dir, prefix: str = "metrics") -> None:
    """metrics JSON + per-class CSV + confusion CSV under out_dir."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{prefix}.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(
        os.path.join(out_dir, f"{prefix}_per_class.csv"), "w", encoding="utf-8", newline=""
    ) as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["class", "present", "support", "predicted", "precision", "recall", "f1", "jaccard"]
        )
        for c in report.per_class:
            writer.writerow(
                [
                    c.class_id,
                    int(c.present),
                    c.support,
                    c.predicted,
                    repr(c.precision),
                    repr(c.recall),
                    repr(c.f1),
                    repr(c.jaccard),
                ]
            )
    with open(
        os.path.join(out_dir, f"{prefix}_confusion.csv"), "w", encoding="utf-8", newline=""
    ) as fh:
        writer = csv.writer(fh)
        C = report.confusion.shape[0]
        writer.writerow(["gt\\pred"] + [str(c) for c in range(C)])
        for r in range(C):
            writer.writerow([str(r)] + [int(v) for v in report.confusion[r]])
