"""Binary evaluation with COVID as the positive class.

Macro-F1 is the unweighted mean of the two per-class F1 scores, computed
with the 0/0 -> 0 convention so degenerate predictors (e.g. all-COVID)
still evaluate.  Fold construction shuffles within each class and deals
round-robin, keeping per-fold class counts within one of each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import (
    EmptyEvaluationError,
    KeyMismatchError,
    MalformedRecordError,
    TooFewSamplesError,
)
from .labels import COVID

REPORT_METRIC_KEYS = (
    "tp", "fp", "fn", "tn",
    "precision_covid", "recall_covid",
    "f1_covid", "f1_noncovid", "macro_f1",
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with COVID as positive: tp/fn split the true COVID cases."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: Mapping[str, str], truth: Mapping[str, str]) -> ConfusionMatrix:
    """Tally predictions against ground truth over identical patient sets."""
    missing = sorted(set(pred) - set(truth))
    extra = sorted(set(truth) - set(pred))
    if missing or extra:
        raise KeyMismatchError(
            f"patients only in predictions: {missing[:5]}; "
            f"only in truth: {extra[:5]}"
        )
    tp = fp = fn = tn = 0
    for patient_id, predicted in pred.items():
        actual = truth[patient_id]
        if actual == COVID:
            if predicted == COVID:
                tp += 1
            else:
                fn += 1
        else:
            if predicted == COVID:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def _precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def macro_f1(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(precision_covid, recall_covid, macro_f1) from a confusion matrix."""
    if cm.total == 0:
        raise EmptyEvaluationError("confusion matrix is empty")
    precision_covid, recall_covid, f1_covid = _precision_recall_f1(cm.tp, cm.fp, cm.fn)
    _, _, f1_nc = _precision_recall_f1(cm.tn, cm.fn, cm.fp)
    return precision_covid, recall_covid, (f1_covid + f1_nc) / 2.0


def class_f1_scores(cm: ConfusionMatrix) -> tuple[float, float]:
    """(f1_covid, f1_noncovid), same conventions as ``macro_f1``."""
    if cm.total == 0:
        raise EmptyEvaluationError("confusion matrix is empty")
    _, _, f1_covid = _precision_recall_f1(cm.tp, cm.fp, cm.fn)
    _, _, f1_nc = _precision_recall_f1(cm.tn, cm.fn, cm.fp)
    return f1_covid, f1_nc


def stratified_folds(labels: Mapping[str, str], k: int, seed: int) -> dict[str, int]:
    """Assign each patient a fold in [0, k), preserving class balance.

    Patients of each class are shuffled with the seeded generator and dealt
    round-robin, so per-fold class counts differ by at most one and equal
    (labels, k, seed) always reproduce the same assignment.
    """
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    by_class: dict[str, list[str]] = {}
    for patient_id in sorted(labels):
        by_class.setdefault(labels[patient_id], []).append(patient_id)
    for label, members in sorted(by_class.items()):
        if len(members) < k:
            raise TooFewSamplesError(
                f"class {label!r} has {len(members)} members, fewer than k={k}"
            )
    rng = np.random.default_rng(seed)
    assignment = {}
    for label in sorted(by_class):
        members = by_class[label]
        order = rng.permutation(len(members))
        for position, member_index in enumerate(order):
            assignment[members[member_index]] = position % k
    return assignment


def write_folds(assignment: Mapping[str, int], file) -> None:
    """Write a fold assignment, one "patient_id,fold" per line, sorted."""
    with open(file, "w", encoding="ascii", newline="\n") as fh:
        for patient_id in sorted(assignment):
            fh.write(f"{patient_id},{int(assignment[patient_id])}\n")


def read_folds(file) -> dict[str, int]:
    assignment = {}
    with open(file, "r", encoding="ascii") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            try:
                patient_id, fold = fields[0], int(fields[1])
            except (IndexError, ValueError) as exc:
                raise MalformedRecordError(str(exc), line_number) from None
            if len(fields) != 2 or not patient_id or fold < 0:
                raise MalformedRecordError(f"bad fold line {line!r}", line_number)
            assignment[patient_id] = fold
    return assignment


# ---------------------------------------------------------------------------
# report format: "key=value" lines, counts as integers, metrics 6 decimals


def report(cm: ConfusionMatrix, metadata: Mapping[str, str] | None = None) -> str:
    """Render a machine-parseable evaluation report.

    Metadata lines (sorted by key) come first, then the fixed metric keys.
    Metadata keys must not collide with metric keys.
    """
    f1_covid, f1_nc = class_f1_scores(cm)
    precision_covid, recall_covid, macro = macro_f1(cm)
    values = {
        "tp": str(cm.tp),
        "fp": str(cm.fp),
        "fn": str(cm.fn),
        "tn": str(cm.tn),
        "precision_covid": f"{precision_covid:.6f}",
        "recall_covid": f"{recall_covid:.6f}",
        "f1_covid": f"{f1_covid:.6f}",
        "f1_noncovid": f"{f1_nc:.6f}",
        "macro_f1": f"{macro:.6f}",
    }
    lines = []
    for key in sorted(metadata or {}):
        if key in REPORT_METRIC_KEYS:
            raise ValueError(f"metadata key {key!r} collides with a metric key")
        value = str((metadata or {})[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"invalid metadata entry {key!r}")
        lines.append(f"{key}={value}")
    lines.extend(f"{key}={values[key]}" for key in REPORT_METRIC_KEYS)
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> tuple[ConfusionMatrix, dict[str, str], dict[str, float]]:
    """Invert ``report``: (confusion matrix, metadata, metric values)."""
    metadata: dict[str, str] = {}
    metrics: dict[str, float] = {}
    counts: dict[str, int] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedRecordError(f"expected key=value, got {line!r}", line_number)
        if key in ("tp", "fp", "fn", "tn"):
            counts[key] = int(value)
        elif key in REPORT_METRIC_KEYS:
            metrics[key] = float(value)
        else:
            metadata[key] = value
    missing = [key for key in REPORT_METRIC_KEYS if key not in counts and key not in metrics]
    if missing:
        raise MalformedRecordError(f"report is missing keys {missing}")
    cm = ConfusionMatrix(counts["tp"], counts["fp"], counts["fn"], counts["tn"])
    return cm, metadata, metrics
