"""Turning many predictions into one CT-level diagnosis.

The sub-volume route filters votes through two confidence thresholds before
taking the mode; the slice route filters slice predictions by healthy-score
and location, or assembles them into a fixed-size (96, 3) probability matrix
for a trainable head.  Ties always resolve to COVID: a false negative is the
costlier mistake, so ambiguity favors sensitivity (configurable).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyPredictionsError, MalformedRecordError
from .ingest import (
    KIND_SUBVOLUME,
    PredictionRecord,
    canonical_prob_triple,
    format_prob,
)
from .labels import COVID, HEALTHY, LESION
from .preprocess import depth_indices
from .validation import as_prob_matrix, check_fraction, check_probability

#: Number of rows of an assembled per-patient feature matrix.
FEATURE_ROWS = 96


@dataclass(frozen=True)
class VoteThresholds:
    """Confidence cutoffs of the filtered vote.

    Non-COVID votes below ``t_noncovid`` are discarded first; then votes of
    either label below ``t_all`` are discarded.
    """

    t_noncovid: float = 0.5
    t_all: float = 0.5

    def __post_init__(self):
        check_probability(self.t_noncovid, "t_noncovid")
        check_probability(self.t_all, "t_all")


@dataclass(frozen=True)
class SliceFilterConfig:
    """Healthy-score band and central-slice preference for slice filtering."""

    lo: float = 0.2
    hi: float = 0.8
    central_fraction: float = 0.5

    def __post_init__(self):
        check_probability(self.lo, "lo")
        check_probability(self.hi, "hi")
        if self.lo > self.hi:
            raise ValueError(f"lo ({self.lo}) must not exceed hi ({self.hi})")
        check_fraction(self.central_fraction, "central_fraction")


def _mode_label(labels: Iterable[str], tie_break: str) -> str:
    counts = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    best = max(counts.values())
    winners = [label for label, c in counts.items() if c == best]
    if len(winners) == 1:
        return winners[0]
    return tie_break if tie_break in winners else sorted(winners)[0]


def majority_vote(labels: Sequence[str], tie_break: str = COVID) -> str:
    """Most frequent label; ties resolve to ``tie_break``."""
    if not labels:
        raise EmptyPredictionsError("cannot vote on an empty label list")
    return _mode_label(labels, tie_break)


def threshold_vote(preds: Sequence[tuple[str, float]],
                   thresholds: VoteThresholds = VoteThresholds(),
                   tie_break: str = COVID) -> str:
    """Two-threshold filtered majority vote over (label, confidence) pairs.

    Non-COVID votes with confidence below ``t_noncovid`` are ignored, then
    any vote below ``t_all`` is ignored; the most frequent surviving label
    wins.  If filtering eliminates everything, the unfiltered majority is
    used instead, so a diagnosis is always produced.
    """
    if not preds:
        raise EmptyPredictionsError("cannot vote on an empty prediction list")
    survivors = [
        label for label, confidence in preds
        if not (label != COVID and confidence < thresholds.t_noncovid)
        and confidence >= thresholds.t_all
    ]
    if not survivors:
        survivors = [label for label, _ in preds]
    return _mode_label(survivors, tie_break)


def pool_ensemble(per_model_preds: Mapping[str, Sequence[tuple[str, float]]],
                  thresholds: VoteThresholds = VoteThresholds(),
                  tie_break: str = COVID) -> str:
    """Concatenate every model's predictions into one pool, then vote.

    Pooling before thresholding makes a single-model ensemble degenerate
    exactly to ``threshold_vote``.
    """
    pooled = []
    for model_id in sorted(per_model_preds):
        pooled.extend(per_model_preds[model_id])
    if not pooled:
        raise EmptyPredictionsError("no model contributed any prediction")
    return threshold_vote(pooled, thresholds, tie_break)


def filter_slices(slice_probs, cfg: SliceFilterConfig = SliceFilterConfig(),
                  ) -> list[tuple[int, str]]:
    """Keep only confidently-labeled slices.

    A slice is kept as HEALTHY when its healthy score is >= ``hi`` and it
    lies in the central band of the volume (ends of a scan look healthy only
    because they miss the lungs, so peripheral healthy calls are distrusted).
    It is kept as LESION when the healthy score is <= ``lo``.  Everything
    else is dropped.  Returns (slice_index, outcome) pairs in slice order.
    """
    probs = as_prob_matrix(slice_probs)
    n = probs.shape[0]
    band_lo = n * (1.0 - cfg.central_fraction) / 2.0
    band_hi = n * (1.0 + cfg.central_fraction) / 2.0
    kept = []
    for i in range(n):
        p_healthy = probs[i, 2]
        if p_healthy >= cfg.hi and band_lo <= i <= band_hi:
            kept.append((i, HEALTHY))
        elif p_healthy <= cfg.lo:
            kept.append((i, LESION))
    return kept


def assemble_features(slice_probs, n_rows: int = FEATURE_ROWS) -> np.ndarray:
    """Resample per-slice probability rows to a fixed (n_rows, 3) matrix.

    Rows are repeated or dropped nearest-neighbor style, never blended, so
    each output row remains a valid distribution.  Flatten row-major when
    feeding a classifier head.
    """
    probs = as_prob_matrix(slice_probs)
    return probs[depth_indices(probs.shape[0], n_rows)]


def votes_from_records(records: Iterable[PredictionRecord],
                       ) -> dict[str, dict[str, list[tuple[str, float]]]]:
    """Group SUBVOLUME records as patient -> model -> (label, confidence) list."""
    grouped: dict[str, dict[str, list[tuple[str, float]]]] = {}
    for rec in records:
        if rec.kind != KIND_SUBVOLUME:
            continue
        grouped.setdefault(rec.patient_id, {}).setdefault(rec.model_id, []).append(
            (rec.label, rec.confidence)
        )
    return grouped


# ---------------------------------------------------------------------------
# feature files: one "patient_id,row,p_covid,p_pneumonia,p_healthy" per line


def write_features(features: Mapping[str, np.ndarray], file) -> None:
    """Write per-patient feature matrices, sorted by patient then row."""
    with open(file, "w", encoding="ascii", newline="\n") as fh:
        for patient_id in sorted(features):
            if "," in patient_id or "\n" in patient_id or not patient_id:
                raise ValueError(f"invalid patient id {patient_id!r}")
            matrix = as_prob_matrix(features[patient_id])
            for row_index in range(matrix.shape[0]):
                triple = canonical_prob_triple(matrix[row_index])
                fh.write(
                    f"{patient_id},{row_index},"
                    f"{format_prob(triple[0])},{format_prob(triple[1])},"
                    f"{format_prob(triple[2])}\n"
                )


def read_features(file) -> dict[str, np.ndarray]:
    """Read a feature file back into patient -> (n_rows, 3) matrices."""
    rows: dict[str, dict[int, tuple[float, float, float]]] = {}
    with open(file, "r", encoding="ascii") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 5:
                raise MalformedRecordError(
                    f"expected 5 comma-separated fields, got {len(fields)}", line_number
                )
            try:
                row_index = int(fields[1])
                triple = (float(fields[2]), float(fields[3]), float(fields[4]))
            except ValueError as exc:
                raise MalformedRecordError(str(exc), line_number) from None
            per_patient = rows.setdefault(fields[0], {})
            if row_index in per_patient:
                raise MalformedRecordError(
                    f"duplicate row {row_index} for patient {fields[0]!r}", line_number
                )
            per_patient[row_index] = triple
    features = {}
    for patient_id, per_patient in rows.items():
        count = max(per_patient) + 1
        missing = [i for i in range(count) if i not in per_patient]
        if missing:
            raise MalformedRecordError(
                f"patient {patient_id!r} is missing feature rows {missing[:5]}"
            )
        features[patient_id] = as_prob_matrix(
            [per_patient[i] for i in range(count)],
            name=f"features of {patient_id}",
        )
    return features
