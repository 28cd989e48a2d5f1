"""Classifier backends that stand in for the external deep networks.

The pipeline never runs neural inference itself; it consumes predictions
through the two-method contract below.  FilePredictor replays stored model
outputs from a prediction file.  SyntheticPredictor generates plausible
outputs from ground-truth labels so the whole aggregation stack can be
exercised end to end: COVID volumes emit covid-dominant slice vectors inside
a central band (lesions cluster mid-volume; the apical and basal slices of
any scan look healthy), other volumes emit pneumonia or healthy vectors, and
Gaussian logit noise controls task difficulty.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol

import numpy as np

from .errors import (
    IncompleteSliceSetError,
    MissingPredictionError,
    RecordInvariantError,
)
from .ingest import KIND_SLICE, KIND_SUBVOLUME, PredictionRecord
from .labels import COVID, NON_COVID, check_ct_label
from .sampling import TtaPlan, inference_subvolumes, tta_variants
from .validation import check_fraction, check_probability


class VolumePredictor(Protocol):
    """What any sub-volume / slice classifier must provide."""

    def predict_subvolume(self, volume_key: str, plan: TtaPlan) -> tuple[str, float]:
        """Binary diagnosis and confidence for one (sub-volume, flips) input."""
        ...

    def predict_slices(self, volume_key: str) -> np.ndarray:
        """(n_slices, 3) matrix of per-slice class probabilities."""
        ...


def stable_hash(text: str) -> int:
    """Platform-independent 64-bit hash for RNG key material."""
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


# ---------------------------------------------------------------------------
# file-backed replay


class FilePredictor:
    """Replays the stored outputs of one external model.

    Lookups are pure: the record list is indexed once at construction and
    repeated queries return identical values.
    """

    def __init__(self, records: Iterable[PredictionRecord], model_id: str):
        self.model_id = model_id
        self._subvolume = {}
        self._slices = {}
        for rec in records:
            if rec.model_id != model_id:
                continue
            if rec.kind == KIND_SUBVOLUME:
                key = (rec.patient_id, rec.subvolume_start, rec.flips)
                if key in self._subvolume:
                    raise RecordInvariantError(
                        f"duplicate SUBVOLUME record for {key} of model {model_id}"
                    )
                self._subvolume[key] = (rec.label, rec.confidence)
            else:
                per_patient = self._slices.setdefault(rec.patient_id, {})
                if rec.slice_index in per_patient:
                    raise RecordInvariantError(
                        f"duplicate SLICE record for {rec.patient_id}"
                        f"[{rec.slice_index}] of model {model_id}"
                    )
                per_patient[rec.slice_index] = rec.probs

    def predict_subvolume(self, volume_key: str, plan: TtaPlan) -> tuple[str, float]:
        key = (volume_key, plan.subvolume.start, plan.flips)
        try:
            return self._subvolume[key]
        except KeyError:
            raise MissingPredictionError(
                f"no SUBVOLUME prediction for patient {volume_key!r}, "
                f"start {plan.subvolume.start}, flips {plan.flips}"
            ) from None

    def predict_slices(self, volume_key: str, n_slices: int | None = None) -> np.ndarray:
        per_patient = self._slices.get(volume_key)
        if not per_patient:
            raise MissingPredictionError(
                f"no SLICE predictions for patient {volume_key!r}"
            )
        count = n_slices if n_slices is not None else max(per_patient) + 1
        missing = [i for i in range(count) if i not in per_patient]
        extra = [i for i in per_patient if i >= count]
        if missing or extra:
            raise IncompleteSliceSetError(
                f"patient {volume_key!r}: expected slice indices 0..{count - 1}, "
                f"missing {missing[:5]}, unexpected {extra[:5]}"
            )
        return np.array([per_patient[i] for i in range(count)], dtype=np.float64)


# ---------------------------------------------------------------------------
# synthetic generative predictor


@dataclass(frozen=True)
class SyntheticPredictorConfig:
    """Generative knobs of the synthetic predictor.

    ``lesion_prob_covid`` / ``lesion_prob_noncovid`` are the per-slice
    chances that an in-band slice of a COVID / non-COVID volume shows lesion
    signal; ``noise_sigma`` is the std-dev of the additive logit noise and
    ``central_band`` the fraction of slices around the volume center where
    lesions may appear.
    """

    lesion_prob_covid: float = 0.9
    lesion_prob_noncovid: float = 0.1
    noise_sigma: float = 0.0
    seed: int = 0
    central_band: float = 0.5

    def __post_init__(self):
        check_probability(self.lesion_prob_covid, "lesion_prob_covid")
        check_probability(self.lesion_prob_noncovid, "lesion_prob_noncovid")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        check_fraction(self.central_band, "central_band")


# base logits per slice state, in (covid, pneumonia, healthy) column order
_LOGITS_COVID_LESION = np.array([2.5, -1.25, -1.25])
_LOGITS_PNEUMONIA_LESION = np.array([-1.25, 2.5, -1.25])
_LOGITS_HEALTHY = np.array([-1.25, -1.25, 2.5])

_LOGIT_CLIP = 12.0


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class SyntheticPredictor:
    """Generates predictions from ground truth; bit-reproducible per seed.

    ``patients`` maps patient_id -> (label, n_slices).  All randomness is
    keyed on (seed, model_id, patient_id) so outputs do not depend on query
    order, and with ``noise_sigma=0`` they are a deterministic function of
    the label and slice position alone when the lesion probabilities are
    0 or 1.
    """

    def __init__(self, config: SyntheticPredictorConfig,
                 patients: Mapping[str, tuple[str, int]],
                 model_id: str = "synthetic"):
        self.config = config
        self.model_id = model_id
        self.patients = {}
        for patient_id, (label, n_slices) in patients.items():
            check_ct_label(label)
            if n_slices < 1:
                raise ValueError(f"patient {patient_id!r} has {n_slices} slices")
            self.patients[patient_id] = (label, int(n_slices))

    def _lookup(self, volume_key: str) -> tuple[str, int]:
        try:
            return self.patients[volume_key]
        except KeyError:
            raise MissingPredictionError(f"unknown patient {volume_key!r}") from None

    def _lesion_prob(self, label: str) -> float:
        return (self.config.lesion_prob_covid if label == COVID
                else self.config.lesion_prob_noncovid)

    def _rng(self, *key: int) -> np.random.Generator:
        material = [self.config.seed, stable_hash(self.model_id)] + list(key)
        return np.random.default_rng(np.random.SeedSequence(material))

    def predict_subvolume(self, volume_key: str, plan: TtaPlan) -> tuple[str, float]:
        label, _ = self._lookup(volume_key)
        p_covid = self._lesion_prob(label)
        sigma = self.config.noise_sigma
        if sigma > 0:
            rng = self._rng(stable_hash(volume_key), 1,
                            plan.subvolume.start, plan.flips.bits)
            if 0.0 < p_covid < 1.0:
                logit = math.log(p_covid / (1.0 - p_covid))
            else:
                logit = math.copysign(_LOGIT_CLIP, p_covid - 0.5)
            logit = min(max(logit, -_LOGIT_CLIP), _LOGIT_CLIP)
            p_covid = 1.0 / (1.0 + math.exp(-(logit + sigma * rng.normal())))
        if p_covid >= 0.5:
            return COVID, p_covid
        return NON_COVID, 1.0 - p_covid

    def predict_slices(self, volume_key: str) -> np.ndarray:
        label, n = self._lookup(volume_key)
        rng = self._rng(stable_hash(volume_key), 2)
        center = (n - 1) / 2.0
        in_band = np.abs(np.arange(n) - center) <= self.config.central_band * n / 2.0
        lesioned = in_band & (rng.random(n) < self._lesion_prob(label))
        lesion_logits = (_LOGITS_COVID_LESION if label == COVID
                         else _LOGITS_PNEUMONIA_LESION)
        logits = np.where(lesioned[:, None], lesion_logits, _LOGITS_HEALTHY)
        if self.config.noise_sigma > 0:
            logits = logits + self.config.noise_sigma * rng.normal(size=(n, 3))
        return _softmax_rows(logits)


# ---------------------------------------------------------------------------
# synthetic dataset emission


def make_roster(n_covid: int, n_noncovid: int, min_slices: int, max_slices: int,
                seed: int) -> dict[str, tuple[str, int]]:
    """Invent a patient roster with shuffled labels and random slice counts."""
    if n_covid < 0 or n_noncovid < 0 or n_covid + n_noncovid == 0:
        raise ValueError("need at least one patient")
    if not 1 <= min_slices <= max_slices:
        raise ValueError(f"bad slice range [{min_slices}, {max_slices}]")
    rng = np.random.default_rng(seed)
    labels = [COVID] * n_covid + [NON_COVID] * n_noncovid
    rng.shuffle(labels)
    counts = rng.integers(min_slices, max_slices + 1, size=len(labels))
    width = len(str(len(labels) - 1))
    return {
        f"case{i:0{width}d}": (labels[i], int(counts[i]))
        for i in range(len(labels))
    }


def emit_subvolume_records(predictor: SyntheticPredictor) -> list[PredictionRecord]:
    """All SUBVOLUME records one model would produce over its roster:
    every inference plan of every patient, times the 8 flip variants."""
    records = []
    for patient_id in sorted(predictor.patients):
        _, n_slices = predictor.patients[patient_id]
        for plan in inference_subvolumes(n_slices):
            for tta in tta_variants(plan):
                label, confidence = predictor.predict_subvolume(patient_id, tta)
                records.append(PredictionRecord(
                    patient_id=patient_id,
                    model_id=predictor.model_id,
                    kind=KIND_SUBVOLUME,
                    subvolume_start=plan.start,
                    flips=tta.flips,
                    label=label,
                    confidence=confidence,
                ))
    return records


def emit_slice_records(predictor: SyntheticPredictor) -> list[PredictionRecord]:
    """All SLICE records one model would produce over its roster."""
    records = []
    for patient_id in sorted(predictor.patients):
        probs = predictor.predict_slices(patient_id)
        for i in range(probs.shape[0]):
            records.append(PredictionRecord(
                patient_id=patient_id,
                model_id=predictor.model_id,
                kind=KIND_SLICE,
                slice_index=i,
                probs=tuple(probs[i]),
            ))
    return records
