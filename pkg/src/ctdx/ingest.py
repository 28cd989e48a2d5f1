"""Volume ingestion and the text formats that bridge to external models.

A CT volume arrives as a directory of 8-bit grayscale slice images.  Slices
are ordered by natural-numeric filename sort, so ``10.jpg`` follows ``2.jpg``.
External deep models communicate with the pipeline exclusively through
line-delimited prediction files (see PredictionRecord), which keeps every
aggregation stage replayable without any network inference.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import (
    EmptyDirectoryError,
    MalformedRecordError,
    MixedDimensionsError,
    NonPositiveWindowError,
    RecordInvariantError,
    UndecodableImageError,
)
from .labels import COVID, NON_COVID, check_ct_label
from .validation import PROB_ATOL, as_volume_array, check_probability

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff"}

KIND_SUBVOLUME = "SUBVOLUME"
KIND_SLICE = "SLICE"


# ---------------------------------------------------------------------------
# natural filename ordering


_DIGIT_RUN = re.compile(r"(\d+)")


def natural_sort_key(name: str):
    """Sort key comparing digit runs as integers, with the raw string as
    tie-break (so '01.jpg' and '1.jpg' still have a unique order)."""
    parts = []
    for chunk in _DIGIT_RUN.split(name):
        if chunk.isdigit():
            parts.append((0, int(chunk), ""))
        elif chunk:
            parts.append((1, 0, chunk))
    return (tuple(parts), name)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class WindowSpec:
    """HU display window: ``level`` is the center, ``window`` the full width.

    Defaults match the 350/1150 convention of the slice exports this
    pipeline targets.  Vendors disagree on which number is width and which
    is center, so both are configurable rather than hard-coded.
    """

    window: float = 350.0
    level: float = 1150.0

    def __post_init__(self):
        if not (self.window > 0):
            raise NonPositiveWindowError(f"window width must be > 0, got {self.window}")


@dataclass
class Volume:
    """An ordered stack of slices for one patient.

    ``slices`` has shape (n_slices, height, width) with intensities in [0, 1].
    """

    patient_id: str
    slices: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.slices = as_volume_array(self.slices, name=f"volume {self.patient_id}")
        if self.label is not None:
            check_ct_label(self.label)

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]

    @property
    def height(self) -> int:
        return self.slices.shape[1]

    @property
    def width(self) -> int:
        return self.slices.shape[2]


# ---------------------------------------------------------------------------
# windowing


def apply_window(raw_hu, spec: WindowSpec = WindowSpec()) -> np.ndarray:
    """Map HU values linearly onto [0, 1], clipping outside the window.

    hu == level maps to 0.5; hu <= level - window/2 maps to 0 and
    hu >= level + window/2 maps to 1.  Accepts a 2D slice or a 3D stack
    and returns an array of the same shape.
    """
    arr = np.asarray(raw_hu, dtype=np.float64)
    lo = spec.level - spec.window / 2.0
    out = (arr - lo) / spec.window
    return np.clip(out, 0.0, 1.0)


def volume_from_hu(patient_id: str, hu_stack, spec: WindowSpec = WindowSpec(),
                   label: str | None = None) -> Volume:
    """Build a Volume from a raw (n, h, w) stack of HU values."""
    arr = np.asarray(hu_stack, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"HU stack must be 3D, got shape {arr.shape}")
    return Volume(patient_id, apply_window(arr, spec), label)


# ---------------------------------------------------------------------------
# slice directories


def list_slice_files(dir_path) -> list[Path]:
    """Image files of a slice directory in canonical (natural-sort) order."""
    root = Path(dir_path)
    if not root.is_dir():
        raise EmptyDirectoryError(f"{root} is not a directory")
    files = [p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS]
    if not files:
        raise EmptyDirectoryError(f"{root} contains no image files")
    return sorted(files, key=lambda p: natural_sort_key(p.name))


def count_slices(dir_path) -> int:
    """Number of slice images in a directory, without decoding them."""
    return len(list_slice_files(dir_path))


def load_volume(dir_path, labels: Mapping[str, str] | None = None) -> Volume:
    """Load one patient volume from a directory of slice images.

    The directory name is used as the patient id.  Slices are ordered by
    natural-numeric filename sort and rescaled from 8-bit to [0, 1].  If a
    ``labels`` map is given and contains the patient id, the label is
    attached to the returned Volume.

    Raises EmptyDirectoryError, UndecodableImageError or
    MixedDimensionsError on bad input.
    """
    root = Path(dir_path)
    files = list_slice_files(root)
    patient_id = root.name

    slices = []
    shape = None
    for path in files:
        try:
            with PILImage.open(path) as img:
                arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            raise UndecodableImageError(f"{path}: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise MixedDimensionsError(
                f"{path} has shape {arr.shape[::-1]} but earlier slices are {shape[::-1]}"
            )
        slices.append(arr)

    label = labels.get(patient_id) if labels else None
    return Volume(patient_id, np.stack(slices), label)


def write_volume(volume: Volume, dir_path) -> None:
    """Re-emit a volume as a directory of 8-bit grayscale PNG slices."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    width = len(str(max(volume.n_slices - 1, 1)))
    for i in range(volume.n_slices):
        pixels = np.round(volume.slices[i] * 255.0).astype(np.uint8)
        PILImage.fromarray(pixels, mode="L").save(root / f"{i:0{width}d}.png")


# ---------------------------------------------------------------------------
# prediction records


@dataclass(frozen=True)
class PredictionRecord:
    """One stored output of an external model.

    SUBVOLUME records carry a binary diagnosis for one (sub-volume, flip)
    inference: ``subvolume_start``, ``flips``, ``label`` and ``confidence``
    are set, ``slice_index`` and ``probs`` are None.  SLICE records carry a
    3-class probability vector for one slice: ``slice_index`` and ``probs``
    are set, the sub-volume fields are None.
    """

    patient_id: str
    model_id: str
    kind: str
    subvolume_start: int | None = None
    flips: tuple[bool, bool, bool] | None = None
    label: str | None = None
    confidence: float | None = None
    slice_index: int | None = None
    probs: tuple[float, float, float] | None = None

    def __post_init__(self):
        # normalize container fields so equality and hashing behave
        if self.flips is not None:
            object.__setattr__(self, "flips", tuple(bool(f) for f in self.flips))
        if self.probs is not None:
            object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if self.confidence is not None:
            object.__setattr__(self, "confidence", float(self.confidence))
        for name in ("patient_id", "model_id"):
            value = getattr(self, name)
            if not value or "," in value or "\n" in value:
                raise RecordInvariantError(f"invalid {name}: {value!r}")
        if self.kind == KIND_SUBVOLUME:
            if (self.subvolume_start is None or self.flips is None
                    or self.label is None or self.confidence is None):
                raise RecordInvariantError(
                    "SUBVOLUME record needs subvolume_start, flips, label and confidence"
                )
            if self.slice_index is not None or self.probs is not None:
                raise RecordInvariantError("SUBVOLUME record must not carry slice fields")
            if self.subvolume_start < 0:
                raise RecordInvariantError("subvolume_start must be >= 0")
            if len(self.flips) != 3:
                raise RecordInvariantError("flips must be a (h, v, d) triple")
            try:
                check_ct_label(self.label)
                check_probability(self.confidence, "confidence")
            except ValueError as exc:
                raise RecordInvariantError(str(exc)) from None
        elif self.kind == KIND_SLICE:
            if self.slice_index is None or self.probs is None:
                raise RecordInvariantError("SLICE record needs slice_index and probs")
            if (self.subvolume_start is not None or self.flips is not None
                    or self.label is not None or self.confidence is not None):
                raise RecordInvariantError("SLICE record must not carry sub-volume fields")
            if self.slice_index < 0:
                raise RecordInvariantError("slice_index must be >= 0")
            if len(self.probs) != 3 or any(p < 0 for p in self.probs):
                raise RecordInvariantError("probs must be three non-negative values")
            if abs(sum(self.probs) - 1.0) > PROB_ATOL:
                raise RecordInvariantError(
                    f"probs sum to {sum(self.probs)!r}, not 1 within {PROB_ATOL}"
                )
        else:
            raise RecordInvariantError(f"unknown record kind {self.kind!r}")


def format_prob(p: float) -> str:
    """Canonical 6-decimal rendering (round-half-even)."""
    return f"{p:.6f}"


def canonical_prob_triple(probs: Sequence[float]) -> tuple[float, float, float]:
    """Round a 3-class distribution to 6 decimals so the rounded values sum
    to exactly 1.000000.

    Plain per-component rounding can push the decimal sum up to 1.5e-6 off,
    which the reader would reject; the residual (a whole number of 1e-6
    units) is folded into the largest component.
    """
    units = [int(format_prob(p).replace(".", "")) for p in probs]
    residual = 1_000_000 - sum(units)
    units[int(np.argmax(units))] += residual
    if min(units) < 0:
        raise RecordInvariantError(f"probs {tuple(probs)} cannot be canonicalized")
    return tuple(u / 1_000_000 for u in units)


def _flips_to_digits(flips: Sequence[bool]) -> str:
    return "".join("1" if f else "0" for f in flips)


def _digits_to_flips(digits: str) -> tuple[bool, bool, bool]:
    if len(digits) != 3 or any(c not in "01" for c in digits):
        raise ValueError(f"flips must be three 0/1 digits, got {digits!r}")
    return tuple(c == "1" for c in digits)


def format_record(record: PredictionRecord) -> str:
    """One canonical comma-separated line, without the trailing newline."""
    if record.kind == KIND_SUBVOLUME:
        return ",".join([
            record.patient_id,
            record.model_id,
            KIND_SUBVOLUME,
            str(record.subvolume_start),
            _flips_to_digits(record.flips),
            record.label,
            format_prob(record.confidence),
        ])
    probs = canonical_prob_triple(record.probs)
    return ",".join([
        record.patient_id,
        record.model_id,
        KIND_SLICE,
        str(record.slice_index),
        format_prob(probs[0]),
        format_prob(probs[1]),
        format_prob(probs[2]),
    ])


def parse_record(line: str, line_number: int | None = None) -> PredictionRecord:
    fields = line.split(",")
    if len(fields) != 7:
        raise MalformedRecordError(
            f"expected 7 comma-separated fields, got {len(fields)}", line_number
        )
    patient_id, model_id, kind = fields[0], fields[1], fields[2]
    try:
        if kind == KIND_SUBVOLUME:
            record = PredictionRecord(
                patient_id=patient_id,
                model_id=model_id,
                kind=kind,
                subvolume_start=int(fields[3]),
                flips=_digits_to_flips(fields[4]),
                label=fields[5],
                confidence=float(fields[6]),
            )
        elif kind == KIND_SLICE:
            record = PredictionRecord(
                patient_id=patient_id,
                model_id=model_id,
                kind=kind,
                slice_index=int(fields[3]),
                probs=(float(fields[4]), float(fields[5]), float(fields[6])),
            )
        else:
            raise MalformedRecordError(f"unknown record kind {kind!r}", line_number)
    except RecordInvariantError as exc:
        raise RecordInvariantError(str(exc), line_number) from None
    except (ValueError, TypeError) as exc:
        raise MalformedRecordError(str(exc), line_number) from None
    return record


def read_predictions(file) -> list[PredictionRecord]:
    """Read a line-delimited prediction file.

    Raises MalformedRecordError or RecordInvariantError with the offending
    line number.
    """
    records = []
    with open(file, "r", encoding="ascii") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            records.append(parse_record(line, line_number))
    return records


def write_predictions(records: Iterable[PredictionRecord], file) -> None:
    """Write records in canonical form, one line each, 6-decimal probabilities."""
    with open(file, "w", encoding="ascii", newline="\n") as fh:
        for record in records:
            fh.write(format_record(record) + "\n")


# ---------------------------------------------------------------------------
# label / diagnosis files (one "patient_id,LABEL" per line)


def read_labels(file) -> dict[str, str]:
    labels = {}
    with open(file, "r", encoding="ascii") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 2 or not fields[0]:
                raise MalformedRecordError(
                    f"expected 'patient_id,LABEL', got {line!r}", line_number
                )
            if fields[1] not in (COVID, NON_COVID):
                raise MalformedRecordError(f"unknown label {fields[1]!r}", line_number)
            if fields[0] in labels:
                raise MalformedRecordError(f"duplicate patient {fields[0]!r}", line_number)
            labels[fields[0]] = fields[1]
    return labels


def write_labels(labels: Mapping[str, str], file) -> None:
    """Write a patient->label map in sorted patient order."""
    with open(file, "w", encoding="ascii", newline="\n") as fh:
        for patient_id in sorted(labels):
            fh.write(f"{patient_id},{check_ct_label(labels[patient_id])}\n")
