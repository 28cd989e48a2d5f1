"""Slice-index selection for training and inference.

Long volumes are decimated to a fixed length by taking an arithmetic
progression of slice indices: a volume with between ``target*k`` and
``target*(k+1)`` slices is sampled every k-th slice.  Training draws the
starting offset at random from {0..k}; inference enumerates every start,
yielding k+1 overlapping sub-volume plans, and each plan fans out into the
8 flip combinations for test-time augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ZeroLengthError
from .preprocess import FlipSpec

TRAIN_TARGET_LEN = 128
INFER_TARGET_LEN = 256


@dataclass(frozen=True)
class SubVolumePlan:
    """A deterministic selection of slice indices from one volume.

    ``indices`` holds the real (strictly increasing) source indices; when the
    progression runs out before reaching ``target_len``, the last index is
    repeated ``pad_count`` times.  ``entries()`` yields the padded sequence.
    """

    start: int
    stride: int
    indices: tuple[int, ...]
    pad_count: int
    target_len: int

    def __post_init__(self):
        if self.start < 0 or self.stride < 1 or self.pad_count < 0:
            raise ValueError("start/stride/pad_count out of range")
        if not self.indices:
            raise ValueError("plan must select at least one slice")
        if len(self.indices) + self.pad_count != self.target_len:
            raise ValueError(
                f"{len(self.indices)} indices + {self.pad_count} pads != "
                f"target_len {self.target_len}"
            )
        if any(a >= b for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("indices must be strictly increasing")

    def entries(self) -> tuple[int, ...]:
        """All target_len slice indices, padding by repeating the last one."""
        return self.indices + (self.indices[-1],) * self.pad_count


class TtaPlan(NamedTuple):
    """One inference unit: a sub-volume plan plus a flip combination."""

    subvolume: SubVolumePlan
    flips: FlipSpec


def _progression(n: int, start: int, stride: int, target_len: int) -> SubVolumePlan:
    indices = tuple(range(start, n, stride))[:target_len]
    return SubVolumePlan(
        start=start,
        stride=stride,
        indices=indices,
        pad_count=target_len - len(indices),
        target_len=target_len,
    )


def train_sample(n: int, seed, target_len: int = TRAIN_TARGET_LEN) -> SubVolumePlan:
    """Pick one randomized sub-volume plan for training.

    Volumes shorter than ``target_len`` keep every slice (stride 1) and pad.
    Otherwise, with k = n // target_len, the start is drawn uniformly from
    {0..k} using the seeded generator and every k-th slice is taken,
    truncated to the first ``target_len``.  ``seed`` is anything
    numpy.random.default_rng accepts (an int, or a sequence of ints for
    per-patient derived seeds).
    """
    if n < 1:
        raise ZeroLengthError(f"volume length must be >= 1, got {n}")
    if n < target_len:
        return _progression(n, start=0, stride=1, target_len=target_len)
    stride = n // target_len
    start = int(np.random.default_rng(seed).integers(0, stride + 1))
    return _progression(n, start, stride, target_len)


def inference_subvolumes(n: int, target_len: int = INFER_TARGET_LEN) -> list[SubVolumePlan]:
    """Enumerate every sub-volume plan for inference, one per start offset.

    Returns k+1 plans for n >= target_len (k = n // target_len) and a single
    stride-1 padded plan for shorter volumes.  Seed-free and deterministic.
    """
    if n < 1:
        raise ZeroLengthError(f"volume length must be >= 1, got {n}")
    if n < target_len:
        return [_progression(n, start=0, stride=1, target_len=target_len)]
    stride = n // target_len
    return [_progression(n, start, stride, target_len) for start in range(stride + 1)]


def tta_variants(plan: SubVolumePlan) -> list[TtaPlan]:
    """The 8 flip variants of a plan, counting (h, v, d) in binary from 000."""
    return [TtaPlan(plan, FlipSpec.from_bits(bits)) for bits in range(8)]
