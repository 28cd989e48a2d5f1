"""Image and volume transformations applied before prediction.

Everything here is a pure function over numpy arrays: threshold body crop,
lung-half split, bilinear resize, 3-slice mini-volume stacking, nearest
neighbor depth resampling and axis flips.  Arrays are indexed [row, col]
for images and [slice, row, col] for volumes.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence, TypeVar

import numpy as np

from .errors import (
    EmptyForegroundError,
    EmptyInputError,
    IndexOutOfRangeError,
    TooNarrowError,
    ZeroTargetError,
)
from .ingest import Volume
from .validation import as_image

T = TypeVar("T")


class BBox(NamedTuple):
    """Inclusive pixel bounding box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int


class FlipSpec(NamedTuple):
    """Which axes to reverse: image columns, image rows, slice order."""

    horizontal: bool = False
    vertical: bool = False
    depth: bool = False

    @classmethod
    def from_bits(cls, bits: int) -> "FlipSpec":
        """Decode 0..7 counting (horizontal, vertical, depth) in binary."""
        if not 0 <= bits < 8:
            raise ValueError(f"bits must be in 0..7, got {bits}")
        return cls(bool(bits >> 2 & 1), bool(bits >> 1 & 1), bool(bits & 1))

    @property
    def bits(self) -> int:
        return (self.horizontal << 2) | (self.vertical << 1) | int(self.depth)


def crop_body(img, fg_threshold: float = 0.05) -> tuple[np.ndarray, BBox]:
    """Crop to the tight bounding box of pixels brighter than ``fg_threshold``.

    Scanner padding is near-zero after [0, 1] normalization, so a plain
    intensity threshold separates body from background.  Returns the cropped
    image and the box (inclusive coordinates in the input image).
    """
    arr = as_image(img)
    if not 0.0 < fg_threshold < 1.0:
        raise ValueError(f"fg_threshold must lie in (0, 1), got {fg_threshold}")
    mask = arr > fg_threshold
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        raise EmptyForegroundError(f"no pixel exceeds threshold {fg_threshold}")
    box = BBox(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))
    return arr[box.row_min:box.row_max + 1, box.col_min:box.col_max + 1].copy(), box


def split_lungs(img) -> tuple[np.ndarray, np.ndarray]:
    """Split an image into left and right column halves.

    The left half gets floor(width / 2) columns; for odd widths the right
    half is one column wider.
    """
    arr = as_image(img)
    width = arr.shape[1]
    if width < 2:
        raise TooNarrowError(f"cannot split width-{width} image into two halves")
    mid = width // 2
    return arr[:, :mid].copy(), arr[:, mid:].copy()


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel center alignment.

    Source coordinate of output pixel j is (j + 0.5) * in/out - 0.5, clamped
    to the valid range; same-size resizes reproduce the input exactly and
    constant images stay constant.  Output is clipped to [0, 1].
    """
    arr = as_image(img)
    if out_w < 1 or out_h < 1:
        raise ZeroTargetError(f"target size must be >= 1, got {out_w}x{out_h}")
    in_h, in_w = arr.shape

    def _axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = _axis_coords(in_h, out_h)
    x0, x1, fx = _axis_coords(in_w, out_w)

    # lerp form a + f*(b - a) keeps constants exact
    top = arr[np.ix_(y0, x0)]
    bottom = arr[np.ix_(y1, x0)]
    left = top + fy[:, None] * (bottom - top)
    top = arr[np.ix_(y0, x1)]
    bottom = arr[np.ix_(y1, x1)]
    right = top + fy[:, None] * (bottom - top)
    out = left + fx[None, :] * (right - left)
    return np.clip(out, 0.0, 1.0)


def build_minivolume(vol: Volume, i: int) -> np.ndarray:
    """Stack slice i with its neighbors into a (3, h, w) array.

    Channels are (previous, current, next); the first and last slice
    duplicate themselves in place of the missing neighbor.
    """
    n = vol.n_slices
    if not 0 <= i < n:
        raise IndexOutOfRangeError(f"slice {i} outside volume of {n} slices")
    return np.stack([
        vol.slices[max(i - 1, 0)],
        vol.slices[i],
        vol.slices[min(i + 1, n - 1)],
    ])


def depth_indices(n: int, target: int) -> np.ndarray:
    """Nearest-neighbor index map for resampling n items to ``target``."""
    if n < 1:
        raise EmptyInputError("cannot resample an empty sequence")
    if target < 1:
        raise ZeroTargetError(f"target length must be >= 1, got {target}")
    return (np.arange(target) * n) // target


def depth_resize(items: Sequence[T], target: int):
    """Resample an ordered sequence to ``target`` entries by repeating or
    dropping items (no blending): out[j] = items[floor(j * n / target)].

    Lists come back as lists; numpy arrays are resampled along axis 0.
    """
    if isinstance(items, np.ndarray):
        return items[depth_indices(items.shape[0], target)]
    idx = depth_indices(len(items), target)
    return [items[int(j)] for j in idx]


def flip(vol_or_img, spec: FlipSpec):
    """Reverse the axes named by ``spec``.

    Accepts a 2D image (horizontal reverses columns, vertical reverses rows;
    depth has no 2D meaning and is ignored), a 3D slice stack, or a Volume.
    Each flip is an involution and the three commute.
    """
    if isinstance(vol_or_img, Volume):
        return Volume(vol_or_img.patient_id, flip(vol_or_img.slices, spec),
                      vol_or_img.label)
    arr = np.asarray(vol_or_img)
    if arr.ndim == 2:
        if spec.vertical:
            arr = arr[::-1, :]
        if spec.horizontal:
            arr = arr[:, ::-1]
        return arr.copy()
    if arr.ndim == 3:
        if spec.depth:
            arr = arr[::-1]
        if spec.vertical:
            arr = arr[:, ::-1, :]
        if spec.horizontal:
            arr = arr[:, :, ::-1]
        return arr.copy()
    raise ValueError(f"expected a 2D image or 3D volume, got shape {arr.shape}")
