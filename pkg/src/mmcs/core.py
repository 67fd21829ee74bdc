"""Shared array conventions, mask utilities, resizing, and seeded RNG streams.

Array conventions used across the package:

* image: float32 array of shape (H, W, C), C in {1, 2, 3}, values in [0, 1]
  after normalization; channel 0 is cytoplasm signal, channel 1 nucleus.
* instance mask: int32 array of shape (H, W); 0 is background, instances are
  labeled 1..N contiguously after `canonicalize_mask`.
* flow map: float32 array of shape (H, W, 3); planes are (flow_y, flow_x,
  cell_logit). Target maps from masks hold unit-or-zero vectors and a {0,1}
  occupancy plane; raw network outputs use the same layout.

Coordinate convention: pixel (r, c) sits at continuous coordinate
(r + 0.5, c + 0.5). Resize source positions are computed in that frame, which
makes scale 1.0 an exact identity and keeps resize consistent with flow
integration (which works directly in index space, an equivalent frame shifted
by half a pixel).
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from .errors import DataError, UnknownLabelError

__all__ = [
    "RngStream",
    "canonicalize_mask",
    "instance_pixels",
    "resize_bilinear",
    "resize_nearest",
]


# ---------------------------------------------------------------------------
# deterministic RNG streams


@dataclasses.dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by (seed, derivation path).

    Every consumer derives its own child stream (`.child("augment", epoch, uid)`)
    so draw sequences are independent of call order and of whether sibling
    consumers drew anything at all. The underlying generator is Philox keyed by
    SHA-256 of the path, so sequences are identical on every platform.
    """

    seed: int
    path: tuple = ()

    def child(self, *tags) -> "RngStream":
        for t in tags:
            if not isinstance(t, (int, str)):
                raise TypeError(f"stream tags must be int or str, got {type(t)!r}")
        return RngStream(self.seed, self.path + tuple(tags))

    def _key_bytes(self) -> bytes:
        text = str(int(self.seed)) + "".join(f"|{t}" for t in self.path)
        return hashlib.sha256(text.encode("utf-8")).digest()

    def generator(self) -> np.random.Generator:
        digest = self._key_bytes()
        # int.from_bytes keeps the key endian-independent
        key = [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8)]
        return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


# ---------------------------------------------------------------------------
# instance mask utilities


def canonicalize_mask(mask) -> np.ndarray:
    """Relabel positive labels to contiguous 1..N, ordered by first occurrence
    in row-major scan. Background stays 0. Idempotent."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size == 0:
        raise DataError("mask must be nonempty")
    if not np.issubdtype(mask.dtype, np.integer):
        raise DataError(f"mask must be integer-typed, got {mask.dtype}")
    if mask.min() < 0:
        raise DataError("mask labels must be non-negative")

    flat = mask.ravel()
    labels, first = np.unique(flat, return_index=True)
    keep = labels > 0
    labels, first = labels[keep], first[keep]
    order = np.argsort(first, kind="stable")
    lut = np.zeros(int(mask.max()) + 1, dtype=np.int32)
    lut[labels[order]] = np.arange(1, len(labels) + 1, dtype=np.int32)
    return lut[mask]


def instance_pixels(mask, label) -> set:
    """Exact pixel set {(row, col)} of one instance; raises if label is absent."""
    mask = np.asarray(mask)
    label = int(label)
    if label <= 0:
        raise UnknownLabelError(f"label must be positive, got {label}")
    ys, xs = np.nonzero(mask == label)
    if ys.size == 0:
        raise UnknownLabelError(f"label {label} not present in mask")
    return {(int(y), int(x)) for y, x in zip(ys, xs)}


# ---------------------------------------------------------------------------
# resizing


def _check_resize_args(arr, new_h, new_w):
    new_h, new_w = int(new_h), int(new_w)
    if new_h < 1 or new_w < 1:
        raise DataError(f"resize target must be >= 1, got {new_h}x{new_w}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError("input has a zero dimension")
    return new_h, new_w


def _src_coords(n_out, n_in):
    # pixel-center mapping: out center (i+0.5) scaled into input frame
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(image, new_h, new_w) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) float image."""
    image = np.asarray(image)
    new_h, new_w = _check_resize_args(image, new_h, new_w)
    h, w = image.shape[:2]
    if (new_h, new_w) == (h, w):
        return image.astype(np.float32, copy=True)

    sy = np.clip(_src_coords(new_h, h), 0.0, h - 1.0)
    sx = np.clip(_src_coords(new_w, w), 0.0, w - 1.0)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 2) if h > 1 else np.zeros(new_h, np.int64)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 2) if w > 1 else np.zeros(new_w, np.int64)
    fy = (sy - y0) if h > 1 else np.zeros(new_h)
    fx = (sx - x0) if w > 1 else np.zeros(new_w)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)

    img = image.astype(np.float64)
    fy = fy[:, None, None] if img.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if img.ndim == 3 else fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def resize_nearest(mask, new_h, new_w) -> np.ndarray:
    """Nearest-neighbor resize of an (H, W) integer mask; never interpolates labels."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    new_h, new_w = _check_resize_args(mask, new_h, new_w)
    h, w = mask.shape
    if (new_h, new_w) == (h, w):
        return mask.astype(np.int32, copy=True)
    iy = np.clip(np.floor((np.arange(new_h) + 0.5) * (h / new_h)).astype(np.int64), 0, h - 1)
    ix = np.clip(np.floor((np.arange(new_w) + 0.5) * (w / new_w)).astype(np.int64), 0, w - 1)
    return mask[iy][:, ix].astype(np.int32)
