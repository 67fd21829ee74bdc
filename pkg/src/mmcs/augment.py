"""Training-time augmentation and inference-time tiling.

Training order is fixed: normalize, diameter-rescale (see diameter module),
then one random affine warp per sample draw (rotation, scale jitter, flip,
random crop anchor plus a bounded translation jitter) resolved into a single
resampling pass onto a tile x tile output. Images sample bilinearly, masks
nearest (labels are never interpolated), stored pseudo-label maps sample
bilinearly on all three channels with the same warp as their image.

A sample's randomness comes from its own RngStream, so augmentation is a pure
function of (inputs, config, stream): the same stream always reproduces the
same tile, and sibling samples never perturb each other.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .core import RngStream, canonicalize_mask
from .errors import DataError

TAPER_FLOOR = 0.1


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    tile: int = 112
    rotate: bool = True
    scale_jitter: tuple = (0.75, 1.25)
    translate_fraction: float = 0.1
    flip: bool = True

    def __post_init__(self):
        if self.scale_jitter[0] > self.scale_jitter[1]:
            raise DataError("scale_jitter has lo > hi")
        if self.scale_jitter[0] <= 0:
            raise DataError("scale_jitter must be positive")
        if not 0.0 <= self.translate_fraction <= 0.5:
            raise DataError("translate_fraction must be in [0, 0.5]")
        if self.tile < 32:
            raise DataError("tile must be >= 32")


def percentile_normalize(image) -> np.ndarray:
    """Per-channel (v - p1) / (p99 - p1) clipped to [0, 1].

    A channel whose 1st and 99th percentiles coincide carries no usable
    contrast and becomes all zeros, which also keeps a zero-filled nucleus
    channel exactly zero.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    if not np.isfinite(image).all():
        raise DataError("image contains non-finite values")
    out = np.zeros_like(image)
    for c in range(image.shape[2]):
        ch = image[:, :, c]
        p1, p99 = np.percentile(ch, [1.0, 99.0])
        if p99 > p1:
            out[:, :, c] = np.clip((ch - p1) / (p99 - p1), 0.0, 1.0)
    out = out.astype(np.float32)
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# random affine


@dataclasses.dataclass(frozen=True)
class AffineParams:
    angle: float
    scale: float
    flip: bool
    anchor_y: float  # source-image point that lands at the tile center
    anchor_x: float


def _sample_affine(shape_hw, cfg: AugmentConfig, g) -> AffineParams:
    h, w = shape_hw
    t = cfg.tile
    # one fixed-length draw regardless of which switches are on, so toggling
    # a config flag never shifts any other sample's randomness
    u = g.uniform(size=7)
    angle = u[0] * 2.0 * math.pi if cfg.rotate else 0.0
    lo, hi = cfg.scale_jitter
    scale = lo + u[1] * (hi - lo)
    flip = bool(cfg.flip and u[2] < 0.5)
    half = (t - 1) / 2.0
    ay = half + u[3] * (h - t) if h > t else (h - 1) / 2.0
    ax = half + u[4] * (w - t) if w > t else (w - 1) / 2.0
    ay += (2.0 * u[5] - 1.0) * cfg.translate_fraction * t
    ax += (2.0 * u[6] - 1.0) * cfg.translate_fraction * t
    return AffineParams(angle, scale, flip, ay, ax)


def _source_coords(params: AffineParams, tile):
    """Map each output-tile pixel to its source coordinate (inverse warp)."""
    half = (tile - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(tile, dtype=np.float64) - half,
                         np.arange(tile, dtype=np.float64) - half)
    if params.flip:
        jj = -jj
    c, s = math.cos(params.angle), math.sin(params.angle)
    # inverse rotation and inverse scale of the centered offsets
    sy = (c * ii - s * jj) / params.scale + params.anchor_y
    sx = (s * ii + c * jj) / params.scale + params.anchor_x
    return sy, sx


def bilinear_sample(img, ys, xs) -> np.ndarray:
    """Sample (H, W) or (H, W, C) at float coords; outside contributes zero."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    fy = (ys - y0f).astype(np.float32)
    fx = (xs - x0f).astype(np.float32)
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    out_shape = ys.shape + img.shape[2:]
    acc = np.zeros(out_shape, np.float32)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            wgt = (wy * wx) * valid
            vals = img[yc, xc]
            acc += vals * (wgt[..., None] if img.ndim == 3 else wgt)
    return acc


def _nearest_sample_mask(mask, ys, xs) -> np.ndarray:
    mask = np.asarray(mask)
    h, w = mask.shape
    yi = np.rint(ys).astype(np.int64)
    xi = np.rint(xs).astype(np.int64)
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = np.zeros(ys.shape, np.int32)
    out[valid] = mask[yi[valid], xi[valid]]
    return out


def random_augment(image, mask, cfg: AugmentConfig, rng: RngStream):
    """One augmented (image tile, mask tile) draw; mask re-canonicalized."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise DataError(f"image {image.shape[:2]} vs mask {mask.shape} dims differ")
    g = rng.generator()
    params = _sample_affine(image.shape[:2], cfg, g)
    sy, sx = _source_coords(params, cfg.tile)
    img_tile = bilinear_sample(image, sy, sx)
    mask_tile = canonicalize_mask(_nearest_sample_mask(mask, sy, sx))
    return img_tile, mask_tile


def random_augment_pair(image, aux, cfg: AugmentConfig, rng: RngStream):
    """Like random_augment but the companion is a float map (e.g. a stored
    pseudo-label), warped bilinearly with the identical affine."""
    image = np.asarray(image)
    aux = np.asarray(aux)
    if image.shape[:2] != aux.shape[:2]:
        raise DataError(f"image {image.shape[:2]} vs aux {aux.shape[:2]} dims differ")
    g = rng.generator()
    params = _sample_affine(image.shape[:2], cfg, g)
    sy, sx = _source_coords(params, cfg.tile)
    return bilinear_sample(image, sy, sx), bilinear_sample(aux, sy, sx)


# ---------------------------------------------------------------------------
# inference tiling


def _axis_starts(n, tile, stride):
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] != n - tile:
        starts.append(n - tile)
    return starts


def tile_grid(shape_hw, tile, overlap_fraction=0.25):
    """Covering grid of tile origins for an (H, W) image."""
    if not 0.0 <= overlap_fraction <= 0.5:
        raise DataError("overlap_fraction must be in [0, 0.5]")
    h, w = shape_hw
    stride = max(1, int(round(tile * (1.0 - overlap_fraction))))
    return [(y, x) for y in _axis_starts(h, tile, stride)
            for x in _axis_starts(w, tile, stride)]


def extract_tiles(image, positions, tile) -> np.ndarray:
    """Stack (N, tile, tile, C) of crops; images smaller than the tile are
    zero-padded bottom/right."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    ph, pw = max(h, tile), max(w, tile)
    if (ph, pw) != (h, w):
        padded = np.zeros((ph, pw) + image.shape[2:], np.float32)
        padded[:h, :w] = image
        image = padded
    return np.stack([image[y : y + tile, x : x + tile] for y, x in positions])


def taper_profile(tile) -> np.ndarray:
    i = np.arange(tile, dtype=np.float64) + 0.5
    return TAPER_FLOOR + (1.0 - TAPER_FLOOR) * np.sin(math.pi * i / tile) ** 2


def reassemble(tiles, positions, shape_hw, tile) -> np.ndarray:
    """Weighted average of overlapping tile predictions (cosine taper)."""
    h, w = shape_hw
    c = tiles.shape[3]
    ph, pw = max(h, tile), max(w, tile)
    acc = np.zeros((ph, pw, c), np.float64)
    wsum = np.zeros((ph, pw, 1), np.float64)
    prof = taper_profile(tile)
    wgt = (prof[:, None] * prof[None, :])[:, :, None]
    for t, (y, x) in zip(tiles, positions):
        acc[y : y + tile, x : x + tile] += t * wgt
        wsum[y : y + tile, x : x + tile] += wgt
    out = acc / wsum
    return out[:h, :w].astype(np.float32)
