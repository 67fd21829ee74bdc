"""Glue between the dataset on disk and the trainer/decoder: preparation of
normalized diameter-rescaled training samples, tiled full-image inference,
overlay rendering, and evaluation report assembly.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import model as nn
from .augment import extract_tiles, percentile_normalize, reassemble, tile_grid
from .core import canonicalize_mask, resize_nearest
from .diameter import DiameterStats, dataset_mean_diameter, inference_rescale, train_rescale
from .errors import DataError, EmptyDatasetError
from .flows import FlowParams, flow_to_mask
from .ingest import DatasetManifest, load_mask, load_two_channel
from .semi import TrainSample


@dataclasses.dataclass(frozen=True)
class PreparedData:
    """Training-ready samples plus the diameter bookkeeping that produced them."""

    labeled: tuple
    unlabeled: tuple
    stats: DiameterStats
    target_diameter: float
    scale: float


def prepare_training_data(manifest: DatasetManifest, target_diameter) -> PreparedData:
    """Load, normalize, and rescale the labeled and unlabeled splits.

    The pooled mean diameter comes from the labeled masks alone; unlabeled
    images get the same scale factor (one corpus, one magnification).
    Sample ids are positional within each split: L000..., U000...
    """
    labeled_recs = manifest.select("labeled")
    unlabeled_recs = manifest.select("unlabeled")
    if not labeled_recs:
        raise EmptyDatasetError("manifest has no labeled records")
    masks = [load_mask(manifest.mask_file(r)) for r in labeled_recs]
    stats = dataset_mean_diameter(masks)
    labeled = []
    for i, (rec, mask) in enumerate(zip(labeled_recs, masks)):
        img = percentile_normalize(load_two_channel(manifest.image_file(rec)))
        img, mask, scale = train_rescale(img, mask, stats, target_diameter)
        labeled.append(TrainSample(f"L{i:03d}", img, mask))
    unlabeled = []
    for i, rec in enumerate(unlabeled_recs):
        img = percentile_normalize(load_two_channel(manifest.image_file(rec)))
        img, scale = inference_rescale(img, stats.mean, target_diameter)
        unlabeled.append(TrainSample(f"U{i:03d}", img))
    return PreparedData(tuple(labeled), tuple(unlabeled), stats,
                        float(target_diameter), float(scale))


def _forward_tiles(net, tiles, batch_size=8):
    outs = []
    for lo in range(0, len(tiles), batch_size):
        outs.append(nn.forward(net, tiles[lo : lo + batch_size]))
    return np.concatenate(outs, axis=0)


def infer_image(net: nn.SegNet, image, user_diameter, model_diameter, tile,
                overlap=0.25, flow_params: FlowParams | None = None,
                batch_size=8):
    """Full inference for one assembled 2-channel image.

    normalize -> rescale by model_diameter/user_diameter -> overlapping tiles
    -> network -> taper-weighted reassembly -> flow decode (regression
    channels carry 5x unit flows, so they are scaled back down before
    tracking) -> nearest-neighbor resize of the mask to the input dims.

    Returns (mask, flow_map) with the flow map at rescaled resolution.
    """
    flow_params = flow_params or FlowParams()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 2:
        raise DataError(f"expected (H, W, 2) image, got {image.shape}")
    if tile % net.pool_factor:
        raise DataError(f"tile {tile} not divisible by {net.pool_factor}")
    orig_hw = image.shape[:2]
    img = percentile_normalize(image)
    img, _ = inference_rescale(img, user_diameter, model_diameter)
    positions = tile_grid(img.shape[:2], tile, overlap)
    tiles = extract_tiles(img, positions, tile)
    preds = _forward_tiles(net, tiles, batch_size)
    flow_map = reassemble(preds, positions, img.shape[:2], tile)
    decoded = flow_map.copy()
    decoded[..., :2] /= nn.FLOW_TARGET_SCALE
    mask = flow_to_mask(decoded, flow_params)
    if mask.shape != orig_hw:
        mask = canonicalize_mask(resize_nearest(mask, orig_hw[0], orig_hw[1]))
    return mask, flow_map


# ---------------------------------------------------------------------------
# overlays

_PALETTE = np.array([
    (230, 60, 60), (60, 180, 75), (255, 200, 0), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (190, 255, 60), (0, 190, 160),
], np.uint8)


def _boundaries(mask):
    b = np.zeros(mask.shape, bool)
    b[1:, :] |= mask[1:, :] != mask[:-1, :]
    b[:-1, :] |= mask[:-1, :] != mask[1:, :]
    b[:, 1:] |= mask[:, 1:] != mask[:, :-1]
    b[:, :-1] |= mask[:, :-1] != mask[:, 1:]
    return b & (mask > 0)


def render_overlay(image, mask) -> np.ndarray:
    """Channel-0 grayscale base with 1-px instance outlines, palette cycling
    by label. Returns (H, W, 3) uint8."""
    image = np.asarray(image)
    base = image[..., 0] if image.ndim == 3 else image
    lo, hi = float(base.min()), float(base.max())
    gray = np.zeros(base.shape, np.uint8) if hi <= lo else \
        np.clip((base - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    out = np.repeat(gray[:, :, None], 3, axis=2)
    edge = _boundaries(mask)
    colors = _PALETTE[(mask[edge] - 1) % len(_PALETTE)]
    out[edge] = colors
    return out


# ---------------------------------------------------------------------------
# evaluation report

def build_report(names, pred_masks, gt_masks, iou_threshold=0.5) -> dict:
    from .metrics import dataset_f1, f1_at_iou

    per_image = []
    for name, pred, gt in zip(names, pred_masks, gt_masks):
        r = f1_at_iou(pred, gt, iou_threshold)
        per_image.append({"image": name, "tp": r.tp, "fp": r.fp, "fn": r.fn,
                          "f1": r.f1})
    pooled = dataset_f1(zip(pred_masks, gt_masks), iou_threshold)
    return {
        "iou_threshold": iou_threshold,
        "per_image": per_image,
        "pooled": {"tp": pooled.tp, "fp": pooled.fp, "fn": pooled.fn,
                   "f1": pooled.f1},
    }
