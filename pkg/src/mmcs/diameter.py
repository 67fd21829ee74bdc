"""Instance diameters from label areas and diameter-adaptive rescaling.

The diameter of an instance is the diameter of the equal-area circle,
2*sqrt(area/pi). Training data is rescaled so the pooled mean diameter hits a
target (default 30 px); the target is stored in the trained checkpoint as
``mean_diameter`` and inference rescales by model_diameter / user_diameter
before the network runs, then the predicted mask is resized back.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .core import resize_bilinear, resize_nearest
from .errors import DataError, EmptyDatasetError, ScaleRangeError

DEFAULT_TARGET_DIAMETER = 30.0

# scales beyond this are almost certainly a bad diameter estimate, not biology
SCALE_MIN, SCALE_MAX = 1.0 / 16.0, 16.0


@dataclasses.dataclass(frozen=True)
class DiameterStats:
    per_instance: tuple
    mean: float
    median: float  # debug output only; scaling always uses the mean


def instance_diameter(area) -> float:
    area = float(area)
    if area <= 0:
        raise DataError(f"instance area must be positive, got {area}")
    return 2.0 * math.sqrt(area / math.pi)


def dataset_mean_diameter(masks) -> DiameterStats:
    """Pool per-instance diameters over all masks; arithmetic mean."""
    diams = []
    for mask in masks:
        mask = np.asarray(mask)
        counts = np.bincount(mask.ravel())
        for area in counts[1:]:
            if area > 0:
                diams.append(instance_diameter(int(area)))
    if not diams:
        raise EmptyDatasetError("no instances found in any mask")
    return DiameterStats(
        per_instance=tuple(diams),
        mean=float(np.mean(diams)),
        median=float(np.median(diams)),
    )


def _checked_scale(scale):
    if not (SCALE_MIN <= scale <= SCALE_MAX):
        raise ScaleRangeError(
            f"rescale factor {scale:.4g} outside [{SCALE_MIN:.4g}, {SCALE_MAX}]"
        )
    return float(scale)


def _scaled_dims(h, w, scale):
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def train_rescale(image, mask, stats: DiameterStats, target_diameter):
    """Resize an (image, mask) pair so stats.mean maps onto target_diameter.

    Runs before any augmentation; bilinear for the image, nearest for the mask.
    Returns (image, mask, scale).
    """
    if target_diameter <= 0:
        raise DataError(f"target diameter must be positive, got {target_diameter}")
    scale = _checked_scale(target_diameter / stats.mean)
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise DataError(f"image {image.shape[:2]} and mask {mask.shape} dims differ")
    if scale == 1.0:
        return image.astype(np.float32, copy=True), mask.astype(np.int32, copy=True), 1.0
    nh, nw = _scaled_dims(image.shape[0], image.shape[1], scale)
    return resize_bilinear(image, nh, nw), resize_nearest(mask, nh, nw), scale


def inference_rescale(image, user_diameter, model_diameter):
    """Resize an inference image from the user's cell scale to the model's."""
    if user_diameter <= 0 or model_diameter <= 0:
        raise DataError(
            f"diameters must be positive, got user={user_diameter} model={model_diameter}"
        )
    scale = _checked_scale(model_diameter / user_diameter)
    image = np.asarray(image)
    if scale == 1.0:
        return image.astype(np.float32, copy=True), 1.0
    nh, nw = _scaled_dims(image.shape[0], image.shape[1], scale)
    return resize_bilinear(image, nh, nw), scale
