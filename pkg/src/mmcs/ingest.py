"""Dataset loading and synthesis.

Disk layout is manifest-driven: a UTF-8 text file with one record per line,
TAB-separated fields ``split<TAB>image_path[<TAB>mask_path]`` where split is
one of ``labeled``, ``unlabeled``, ``eval``. ``#`` starts a comment line.
Paths are interpreted relative to the manifest's directory.

Images on disk are 8- or 16-bit grayscale or 8-bit RGB; masks are 16-bit
single-channel PNG (label values are instance ids, 0 background). The
two-channel in-memory form is (H, W, 2) float32 with channel 0 = cytoplasm
and channel 1 = nucleus; RGB files map green -> channel 0 and blue ->
channel 1 (the red plane is discarded), grayscale files get a zero-filled
nucleus channel.
"""

from __future__ import annotations

import dataclasses
import math
import os

import numpy as np
from PIL import Image

from .core import RngStream, canonicalize_mask
from .errors import DataError, EmptyDatasetError, ManifestError, PlacementError

VALID_SPLITS = ("labeled", "unlabeled", "eval")

# synthetic intensity constants (pre-noise)
CYTO_BG = 0.15
CYTO_FG = 0.75
NUCLEUS_FG = 0.8


# ---------------------------------------------------------------------------
# manifest


@dataclasses.dataclass(frozen=True)
class ManifestRecord:
    split: str
    image_path: str
    mask_path: str | None = None


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    root: str  # directory the manifest was loaded from; resolves relative paths

    def select(self, split):
        return tuple(r for r in self.records if r.split == split)

    def image_file(self, rec):
        return os.path.join(self.root, rec.image_path)

    def mask_file(self, rec):
        if rec.mask_path is None:
            raise DataError(f"record {rec.image_path} has no mask")
        return os.path.join(self.root, rec.mask_path)


def load_manifest(path) -> DatasetManifest:
    records = []
    seen_paths = set()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest: {e}") from e

    for ln, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        split = fields[0]
        if split not in VALID_SPLITS:
            raise ManifestError(f"unknown split {split!r}", ln)
        if split in ("labeled", "eval"):
            if len(fields) != 3:
                raise ManifestError(f"{split} record needs image and mask paths", ln)
            rec = ManifestRecord(split, fields[1], fields[2])
        else:
            if len(fields) != 2:
                raise ManifestError("unlabeled record takes exactly one path", ln)
            rec = ManifestRecord(split, fields[1])
        for p in (rec.image_path, rec.mask_path):
            if p is None:
                continue
            if p in seen_paths:
                raise ManifestError(f"duplicate path {p!r}", ln)
            seen_paths.add(p)
        records.append(rec)
    return DatasetManifest(tuple(records), os.path.dirname(os.path.abspath(path)))


def write_manifest(records, path):
    """Inverse of load_manifest for comment-free manifests (byte round-trip)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            if r.mask_path is None:
                fh.write(f"{r.split}\t{r.image_path}\n")
            else:
                fh.write(f"{r.split}\t{r.image_path}\t{r.mask_path}\n")


# ---------------------------------------------------------------------------
# raster I/O


def load_raw_image(path) -> np.ndarray:
    """Read a raster file to float32 in [0, 1]; (H, W) or (H, W, bands)."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if mode == "L":
        return arr.astype(np.float32) / 255.0
    if mode in ("I", "I;16"):
        return arr.astype(np.float32) / 65535.0
    if mode in ("RGB", "RGBA"):
        return arr.astype(np.float32) / 255.0
    raise DataError(f"unsupported image mode {mode!r} in {path}")


def assemble_two_channel(raw) -> np.ndarray:
    """Map a raw image to the (cytoplasm, nucleus) stack.

    RGB keeps (green, blue); grayscale gets an all-zero nucleus channel;
    2-channel input passes through unchanged.
    """
    raw = np.asarray(raw, dtype=np.float32)
    if raw.ndim == 2:
        out = np.zeros(raw.shape + (2,), np.float32)
        out[:, :, 0] = raw
        return out
    if raw.ndim == 3 and raw.shape[2] == 2:
        return raw.copy()
    if raw.ndim == 3 and raw.shape[2] == 3:
        return np.stack([raw[:, :, 1], raw[:, :, 2]], axis=-1)
    raise DataError(f"unsupported channel count for shape {raw.shape}")


def load_two_channel(path) -> np.ndarray:
    return assemble_two_channel(load_raw_image(path))


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot read mask {path}: {e}") from e
    if mode not in ("L", "I", "I;16"):
        raise DataError(f"mask must be single-channel, got mode {mode!r} in {path}")
    return canonicalize_mask(arr.astype(np.int64))


def save_mask(mask, path):
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 65535:
        raise DataError(f"mask labels outside uint16 range: {mask.min()}..{mask.max()}")
    Image.fromarray(mask.astype(np.uint16)).save(path, format="PNG")


def save_two_channel(image, path):
    """Write the 2-channel stack as 8-bit RGB PNG (R=0, G=ch0, B=ch1)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 2:
        raise DataError(f"expected (H, W, 2) image, got {image.shape}")
    rgb = np.zeros(image.shape[:2] + (3,), np.uint8)
    rgb[:, :, 1] = np.clip(np.rint(image[:, :, 0] * 255.0), 0, 255).astype(np.uint8)
    rgb[:, :, 2] = np.clip(np.rint(image[:, :, 1] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(path, format="PNG")


# ---------------------------------------------------------------------------
# synthetic blobs


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    count_range: tuple = (2, 6)
    radius_range: tuple = (4.0, 8.0)
    eccentricity_range: tuple = (0.7, 1.0)  # axis ratio b/a in (0, 1]
    nucleus_fraction: float = 0.4
    noise_sigma: float = 0.03

    def __post_init__(self):
        for name in ("count_range", "radius_range", "eccentricity_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(f"{name} has min > max: {lo} > {hi}")
        if self.radius_range[0] < 2.0:
            raise DataError("radii below 2 px rasterize unreliably")
        if self.eccentricity_range[0] <= 0:
            raise DataError("eccentricity (axis ratio) must be positive")
        if not 0.0 <= self.nucleus_fraction <= 1.0:
            raise DataError("nucleus_fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")


def _ellipse_inside(size, cy, cx, a, b, theta):
    """Boolean raster of an ellipse; a pixel is inside when its center is."""
    ys = np.arange(size, dtype=np.float64) + 0.5
    xs = np.arange(size, dtype=np.float64) + 0.5
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    u = math.cos(theta) * dy + math.sin(theta) * dx
    v = -math.sin(theta) * dy + math.cos(theta) * dx
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _dilate8(b):
    p = np.zeros((b.shape[0] + 2, b.shape[1] + 2), bool)
    out = np.zeros_like(b)
    p[1:-1, 1:-1] = b
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out |= p[dy : dy + b.shape[0], dx : dx + b.shape[1]]
    return out


def synth_blobs(spec: SynthSpec, stream: RngStream, n_images, retry_budget=100):
    """Generate (image, mask) pairs of non-overlapping noisy ellipses.

    Cells are bright cytoplasm ellipses on a dim background (channel 0) with a
    concentric nucleus disk (channel 1) of radius nucleus_fraction * r clipped
    to the cell support. Placement leaves at least one background pixel between
    instances (rejection sampling with a per-instance retry budget). The axis
    ratio q keeps area == pi * r^2, so the equal-area diameter is exactly 2r.
    """
    size = spec.image_size
    out = []
    for i in range(n_images):
        g = stream.child("synth", i).generator()
        k = int(g.integers(spec.count_range[0], spec.count_range[1], endpoint=True))
        mask = np.zeros((size, size), np.int32)
        occupied = np.zeros((size, size), bool)
        nucleus = np.zeros((size, size), bool)
        for lab in range(1, k + 1):
            placed = False
            for _ in range(retry_budget):
                r = g.uniform(*spec.radius_range)
                q = g.uniform(*spec.eccentricity_range)
                theta = g.uniform(0.0, math.pi)
                a, b = r / math.sqrt(q), r * math.sqrt(q)
                margin = a + 1.0
                if 2 * margin >= size:
                    continue  # this draw cannot fit; counts against the budget
                cy = g.uniform(margin, size - margin)
                cx = g.uniform(margin, size - margin)
                cell = _ellipse_inside(size, cy, cx, a, b, theta)
                if not cell.any():
                    continue
                if (_dilate8(cell) & occupied).any():
                    continue
                mask[cell] = lab
                occupied |= cell
                rn = spec.nucleus_fraction * r
                if rn > 0:
                    nucleus |= _ellipse_inside(size, cy, cx, rn, rn, 0.0) & cell
                placed = True
                break
            if not placed:
                raise PlacementError(
                    f"image {i}: gave up placing instance {lab} of {k} "
                    f"after {retry_budget} attempts"
                )
        image = np.zeros((size, size, 2), np.float32)
        image[:, :, 0] = np.where(mask > 0, CYTO_FG, CYTO_BG)
        image[nucleus, 1] = NUCLEUS_FG
        if spec.noise_sigma > 0:
            image = image + g.normal(0.0, spec.noise_sigma, image.shape)
            image = np.clip(image, 0.0, 1.0).astype(np.float32)
        out.append((image, mask))
    return out


def write_synth_dataset(out_dir, spec, stream, n_labeled, n_unlabeled, n_eval):
    """Materialize a synthetic dataset directory with its manifest.

    Unlabeled records get an image but no mask file, mirroring the intended
    training setup. Returns the manifest path.
    """
    total = n_labeled + n_unlabeled + n_eval
    if total < 1:
        raise EmptyDatasetError("dataset needs at least one image")
    img_dir = os.path.join(out_dir, "images")
    msk_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(msk_dir, exist_ok=True)
    pairs = synth_blobs(spec, stream, total)
    records = []
    splits = ["labeled"] * n_labeled + ["unlabeled"] * n_unlabeled + ["eval"] * n_eval
    for i, ((image, mask), split) in enumerate(zip(pairs, splits)):
        img_rel = f"images/img_{i:03d}.png"
        save_two_channel(image, os.path.join(out_dir, img_rel))
        if split == "unlabeled":
            records.append(ManifestRecord(split, img_rel))
        else:
            msk_rel = f"masks/msk_{i:03d}.png"
            save_mask(mask, os.path.join(out_dir, msk_rel))
            records.append(ManifestRecord(split, img_rel, msk_rel))
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(records, manifest_path)
    return manifest_path
