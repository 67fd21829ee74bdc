"""Flow-field targets from instance masks, and masks back from flow fields.

Encoding (mask_to_flow): per instance, heat is repeatedly injected at the
instance's center pixel and diffused by 4-neighbor averaging restricted to
instance pixels; the unit-normalized spatial gradient of log(1 + heat) points
every instance pixel toward its center. Background flow is zero and the third
channel is {0, 1} cell occupancy.

Decoding (flow_to_mask): every pixel above the cell threshold is advected
along the interpolated flow (Euler steps); the trajectories pile up at the
instance centers, and a histogram of final positions turns those pileups into
sinks. Pixels are grouped by nearest sink, small groups are discarded.

All steps are pure and run in fixed order, so results never depend on
instance enumeration or any parallel schedule.
"""

from __future__ import annotations

import dataclasses
import struct
import zlib

import numpy as np

from .core import canonicalize_mask
from .errors import DataError

FLOW_MAGIC = b"MMCSFLW\0"
FLOW_VERSION = 1


@dataclasses.dataclass(frozen=True)
class FlowParams:
    n_follow_steps: int = 200
    step_size: float = 1.0
    cell_threshold: float = 0.0  # on the raw logit; 0.0 means p > 0.5
    min_size: int = 15
    sink_bin: float = 1.0
    sink_merge_radius: float = 2.0

    def __post_init__(self):
        if self.n_follow_steps < 1:
            raise DataError("n_follow_steps must be >= 1")
        if self.min_size < 0:
            raise DataError("min_size must be >= 0")
        if self.sink_bin <= 0:
            raise DataError("sink_bin must be positive")


# ---------------------------------------------------------------------------
# mask -> flow


def _instance_groups(mask):
    """Row-major pixel lists per label, without a per-label full-image scan."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return []
    labs = mask[ys, xs]
    order = np.argsort(labs, kind="stable")
    ys, xs, labs = ys[order], xs[order], labs[order]
    max_lab = int(labs[-1])
    ends = np.searchsorted(labs, np.arange(1, max_lab + 1), side="right")
    groups = []
    start = 0
    for lab in range(1, max_lab + 1):
        end = ends[lab - 1]
        if end > start:
            groups.append((lab, ys[start:end], xs[start:end]))
        start = end
    return groups


def _diffuse_instance(ys, xs):
    """Heat-diffusion flow for one instance; returns unit (dy, dx) per pixel."""
    y0, x0 = int(ys.min()), int(xs.min())
    bh = int(ys.max()) - y0 + 1
    bw = int(xs.max()) - x0 + 1
    ly = ys - y0 + 1
    lx = xs - x0 + 1
    inside = np.zeros((bh + 2, bw + 2), bool)
    inside[ly, lx] = True

    med_y, med_x = np.median(ys), np.median(xs)
    k = int(np.argmin((ys - med_y) ** 2 + (xs - med_x) ** 2))
    cy, cx = ly[k], lx[k]

    n_iter = 2 * max(bh, bw)
    heat = np.zeros((bh + 2, bw + 2), np.float64)
    core = inside[1:-1, 1:-1]
    for _ in range(n_iter):
        heat[cy, cx] += 1.0
        # non-instance neighbors contribute zero: they are never written to
        nb = (heat[:-2, 1:-1] + heat[2:, 1:-1] + heat[1:-1, :-2] + heat[1:-1, 2:])
        heat[1:-1, 1:-1] = np.where(core, nb * 0.25, 0.0)

    g = np.log1p(heat)
    dy = (g[2:, 1:-1] - g[:-2, 1:-1]) * 0.5
    dx = (g[1:-1, 2:] - g[1:-1, :-2]) * 0.5
    vy = dy[ly - 1, lx - 1]
    vx = dx[ly - 1, lx - 1]
    mag = np.sqrt(vy * vy + vx * vx)
    nz = mag > 0
    vy[nz] /= mag[nz]
    vx[nz] /= mag[nz]
    return vy, vx


def mask_to_flow(mask) -> np.ndarray:
    """(H, W, 3) float32 target: unit flows toward centers plus occupancy."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got {mask.shape}")
    flow = np.zeros(mask.shape + (3,), np.float32)
    flow[:, :, 2] = (mask > 0).astype(np.float32)
    for lab, ys, xs in _instance_groups(mask):
        vy, vx = _diffuse_instance(ys, xs)
        flow[ys, xs, 0] = vy
        flow[ys, xs, 1] = vx
    return flow


# ---------------------------------------------------------------------------
# flow -> mask


def _interp2(plane, py, px):
    """Bilinear interpolation at clamped in-bounds float positions."""
    h, w = plane.shape
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    np.clip(y0, 0, max(h - 2, 0), out=y0)
    np.clip(x0, 0, max(w - 2, 0), out=x0)
    fy = py - y0
    fx = px - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return (
        plane[y0, x0] * (1 - fy) * (1 - fx)
        + plane[y0, x1] * (1 - fy) * fx
        + plane[y1, x0] * fy * (1 - fx)
        + plane[y1, x1] * fy * fx
    )


def follow_flows(flow, params: FlowParams):
    """Advect every foreground pixel along the flow for n_follow_steps.

    Returns (final_positions (P, 2) float64, source_ys, source_xs), with
    foreground defined by cell_logit > cell_threshold and positions clamped
    to the image rectangle at every step.
    """
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 3:
        raise DataError(f"flow must be (H, W, 3), got {flow.shape}")
    if not np.isfinite(flow).all():
        raise DataError("flow contains non-finite values")
    h, w = flow.shape[:2]
    ys, xs = np.nonzero(flow[:, :, 2] > params.cell_threshold)
    if ys.size == 0:
        return np.zeros((0, 2)), ys, xs
    fy = flow[:, :, 0].astype(np.float64)
    fx = flow[:, :, 1].astype(np.float64)
    py = ys.astype(np.float64)
    px = xs.astype(np.float64)
    for _ in range(params.n_follow_steps):
        vy = _interp2(fy, py, px)
        vx = _interp2(fx, py, px)
        py += params.step_size * vy
        px += params.step_size * vx
        np.clip(py, 0.0, h - 1.0, out=py)
        np.clip(px, 0.0, w - 1.0, out=px)
    return np.stack([py, px], axis=1), ys, xs


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # smaller index wins so merged labels are scan-order stable
            if ri < rj:
                self.parent[rj] = ri
            else:
                self.parent[ri] = rj


def cluster_sinks(positions, source_ys, source_xs, shape_hw, params: FlowParams):
    """Histogram trajectory endpoints, find sink cells, assign sources.

    A sink is a histogram cell that is >= all 8 neighbors with count >= 3;
    sinks closer than sink_merge_radius (in pixels) merge. Every source pixel
    labels itself with the sink nearest its final position.
    """
    h, w = shape_hw
    mask = np.zeros((h, w), np.int32)
    if len(positions) == 0:
        return mask
    b = params.sink_bin
    by = np.floor(positions[:, 0] / b + 0.5).astype(np.int64)
    bx = np.floor(positions[:, 1] / b + 0.5).astype(np.int64)
    nby = int(np.floor((h - 1) / b + 0.5)) + 1
    nbx = int(np.floor((w - 1) / b + 0.5)) + 1
    counts = np.bincount(by * nbx + bx, minlength=nby * nbx).reshape(nby, nbx)

    padded = np.pad(counts, 1)
    is_max = counts >= 3
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            if dy == 1 and dx == 1:
                continue
            is_max &= counts >= padded[dy : dy + nby, dx : dx + nbx]
    sink_by, sink_bx = np.nonzero(is_max)
    if sink_by.size == 0:
        return mask

    # merge nearby sinks (plateaus and split peaks) by proximity
    sy = sink_by.astype(np.float64) * b
    sx = sink_bx.astype(np.float64) * b
    uf = _UnionFind(sink_by.size)
    r2 = params.sink_merge_radius**2
    for i in range(sink_by.size):
        d2 = (sy[i] - sy[i + 1 :]) ** 2 + (sx[i] - sx[i + 1 :]) ** 2
        for j in np.nonzero(d2 <= r2)[0]:
            uf.union(i, i + 1 + int(j))
    roots = np.array([uf.find(i) for i in range(sink_by.size)])

    d2 = (positions[:, 0, None] - sy[None, :]) ** 2 + (positions[:, 1, None] - sx[None, :]) ** 2
    nearest = np.argmin(d2, axis=1)  # first minimum: deterministic tie-break
    mask[source_ys, source_xs] = roots[nearest].astype(np.int32) + 1
    return canonicalize_mask(mask)


def remove_small_instances(mask, min_size) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.max() == 0:
        return mask.astype(np.int32, copy=True)
    counts = np.bincount(mask.ravel())
    kill = np.nonzero((counts > 0) & (counts < min_size))[0]
    out = mask.astype(np.int32, copy=True)
    if kill.size:
        out[np.isin(out, kill[kill > 0])] = 0
    return out


def flow_to_mask(flow, params: FlowParams = FlowParams()) -> np.ndarray:
    positions, ys, xs = follow_flows(flow, params)
    mask = cluster_sinks(positions, ys, xs, np.asarray(flow).shape[:2], params)
    return canonicalize_mask(remove_small_instances(mask, params.min_size))


# ---------------------------------------------------------------------------
# debug container: three row-major float32 planes


def save_flow_map(flow, path):
    flow = np.ascontiguousarray(np.asarray(flow, dtype=np.float32))
    if flow.ndim != 3 or flow.shape[2] != 3:
        raise DataError(f"flow must be (H, W, 3), got {flow.shape}")
    h, w = flow.shape[:2]
    planes = flow.transpose(2, 0, 1)  # stored plane-major
    body = struct.pack("<III", FLOW_VERSION, h, w) + planes.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + body + struct.pack("<I", zlib.crc32(body)))


def load_flow_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(FLOW_MAGIC) + 16 or blob[: len(FLOW_MAGIC)] != FLOW_MAGIC:
        raise DataError(f"not a flow container: {path}")
    body, (crc,) = blob[len(FLOW_MAGIC) : -4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DataError(f"flow container checksum mismatch: {path}")
    version, h, w = struct.unpack("<III", body[:12])
    if version != FLOW_VERSION:
        raise DataError(f"unsupported flow container version {version}")
    data = np.frombuffer(body[12:], dtype="<f4")
    if data.size != 3 * h * w:
        raise DataError(f"flow container payload size mismatch: {path}")
    return data.reshape(3, h, w).transpose(1, 2, 0).astype(np.float32)
