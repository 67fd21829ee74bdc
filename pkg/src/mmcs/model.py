"""Encoder-decoder segmentation network on NumPy, with loss, SGD, and schedule.

The network maps (B, H, W, 2) tiles to (B, H, W, 3) flow maps. Layout is
NHWC throughout: 3x3 convolutions run as one GEMM over patch columns built
with nine strided slice copies, which keeps the hot loop inside BLAS. Each
resolution level is a residual block of two 3x3 convolutions; downsampling is
2x2 max pooling, upsampling nearest-neighbor with a 1x1 projection onto the
skip width, and skips are added (not concatenated). Kernels are stored
(3, 3, cin, cout) so `w.reshape(9 * cin, cout)` lines up with the column
layout without copies.

Float32 is the training dtype; a float64 build exists for finite-difference
gradient checks. Loss reductions accumulate in float64 either way.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib

import numpy as np

from .core import RngStream
from .errors import CheckpointError, DataError, NumericError

FLOW_TARGET_SCALE = 5.0

CHECKPOINT_MAGIC = b"MMCSNET\0"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# primitive layers: forward returns what backward needs


def _im2col(x):
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    buf = np.empty((b, h, w, 9, c), x.dtype)
    k = 0
    for ky in range(3):
        for kx in range(3):
            buf[:, :, :, k, :] = xp[:, ky : ky + h, kx : kx + w, :]
            k += 1
    return buf


def _col2im(dbuf, x_shape):
    b, h, w, c = x_shape
    dxp = np.zeros((b, h + 2, w + 2, c), dbuf.dtype)
    k = 0
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + h, kx : kx + w, :] += dbuf[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def conv3x3_forward(x, w, b, cols_out=None):
    bs, h, wd, cin = x.shape
    cout = w.shape[3]
    cols = _im2col(x).reshape(bs * h * wd, 9 * cin)
    if cols_out is not None:
        cols_out.append(cols)
    y = cols @ w.reshape(9 * cin, cout)
    y += b
    return y.reshape(bs, h, wd, cout)


def conv3x3_backward(dy, x, w, cols=None):
    bs, h, wd, cin = x.shape
    cout = w.shape[3]
    dym = dy.reshape(bs * h * wd, cout)
    if cols is None:
        cols = _im2col(x).reshape(bs * h * wd, 9 * cin)
    dw = (cols.T @ dym).reshape(w.shape)
    db = dym.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    dcols = dym @ w.reshape(9 * cin, cout).T
    dx = _col2im(dcols.reshape(bs, h, wd, 9, cin), x.shape)
    return dx, dw, db


def conv1x1_forward(x, w, b=None):
    y = x @ w  # contracts the channel axis
    if b is not None:
        y = y + b
    return y


def conv1x1_backward(dy, x, w, with_bias=True):
    bs, h, wd, cin = x.shape
    dym = dy.reshape(-1, dy.shape[3])
    xm = x.reshape(-1, cin)
    dw = xm.T @ dym
    db = dym.sum(axis=0, dtype=np.float64).astype(dy.dtype) if with_bias else None
    dx = (dym @ w.T).reshape(x.shape)
    return dx, dw, db


def maxpool2_forward(x):
    b, h, w, c = x.shape
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(b, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=4)  # first max wins ties: deterministic routing
    y = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    return y, idx


def maxpool2_backward(dy, idx, x_shape):
    b, h, w, c = x_shape
    dwin = np.zeros((b, h // 2, w // 2, c, 4), dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=4)
    dx = dwin.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dx.reshape(b, h, w, c)


def upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dy):
    b, h2, w2, c = dy.shape
    return dy.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# network


@dataclasses.dataclass
class SegNet:
    levels: int
    base_width: int
    in_channels: int
    out_channels: int
    dtype: object
    params: dict
    param_order: tuple

    def width(self, level):
        return self.base_width * (1 << level)

    @property
    def pool_factor(self):
        return 1 << (self.levels - 1)

    def copy(self):
        return SegNet(
            self.levels, self.base_width, self.in_channels, self.out_channels,
            self.dtype, {k: v.copy() for k, v in self.params.items()},
            self.param_order,
        )


def _block_param_specs(name, cin, cout):
    specs = [
        (f"{name}_a_w", (3, 3, cin, cout)),
        (f"{name}_a_b", (cout,)),
        (f"{name}_b_w", (3, 3, cout, cout)),
        (f"{name}_b_b", (cout,)),
    ]
    if cin != cout:
        specs.append((f"{name}_sc_w", (cin, cout)))
    return specs


def _param_specs(levels, base_width, in_channels, out_channels):
    specs = []
    cin = in_channels
    for i in range(levels):
        cout = base_width * (1 << i)
        specs += _block_param_specs(f"enc{i}", cin, cout)
        cin = cout
    for i in range(levels - 2, -1, -1):
        wide, narrow = base_width * (1 << (i + 1)), base_width * (1 << i)
        specs += [(f"proj{i}_w", (wide, narrow)), (f"proj{i}_b", (narrow,))]
        specs += _block_param_specs(f"dec{i}", narrow, narrow)
    specs += [
        ("head_w", (base_width, out_channels)),
        ("head_b", (out_channels,)),
    ]
    return specs


def create_net(levels=3, base_width=16, in_channels=2, out_channels=3,
               dtype=np.float32, init_stream: RngStream | None = None) -> SegNet:
    """He-initialized network; zero biases. Deterministic given the stream."""
    if levels < 2:
        raise DataError("need at least 2 resolution levels")
    if base_width < 1:
        raise DataError("base_width must be >= 1")
    specs = _param_specs(levels, base_width, in_channels, out_channels)
    g = (init_stream or RngStream(0)).child("init").generator()
    params = {}
    for name, shape in specs:
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = (g.standard_normal(shape) * std).astype(dtype)
    return SegNet(levels, base_width, in_channels, out_channels, dtype,
                  params, tuple(n for n, _ in specs))


def count_params(net: SegNet) -> int:
    return sum(int(p.size) for p in net.params.values())


def _block_forward(p, name, x, cache):
    # conv activations and im2col buffers are kept for backward: rebuilding
    # the columns costs more wall time than they cost memory at tile scale
    cols = []
    a = conv3x3_forward(x, p[f"{name}_a_w"], p[f"{name}_a_b"], cols_out=cols)
    ar = np.maximum(a, 0)
    bpre = conv3x3_forward(ar, p[f"{name}_b_w"], p[f"{name}_b_b"], cols_out=cols)
    sc_w = p.get(f"{name}_sc_w")
    pre = bpre + (x if sc_w is None else conv1x1_forward(x, sc_w))
    out = np.maximum(pre, 0)
    cache[name] = (x, a, ar, pre, cols)
    return out


def _block_backward(p, name, dy, cache, grads):
    x, a, ar, pre, cols = cache[name]
    dpre = dy * (pre > 0)
    dar, grads[f"{name}_b_w"], grads[f"{name}_b_b"] = conv3x3_backward(
        dpre, ar, p[f"{name}_b_w"], cols=cols[1]
    )
    da = dar * (a > 0)
    dx, grads[f"{name}_a_w"], grads[f"{name}_a_b"] = conv3x3_backward(
        da, x, p[f"{name}_a_w"], cols=cols[0]
    )
    sc_w = p.get(f"{name}_sc_w")
    if sc_w is None:
        dx += dpre
    else:
        dsc, dw_sc, _ = conv1x1_backward(dpre, x, sc_w, with_bias=False)
        dx += dsc
        grads[f"{name}_sc_w"] = dw_sc
    return dx


def forward(net: SegNet, x, want_cache=False):
    """(B, H, W, in) -> (B, H, W, out); optionally returns the backward cache."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[3] != net.in_channels:
        raise DataError(f"expected (B, H, W, {net.in_channels}), got {x.shape}")
    f = net.pool_factor
    if x.shape[1] % f or x.shape[2] % f or x.shape[1] == 0 or x.shape[2] == 0:
        raise DataError(
            f"tile sides must be positive multiples of {f}, got {x.shape[1:3]}"
        )
    x = x.astype(net.dtype, copy=False)
    p = net.params
    cache = {"x_shapes": []}
    enc = []
    h = x
    for i in range(net.levels):
        h = _block_forward(p, f"enc{i}", h, cache)
        enc.append(h)
        if i < net.levels - 1:
            cache["x_shapes"].append(h.shape)
            h, idx = maxpool2_forward(h)
            cache[f"pool{i}"] = idx
    for i in range(net.levels - 2, -1, -1):
        proj = conv1x1_forward(h, p[f"proj{i}_w"], p[f"proj{i}_b"])
        up = upsample2_forward(proj)
        cache[f"proj_in{i}"] = h
        s = up + enc[i]
        h = _block_forward(p, f"dec{i}", s, cache)
    y = conv1x1_forward(h, p["head_w"], p["head_b"])
    cache["head_in"] = h
    if want_cache:
        return y, cache
    return y


def backward(net: SegNet, cache, dy):
    """Gradients of a scalar loss wrt all parameters, given d(loss)/d(output)."""
    p = net.params
    grads = {}
    dh, grads["head_w"], grads["head_b"] = conv1x1_backward(
        dy.astype(net.dtype, copy=False), cache["head_in"], p["head_w"]
    )
    denc = {}
    for i in range(0, net.levels - 1):
        ds = _block_backward(p, f"dec{i}", dh, cache, grads)
        denc[i] = ds  # the add fans out: same gradient to skip and upsample
        dproj = upsample2_backward(ds)
        dh, grads[f"proj{i}_w"], grads[f"proj{i}_b"] = conv1x1_backward(
            dproj, cache[f"proj_in{i}"], p[f"proj{i}_w"]
        )
    for i in range(net.levels - 1, -1, -1):
        if i < net.levels - 1:
            dh = maxpool2_backward(dh, cache[f"pool{i}"], cache["x_shapes"][i])
            dh = dh + denc[i]
        dh = _block_backward(p, f"enc{i}", dh, cache, grads)
    return grads


# ---------------------------------------------------------------------------
# losses (value and gradient together; reductions in float64)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_with_logits(x, z):
    # max(x,0) - x*z + log(1 + exp(-|x|)): stable for large |x|
    return np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))


def supervised_loss(pred, target):
    """MSE against 5x unit flows plus BCE-with-logits against occupancy.

    `target` carries (flow_y, flow_x, occupancy) in its last axis, as produced
    by mask_to_flow. Returns (loss, dloss/dpred). MSE averages over all flow
    entries including background (teaching zero flow outside cells); BCE
    averages over pixels.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[-1] != 3:
        raise DataError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    occupancy = target[..., 2]
    diff = pred[..., :2].astype(np.float64) - FLOW_TARGET_SCALE * target[..., :2]
    n_flow = diff.size
    mse = float((diff * diff).sum() / n_flow)
    x = pred[..., 2].astype(np.float64)
    n_pix = x.size
    bce = float(_bce_with_logits(x, occupancy).sum() / n_pix)
    dpred = np.empty(pred.shape, np.float64)
    dpred[..., :2] = 2.0 * diff / n_flow
    dpred[..., 2] = (_sigmoid(x) - occupancy) / n_pix
    return mse + bce, dpred.astype(pred.dtype)


def pseudo_loss(pred, ztilde):
    """Same two-part loss against a stored raw-output target.

    The target's flow channels are already in the network's output scale, so
    no x5 factor; the logit channel is squashed to a soft probability target.
    """
    pred = np.asarray(pred)
    ztilde = np.asarray(ztilde, dtype=np.float64)
    if pred.shape != ztilde.shape:
        raise DataError(f"shape mismatch: pred {pred.shape} vs target {ztilde.shape}")
    diff = pred[..., :2].astype(np.float64) - ztilde[..., :2]
    n_flow = diff.size
    mse = float((diff * diff).sum() / n_flow)
    x = pred[..., 2].astype(np.float64)
    s = _sigmoid(ztilde[..., 2])
    n_pix = x.size
    bce = float(_bce_with_logits(x, s).sum() / n_pix)
    dpred = np.empty(pred.shape, np.float64)
    dpred[..., :2] = 2.0 * diff / n_flow
    dpred[..., 2] = (_sigmoid(x) - s) / n_pix
    return mse + bce, dpred.astype(pred.dtype)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclasses.dataclass(frozen=True)
class SgdConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    warmup_epochs: int = 10
    anneal_start_epoch: int | None = None
    anneal_period: int = 100
    lr_floor: float = 0.0016
    batch_size: int = 16

    def __post_init__(self):
        if not self.lr0 > self.lr_floor > 0:
            raise DataError("need lr0 > lr_floor > 0")
        if self.anneal_period < 1:
            raise DataError("anneal_period must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.warmup_epochs < 0:
            raise DataError("warmup_epochs must be >= 0")


def lr_at(epoch, cfg: SgdConfig) -> float:
    """Learning rate for a 0-based epoch index: linear warmup, plateau, then
    periodic halving from anneal_start_epoch down to lr_floor."""
    if epoch < 0:
        raise DataError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        return cfg.lr0 * (epoch + 1) / cfg.warmup_epochs
    if cfg.anneal_start_epoch is None or epoch < cfg.anneal_start_epoch:
        return cfg.lr0
    halvings = (epoch - cfg.anneal_start_epoch) // cfg.anneal_period + 1
    return max(cfg.lr0 * 0.5 ** min(halvings, 2000), cfg.lr_floor)


class SgdState:
    """Momentum buffers, one per parameter, zero-initialized."""

    def __init__(self, net: SegNet):
        self.velocity = {k: np.zeros_like(v) for k, v in net.params.items()}


def sgd_step(net: SegNet, grads, state: SgdState, cfg: SgdConfig, epoch):
    """v <- momentum*v + g + wd*theta; theta <- theta - lr*v. In place.

    Raises NumericError before touching anything if any gradient is non-finite.
    """
    for name in net.param_order:
        if not np.isfinite(grads[name]).all():
            raise NumericError(f"non-finite gradient in {name}; step aborted")
    lr = lr_at(epoch, cfg)
    for name in net.param_order:
        v = state.velocity[name]
        theta = net.params[name]
        v *= cfg.momentum
        v += grads[name]
        v += cfg.weight_decay * theta
        theta -= lr * v
    return net


# ---------------------------------------------------------------------------
# checkpoint container


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        return self.take(self.u32()).decode("utf-8")


def save_checkpoint(net: SegNet, path, metadata=None):
    """Binary container: magic, version, arch JSON, named float32 blobs in
    fixed order, key=value metadata strings, CRC32 trailer."""
    metadata = dict(metadata or {})
    arch = {
        "levels": net.levels,
        "base_width": net.base_width,
        "in_channels": net.in_channels,
        "out_channels": net.out_channels,
    }
    parts = [struct.pack("<I", CHECKPOINT_VERSION), _pack_str(json.dumps(arch, sort_keys=True))]
    parts.append(struct.pack("<I", len(net.param_order)))
    for name in net.param_order:
        arr = np.ascontiguousarray(net.params[name], dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        raw = arr.tobytes()
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(struct.pack("<I", len(metadata)))
    for key in sorted(metadata):
        parts.append(_pack_str(str(key)) + _pack_str(str(metadata[key])))
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Returns (net, metadata). Verifies magic, version, and checksum."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    body = blob[len(CHECKPOINT_MAGIC) : -4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"checkpoint checksum mismatch: {path}")
    r = _Reader(body)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = json.loads(r.string())
    net = create_net(
        levels=arch["levels"], base_width=arch["base_width"],
        in_channels=arch["in_channels"], out_channels=arch["out_channels"],
        dtype=np.float32, init_stream=RngStream(0),
    )
    n = r.u32()
    if n != len(net.param_order):
        raise CheckpointError(f"parameter count mismatch: {n}")
    for _ in range(n):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        nbytes = r.u32()
        raw = r.take(nbytes)
        if name not in net.params:
            raise CheckpointError(f"unknown parameter {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if arr.shape != net.params[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {arr.shape} vs {net.params[name].shape}"
            )
        net.params[name] = arr
    meta = {}
    for _ in range(r.u32()):
        key = r.string()
        meta[key] = r.string()
    return net, meta
