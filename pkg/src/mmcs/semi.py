"""Temporal-ensembling trainer: supervised pretraining, pseudo-label store,
mixed-minibatch training with a reweighted loss, and EMA pseudo updates.

Training samples arrive already normalized and diameter-rescaled. Each epoch
shuffles the pooled labeled+unlabeled id list with an epoch-keyed substream,
walks it in batches, separates every batch into its labeled and unlabeled
parts, and takes exactly one optimizer step per batch. Unlabeled samples are
augmented by the same pipeline as labeled ones, with the stored pseudo-label
warped by the identical affine so targets stay geometrically registered.

Per-sample augmentation streams are keyed (phase, epoch, uid), never by batch
position, so dropping one side of a batch (w = 0 or w = 1) cannot shift any
other sample's random draws. That is what makes the w = 0 run bit-identical
to a plain supervised pass over the labeled subsequence of the same batches.

Pseudo-labels live in raw network-output space: flow channels are averaged as
raw regression values (no unit renormalization, no x5 scaling) and the logit
channel as a raw logit, exactly matching an elementwise midpoint update.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import model as nn
from .augment import AugmentConfig, random_augment, random_augment_pair
from .core import RngStream
from .errors import DataError, EmptyDatasetError, NumericError
from .flows import mask_to_flow
from .model import SegNet, SgdConfig, SgdState


@dataclasses.dataclass(frozen=True)
class TrainSample:
    """One prepared image: normalized, diameter-rescaled, channels-last."""

    uid: str
    image: np.ndarray  # (H, W, 2) float32
    mask: np.ndarray | None = None  # (H, W) int32 for labeled samples

    @property
    def labeled(self):
        return self.mask is not None


@dataclasses.dataclass(frozen=True)
class SemiConfig:
    epochs: int
    w: float = 0.4
    update_interval: int = 100  # pseudo-update period T, in epochs
    batch_size: int = 16
    pretrain_epochs: int = 200

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise DataError("w must lie in [0, 1]")
        if self.update_interval < 1:
            raise DataError("update_interval must be >= 1")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.pretrain_epochs < 0:
            raise DataError("pretrain_epochs must be >= 0")


@dataclasses.dataclass
class PseudoLabelStore:
    entries: dict  # uid -> (H, W, 3) float32 raw network output
    update_count: int = 0
    last_update_epoch: int | None = None


@dataclasses.dataclass
class CombinedLoss:
    total: float
    labeled_mean: float
    unlabeled_mean: float
    dpred_labeled: np.ndarray | None
    dpred_unlabeled: np.ndarray | None


def _forward_full(net: SegNet, image):
    """Forward one full image, zero-padding bottom/right to the pool multiple."""
    h, w = image.shape[:2]
    f = net.pool_factor
    hp, wp = -(-h // f) * f, -(-w // f) * f
    if (hp, wp) != (h, w):
        padded = np.zeros((hp, wp, image.shape[2]), image.dtype)
        padded[:h, :w] = image
        image = padded
    return nn.forward(net, image[None])[0, :h, :w]


def combine_side_means(labeled_mean, unlabeled_mean, has_labeled, has_unlabeled, w):
    """The reweighting arithmetic alone: (1-w)*mean_L + w*mean_U, with an
    absent side contributing exactly zero rather than a 0/0."""
    if not (has_labeled or has_unlabeled):
        raise DataError("batch has neither labeled nor unlabeled samples")
    total = 0.0
    if has_labeled:
        total += (1.0 - w) * labeled_mean
    if has_unlabeled:
        total += w * unlabeled_mean
    return total


def combined_batch_loss(pred_l, targets_l, pred_u, pseudo_u, w):
    """Reweighted batch objective over the separated minibatch.

    Labeled predictions score against x5-scaled flow targets, unlabeled ones
    against their stored raw pseudo-labels (constant targets: no gradient
    flows into the store). Returns the total plus per-side means and
    per-side prediction gradients of the total.
    """
    if not 0.0 <= w <= 1.0:
        raise DataError("w must lie in [0, 1]")
    has_l = pred_l is not None and len(pred_l) > 0
    has_u = pred_u is not None and len(pred_u) > 0
    l_mean = u_mean = 0.0
    dl = du = None
    if has_l:
        l_mean, dl_raw = nn.supervised_loss(pred_l, targets_l)
        dl = (1.0 - w) * dl_raw
    if has_u:
        u_mean, du_raw = nn.pseudo_loss(pred_u, pseudo_u)
        du = np.zeros_like(du_raw) if w == 0.0 else w * du_raw
    total = combine_side_means(l_mean, u_mean, has_l, has_u, w)
    return CombinedLoss(total, l_mean, u_mean, dl, du)


# ---------------------------------------------------------------------------
# pseudo-label store


def init_pseudo(net: SegNet, unlabeled) -> PseudoLabelStore:
    entries = {}
    for s in unlabeled:
        z = _forward_full(net, s.image)
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite prediction for {s.uid}")
        # float64 accumulator: repeated averaging in float32 drifts past 1e-6
        entries[s.uid] = z.astype(np.float64)
    return PseudoLabelStore(entries=entries)


def update_pseudo(store: PseudoLabelStore, net: SegNet, unlabeled, epoch=None):
    """z <- 0.5*z + 0.5*f(x) on the un-augmented rescaled image, elementwise,
    walking entries in a fixed id order."""
    by_uid = {s.uid: s for s in unlabeled}
    if set(by_uid) != set(store.entries):
        raise DataError("pseudo store ids do not match the unlabeled set")
    for uid in sorted(store.entries):
        pred = _forward_full(net, by_uid[uid].image)
        z = store.entries[uid]
        if pred.shape != z.shape:
            raise DataError(f"pseudo-label shape drift for {uid}")
        z += pred
        z *= 0.5
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite pseudo-label for {uid}")
    store.update_count += 1
    store.last_update_epoch = epoch
    return store


# ---------------------------------------------------------------------------
# training loops


def _zero_grads(net):
    return {k: np.zeros_like(v) for k, v in net.params.items()}


def _augmented_labeled(sample, aug_cfg, stream):
    img, mask = random_augment(sample.image, sample.mask, aug_cfg, stream)
    return img, mask_to_flow(mask)


def _log_row(fh, **fields):
    if fh is not None:
        fh.write(json.dumps(fields) + "\n")


def _check_samples(samples, want_mask):
    for s in samples:
        if s.image.ndim != 3 or s.image.shape[2] != 2:
            raise DataError(f"{s.uid}: expected (H, W, 2) image")
        if want_mask and s.mask is None:
            raise DataError(f"{s.uid}: labeled sample without mask")


def pretrain(net: SegNet, labeled, aug_cfg: AugmentConfig, sgd_cfg: SgdConfig,
             stream: RngStream, epochs, log_file=None, checkpoint_path=None,
             checkpoint_meta=None) -> SegNet:
    """Plain supervised loop over the labeled set; optionally checkpoints."""
    if not labeled:
        raise EmptyDatasetError("pretraining needs at least one labeled image")
    _check_samples(labeled, want_mask=True)
    phase = stream.child("pretrain")
    state = SgdState(net)
    uids = [s.uid for s in labeled]
    by_uid = {s.uid: s for s in labeled}
    if len(by_uid) != len(uids):
        raise DataError("duplicate sample ids")
    for epoch in range(epochs):
        g = phase.child("shuffle", epoch).generator()
        order = g.permutation(len(uids))
        epoch_losses = []
        for lo in range(0, len(order), sgd_cfg.batch_size):
            chunk = [uids[i] for i in order[lo : lo + sgd_cfg.batch_size]]
            tiles, targets = [], []
            for uid in chunk:
                img, tgt = _augmented_labeled(
                    by_uid[uid], aug_cfg, phase.child("augment", epoch, uid)
                )
                tiles.append(img)
                targets.append(tgt)
            x = np.stack(tiles)
            t = np.stack(targets)
            y, cache = nn.forward(net, x, want_cache=True)
            loss, dy = nn.supervised_loss(y, t)
            grads = nn.backward(net, cache, dy)
            nn.sgd_step(net, grads, state, sgd_cfg, epoch)
            epoch_losses.append(loss)
        mean_loss = float(np.mean(epoch_losses))
        _log_row(log_file, epoch=epoch + 1, lr=nn.lr_at(epoch, sgd_cfg),
                 labeled_loss=mean_loss, unlabeled_loss=0.0,
                 total_loss=mean_loss, pseudo_update=False)
    if checkpoint_path is not None:
        nn.save_checkpoint(net, checkpoint_path, checkpoint_meta)
    return net


def semi_train(net: SegNet, labeled, unlabeled, store: PseudoLabelStore,
               semi_cfg: SemiConfig, sgd_cfg: SgdConfig, aug_cfg: AugmentConfig,
               stream: RngStream, log_file=None, checkpoint_dir=None,
               checkpoint_meta=None) -> SegNet:
    """Mixed-minibatch training per the pooled-shuffle schedule.

    Epochs count 1..epochs; the optimizer sees 0-based indices so the lr
    schedule starts fresh at warmup. Pseudo-labels refresh after each epoch
    divisible by update_interval; checkpoints land at those epochs and at the
    end when a checkpoint directory is given.
    """
    if not labeled and not unlabeled:
        raise EmptyDatasetError("nothing to train on")
    _check_samples(labeled, want_mask=True)
    _check_samples(unlabeled, want_mask=False)
    if set(store.entries) != {s.uid for s in unlabeled}:
        raise DataError("pseudo store does not cover the unlabeled set")
    phase = stream.child("semi")
    state = SgdState(net)
    by_uid = {s.uid: s for s in list(labeled) + list(unlabeled)}
    uids = [s.uid for s in labeled] + [s.uid for s in unlabeled]
    if len(by_uid) != len(uids):
        raise DataError("duplicate sample ids")
    labeled_ids = {s.uid for s in labeled}
    w = semi_cfg.w
    for k in range(1, semi_cfg.epochs + 1):
        g = phase.child("shuffle", k).generator()
        order = g.permutation(len(uids))
        batch_rows = []
        for lo in range(0, len(order), semi_cfg.batch_size):
            chunk = [uids[i] for i in order[lo : lo + semi_cfg.batch_size]]
            bl = [u for u in chunk if u in labeled_ids]
            bu = [u for u in chunk if u not in labeled_ids]
            # a zero-weighted side is dropped before any compute: its term is
            # exactly zero, and per-uid streams keep other draws unshifted
            if w == 0.0:
                bu = []
            if w == 1.0:
                bl = []
            if not bl and not bu:
                nn.sgd_step(net, _zero_grads(net), state, sgd_cfg, k - 1)
                continue
            pred_l = tgt_l = cache_l = None
            pred_u = z_u = cache_u = None
            if bl:
                tiles, targets = [], []
                for uid in bl:
                    img, tgt = _augmented_labeled(
                        by_uid[uid], aug_cfg, phase.child("augment", k, uid)
                    )
                    tiles.append(img)
                    targets.append(tgt)
                xl = np.stack(tiles)
                tgt_l = np.stack(targets)
                pred_l, cache_l = nn.forward(net, xl, want_cache=True)
            if bu:
                tiles, zs = [], []
                for uid in bu:
                    img, z = random_augment_pair(
                        by_uid[uid].image, store.entries[uid], aug_cfg,
                        phase.child("augment", k, uid),
                    )
                    tiles.append(img)
                    zs.append(z.astype(np.float32))
                xu = np.stack(tiles)
                z_u = np.stack(zs)
                pred_u, cache_u = nn.forward(net, xu, want_cache=True)
            res = combined_batch_loss(pred_l, tgt_l, pred_u, z_u, w)
            grads = None
            if cache_l is not None:
                grads = nn.backward(net, cache_l, res.dpred_labeled)
            if cache_u is not None:
                gu = nn.backward(net, cache_u, res.dpred_unlabeled)
                if grads is None:
                    grads = gu
                else:
                    for name in grads:
                        grads[name] += gu[name]
            nn.sgd_step(net, grads, state, sgd_cfg, k - 1)
            batch_rows.append((res.total, res.labeled_mean if bl else None,
                               res.unlabeled_mean if bu else None))
        do_update = k % semi_cfg.update_interval == 0
        if do_update:
            update_pseudo(store, net, unlabeled, epoch=k)
        totals = [r[0] for r in batch_rows]
        lvals = [r[1] for r in batch_rows if r[1] is not None]
        uvals = [r[2] for r in batch_rows if r[2] is not None]
        _log_row(log_file, epoch=k, lr=nn.lr_at(k - 1, sgd_cfg),
                 labeled_loss=float(np.mean(lvals)) if lvals else 0.0,
                 unlabeled_loss=float(np.mean(uvals)) if uvals else 0.0,
                 total_loss=float(np.mean(totals)) if totals else 0.0,
                 pseudo_update=do_update)
        if checkpoint_dir is not None and do_update:
            nn.save_checkpoint(net, f"{checkpoint_dir}/ckpt_ep{k:04d}.ckpt",
                               checkpoint_meta)
    if checkpoint_dir is not None:
        nn.save_checkpoint(net, f"{checkpoint_dir}/final.ckpt", checkpoint_meta)
    return net


def epoch_schedule_report(semi_cfg: SemiConfig, sgd_cfg: SgdConfig):
    """Per-epoch control-flow listing: lr, pseudo-update and checkpoint flags."""
    rows = []
    for k in range(1, semi_cfg.epochs + 1):
        update = k % semi_cfg.update_interval == 0
        rows.append({
            "epoch": k,
            "lr": nn.lr_at(k - 1, sgd_cfg),
            "pseudo_update": update,
            "checkpoint": update or k == semi_cfg.epochs,
        })
    return rows
