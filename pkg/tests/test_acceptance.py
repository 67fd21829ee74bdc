"""Acceptance checks: closed-form training dynamics, gradient correctness,
schedule exactness, representation round-trips, and a desk-scale end-to-end
semi-supervised experiment driven through the installed CLI.

Each check carries its own wall-clock budget. The end-to-end chain runs once
in a module fixture; the determinism check repeats it and compares bytes.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from mmcs import model as nn
from mmcs import pipeline, semi
from mmcs.augment import AugmentConfig, percentile_normalize, random_augment
from mmcs.core import RngStream
from mmcs.diameter import dataset_mean_diameter, train_rescale
from mmcs.flows import flow_to_mask, mask_to_flow
from mmcs.ingest import SynthSpec, synth_blobs
from mmcs.metrics import dataset_f1, f1_at_iou, oracle_f1


def synth_samples(n_labeled, n_unlabeled, seed, size=48, count=(2, 4),
                  radius=(4.0, 7.0)):
    spec = SynthSpec(image_size=size, count_range=count, radius_range=radius)
    pairs = synth_blobs(spec, RngStream(seed), n_labeled + n_unlabeled)
    out = []
    for i, (img, mask) in enumerate(pairs):
        img = percentile_normalize(img)
        if i < n_labeled:
            out.append(semi.TrainSample(f"L{i:03d}", img, mask))
        else:
            out.append(semi.TrainSample(f"U{i:03d}", img))
    return out[:n_labeled], out[n_labeled:]


def best_iou_per_gt(pred, gt):
    """IoU of each gt instance with its best-overlapping prediction."""
    n_p, n_g = int(pred.max()), int(gt.max())
    if n_g == 0:
        return np.zeros(0)
    if n_p == 0:
        return np.zeros(n_g)
    joint = np.bincount(
        pred.astype(np.int64).ravel() * (n_g + 1) + gt.astype(np.int64).ravel(),
        minlength=(n_p + 1) * (n_g + 1),
    ).reshape(n_p + 1, n_g + 1)
    inter = joint[1:, 1:].astype(np.float64)
    area_p = joint[1:, :].sum(axis=1, keepdims=True)
    area_g = joint[:, 1:].sum(axis=0, keepdims=True)
    union = np.maximum(area_p + area_g - inter, 1)
    return (inter / union).max(axis=0)


def test_pseudo_label_ema_halves_toward_frozen_prediction():
    t0 = time.monotonic()
    rng = np.random.default_rng(41)
    net = nn.create_net(levels=2, base_width=4, init_stream=RngStream(41))
    samples = [
        semi.TrainSample(f"U{i}", rng.normal(size=(32, 32, 2)).astype(np.float32))
        for i in range(3)
    ]
    store = semi.init_pseudo(net, samples)
    frozen = {uid: z.astype(np.float64) for uid, z in store.entries.items()}
    z0 = {uid: rng.normal(size=z.shape) for uid, z in store.entries.items()}
    store = semi.PseudoLabelStore(entries={u: z.copy() for u, z in z0.items()})

    worst = 0.0
    for k in range(1, 11):
        semi.update_pseudo(store, net, samples)
        for uid in z0:
            expected = frozen[uid] + (z0[uid] - frozen[uid]) * 2.0 ** -k
            worst = max(worst, float(np.abs(store.entries[uid] - expected).max()))
    assert worst < 1e-6, f"max deviation from closed form {worst:.3g}"
    assert time.monotonic() - t0 < 5.0


def supervised_comparator(net, labeled, unlabeled_uids, epochs, sgd_cfg,
                          aug_cfg, stream):
    """Labeled-only training over the pooled shuffle order; a zero-weight
    mixed run must land on the same parameters bit for bit."""
    phase = stream.child("semi")
    state = nn.SgdState(net)
    by_uid = {s.uid: s for s in labeled}
    uids = [s.uid for s in labeled] + list(unlabeled_uids)
    for k in range(1, epochs + 1):
        order = phase.child("shuffle", k).generator().permutation(len(uids))
        for lo in range(0, len(order), sgd_cfg.batch_size):
            chunk = [uids[i] for i in order[lo : lo + sgd_cfg.batch_size]]
            batch = [u for u in chunk if u in by_uid]
            if not batch:
                zeros = {n: np.zeros_like(v) for n, v in net.params.items()}
                nn.sgd_step(net, zeros, state, sgd_cfg, k - 1)
                continue
            tiles, targets = [], []
            for uid in batch:
                img, mask = random_augment(by_uid[uid].image, by_uid[uid].mask,
                                           aug_cfg, phase.child("augment", k, uid))
                tiles.append(img)
                targets.append(mask_to_flow(mask))
            y, cache = nn.forward(net, np.stack(tiles), want_cache=True)
            _, dy = nn.supervised_loss(y, np.stack(targets))
            nn.sgd_step(net, nn.backward(net, cache, dy), state, sgd_cfg, k - 1)
    return net


def test_unlabeled_weight_arithmetic_and_zero_weight_trajectory():
    t0 = time.monotonic()
    # pure arithmetic of the two-sided combination
    for w, expect in ((0.0, 2.0), (0.05, 2.1), (0.4, 2.8), (1.0, 4.0)):
        got = semi.combine_side_means(2.0, 4.0, True, True, w)
        assert abs(got - expect) < 1e-12, (w, got)

    # full batch loss against independently computed per-sample means
    rng = np.random.default_rng(7)
    pred_l = rng.normal(size=(3, 8, 8, 3))
    tgt_l = np.stack([
        np.concatenate([rng.normal(size=(8, 8, 2)),
                        (rng.random(size=(8, 8, 1)) > 0.5).astype(float)], -1)
        for _ in range(3)
    ])
    pred_u = rng.normal(size=(2, 8, 8, 3))
    z_u = rng.normal(size=(2, 8, 8, 3))
    l_mean = np.mean([nn.supervised_loss(pred_l[i:i + 1], tgt_l[i:i + 1])[0]
                      for i in range(3)])
    u_mean = np.mean([nn.pseudo_loss(pred_u[i:i + 1], z_u[i:i + 1])[0]
                      for i in range(2)])
    for w in (0.0, 0.05, 0.4, 1.0):
        res = semi.combined_batch_loss(pred_l, tgt_l, pred_u, z_u, w)
        expect = (1.0 - w) * l_mean + w * u_mean
        assert abs(res.total - expect) < 1e-12 * max(1.0, abs(expect))

    # a w = 0 mixed run must retrace the supervised trajectory bit-exactly
    seed = 29
    labeled, unlabeled = synth_samples(6, 6, seed=seed)
    aug = AugmentConfig(tile=48)
    sgd = nn.SgdConfig(lr0=0.02, momentum=0.5, batch_size=4, warmup_epochs=5,
                       anneal_start_epoch=None)
    cfg = semi.SemiConfig(epochs=20, w=0.0, update_interval=10, batch_size=4)

    net_a = nn.create_net(2, 6, init_stream=RngStream(seed))
    store = semi.init_pseudo(net_a, unlabeled)
    semi.semi_train(net_a, labeled, unlabeled, store, cfg, sgd, aug,
                    RngStream(seed))
    net_b = nn.create_net(2, 6, init_stream=RngStream(seed))
    supervised_comparator(net_b, labeled, [s.uid for s in unlabeled],
                          cfg.epochs, sgd, aug, RngStream(seed))
    for name in net_a.params:
        assert np.array_equal(net_a.params[name], net_b.params[name]), name
    assert time.monotonic() - t0 < 120.0


def test_pseudo_update_schedule_exact_multiples():
    t0 = time.monotonic()
    sgd = nn.SgdConfig()
    for epochs, interval, expected in (
        (250, 100, [100, 200]),
        (99, 100, []),
        (300, 100, [100, 200, 300]),
    ):
        cfg = semi.SemiConfig(epochs=epochs, update_interval=interval)
        rows = semi.epoch_schedule_report(cfg, sgd)
        assert [r["epoch"] for r in rows] == list(range(1, epochs + 1))
        updates = [r["epoch"] for r in rows if r["pseudo_update"]]
        assert updates == expected, (epochs, interval, updates)
    assert time.monotonic() - t0 < 1.0


def test_analytic_gradients_match_finite_differences():
    t0 = time.monotonic()
    net = nn.create_net(levels=2, base_width=4, dtype=np.float64,
                        init_stream=RngStream(13))
    assert nn.count_params(net) <= 5000
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 32, 32, 2))
    target = np.concatenate(
        [rng.normal(size=(2, 32, 32, 2)),
         (rng.random(size=(2, 32, 32, 1)) > 0.5).astype(np.float64)], axis=-1)

    y, cache = nn.forward(net, x, want_cache=True)
    _, dy = nn.supervised_loss(y, target)
    grads = nn.backward(net, cache, dy)

    names = sorted(net.params)
    sizes = np.array([net.params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(int(offsets[-1]), size=100, replace=False)
    h = 1e-5
    worst = 0.0
    for flat in picks:
        layer = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, idx = names[layer], int(flat - offsets[layer])
        theta = net.params[name]
        keep = theta.flat[idx]
        theta.flat[idx] = keep + h
        up = nn.supervised_loss(nn.forward(net, x), target)[0]
        theta.flat[idx] = keep - h
        dn = nn.supervised_loss(nn.forward(net, x), target)[0]
        theta.flat[idx] = keep
        numeric = (up - dn) / (2.0 * h)
        analytic = grads[name].flat[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10)
        worst = max(worst, rel)
    assert worst < 1e-4, f"worst relative gradient error {worst:.3g}"
    assert time.monotonic() - t0 < 60.0


def test_lr_schedule_breakpoints_exact():
    t0 = time.monotonic()
    cfg = nn.SgdConfig(lr0=0.1, warmup_epochs=10, anneal_start_epoch=None)
    assert nn.lr_at(4, cfg) == 0.05
    assert nn.lr_at(9, cfg) == 0.1
    assert nn.lr_at(500, cfg) == 0.1

    annealed = nn.SgdConfig(lr0=0.1, warmup_epochs=10, anneal_start_epoch=1500,
                            anneal_period=100, lr_floor=0.0016)
    assert nn.lr_at(1700, annealed) == 0.0125
    floor_epoch = 1500 + 100 * int(math.ceil(math.log2(0.1 / 0.0016)))
    assert nn.lr_at(floor_epoch, annealed) == 0.0016
    assert nn.lr_at(floor_epoch + 100, annealed) == 0.0016
    assert nn.lr_at(10 ** 6, annealed) == 0.0016
    assert time.monotonic() - t0 < 1.0


def test_flow_round_trip_recovers_instances():
    t0 = time.monotonic()
    spec = SynthSpec(image_size=160, count_range=(2, 6),
                     radius_range=(6.0, 15.0))
    pairs = synth_blobs(spec, RngStream(61), 50)
    count_hits = 0
    ious = []
    for _, mask in pairs:
        recovered = flow_to_mask(mask_to_flow(mask))
        if recovered.max() == mask.max():
            count_hits += 1
        ious.extend(best_iou_per_gt(recovered, mask))
    assert count_hits >= 48, f"exact instance count on {count_hits}/50 images"
    mean_iou = float(np.mean(ious))
    assert mean_iou >= 0.85, f"mean per-instance IoU {mean_iou:.3f}"
    assert time.monotonic() - t0 < 120.0


def test_f1_matches_exhaustive_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(97)

    def random_mask(h, w):
        mask = np.zeros((h, w), np.int32)
        for lab in range(1, int(rng.integers(0, 7)) + 1):
            rh = int(rng.integers(2, max(3, h // 2)))
            rw = int(rng.integers(2, max(3, w // 2)))
            y = int(rng.integers(0, h - rh + 1))
            x = int(rng.integers(0, w - rw + 1))
            mask[y : y + rh, x : x + rw] = lab
        # relabel to consecutive ids in case a later box buried an earlier one
        out = np.zeros_like(mask)
        for i, lab in enumerate(np.unique(mask[mask > 0])):
            out[mask == lab] = i + 1
        return out

    for _ in range(500):
        h = int(rng.integers(8, 65))
        w = int(rng.integers(8, 65))
        pred, gt = random_mask(h, w), random_mask(h, w)
        a = f1_at_iou(pred, gt, 0.5)
        b = oracle_f1(pred, gt, 0.5)
        assert (a.tp, a.fp, a.fn) == (b.tp, b.fp, b.fn)
        assert a.f1 == b.f1
    assert time.monotonic() - t0 < 60.0


# ---------------------------------------------------------------------------
# end-to-end chain, shared by the last three checks


E2E_SEED = 0
E2E_DIAMETER = 12.0


def _cli(out_log, *args):
    argv = [sys.executable, "-m", "mmcs"] + [str(a) for a in args]
    t0 = time.monotonic()
    proc = subprocess.run(argv, capture_output=True, text=True)
    wall = time.monotonic() - t0
    assert proc.returncode == 0, f"{argv}\n{proc.stdout}\n{proc.stderr}"
    out_log.append((args[0], wall))
    return wall


def _run_chain(root, with_supervised):
    """synth -> pretrain -> semitrain -> infer -> eval, through the CLI."""
    timings = []
    data = root / "data"
    train = ("--tile", 64, "--batch-size", 8, "--lr0", 0.02)
    _cli(timings, "synth", "--out", data, "--seed", E2E_SEED,
         "--labeled", 40, "--unlabeled", 40, "--eval", 10, "--size", 64)
    manifest = data / "manifest.tsv"
    eval_images = [data / "images" / f"img_{i:03d}.png" for i in range(80, 90)]
    _cli(timings, "pretrain", "--manifest", manifest, "--out", root / "pre",
         "--seed", E2E_SEED, "--epochs", 200, "--base-width", 6,
         "--target-diameter", E2E_DIAMETER, *train)
    _cli(timings, "semitrain", "--manifest", manifest, "--out", root / "semi",
         "--init-checkpoint", root / "pre" / "pretrain.ckpt",
         "--seed", E2E_SEED, "--epochs", 250, "--w", 0.4, "--T", 100, *train)
    _cli(timings, "infer", "--checkpoint", root / "semi" / "final.ckpt",
         "--image", *eval_images, "--out", root / "masks",
         "--diameter", E2E_DIAMETER, "--tile", 64)
    _cli(timings, "eval", "--pred-dir", root / "masks",
         "--gt-manifest", manifest, "--out", root / "rep")
    result = {
        "root": root,
        "manifest": manifest,
        "eval_images": eval_images,
        "timings": timings,
        "report": json.load(open(root / "rep" / "report.json")),
    }
    if with_supervised:
        sup = []
        _cli(sup, "semitrain", "--manifest", manifest, "--out", root / "sup",
             "--init-checkpoint", root / "pre" / "pretrain.ckpt",
             "--seed", E2E_SEED, "--epochs", 250, "--w", 0, "--T", 100, *train)
        _cli(sup, "infer", "--checkpoint", root / "sup" / "final.ckpt",
             "--image", *eval_images, "--out", root / "masks_sup",
             "--diameter", E2E_DIAMETER, "--tile", 64)
        _cli(sup, "eval", "--pred-dir", root / "masks_sup",
             "--gt-manifest", manifest, "--out", root / "rep_sup")
        result["sup_timings"] = sup
        result["sup_report"] = json.load(open(root / "rep_sup" / "report.json"))
    return result


@pytest.fixture(scope="module")
def endtoend(tmp_path_factory):
    return _run_chain(tmp_path_factory.mktemp("e2e"), with_supervised=True)


def test_diameter_rescale_and_scale_consistent_inference(endtoend):
    t0 = time.monotonic()
    # rescaling training pairs to the reference diameter must land within 5%
    spec = SynthSpec(image_size=96, count_range=(2, 4), radius_range=(4.0, 10.0))
    pairs = synth_blobs(spec, RngStream(83), 12)
    stats = dataset_mean_diameter([m for _, m in pairs])
    assert stats.mean >= 8.0
    rescaled = [train_rescale(img, mask, stats, 30.0)[1] for img, mask in pairs]
    pooled = dataset_mean_diameter(rescaled)
    assert abs(pooled.mean - 30.0) <= 1.5, f"pooled mean {pooled.mean:.2f}"

    # doubling the image and the stated diameter must give the same masks
    net, meta = nn.load_checkpoint(endtoend["root"] / "semi" / "final.ckpt")
    model_d = float(meta["mean_diameter"])
    from mmcs.ingest import load_two_channel

    ious = []
    for path in endtoend["eval_images"][:3]:
        img = load_two_channel(path)
        base, _ = pipeline.infer_image(net, img, E2E_DIAMETER, model_d, 64)
        doubled = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
        big, _ = pipeline.infer_image(net, doubled, 2 * E2E_DIAMETER, model_d, 64)
        ious.extend(best_iou_per_gt(big[::2, ::2], base))
    mean_iou = float(np.mean(ious))
    assert mean_iou >= 0.8, f"scale-consistency IoU {mean_iou:.3f}"
    assert time.monotonic() - t0 < 120.0


# ---------------------------------------------------------------------------
# nucleus channel ablation


def touching_pair_dataset(n_images, seed, size=56):
    """Images where two cells share one smooth elliptical blob, split between
    the labels by nearest nucleus site. The sites are drawn at random inside
    the blob, so identical cytoplasm outlines carry different ground-truth
    cuts: the dividing line is unknowable from channel 0 and readable from
    the nucleus bumps in channel 1. One single-nucleus cell per image keeps
    the instance count varied."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    half = size // 2
    quad_centers = [(half // 2, half // 2), (half // 2, half + half // 2),
                    (half + half // 2, half // 2),
                    (half + half // 2, half + half // 2)]
    out = []
    for _ in range(n_images):
        mask = np.zeros((size, size), np.int32)
        sites = []
        quads = rng.permutation(4)[:3]
        label = 0
        for slot, kind in zip(quads, ("pair", "pair", "single")):
            qy, qx = quad_centers[slot]
            cy = qy + rng.uniform(-2.5, 2.5)
            cx = qx + rng.uniform(-2.5, 2.5)
            free = mask == 0
            if kind == "single":
                r = rng.uniform(5.0, 6.5)
                label += 1
                mask[((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & free] = label
                sites.append((cy, cx))
                continue
            a, b = rng.uniform(8.0, 10.0), rng.uniform(5.5, 6.5)
            ang = rng.uniform(0.0, np.pi)
            ca, sa = np.cos(ang), np.sin(ang)
            u = ((yy - cy) * sa + (xx - cx) * ca) / a
            v = ((yy - cy) * ca - (xx - cx) * sa) / b
            blob = (u * u + v * v <= 1.0) & free
            while True:  # two interior nucleus sites, well separated
                uu, vv = rng.uniform(-0.72, 0.72, size=(2, 2))
                if (uu ** 2 + vv ** 2).max() > 0.55:
                    continue
                py = cy + uu * a * sa + vv * b * ca
                px = cx + uu * a * ca - vv * b * sa
                if (py[0] - py[1]) ** 2 + (px[0] - px[1]) ** 2 >= 49.0:
                    break
            d0 = (yy - py[0]) ** 2 + (xx - px[0]) ** 2
            d1 = (yy - py[1]) ** 2 + (xx - px[1]) ** 2
            label += 1
            mask[blob & (d0 <= d1)] = label
            label += 1
            mask[blob & (d0 > d1)] = label
            sites.extend([(py[0], px[0]), (py[1], px[1])])

        img = np.zeros((size, size, 2), np.float32)
        img[..., 0] = np.where(mask > 0, 0.75, 0.05)
        for cy, cx in sites:
            img[..., 1] += np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / 4.5))
        img += rng.normal(scale=0.02, size=img.shape).astype(np.float32)
        out.append((percentile_normalize(img), mask))
    return out


def _train_and_score(train_pairs, eval_pairs, drop_nucleus, seed):
    def strip(img):
        if not drop_nucleus:
            return img
        img = img.copy()
        img[..., 1] = 0.0
        return img

    labeled = [semi.TrainSample(f"T{i:03d}", strip(img), mask)
               for i, (img, mask) in enumerate(train_pairs)]
    net = nn.create_net(levels=2, base_width=6, init_stream=RngStream(seed))
    sgd = nn.SgdConfig(lr0=0.02, momentum=0.9, batch_size=4, warmup_epochs=10,
                       anneal_start_epoch=None)
    semi.pretrain(net, labeled, AugmentConfig(tile=56), sgd, RngStream(seed),
                  epochs=150)
    scored = []
    for img, mask in eval_pairs:
        pred, _ = pipeline.infer_image(net, strip(img), 11.0, 11.0, 56)
        scored.append((pred, mask))
    return dataset_f1(scored).f1


def test_nucleus_channel_non_inferiority():
    t0 = time.monotonic()
    pairs = touching_pair_dataset(24, seed=59)
    train_pairs, eval_pairs = pairs[:16], pairs[16:]
    f1_with = _train_and_score(train_pairs, eval_pairs, False, seed=59)
    f1_without = _train_and_score(train_pairs, eval_pairs, True, seed=59)
    assert f1_with >= f1_without, (
        f"with nucleus {f1_with:.3f} < zero-filled {f1_without:.3f}"
    )
    assert time.monotonic() - t0 < 900.0


# ---------------------------------------------------------------------------
# end-to-end scores and determinism


def test_end_to_end_semi_supervised_pipeline(endtoend):
    semi_f1 = endtoend["report"]["pooled"]["f1"]
    sup_f1 = endtoend["sup_report"]["pooled"]["f1"]
    chain_wall = sum(t for _, t in endtoend["timings"])
    assert semi_f1 >= 0.80, f"pooled F1 {semi_f1:.4f}"
    assert semi_f1 >= sup_f1 - 0.05, (
        f"semi {semi_f1:.4f} vs supervised-only {sup_f1:.4f}"
    )
    assert chain_wall < 600.0, f"chain took {chain_wall:.0f}s"


def test_end_to_end_rerun_is_byte_identical(endtoend, tmp_path_factory):
    repeat = _run_chain(tmp_path_factory.mktemp("e2e_again"),
                        with_supervised=False)
    a, b = endtoend["root"], repeat["root"]
    files = ["pre/pretrain.ckpt", "semi/ckpt_ep0100.ckpt",
             "semi/ckpt_ep0200.ckpt", "semi/final.ckpt", "rep/report.json"]
    files += [f"masks/img_{i:03d}_mask.png" for i in range(80, 90)]
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
