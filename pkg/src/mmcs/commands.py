"""Subcommand implementations and config plumbing for the mmcs CLI.

Config resolution is three-layered: compiled defaults, then a `key = value`
config file with one section per module, then command-line flags. Every
command writes the fully resolved algorithmic config to <out>/config.resolved
before doing any work, and that file round-trips through --config to
reproduce the run byte-for-byte given the same inputs.

Exit codes: 0 success, 2 usage error (argparse), 3 data/IO error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

from . import model as nn
from . import pipeline, semi
from .augment import AugmentConfig
from .core import RngStream
from .diameter import DEFAULT_TARGET_DIAMETER
from .errors import DataError, MmcsError, NumericError
from .flows import FlowParams, save_flow_map
from .ingest import (
    SynthSpec,
    load_manifest,
    load_mask,
    load_two_channel,
    save_mask,
    write_synth_dataset,
)

# (section, key) -> (type tag, default). The single source of config truth;
# flag wiring below references these pairs.
SCHEMA = {
    ("run", "seed"): ("int", 0),
    ("run", "target_diameter"): ("float", DEFAULT_TARGET_DIAMETER),
    ("model", "levels"): ("int", 3),
    ("model", "base_width"): ("int", 16),
    ("sgd", "lr0"): ("float", 0.1),
    ("sgd", "momentum"): ("float", 0.9),
    ("sgd", "weight_decay"): ("float", 1e-5),
    ("sgd", "warmup_epochs"): ("int", 10),
    ("sgd", "anneal_start_epoch"): ("optint", None),
    ("sgd", "anneal_period"): ("int", 100),
    ("sgd", "lr_floor"): ("float", 0.0016),
    ("sgd", "batch_size"): ("int", 16),
    ("semi", "w"): ("float", 0.4),
    ("semi", "update_interval"): ("int", 100),
    ("semi", "epochs"): ("int", 250),
    ("semi", "pretrain_epochs"): ("int", 200),
    ("augment", "tile"): ("int", 112),
    ("augment", "rotate"): ("bool", True),
    ("augment", "flip"): ("bool", True),
    ("augment", "scale_min"): ("float", 0.75),
    ("augment", "scale_max"): ("float", 1.25),
    ("augment", "translate_fraction"): ("float", 0.1),
    ("augment", "overlap"): ("float", 0.25),
    ("flow", "n_follow_steps"): ("int", 200),
    ("flow", "step_size"): ("float", 1.0),
    ("flow", "cell_threshold"): ("float", 0.0),
    ("flow", "min_size"): ("int", 15),
    ("flow", "sink_bin"): ("float", 1.0),
    ("flow", "sink_merge_radius"): ("float", 2.0),
    ("synth", "image_size"): ("int", 64),
    ("synth", "count_min"): ("int", 2),
    ("synth", "count_max"): ("int", 6),
    ("synth", "radius_min"): ("float", 4.0),
    ("synth", "radius_max"): ("float", 8.0),
    ("synth", "ecc_min"): ("float", 0.7),
    ("synth", "ecc_max"): ("float", 1.0),
    ("synth", "nucleus_fraction"): ("float", 0.4),
    ("synth", "noise_sigma"): ("float", 0.03),
}


def _parse_value(tag, text, where):
    text = text.strip()
    try:
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tag == "optint":
            return None if text == "" else int(text)
    except ValueError as e:
        raise DataError(f"bad value for {where}: {text!r}") from e
    raise AssertionError(tag)


class RunConfig:
    """Resolved (section, key) -> value map with module-config builders."""

    def __init__(self, values):
        self.values = dict(values)

    def get(self, section, key):
        return self.values[(section, key)]

    def set(self, section, key, value):
        if (section, key) not in SCHEMA:
            raise KeyError((section, key))
        self.values[(section, key)] = value

    def sgd_config(self) -> nn.SgdConfig:
        g = self.get
        return nn.SgdConfig(
            lr0=g("sgd", "lr0"), momentum=g("sgd", "momentum"),
            weight_decay=g("sgd", "weight_decay"),
            warmup_epochs=g("sgd", "warmup_epochs"),
            anneal_start_epoch=g("sgd", "anneal_start_epoch"),
            anneal_period=g("sgd", "anneal_period"),
            lr_floor=g("sgd", "lr_floor"), batch_size=g("sgd", "batch_size"),
        )

    def semi_config(self) -> semi.SemiConfig:
        g = self.get
        return semi.SemiConfig(
            epochs=g("semi", "epochs"), w=g("semi", "w"),
            update_interval=g("semi", "update_interval"),
            batch_size=g("sgd", "batch_size"),
            pretrain_epochs=g("semi", "pretrain_epochs"),
        )

    def augment_config(self) -> AugmentConfig:
        g = self.get
        return AugmentConfig(
            tile=g("augment", "tile"), rotate=g("augment", "rotate"),
            flip=g("augment", "flip"),
            scale_jitter=(g("augment", "scale_min"), g("augment", "scale_max")),
            translate_fraction=g("augment", "translate_fraction"),
        )

    def flow_params(self) -> FlowParams:
        g = self.get
        return FlowParams(
            n_follow_steps=g("flow", "n_follow_steps"),
            step_size=g("flow", "step_size"),
            cell_threshold=g("flow", "cell_threshold"),
            min_size=g("flow", "min_size"), sink_bin=g("flow", "sink_bin"),
            sink_merge_radius=g("flow", "sink_merge_radius"),
        )

    def synth_spec(self) -> SynthSpec:
        g = self.get
        return SynthSpec(
            image_size=g("synth", "image_size"),
            count_range=(g("synth", "count_min"), g("synth", "count_max")),
            radius_range=(g("synth", "radius_min"), g("synth", "radius_max")),
            eccentricity_range=(g("synth", "ecc_min"), g("synth", "ecc_max")),
            nucleus_fraction=g("synth", "nucleus_fraction"),
            noise_sigma=g("synth", "noise_sigma"),
        )


def resolve_config(config_path, overrides) -> RunConfig:
    values = {pair: default for pair, (_, default) in SCHEMA.items()}
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(config_path) as fh:
                parser.read_file(fh)
        except OSError as e:
            raise DataError(f"cannot read config {config_path}: {e}") from e
        except configparser.Error as e:
            raise DataError(f"bad config {config_path}: {e}") from e
        for section in parser.sections():
            for key, text in parser.items(section):
                if (section, key) not in SCHEMA:
                    raise DataError(f"unknown config key [{section}] {key}")
                tag = SCHEMA[(section, key)][0]
                values[(section, key)] = _parse_value(
                    tag, text, f"[{section}] {key}"
                )
    for pair, value in overrides.items():
        if value is not None:
            values[pair] = value
    return RunConfig(values)


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved(cfg: RunConfig, out_dir):
    lines = []
    for section in sorted({s for s, _ in SCHEMA}):
        lines.append(f"[{section}]")
        for (s, key) in sorted(SCHEMA):
            if s == section:
                lines.append(f"{key} = {_format_value(cfg.get(s, key))}")
        lines.append("")
    path = os.path.join(out_dir, "config.resolved")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return path


def _prepare_out(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, out_dir)


# ---------------------------------------------------------------------------
# flag wiring

_SGD_FLAGS = [
    ("--lr0", "sgd", "lr0", float),
    ("--momentum", "sgd", "momentum", float),
    ("--weight-decay", "sgd", "weight_decay", float),
    ("--warmup-epochs", "sgd", "warmup_epochs", int),
    ("--anneal-start", "sgd", "anneal_start_epoch", int),
    ("--anneal-period", "sgd", "anneal_period", int),
    ("--lr-floor", "sgd", "lr_floor", float),
    ("--batch-size", "sgd", "batch_size", int),
]

_FLOW_FLAGS = [
    ("--n-follow-steps", "flow", "n_follow_steps", int),
    ("--step-size", "flow", "step_size", float),
    ("--cell-threshold", "flow", "cell_threshold", float),
    ("--min-size", "flow", "min_size", int),
    ("--sink-bin", "flow", "sink_bin", float),
    ("--sink-merge-radius", "flow", "sink_merge_radius", float),
]

_SYNTH_FLAGS = [
    ("--size", "synth", "image_size", int),
    ("--count-min", "synth", "count_min", int),
    ("--count-max", "synth", "count_max", int),
    ("--radius-min", "synth", "radius_min", float),
    ("--radius-max", "synth", "radius_max", float),
    ("--ecc-min", "synth", "ecc_min", float),
    ("--ecc-max", "synth", "ecc_max", float),
    ("--nucleus-fraction", "synth", "nucleus_fraction", float),
    ("--noise-sigma", "synth", "noise_sigma", float),
]


def _add_schema_flags(parser, specs):
    for flag, section, key, typ in specs:
        default = SCHEMA[(section, key)][1]
        parser.add_argument(flag, dest=f"cfg__{section}__{key}", type=typ,
                            default=None, metavar=key.upper(),
                            help=f"[{section}] {key} (default {default})")


def _collect_overrides(args):
    out = {}
    for name, value in vars(args).items():
        if name.startswith("cfg__"):
            _, section, key = name.split("__", 2)
            out[(section, key)] = value
    return out


def _resolved_from_args(args):
    return resolve_config(args.config, _collect_overrides(args))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = _resolved_from_args(args)
    counts = (args.labeled, args.unlabeled, args.eval_count)
    if args.n is not None and args.n != sum(counts):
        raise UsageError(
            f"--n {args.n} does not match --labeled {counts[0]} "
            f"+ --unlabeled {counts[1]} + --eval {counts[2]}"
        )
    _prepare_out(cfg, args.out)
    manifest_path = write_synth_dataset(
        args.out, cfg.synth_spec(), RngStream(cfg.get("run", "seed")),
        counts[0], counts[1], counts[2],
    )
    print(f"wrote {manifest_path} ({counts[0]} labeled, {counts[1]} unlabeled, "
          f"{counts[2]} eval)")
    return 0


def _train_meta(cfg, prepared, net):
    return {
        "mean_diameter": repr(prepared.target_diameter),
        "dataset_mean_diameter": repr(prepared.stats.mean),
        "levels": str(net.levels),
        "base_width": str(net.base_width),
    }


def cmd_pretrain(args):
    cfg = _resolved_from_args(args)
    aug = cfg.augment_config()
    sgd = cfg.sgd_config()
    epochs = cfg.get("semi", "pretrain_epochs")
    net = nn.create_net(
        levels=cfg.get("model", "levels"),
        base_width=cfg.get("model", "base_width"),
        init_stream=RngStream(cfg.get("run", "seed")),
    )
    if aug.tile % net.pool_factor:
        raise DataError(f"tile {aug.tile} not divisible by {net.pool_factor}")
    _prepare_out(cfg, args.out)
    manifest = load_manifest(args.manifest)
    prepared = pipeline.prepare_training_data(manifest,
                                              cfg.get("run", "target_diameter"))
    ckpt = os.path.join(args.out, "pretrain.ckpt")
    with open(os.path.join(args.out, "train_log.jsonl"), "w") as log:
        semi.pretrain(net, list(prepared.labeled), aug, sgd,
                      RngStream(cfg.get("run", "seed")), epochs, log_file=log,
                      checkpoint_path=ckpt,
                      checkpoint_meta=_train_meta(cfg, prepared, net))
    print(f"wrote {ckpt} ({epochs} epochs, {len(prepared.labeled)} labeled "
          f"images, mean diameter {prepared.stats.mean:.2f} -> "
          f"{prepared.target_diameter:g})")
    return 0


def cmd_semitrain(args):
    cfg = _resolved_from_args(args)
    if args.schedule_only:
        _prepare_out(cfg, args.out)
        for row in semi.epoch_schedule_report(cfg.semi_config(),
                                              cfg.sgd_config()):
            print(json.dumps(row))
        return 0
    if args.init_checkpoint is None:
        raise UsageError("--init-checkpoint is required unless --schedule-only")
    net, meta = nn.load_checkpoint(args.init_checkpoint)
    # the checkpoint owns the geometry: continue at its training diameter
    cfg.set("run", "target_diameter", float(meta["mean_diameter"]))
    cfg.set("model", "levels", net.levels)
    cfg.set("model", "base_width", net.base_width)
    aug = cfg.augment_config()
    if aug.tile % net.pool_factor:
        raise DataError(f"tile {aug.tile} not divisible by {net.pool_factor}")
    _prepare_out(cfg, args.out)
    manifest = load_manifest(args.manifest)
    prepared = pipeline.prepare_training_data(manifest,
                                              cfg.get("run", "target_diameter"))
    semi_cfg = cfg.semi_config()
    if semi_cfg.w > 0.0 and not prepared.unlabeled:
        raise DataError("manifest has no unlabeled records but w > 0")
    store = semi.init_pseudo(net, prepared.unlabeled)
    with open(os.path.join(args.out, "train_log.jsonl"), "w") as log:
        semi.semi_train(net, list(prepared.labeled), list(prepared.unlabeled),
                        store, semi_cfg, cfg.sgd_config(), aug,
                        RngStream(cfg.get("run", "seed")), log_file=log,
                        checkpoint_dir=args.out,
                        checkpoint_meta=_train_meta(cfg, prepared, net))
    final = os.path.join(args.out, "final.ckpt")
    print(f"wrote {final} ({semi_cfg.epochs} epochs, w={semi_cfg.w:g}, "
          f"T={semi_cfg.update_interval}, {len(prepared.labeled)}L + "
          f"{len(prepared.unlabeled)}U)")
    return 0


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_infer(args):
    cfg = _resolved_from_args(args)
    net, meta = nn.load_checkpoint(args.checkpoint)
    cfg.set("model", "levels", net.levels)
    cfg.set("model", "base_width", net.base_width)
    _prepare_out(cfg, args.out)
    model_diameter = float(meta["mean_diameter"])
    user_diameter = (DEFAULT_TARGET_DIAMETER if args.diameter is None
                     else args.diameter)
    tile = cfg.get("augment", "tile")
    overlap = cfg.get("augment", "overlap")
    params = cfg.flow_params()
    from PIL import Image

    for path in args.image:
        img = load_two_channel(path)
        mask, flow = pipeline.infer_image(net, img, user_diameter,
                                          model_diameter, tile, overlap, params)
        stem = _stem(path)
        mask_path = os.path.join(args.out, f"{stem}_mask.png")
        save_mask(mask, mask_path)
        overlay = pipeline.render_overlay(img, mask)
        Image.fromarray(overlay, "RGB").save(
            os.path.join(args.out, f"{stem}_overlay.png")
        )
        if args.save_flows:
            save_flow_map(flow, os.path.join(args.out, f"{stem}_flow.bin"))
        print(f"{mask_path}: {int(mask.max())} instances")
    return 0


def cmd_eval(args):
    cfg = _resolved_from_args(args)
    _prepare_out(cfg, args.out)
    manifest = load_manifest(args.gt_manifest)
    records = manifest.select("eval")
    if not records:
        raise DataError("manifest has no eval records")
    names, pred_paths, missing = [], [], []
    for rec in records:
        stem = _stem(rec.image_path)
        pred = os.path.join(args.pred_dir, f"{stem}_mask.png")
        names.append(stem)
        pred_paths.append(pred)
        if not os.path.exists(pred):
            missing.append(pred)
    if missing:
        raise DataError("missing predictions: " + ", ".join(missing))
    preds = [load_mask(p) for p in pred_paths]
    gts = [load_mask(manifest.mask_file(r)) for r in records]
    report = pipeline.build_report(names, preds, gts, args.iou)
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"pooled_f1 {report['pooled']['f1']:.4f} "
          f"(tp {report['pooled']['tp']}, fp {report['pooled']['fp']}, "
          f"fn {report['pooled']['fn']}) -> {report_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


class UsageError(Exception):
    pass


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmcs",
        description="Semi-supervised flow-based cell instance segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="key = value config file (sections per module)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", dest="cfg__run__seed", type=int, default=None,
                       help=f"[run] seed (default {SCHEMA[('run', 'seed')][1]})")

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    common(p)
    p.add_argument("--labeled", type=int, default=4)
    p.add_argument("--unlabeled", type=int, default=4)
    p.add_argument("--eval", dest="eval_count", type=int, default=2)
    p.add_argument("--n", type=int, default=None,
                   help="optional total; must equal the three split counts")
    _add_schema_flags(p, _SYNTH_FLAGS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="supervised pretraining on labeled data")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", "--pretrain-epochs",
                   dest="cfg__semi__pretrain_epochs", type=int, default=None,
                   help="[semi] pretrain_epochs (default 200)")
    p.add_argument("--levels", dest="cfg__model__levels", type=int, default=None)
    p.add_argument("--base-width", dest="cfg__model__base_width", type=int,
                   default=None)
    p.add_argument("--target-diameter", dest="cfg__run__target_diameter",
                   type=float, default=None)
    p.add_argument("--tile", dest="cfg__augment__tile", type=int, default=None)
    _add_schema_flags(p, _SGD_FLAGS)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("semitrain", help="temporal-ensembling semi-supervised "
                                         "training from a pretrained checkpoint")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--w", dest="cfg__semi__w", type=float, default=None,
                   help="[semi] w, unlabeled weight (default 0.4)")
    p.add_argument("--T", dest="cfg__semi__update_interval", type=int,
                   default=None, help="[semi] update_interval (default 100)")
    p.add_argument("--epochs", dest="cfg__semi__epochs", type=int, default=None,
                   help="[semi] epochs (default 250)")
    p.add_argument("--tile", dest="cfg__augment__tile", type=int, default=None)
    p.add_argument("--schedule-only", action="store_true",
                   help="print the epoch schedule and exit without training")
    _add_schema_flags(p, _SGD_FLAGS)
    p.set_defaults(func=cmd_semitrain)

    p = sub.add_parser("infer", help="segment images with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", nargs="+", required=True)
    p.add_argument("--diameter", type=float, default=None,
                   help="typical cell diameter in the input images "
                        f"(default {DEFAULT_TARGET_DIAMETER:g})")
    p.add_argument("--tile", dest="cfg__augment__tile", type=int, default=None)
    p.add_argument("--overlap", dest="cfg__augment__overlap", type=float,
                   default=None)
    p.add_argument("--save-flows", action="store_true",
                   help="also write the raw flow maps as binary containers")
    _add_schema_flags(p, _FLOW_FLAGS)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against eval masks")
    common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-manifest", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    return parser


def run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (MmcsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
