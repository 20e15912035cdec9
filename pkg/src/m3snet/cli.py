"""Operator commands: synthesize data, train, evaluate, restore, inspect.

One binary with subcommands. Settings come from an optional key=value
config file plus flag overrides (flags win); the effective configuration
is echoed verbatim into the output directory so every run is reproducible
from that single file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .data import (DatasetError, DegradationSpec, load_dataset, load_image,
                   save_dataset, save_image, synthesize_dataset)
from .model import ABLATIONS, M3SNet, ModelConfig, count_params, estimate_macs
from .tensor import ConfigError, DimensionError
from .trainer import TrainState, evaluate, load_checkpoint, train

# every reachable setting, with its default (stored as strings)
DEFAULTS = {
    "model.width": "32",
    "model.levels": "4",
    "model.enc_blocks": "1,1,1,28",
    "model.dec_blocks": "1,1,1,1",
    "model.ffm_blocks": "2,2,1,0",
    "model.heads": "8",
    "model.ablation": "full",
    "model.tlc_window": "256",
    "degrade.kind": "haze_rain",
    "degrade.airlight": "0.8",
    "degrade.alpha": "0.5",
    "degrade.depth_source": "constant",
    "degrade.depth_value": "1.0",
    "degrade.depth_file": "",
    "degrade.noise_sigma": "0.005",
    "degrade.blur_kind": "box",
    "degrade.blur_size": "5",
    "degrade.blur_length": "9",
    "degrade.blur_angle": "0.0",
    "train.data": "",
    "train.iters": "2000",
    "train.batch": "4",
    "train.patch": "256",
    "train.lr0": "1e-3",
    "train.lr1": "1e-7",
    "train.seed": "0",
    "train.val_every": "",
    "train.ckpt_every": "",
    "train.val_frac": "0.1",
    "train.clip_norm": "",
    "synth.count": "50",
    "synth.size": "128",
    "synth.seed": "0",
    "eval.tlc": "false",
    "eval.channel_mode": "rgb",
    "inspect.size": "256",
}


def parse_config_file(path):
    settings = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        settings[key] = value
    return settings


def effective_config(args, flag_map):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = str(value)
    return cfg


def echo_config(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from None


def _float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {cfg[key]!r}") from None


def _bool(cfg, key):
    value = cfg[key].lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be true/false, got {cfg[key]!r}")


def _ints(cfg, key):
    return tuple(int(v) for v in cfg[key].split(","))


def model_config_from(cfg):
    return ModelConfig(
        width=_int(cfg, "model.width"),
        levels=_int(cfg, "model.levels"),
        enc_blocks=_ints(cfg, "model.enc_blocks"),
        dec_blocks=_ints(cfg, "model.dec_blocks"),
        ffm_blocks=_ints(cfg, "model.ffm_blocks"),
        heads=_int(cfg, "model.heads"),
        ablation=cfg["model.ablation"],
        tlc_window=_int(cfg, "model.tlc_window"),
    )


def degradation_spec_from(cfg):
    return DegradationSpec(
        kind=cfg["degrade.kind"],
        airlight=_float(cfg, "degrade.airlight"),
        alpha=_float(cfg, "degrade.alpha"),
        depth_source=cfg["degrade.depth_source"],
        depth_value=_float(cfg, "degrade.depth_value"),
        depth_file=cfg["degrade.depth_file"],
        noise_sigma=_float(cfg, "degrade.noise_sigma"),
        blur_kind=cfg["degrade.blur_kind"],
        blur_size=_int(cfg, "degrade.blur_size"),
        blur_length=_int(cfg, "degrade.blur_length"),
        blur_angle=_float(cfg, "degrade.blur_angle"),
    )


def check_against_checkpoint(cfg, model, flags_used):
    """Reject model flags that contradict the loaded checkpoint."""
    have = model.config.to_dict()
    diffs = []
    for key in flags_used:
        short = key.split(".", 1)[1]
        if key.startswith("model.") and cfg[key] != have[short]:
            diffs.append(f"{key}: requested {cfg[key]!r} but checkpoint has {have[short]!r}")
    if diffs:
        raise ConfigError("checkpoint/config mismatch: " + "; ".join(diffs))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = effective_config(args, {"seed": "synth.seed"})
    spec = degradation_spec_from(cfg)
    pairs = synthesize_dataset(_int(cfg, "synth.count"), _int(cfg, "synth.size"),
                               spec, _int(cfg, "synth.seed"))
    out = Path(args.out)
    save_dataset(out, pairs, spec=spec)
    echo_config(cfg, out)
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def cmd_train(args):
    flag_map = {"width": "model.width", "ablation": "model.ablation",
                "seed": "train.seed", "iters": "train.iters",
                "batch": "train.batch", "data": "train.data"}
    cfg = effective_config(args, flag_map)
    if not cfg["train.data"]:
        raise ConfigError("train needs a dataset: pass --data or set train.data")
    pairs = list(load_dataset(cfg["train.data"]))
    model_cfg = model_config_from(cfg)
    seed = _int(cfg, "train.seed")
    model = M3SNet(model_cfg, rng=np.random.default_rng(seed))
    state = TrainState(total_iters=_int(cfg, "train.iters"), seed=seed,
                       lr0=_float(cfg, "train.lr0"), lr1=_float(cfg, "train.lr1"))
    out = Path(args.out)
    echo_config(cfg, out)
    log_path = out / "train.log"

    def emit(line):
        print(line)
        with open(log_path, "a") as fh:
            fh.write(line + "\n")

    result = train(
        model, pairs, state,
        batch_size=_int(cfg, "train.batch"),
        patch_size=_int(cfg, "train.patch"),
        val_frac=_float(cfg, "train.val_frac"),
        out_dir=out,
        val_every=_int(cfg, "train.val_every") if cfg["train.val_every"] else None,
        ckpt_every=_int(cfg, "train.ckpt_every") if cfg["train.ckpt_every"] else None,
        clip_norm=_float(cfg, "train.clip_norm") if cfg["train.clip_norm"] else None,
        log_fn=emit,
    )
    print(f"final checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args):
    flag_map = {"width": "model.width", "ablation": "model.ablation"}
    if args.tlc:
        flag_map["tlc"] = "eval.tlc"
    cfg = effective_config(args, flag_map)
    model, _ = load_checkpoint(args.checkpoint)
    check_against_checkpoint(cfg, model, [k for k in flag_map.values()
                                          if k.startswith("model.")
                                          and getattr(args, k.split(".")[1], None) is not None])
    pairs = list(load_dataset(args.dataset))
    report = evaluate(model, pairs, tlc=_bool(cfg, "eval.tlc"),
                      channel_mode=cfg["eval.channel_mode"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    echo_config(cfg, out)
    print(report.to_text(), end="")
    return 0


def cmd_restore(args):
    flag_map = {"width": "model.width", "ablation": "model.ablation"}
    cfg = effective_config(args, flag_map)
    model, _ = load_checkpoint(args.checkpoint)
    check_against_checkpoint(cfg, model, [k for k in flag_map.values()
                                          if getattr(args, k.split(".")[1], None) is not None])
    src = Path(args.source)
    paths = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not paths or not paths[0].exists():
        raise DatasetError(f"no input images at {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    window = model.config.tlc_window if args.tlc else None
    for path in paths:
        target = out / path.name
        if target.resolve() == path.resolve():
            raise ConfigError(f"refusing to overwrite input image {path}")
        img = load_image(path)
        restored = model.restore(img[None], tlc_window=window)[0]
        save_image(target, restored)
    echo_config(cfg, out)
    print(f"restored {len(paths)} image(s) into {out}")
    return 0


def cmd_inspect(args):
    flag_map = {"width": "model.width", "ablation": "model.ablation"}
    cfg = effective_config(args, flag_map)
    model_cfg = model_config_from(cfg)
    size = _int(cfg, "inspect.size")
    params = count_params(model_cfg)
    macs = estimate_macs(model_cfg, size, size)
    print(f"width={model_cfg.width} ablation={model_cfg.ablation} "
          f"params={params / 1e6:.2f}M macs@{size}x{size}={macs / 1e9:.2f}G")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="m3snet",
                                     description="mountain-shaped restoration network tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--width", type=int, help="channel width of the first level")
        p.add_argument("--ablation", choices=ABLATIONS)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic degraded/clean dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a paired dataset")
    common(p)
    p.add_argument("--data", help="dataset root (input/ + target/)")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report for a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--tlc", action="store_true",
                   help="local statistics windows at test time")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("restore", help="run a checkpoint over an image or directory")
    p.add_argument("checkpoint")
    p.add_argument("source")
    p.add_argument("--tlc", action="store_true")
    common(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("inspect", help="parameter and MAC accounting for a config")
    common(p, out_required=False)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, DimensionError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
