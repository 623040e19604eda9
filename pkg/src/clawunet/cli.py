"""Command-line entry point: ``clawunet {synth,train,eval,predict,gradcheck,ablate}``.

Every option can also come from a ``--config`` file of ``key=value`` lines (keys
are option names with underscores, ``#`` starts a comment). Precedence is
command-line flag, then config file, then built-in default.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 gradient check failure. Failures print one ``error: ...`` line to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck
from .model import ClawUNet, ConfigError, ModelConfig, _kv_lines, count_parameters, predict_mask
from .training import VARIANTS, DivergenceError, TrainConfig, ablate, evaluate, train, variant_config

EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _ints(text) -> tuple:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text) -> list:
    return [v.strip() for v in str(text).split(",") if v.strip()]


# defaults live here rather than on the parser so a config file can sit between them and the flags
DEFAULTS = {
    "synth": dict(count=50, size=128, seed=0, channels=3, vessel_min=3, vessel_max=6, width_min=2.0,
                  width_max=5.0, curvature=0.35, noise=0.05, vessel_low=0.05, vessel_high=0.35,
                  background_low=0.55, background_high=0.95),
    "train": dict(variant="claw_res_att", depth=4, channels=(64, 64, 128, 256, 512), blocks=(),
                  shortcut_mode="zero-pad", pool_everywhere=False, threshold=0.5, seed=0, epochs=30,
                  batch_size=4, lr=1e-3, optimizer="adam", split_seed=0, eval_every=0, input_channels=3),
    "eval": dict(split="all", split_seed=0, threshold=None),
    "predict": dict(threshold=None, prob=None),
    "gradcheck": dict(step=1e-3, coords=256, seed=0, batch=2, mode="train", break_gradients=False,
                      size=32, depth=2, channels=(8, 8, 16), blocks=(1, 1)),
}
DEFAULTS["ablate"] = dict(DEFAULTS["train"], variants=list(VARIANTS))
REQUIRED = {"synth": ("out",), "train": ("data", "out"), "eval": ("checkpoint", "data", "out"),
            "predict": ("checkpoint", "image", "out"), "gradcheck": (), "ablate": ("data", "out")}


def _model_train_options(p):
    p.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--depth", type=int)
    p.add_argument("--channels", type=_ints, help="stem width then one width per stage, e.g. 64,64,128,256,512")
    p.add_argument("--blocks", type=_ints, help="residual blocks per stage (default ResNet-34 counts)")
    p.add_argument("--shortcut-mode", choices=("zero-pad", "projection"))
    p.add_argument("--pool-everywhere", type=_bool, nargs="?", const=True)
    p.add_argument("--input-channels", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--split-seed", type=int)
    p.add_argument("--eval-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clawunet", description="Claw UNet vessel segmentation")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("synth", "generate a synthetic vessel dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--channels", type=int)
    for key in ("vessel_min", "vessel_max"):
        p.add_argument("--" + key.replace("_", "-"), type=int)
    for key in ("width_min", "width_max", "curvature", "noise", "vessel_low", "vessel_high",
                "background_low", "background_high"):
        p.add_argument("--" + key.replace("_", "-"), type=float)

    p = command("train", "train on a dataset directory (4:1 split)")
    p.add_argument("--data")
    _model_train_options(p)

    p = command("eval", "evaluate a checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("all", "train", "test"))
    p.add_argument("--split-seed", type=int)
    p.add_argument("--threshold", type=float)

    p = command("predict", "write a binary mask for one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--threshold", type=float)
    p.add_argument("--prob", help="also write a 16-bit probability PNG here")

    p = command("gradcheck", "finite-difference gradient check on a toy model")
    p.add_argument("--step", type=float)
    p.add_argument("--coords", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--mode", choices=("train", "eval"))
    p.add_argument("--size", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--channels", type=_ints)
    p.add_argument("--blocks", type=_ints)
    p.add_argument("--break-gradients", type=_bool, nargs="?", const=True)

    p = command("ablate", "train and compare model variants")
    p.add_argument("--data")
    p.add_argument("--variants", type=_names)
    _model_train_options(p)
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def resolve(parser, argv) -> argparse.Namespace:
    """Parse ``argv`` and merge flags over the config file over defaults."""
    ns = parser.parse_args(argv)
    flags = vars(ns)
    cmd = flags["command"]
    sub = _subparser(parser, cmd)
    types = {a.dest: a.type or (_bool if isinstance(a, argparse._StoreTrueAction) else None)
             for a in sub._actions if a.dest not in ("help", "config")}
    merged = dict(DEFAULTS[cmd], verbose=False)
    if "config" in flags:
        path = Path(flags["config"])
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        for key, raw in _kv_lines(path.read_text()):
            key = key.replace("-", "_")
            if key not in types:
                raise UsageError(f"unknown config key for {cmd}: {key}")
            conv = types[key]
            try:
                merged[key] = conv(raw) if conv else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key}: {exc}")
    merged.update({k: v for k, v in flags.items() if k != "config"})
    missing = [k for k in REQUIRED[cmd] if merged.get(k) is None]
    if missing:
        raise UsageError(f"{cmd} requires " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return argparse.Namespace(**merged)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(a):
    spec = D.SynthSpec(size=a.size, channels=a.channels, vessel_min=a.vessel_min, vessel_max=a.vessel_max,
                       width_min=a.width_min, width_max=a.width_max, curvature=a.curvature, noise=a.noise,
                       vessel_low=a.vessel_low, vessel_high=a.vessel_high, background_low=a.background_low,
                       background_high=a.background_high, seed=a.seed)
    if a.count < 1:
        raise ConfigError("--count must be >= 1")
    out = Path(a.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        D.write_dataset(D.synth_generate(spec, a.count), out, spec)
    except OSError as exc:
        raise RuntimeError(f"cannot write dataset to {out}: {exc}")
    print(f"wrote {a.count} samples to {out}")


def _model_config(a, size: int) -> ModelConfig:
    base = ModelConfig(input_size=size, input_channels=a.input_channels, depth=a.depth,
                       channels=a.channels, blocks=a.blocks, shortcut_mode=a.shortcut_mode,
                       pool_everywhere=a.pool_everywhere, threshold=a.threshold, seed=a.seed)
    return variant_config(a.variant, base) if getattr(a, "variant", None) else base


def _train_config(a, checkpoint: str = "") -> TrainConfig:
    return TrainConfig(epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr, optimizer=a.optimizer,
                       seed=a.seed, eval_every=a.eval_every, checkpoint_path=checkpoint)


def _dataset_size(samples) -> int:
    sizes = {s.mask.shape for s in samples}
    if len(sizes) != 1:
        raise D.DataError(f"dataset mixes image sizes: {sorted(sizes)}")
    (h, w), = sizes
    if h != w:
        raise D.DataError(f"images must be square, got {h}x{w}")
    return h


def cmd_train(a):
    samples = D.load_dataset(a.data, a.input_channels)
    cfg = _model_config(a, _dataset_size(samples))
    train_set, test_set = D.split(samples, (4, 1), a.split_seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ClawUNet(cfg)
    save_checkpoint(model, out / "init.ckpt")
    model, history = train(cfg, _train_config(a, str(out / "checkpoint.ckpt")), train_set,
                           eval_set=test_set or None, model=model)
    history.write_csv(out / "history.csv")
    report = evaluate(model, test_set or train_set, cfg.threshold)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    print(f"trained {len(train_set)} / tested {len(test_set)} samples, {count_parameters(model)} parameters")
    print(report.summary())


def cmd_eval(a):
    model = load_checkpoint(a.checkpoint)
    samples = D.load_dataset(a.data, model.config.input_channels)
    if a.split != "all":
        train_set, test_set = D.split(samples, (4, 1), a.split_seed)
        samples = train_set if a.split == "train" else test_set
    if not samples:
        raise D.DataError(f"no samples in the {a.split} split")
    threshold = model.config.threshold if a.threshold is None else a.threshold
    report = evaluate(model, samples, threshold)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    print(report.summary())


def cmd_predict(a):
    model = load_checkpoint(a.checkpoint).double()
    cfg = model.config
    image = D.load_image(a.image, cfg.input_channels)
    if image.shape[1:] != (cfg.input_size, cfg.input_size):
        raise D.DataError(f"image is {image.shape[1]}x{image.shape[2]}, checkpoint expects "
                          f"{cfg.input_size}x{cfg.input_size}")
    model.eval()
    with torch.no_grad():
        prob = model(torch.from_numpy(image)[None].double())
    threshold = cfg.threshold if a.threshold is None else a.threshold
    mask = predict_mask(prob, threshold)[0]
    D._save_png(Path(a.out), mask.astype(np.uint8) * 255)
    if a.prob:
        p16 = np.round(prob[0, 0].numpy() * 65535).astype(np.uint16)
        D._save_png(Path(a.prob), p16)
    print(f"foreground fraction {mask.mean():.4f}")


def cmd_gradcheck(a):
    cfg = ModelConfig(input_size=a.size, depth=a.depth, channels=a.channels, blocks=a.blocks, seed=a.seed)
    report = gradcheck(cfg, step=a.step, coordinates=a.coords, seed=a.seed, batch=a.batch, mode=a.mode,
                       break_gradients=a.break_gradients)
    print("\n".join(report.lines()))
    return 0 if report.passed else EXIT_GRADCHECK


def cmd_ablate(a):
    for v in a.variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    samples = D.load_dataset(a.data, a.input_channels)
    a.variant = None
    cfg = _model_config(a, _dataset_size(samples))
    result = ablate(a.variants, cfg, _train_config(a), samples, (4, 1), a.split_seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "ablation.csv")
    result.write_json(out / "ablation.json")
    print(result.table())


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = resolve(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(message)s")
        torch.manual_seed(0)
        return COMMANDS[args.command](args) or 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, CheckpointError, DivergenceError, RuntimeError, OSError) as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
