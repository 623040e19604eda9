"""Training loop, evaluation and the ablation runner."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import MetricsReport, dice, confusion, evaluate_set
from .model import ClawUNet, ConfigError, ModelConfig, _kv_lines, count_parameters, parse_fields, predict_mask
from .substrate import bce_loss

log = logging.getLogger(__name__)

# toggles per ablation variant: (attention, bottom branch, residual encoder)
VARIANTS = {
    "unet": dict(enable_attention=False, enable_bottom_branch=False, enable_residual=False),
    "claw": dict(enable_attention=False, enable_bottom_branch=True, enable_residual=False),
    "claw_res": dict(enable_attention=False, enable_bottom_branch=True, enable_residual=True),
    "claw_res_att": dict(enable_attention=True, enable_bottom_branch=True, enable_residual=True),
}
METRIC_COLUMNS = ("miou", "dice", "aver_hd")


class DivergenceError(RuntimeError):
    pass


def variant_config(name: str, base: ModelConfig) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return base.replace(**VARIANTS[name])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 0
    checkpoint_path: str = ""

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_fields(cls, dict(_kv_lines(text))))


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (step, MetricsReport)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, loss in enumerate(self.losses, start=1):
                w.writerow([i, repr(loss)])


def make_optimizer(model: torch.nn.Module, tc: TrainConfig):
    if tc.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=tc.learning_rate,
                                betas=(tc.beta1, tc.beta2), eps=tc.adam_eps)
    return torch.optim.SGD(model.parameters(), lr=tc.learning_rate, momentum=tc.momentum)


def _check_extents(config: ModelConfig, samples) -> None:
    for s in samples:
        if s.image.shape != (config.input_channels, config.input_size, config.input_size):
            raise ConfigError(
                f"sample {s.id} has shape {s.image.shape}, model expects "
                f"({config.input_channels}, {config.input_size}, {config.input_size})")


def train_step(model, optimizer, x, y) -> float:
    model.train()
    loss = bce_loss(model(x), y)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return value


def train(model_config: ModelConfig, train_config: TrainConfig, train_set, eval_set=None,
          model: ClawUNet | None = None, threshold: float | None = None):
    """Optimise BCE over ``train_set``; returns ``(model, history)``.

    The shuffle order is drawn from ``train_config.seed`` and initial weights from
    ``model_config.seed``, so two calls with equal arguments give identical histories.
    """
    if not train_set:
        raise D.DataError("training set is empty")
    _check_extents(model_config, train_set)
    model = model if model is not None else ClawUNet(model_config)
    threshold = model_config.threshold if threshold is None else threshold
    opt = make_optimizer(model, train_config)
    x_all, y_all = D.stack(train_set)
    rng = np.random.default_rng(train_config.seed)
    history = TrainHistory()
    n, bs = len(train_set), train_config.batch_size
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = torch.from_numpy(order[start:start + bs])
            history.losses.append(train_step(model, opt, x_all[idx], y_all[idx]))
        log.info("epoch %d/%d loss %.4f", epoch + 1, train_config.epochs, history.losses[-1])
        if eval_set and train_config.eval_every and (epoch + 1) % train_config.eval_every == 0:
            history.evals.append((len(history.losses), evaluate(model, eval_set, threshold)))
    if train_config.checkpoint_path:
        save_checkpoint(model, train_config.checkpoint_path)
    return model, history


def predict_probs(model, images: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
    """Eval-mode probability maps for a stack of images."""
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(model(images[start:start + batch_size]))
    return torch.cat(outs)


def evaluate(model, samples, threshold: float = 0.5, batch_size: int = 8) -> MetricsReport:
    """Threshold eval-mode predictions and score them against the sample masks.

    ``model`` may be a :class:`ClawUNet` or any callable mapping an image batch to
    probability maps.
    """
    if not samples:
        raise D.DataError("evaluation set is empty")
    x, _ = D.stack(samples)
    if isinstance(model, ClawUNet):
        _check_extents(model.config, samples)
        probs = predict_probs(model, x, batch_size)
    else:
        with torch.no_grad():
            probs = model(x)
    masks = predict_mask(probs, threshold)
    return evaluate_set(list(masks), [s.mask for s in samples], [s.id for s in samples])


def evaluate_checkpoint(checkpoint, samples, threshold: float | None = None) -> MetricsReport:
    model = checkpoint if isinstance(checkpoint, ClawUNet) else load_checkpoint(checkpoint)
    return evaluate(model, samples, model.config.threshold if threshold is None else threshold)


def _batch_stat_probs(model, x):
    """Forward with batch statistics, leaving the running buffers untouched."""
    saved = {k: v.clone() for k, v in model.named_buffers()}
    model.train()
    with torch.no_grad():
        out = model(x)
    for k, v in model.named_buffers():
        v.copy_(saved[k])
    return out


def overfit_sanity(sample, steps: int = 500, model_config: ModelConfig | None = None,
                   learning_rate: float = 1e-3, target_dice: float | None = None,
                   on_step: Callable | None = None) -> float:
    """Fit a single sample with Adam and return the Dice of its own thresholded prediction.

    Batchnorm uses the statistics of the sample itself, both while training and when
    scoring. With ``target_dice`` set, stops as soon as it is reached.
    """
    cfg = model_config or ModelConfig(input_size=sample.mask.shape[0], input_channels=sample.image.shape[0])
    _check_extents(cfg, [sample])
    model = ClawUNet(cfg)
    opt = make_optimizer(model, TrainConfig(learning_rate=learning_rate))
    x, y = D.stack([sample])

    def score():
        return dice(confusion(predict_mask(_batch_stat_probs(model, x), cfg.threshold)[0], sample.mask))

    current = score()
    for step in range(1, steps + 1):
        loss = train_step(model, opt, x, y)
        if target_dice is not None or step == steps or on_step is not None:
            current = score()
        if on_step is not None:
            on_step(step, loss, current)
        if target_dice is not None and current >= target_dice:
            break
    return current


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    variant: str
    report: MetricsReport
    parameters: int
    best: tuple = ()


@dataclass
class AblationResult:
    rows: list

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", *METRIC_COLUMNS, "best_flags"])
            for r in self.rows:
                hd = "" if r.report.aver_hd is None else repr(r.report.aver_hd)
                w.writerow([r.variant, repr(r.report.miou), repr(r.report.dice), hd, ";".join(r.best)])

    def write_json(self, path) -> None:
        doc = {"rows": [{"variant": r.variant, "parameters": r.parameters, "best_flags": list(r.best),
                         "metrics": r.report.to_dict()["aggregate"]} for r in self.rows]}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def table(self) -> str:
        """Plain-text comparison; ``*`` marks the best value per metric."""
        lines = [f"{'variant':<14}{'params':>12}{'MIoU (%)':>12}{'Aver_hd':>10}{'Dice (%)':>12}"]
        for r in self.rows:
            mark = {m: "*" if m in r.best else " " for m in METRIC_COLUMNS}
            hd = "n/a" if r.report.aver_hd is None else f"{r.report.aver_hd:.2f}"
            lines.append(f"{r.variant:<14}{r.parameters:>12}{100 * r.report.miou:>11.2f}{mark['miou']}"
                         f"{hd:>9}{mark['aver_hd']}{100 * r.report.dice:>11.2f}{mark['dice']}")
        return "\n".join(lines)


def flag_best(rows: list) -> None:
    """Mark the best row(s) per metric: highest MIoU/Dice, lowest Aver_hd."""
    best = {
        "miou": max(r.report.miou for r in rows),
        "dice": max(r.report.dice for r in rows),
    }
    hds = [r.report.aver_hd for r in rows if r.report.aver_hd is not None]
    for r in rows:
        flags = [m for m in ("miou", "dice") if getattr(r.report, m) == best[m]]
        if hds and r.report.aver_hd == min(hds):
            flags.append("aver_hd")
        r.best = tuple(m for m in METRIC_COLUMNS if m in flags)


def ablate(variants, model_config: ModelConfig, train_config: TrainConfig, dataset,
           ratio=(4, 1), split_seed: int = 0, threshold: float | None = None) -> AblationResult:
    """Train and test each variant on one shared split with identical seeds."""
    variants = list(variants)
    if not variants:
        raise ConfigError("need at least one variant")
    for v in variants:
        variant_config(v, model_config)
    train_set, test_set = D.split(dataset, ratio, split_seed)
    tc = train_config.replace(checkpoint_path="")
    rows = []
    for v in variants:
        cfg = variant_config(v, model_config)
        log.info("ablation: training %s", v)
        model, _ = train(cfg, tc, train_set)
        report = evaluate(model, test_set, cfg.threshold if threshold is None else threshold)
        rows.append(AblationRow(v, report, count_parameters(model)))
    flag_best(rows)
    return AblationResult(rows)
