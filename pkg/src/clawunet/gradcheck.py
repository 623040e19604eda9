"""Central finite-difference check of autograd gradients on a toy Claw UNet.

The network is piecewise smooth: relu and max-pool switch branch at kinks. A
central difference ``(L(t + h) - L(t - h)) / 2h`` whose interval straddles a kink
measures a secant across two pieces rather than the derivative, and with
``h = 1e-3`` most perturbations of early-layer weights move at least one of the
~10^4 gated units across its kink. The check therefore evaluates ``L(t +/- h)``
with the relu masks and pooling winners held at their values at ``t`` (the
smooth piece autograd differentiates). The plain, unheld difference is computed
alongside; the report carries both, plus how many intervals crossed a kink.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import ClawUNet, ModelConfig
from .substrate import KinkTape, bce_loss, compute_gradients, kink_tape

DEAD_GRADIENT = 1e-12


@dataclass
class GradientReport:
    """``global_max`` is the kink-held error over all sampled coordinates.

    ``plain_max`` is the unheld central-difference error over all coordinates,
    ``plain_smooth_max`` the same restricted to intervals that cross no kink
    (where the two differences agree up to round-off).
    """

    step: float
    global_max: float
    per_parameter: dict = field(default_factory=dict)
    coordinates: int = 0
    tolerance: float = 1e-3
    plain_max: float = 0.0
    plain_smooth_max: float = 0.0
    kink_crossings: int = 0

    @property
    def passed(self) -> bool:
        return self.global_max < self.tolerance and self.plain_smooth_max < self.tolerance

    def lines(self) -> list[str]:
        out = [f"step={self.step:g}", f"coordinates={self.coordinates}",
               f"global_max_rel_error={self.global_max:.3e}", f"tolerance={self.tolerance:g}",
               f"kink_crossing_coordinates={self.kink_crossings}",
               f"plain_max_rel_error_smooth_intervals={self.plain_smooth_max:.3e}",
               f"plain_max_rel_error_all={self.plain_max:.3e}"]
        worst = sorted(self.per_parameter.items(), key=lambda kv: -kv[1])[:5]
        out += [f"  {name}: {err:.3e}" for name, err in worst]
        out.append("PASS" if self.passed else "FAIL")
        return out


def relative_error(analytic: float, numeric: float) -> float:
    a, n = abs(analytic), abs(numeric)
    if a < DEAD_GRADIENT and n < DEAD_GRADIENT:
        return 0.0
    return abs(analytic - numeric) / max(a, n)


def sample_coordinates(params: dict, count: int, rng) -> list[tuple[str, int]]:
    """At least ``count`` flat indices spread across every tensor (all of a tensor if it is small)."""
    names = list(params)
    per = math.ceil(count / len(names))
    picks = {n: list(rng.choice(params[n].numel(), min(per, params[n].numel()), replace=False))
             for n in names}
    total = sum(len(v) for v in picks.values())
    for n in sorted(names, key=lambda n: -params[n].numel()):
        if total >= count:
            break
        spare = sorted(set(range(params[n].numel())) - set(picks[n]))
        extra = list(rng.choice(spare, min(len(spare), count - total), replace=False))
        picks[n] += extra
        total += len(extra)
    return [(n, int(i)) for n in names for i in picks[n]]


def gradcheck(config: ModelConfig | None = None, step: float = 1e-3, coordinates: int = 256,
              seed: int = 0, batch: int = 2, mode: str = "train",
              break_gradients: bool = False, tolerance: float = 1e-3) -> GradientReport:
    """Compare autograd gradients of the BCE loss against central differences in float64.

    ``mode="eval"`` first runs a few training-mode forwards so the batchnorm running
    statistics are non-trivial, then checks the eval-mode graph. ``break_gradients``
    corrupts one analytic gradient entry as a negative control.
    """
    config = config or ModelConfig.toy()
    model = ClawUNet(config).double()
    gen = torch.Generator().manual_seed(seed)
    shape = (batch, config.input_channels, config.input_size, config.input_size)
    x = torch.rand(shape, generator=gen, dtype=torch.float64)
    y = (torch.rand((batch, 1) + shape[2:], generator=gen, dtype=torch.float64) < 0.3).double()

    if mode == "eval":
        model.train()
        with torch.no_grad():
            for _ in range(3):
                model(torch.rand(shape, generator=gen, dtype=torch.float64))
        model.eval()
    elif mode == "train":
        model.train()
    else:
        raise ValueError("mode must be 'train' or 'eval'")

    buffers = {k: v.clone() for k, v in model.named_buffers()}

    def loss_fn(m):
        return bce_loss(m(x), y)

    grads = compute_gradients(model, loss_fn)
    params = dict(model.named_parameters())
    coords = sample_coordinates(params, coordinates, np.random.default_rng(seed))
    if break_gradients:
        name, idx = coords[0]
        grads[name].view(-1)[idx] += 1.0 + abs(float(grads[name].view(-1)[idx]))

    tape = KinkTape()
    with torch.no_grad():
        with kink_tape(tape):
            loss_fn(model)

    def held(m):
        with kink_tape(tape.replay()):
            value = loss_fn(m).item()
        return value, tape.crossings

    per_param: dict[str, float] = {n: 0.0 for n in params}
    plain_all = plain_smooth = 0.0
    crossing = 0
    with torch.no_grad():
        for name, idx in coords:
            flat = params[name].view(-1)
            orig = flat[idx].item()
            analytic = grads[name].view(-1)[idx].item()
            flat[idx] = orig + step
            up, c_up = held(model)
            up_plain = loss_fn(model).item()
            flat[idx] = orig - step
            down, c_down = held(model)
            down_plain = loss_fn(model).item()
            flat[idx] = orig
            err = relative_error(analytic, (up - down) / (2 * step))
            per_param[name] = max(per_param[name], err)
            plain = relative_error(analytic, (up_plain - down_plain) / (2 * step))
            plain_all = max(plain_all, plain)
            if c_up or c_down:
                crossing += 1
            else:
                plain_smooth = max(plain_smooth, plain)
        for k, v in model.named_buffers():
            v.copy_(buffers[k])

    return GradientReport(step=step, global_max=max(per_param.values()), per_parameter=per_param,
                          coordinates=len(coords), tolerance=tolerance, plain_max=plain_all,
                          plain_smooth_max=plain_smooth, kink_crossings=crossing)
