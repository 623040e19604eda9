"""Differentiable tensor primitives for the Claw UNet.

Every op works on rank-4 ``(batch, channels, height, width)`` torch tensors and
participates in autograd. The ops validate shapes up front and raise
:class:`ShapeError` instead of letting torch fail deep inside a kernel.

Conventions:

* Convolution is cross-correlation: the kernel is not flipped.
* ``upsample2x`` is bilinear with ``align_corners=False``. Output pixel ``j``
  samples source position ``(j + 0.5) / 2 - 0.5``, clamped to ``[0, n - 1]``.
* ``deconv2d`` weights use the transposed layout ``(in_ch, out_ch, kh, kw)``.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable

import torch
import torch.nn.functional as F

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when tensor extents or channel counts are inconsistent."""


class KinkTape:
    """Records the piecewise-linear branch taken by every relu and max-pool.

    In ``record`` mode each call appends its gating (relu sign mask, pooling
    winner indices). In ``replay`` mode the recorded gating is reused in call
    order, so the network is evaluated on the same smooth piece as the recorded
    pass; ``crossings`` counts gates whose live branch differs from the replayed one.
    """

    def __init__(self):
        self.entries: list = []
        self.mode = "record"
        self.pos = 0
        self.crossings = 0

    def replay(self):
        self.mode, self.pos, self.crossings = "replay", 0, 0
        return self

    def next(self):
        if self.pos >= len(self.entries):
            raise RuntimeError("kink tape exhausted: forward pass differs from the recorded one")
        entry = self.entries[self.pos]
        self.pos += 1
        return entry


_TAPE: KinkTape | None = None


@contextmanager
def kink_tape(tape: KinkTape):
    """Route relu/max-pool gating through ``tape`` for the duration of the block."""
    global _TAPE
    prev, _TAPE = _TAPE, tape
    try:
        yield tape
    finally:
        _TAPE = prev


def _check4(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {tuple(x.shape)}")


def conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """2D cross-correlation.

    Args:
        x: input of shape ``(N, C_in, H, W)``.
        weight: kernel of shape ``(C_out, C_in, kh, kw)``.
        bias: optional vector of length ``C_out``.
        stride: spatial stride.
        padding: symmetric zero padding.

    Returns:
        Tensor of shape ``(N, C_out, H', W')`` with
        ``H' = floor((H + 2 * padding - kh) / stride) + 1``.
    """
    _check4(x)
    if weight.dim() != 4:
        raise ShapeError(f"kernel must be rank 4, got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias length {tuple(bias.shape)} does not match {weight.shape[0]} kernels")
    oh = conv_out_extent(x.shape[2], weight.shape[2], stride, padding)
    ow = conv_out_extent(x.shape[3], weight.shape[3], stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"non-positive output extent ({oh}, {ow}) for input {tuple(x.shape)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def max_pool2d(x, window: int = 2, stride: int = 2):
    _check4(x)
    if x.shape[2] % window or x.shape[3] % window:
        raise ShapeError(f"extents {tuple(x.shape[2:])} not divisible by pooling window {window}")
    if _TAPE is None:
        return F.max_pool2d(x, window, stride)
    out, idx = F.max_pool2d(x, window, stride, return_indices=True)
    if _TAPE.mode == "record":
        _TAPE.entries.append(idx)
        return out
    fixed = _TAPE.next()
    _TAPE.crossings += int((fixed != idx).sum())
    flat = x.flatten(2)
    return flat.gather(2, fixed.flatten(2)).view_as(out)


def upsample2x(x):
    """Double both spatial extents by bilinear interpolation (half-pixel centres)."""
    _check4(x)
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def resample_to(x, size):
    """Bilinear resample to an explicit ``(height, width)``; identity when already there."""
    _check4(x)
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def deconv2d(x, weight, bias=None, stride: int = 2, padding: int = 0):
    """Transposed convolution, the adjoint of :func:`conv2d` with the same kernel.

    ``weight`` has shape ``(C_in, C_out, kh, kw)``. With ``kh == stride`` and no
    padding the output extent is exactly ``stride * H``.
    """
    _check4(x)
    if weight.dim() != 4:
        raise ShapeError(f"kernel must be rank 4, got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[0]}")
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training: bool,
                momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch normalisation.

    In training mode the batch statistics (biased variance) normalise ``x`` and
    the running buffers are updated in place:
    ``running = (1 - momentum) * running + momentum * batch``. In eval mode the
    running buffers are used and nothing is mutated.
    """
    _check4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if training:
        mean = x.mean(dim=(0, 2, 3))
        var = ((x - mean.view(1, c, 1, 1)) ** 2).mean(dim=(0, 2, 3))
        with torch.no_grad():
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            running_var.mul_(1 - momentum).add_(momentum * var.detach())
    else:
        mean, var = running_mean, running_var
    inv = torch.rsqrt(var + eps)
    return (x - mean.view(1, c, 1, 1)) * (gamma * inv).view(1, c, 1, 1) + beta.view(1, c, 1, 1)


def relu(x):
    if _TAPE is None:
        return torch.relu(x)
    live = x > 0
    if _TAPE.mode == "record":
        _TAPE.entries.append(live)
        return torch.relu(x)
    fixed = _TAPE.next()
    _TAPE.crossings += int((fixed != live).sum())
    return torch.where(fixed, x, torch.zeros_like(x))


def sigmoid(x):
    return torch.sigmoid(x)


def bce_loss(pred, target, eps: float = BCE_EPS):
    """Mean binary cross-entropy with predictions clamped into ``[eps, 1 - eps]``."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target values must be 0 or 1")
    p = pred.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def compute_gradients(model: torch.nn.Module, loss_fn: Callable[[torch.nn.Module], torch.Tensor]):
    """Return ``{name: d loss / d param}`` for every trainable parameter of ``model``.

    Parameters that do not influence the loss get an all-zero gradient rather than
    ``None``.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    loss = loss_fn(model)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {
        n: (torch.zeros_like(p) if g is None else g.detach())
        for (n, p), g in zip(named, grads)
    }
