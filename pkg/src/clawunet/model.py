"""Claw UNet: residual encoder, bottom upsampling branch, three-input attention
gates and a three-stream decoder fusion.

Level naming follows the encoder: ``E[0]`` is the stem output (stride 2), ``E[1]``
the first residual stage after max-pooling and ``E[N]`` the bottom map. The
decoder is seeded with ``D[N] = E[N]`` and walks ``i = N-1 .. 0``::

    g    = upsample2x(D[i+1])
    B[i] = C(upsample2x^(N-i)(E[N]))            # bottom branch
    gx, gy, alpha = gate(g, E[i], B[i])
    D[i] = C(concat(gx, gy, C(g)))

where ``C`` is conv3x3 -> batchnorm -> relu. The head is a 2x2 stride-2
transposed convolution, a 1x1 convolution to one channel and a sigmoid.

With the default ResNet-34 schedule the stack for a 512x512 input is
``E0 256^2x64, E1 128^2x64, E2 64^2x128, E3 32^2x256, E4 16^2x512``. The often
quoted ``32 * 2**i`` depth rule only approximates this schedule.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import substrate as S
from .substrate import ShapeError

RESNET34_BLOCKS = (3, 4, 6, 3)
SHORTCUT_MODES = ("zero-pad", "projection")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``channels`` holds the stem width followed by one width per encoder stage, so
    its length is ``depth + 1``. ``blocks`` gives residual blocks per stage and
    defaults to the ResNet-34 counts (repeating the last count past depth 4).
    """

    input_size: int = 512
    input_channels: int = 3
    depth: int = 4
    channels: tuple = (64, 64, 128, 256, 512)
    blocks: tuple = ()
    enable_attention: bool = True
    enable_residual: bool = True
    enable_bottom_branch: bool = True
    shortcut_mode: str = "zero-pad"
    pool_everywhere: bool = False
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        blocks = tuple(int(b) for b in self.blocks)
        if not blocks:
            blocks = tuple(RESNET34_BLOCKS[min(i, 3)] for i in range(self.depth))
        object.__setattr__(self, "blocks", blocks)
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if len(self.channels) != self.depth + 1:
            raise ConfigError(f"channels needs {self.depth + 1} entries, got {len(self.channels)}")
        if len(self.blocks) != self.depth or min(self.blocks) < 1:
            raise ConfigError(f"blocks needs {self.depth} positive entries, got {self.blocks}")
        if min(self.channels) < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.input_size < 2 ** (self.depth + 1) or self.input_size % 2 ** (self.depth + 1):
            raise ConfigError(f"input_size {self.input_size} must be divisible by 2^{self.depth + 1}")
        if self.shortcut_mode not in SHORTCUT_MODES:
            raise ConfigError(f"shortcut_mode must be one of {SHORTCUT_MODES}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Depth-2 model small enough for finite-difference checks."""
        kw = dict(input_size=32, input_channels=3, depth=2, channels=(8, 8, 16), blocks=(1, 1))
        kw.update(overrides)
        return cls(**kw)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def extents(self) -> list[int]:
        """Spatial extent of E[0] .. E[N]."""
        return [self.input_size // 2 ** (i + 1) for i in range(self.depth + 1)]

    def to_text(self) -> str:
        """Canonical ``key=value`` lines in field order."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_fields(cls, dict(_kv_lines(text))))


def _kv_lines(text):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed line: {raw!r}")
        k, v = line.split("=", 1)
        yield k.strip(), v.strip()


def parse_value(kind, value: str):
    """Convert a text value to the python type of a dataclass field."""
    if kind is bool or kind == "bool":
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    if kind is tuple or kind == "tuple":
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


def parse_fields(cls, raw: dict) -> dict:
    """Parse ``raw`` text values against the fields of dataclass ``cls``; unknown keys raise."""
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for k, v in raw.items():
        if k not in kinds:
            raise ConfigError(f"unknown {cls.__name__} key: {k}")
        out[k] = parse_value(kinds[k], v)
    return out


# ---------------------------------------------------------------------------
# layers


class Conv(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=None, bias=False, gain=math.sqrt(2.0)):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.gain = gain
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    def reset_parameters(self, gen):
        fan_in = self.weight[0].numel()
        bound = self.gain * math.sqrt(3.0 / fan_in)
        with torch.no_grad():
            self.weight.copy_((torch.rand(self.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            if self.bias is not None:
                self.bias.zero_()

    def forward(self, x):
        return S.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Deconv(nn.Module):
    def __init__(self, c_in, c_out, kernel=2, stride=2):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(c_in, c_out, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def reset_parameters(self, gen):
        # each output pixel sees c_in taps when kernel == stride
        fan_in = self.weight.shape[0] * self.weight[0, 0].numel() // self.stride ** 2
        bound = math.sqrt(3.0 / max(fan_in, 1))
        with torch.no_grad():
            self.weight.copy_((torch.rand(self.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            self.bias.zero_()

    def forward(self, x):
        return S.deconv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm(nn.Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def reset_parameters(self, gen):
        with torch.no_grad():
            self.weight.fill_(1.0)
            self.bias.zero_()
            self.running_mean.zero_()
            self.running_var.fill_(1.0)

    def forward(self, x):
        return S.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ConvBNReLU(nn.Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1):
        super().__init__()
        self.conv = Conv(c_in, c_out, kernel, stride)
        self.bn = BatchNorm(c_out)

    def forward(self, x):
        return S.relu(self.bn(self.conv(x)))


class ResidualBlock(nn.Module):
    """Basic ResNet block: ``relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))``.

    The shortcut is the identity when shapes agree. Otherwise ``zero-pad`` mode
    subsamples spatially by the stride and appends zero channels; ``projection``
    mode uses a strided 1x1 convolution with batchnorm.
    """

    def __init__(self, c_in, c_out, stride=1, shortcut_mode="zero-pad"):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError("residual stride must be 1 or 2")
        if c_out < c_in and shortcut_mode == "zero-pad":
            raise ConfigError("zero-pad shortcut cannot reduce channels")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.conv1 = Conv(c_in, c_out, 3, stride)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv(c_out, c_out, 3, 1)
        self.bn2 = BatchNorm(c_out)
        self.projection = None
        if shortcut_mode == "projection" and (stride != 1 or c_in != c_out):
            self.projection = nn.Sequential(Conv(c_in, c_out, 1, stride, padding=0), BatchNorm(c_out))

    def shortcut(self, x):
        if self.projection is not None:
            return self.projection(x)
        if self.stride == 2:
            x = x[:, :, ::2, ::2]
        if self.c_out > self.c_in:
            pad = x.new_zeros(x.shape[0], self.c_out - self.c_in, x.shape[2], x.shape[3])
            x = torch.cat([x, pad], dim=1)
        return x

    def forward(self, x):
        h = S.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return S.relu(h + self.shortcut(x))


class PlainBlock(nn.Module):
    """UNet double convolution, used when the residual encoder is disabled."""

    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = ConvBNReLU(c_in, c_out, 3, stride)
        self.conv2 = ConvBNReLU(c_out, c_out, 3, 1)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class AttentionGate(nn.Module):
    """Three-input additive attention.

    ``q = psi(relu(W_x x + W_y y + W_g g + b_g)) + b_psi`` and ``alpha = sigmoid(q)``;
    the single-channel ``alpha`` rescales both ``x`` and ``y``. ``g`` is
    resampled to the extent of ``x`` if it differs. With ``y_channels=None`` the
    gate degenerates to the two-input form.
    """

    def __init__(self, g_channels, x_channels, y_channels=None, inter_channels=None):
        super().__init__()
        f_int = inter_channels or max(1, x_channels // 2)
        self.inter_channels = f_int
        self.w_g = Conv(g_channels, f_int, 1, padding=0, bias=True, gain=1.0)
        self.w_x = Conv(x_channels, f_int, 1, padding=0, gain=1.0)
        self.w_y = Conv(y_channels, f_int, 1, padding=0, gain=1.0) if y_channels else None
        self.psi = Conv(f_int, 1, 1, padding=0, bias=True, gain=1.0)

    def forward(self, g, x, y=None):
        if y is not None and x.shape[2:] != y.shape[2:]:
            raise ShapeError(f"x {tuple(x.shape)} and y {tuple(y.shape)} extents differ")
        if (y is None) != (self.w_y is None):
            raise ShapeError("y input does not match gate construction")
        g = S.resample_to(g, x.shape[2:])
        s = self.w_x(x) + self.w_g(g)
        if y is not None:
            s = s + self.w_y(y)
        alpha = S.sigmoid(self.psi(S.relu(s)))
        return alpha * x, (alpha * y if y is not None else None), alpha


class DecoderStage(nn.Module):
    def __init__(self, c_deep, c_skip, attention, bottom):
        super().__init__()
        self.up_conv = ConvBNReLU(c_deep, c_skip)
        self.gate = AttentionGate(c_deep, c_skip, c_skip if bottom else None) if attention else None
        self.bottom = bottom
        streams = 3 if bottom else 2
        self.fuse = ConvBNReLU(streams * c_skip, c_skip)

    def forward(self, deeper, skip, branch=None):
        if deeper.shape[2] * 2 != skip.shape[2] or deeper.shape[3] * 2 != skip.shape[3]:
            raise ShapeError(f"decoder input {tuple(deeper.shape)} is not half of skip {tuple(skip.shape)}")
        if self.bottom and (branch is None or branch.shape[2:] != skip.shape[2:]):
            raise ShapeError("bottom-branch map missing or of the wrong extent")
        g = S.upsample2x(deeper)
        if self.gate is not None:
            x, y, _ = self.gate(g, skip, branch if self.bottom else None)
        else:
            x, y = skip, branch
        parts = [x, y, self.up_conv(g)] if self.bottom else [x, self.up_conv(g)]
        return self.fuse(torch.cat(parts, dim=1))


class EncoderStack(NamedTuple):
    maps: list  # E[0] .. E[N]

    @property
    def bottom(self):
        return self.maps[-1]


# ---------------------------------------------------------------------------
# network


class ClawUNet(nn.Module):
    """Claw UNet built from a :class:`ModelConfig`; parameters are initialised from ``config.seed``."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        ch = cfg.channels
        n = cfg.depth

        self.stem = Conv(cfg.input_channels, ch[0], 7, stride=2)
        self.stem_bn = BatchNorm(ch[0])

        stages = []
        for s in range(1, n + 1):
            c_in, c_out = ch[s - 1], ch[s]
            stride = 1 if (s == 1 or cfg.pool_everywhere) else 2
            if cfg.enable_residual:
                blocks = [ResidualBlock(c_in, c_out, stride, cfg.shortcut_mode)]
                blocks += [ResidualBlock(c_out, c_out, 1, cfg.shortcut_mode)
                           for _ in range(cfg.blocks[s - 1] - 1)]
            else:
                blocks = [PlainBlock(c_in, c_out, stride)]
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

        # indexed by level i = 0 .. N-1
        if cfg.enable_bottom_branch:
            self.branch = nn.ModuleList(ConvBNReLU(ch[n], ch[i]) for i in range(n))
        else:
            self.branch = None
        self.decoder = nn.ModuleList(
            DecoderStage(ch[i + 1], ch[i], cfg.enable_attention, cfg.enable_bottom_branch)
            for i in range(n)
        )

        head_channels = max(1, ch[0] // 2)
        self.head_deconv = Deconv(ch[0], head_channels)
        self.head_conv = Conv(head_channels, 1, 1, padding=0, bias=True, gain=1.0)
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int):
        """Deterministic fan-in scaled uniform init, drawn in module declaration order."""
        gen = torch.Generator().manual_seed(int(seed))
        for m in self.modules():
            if m is not self and hasattr(m, "reset_parameters"):
                m.reset_parameters(gen)

    def encode(self, image) -> EncoderStack:
        cfg = self.config
        if image.dim() != 4 or image.shape[1] != cfg.input_channels or \
                image.shape[2] != cfg.input_size or image.shape[3] != cfg.input_size:
            raise ShapeError(
                f"expected input (N, {cfg.input_channels}, {cfg.input_size}, {cfg.input_size}), "
                f"got {tuple(image.shape)}")
        e = S.relu(self.stem_bn(self.stem(image)))
        maps = [e]
        h = S.max_pool2d(e)
        for s, stage in enumerate(self.stages, start=1):
            if cfg.pool_everywhere and s > 1:
                h = S.max_pool2d(h)
            h = stage(h)
            maps.append(h)
        return EncoderStack(maps)

    def bottom_branch(self, bottom) -> list:
        """``B[i]`` for ``i = 0 .. N-1``: the bottom map upsampled ``N - i`` times, then convolved."""
        if self.branch is None:
            return [None] * self.config.depth
        out = [None] * self.config.depth
        up = bottom
        for i in reversed(range(self.config.depth)):
            up = S.upsample2x(up)
            out[i] = self.branch[i](up)
        return out

    def decode(self, enc: EncoderStack, branch: list) -> list:
        """Return decoder maps ``D[0] .. D[N]`` with ``D[N] = E[N]``."""
        n = self.config.depth
        d = [None] * (n + 1)
        d[n] = enc.maps[n]
        for i in reversed(range(n)):
            d[i] = self.decoder[i](d[i + 1], enc.maps[i], branch[i])
        return d

    def head(self, d0):
        return S.sigmoid(self.head_conv(self.head_deconv(d0)))

    def forward(self, image):
        enc = self.encode(image)
        d = self.decode(enc, self.bottom_branch(enc.bottom))
        return self.head(d[0])

    def attention_maps(self, image) -> list:
        """Attention coefficients per decoder level (``None`` when attention is off)."""
        enc = self.encode(image)
        branch = self.bottom_branch(enc.bottom)
        d = self.decode(enc, branch)
        out = []
        for i, stage in enumerate(self.decoder):
            if stage.gate is None:
                out.append(None)
                continue
            g = S.upsample2x(d[i + 1])
            out.append(stage.gate(g, enc.maps[i], branch[i] if stage.bottom else None)[2])
        return out


def init_params(config: ModelConfig) -> ClawUNet:
    return ClawUNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def forward(image, model: ClawUNet, mode: str = "eval"):
    """Run ``model`` in ``"train"`` or ``"eval"`` mode and return the probability map."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(image)
    return model(image)


def predict_mask(prob_map, threshold: float = 0.5) -> np.ndarray:
    """Threshold a ``(N, 1, H, W)`` probability map; a pixel is foreground iff ``prob >= threshold``.

    Returns a boolean array of shape ``(N, H, W)``.
    """
    p = prob_map.detach().cpu().numpy() if isinstance(prob_map, torch.Tensor) else np.asarray(prob_map)
    if p.ndim == 4:
        p = p[:, 0]
    return p >= threshold
