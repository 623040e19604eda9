"""Image/mask datasets: PNG pair loading, resizing, 4:1 splitting and a synthetic
curvilinear-vessel generator.

On disk a dataset is ``images/<id>.png`` and ``masks/<id>.png`` matched by file
stem. Masks are 8-bit with values 0 and 255 only.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .model import ConfigError, _kv_lines, parse_fields

PNG_COMPRESS_LEVEL = 6


class DataError(ValueError):
    pass


@dataclass
class Sample:
    """One image/mask pair. ``image`` is float32 ``(C, H, W)`` in [0, 1]; ``mask`` is bool ``(H, W)``."""

    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise DataError(f"image must be (C, H, W), got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} extents differ")


# ---------------------------------------------------------------------------
# PNG io


def _save_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=PNG_COMPRESS_LEVEL)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    hwc = np.transpose(np.clip(image, 0.0, 1.0), (1, 2, 0))
    out = np.round(hwc * 255.0).astype(np.uint8)
    return out[..., 0] if out.shape[2] == 1 else out


def save_pair(sample: Sample, root) -> None:
    root = Path(root)
    _save_png(root / "images" / f"{sample.id}.png", image_to_uint8(sample.image))
    _save_png(root / "masks" / f"{sample.id}.png", sample.mask.astype(np.uint8) * 255)


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P", "RGB", "RGBA", "LA"):
            raise DataError(f"{path}: unsupported mask mode {im.mode}")
        arr = np.asarray(im.convert("L"))
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise DataError(f"{path}: mask is not binary (found values other than 0 and 255)")
    return arr == 255


def load_image(path, channels: int = 3) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA", "P", "LA"):
            raise DataError(f"{path}: expected an 8-bit PNG, got mode {im.mode}")
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.transpose(arr, (2, 0, 1))
    return np.ascontiguousarray(arr)


def load_pair(image_path, mask_path, channels: int = 3) -> Sample:
    image = load_image(image_path, channels)
    mask = load_mask(mask_path)
    if image.shape[1:] != mask.shape:
        raise DataError(f"{image_path}: image {image.shape[1:]} and mask {mask.shape} extents differ")
    return Sample(image, mask, Path(image_path).stem)


def load_dataset(root, channels: int = 3) -> list[Sample]:
    """Load every pair under ``root``, sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root}: expected images/ and masks/ subdirectories")
    samples = []
    for img in sorted(img_dir.glob("*.png")):
        mask = mask_dir / img.name
        if not mask.exists():
            raise DataError(f"no mask for {img.name}")
        samples.append(load_pair(img, mask, channels))
    if not samples:
        raise DataError(f"{root}: dataset is empty")
    return samples


# ---------------------------------------------------------------------------
# transforms


def resize_to(sample: Sample, size: int) -> Sample:
    """Bilinear resize of the image and nearest-neighbour resize of the mask to ``size x size``."""
    if sample.mask.shape == (size, size):
        return sample
    img = torch.from_numpy(sample.image)[None]
    img = F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    mask = torch.from_numpy(sample.mask.astype(np.uint8))[None, None].float()
    mask = F.interpolate(mask, size=(size, size), mode="nearest")
    return Sample(img[0].numpy().astype(np.float32), mask[0, 0].numpy() > 0.5, sample.id)


def split(dataset: list, ratio=(4, 1), seed: int = 0):
    """Shuffle deterministically and split ``train:test``; the floor goes to test, the remainder to train."""
    if not dataset:
        raise DataError("cannot split an empty dataset")
    a, b = (int(r) for r in ratio)
    if a < 0 or b < 0 or a + b == 0:
        raise DataError(f"invalid ratio {ratio}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = len(dataset) * b // (a + b)
    n_train = len(dataset) - n_test
    return [dataset[i] for i in order[:n_train]], [dataset[i] for i in order[n_train:]]


def stack(samples: list) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch tensors ``(N, C, H, W)`` images and ``(N, 1, H, W)`` float masks."""
    x = torch.from_numpy(np.stack([s.image for s in samples]))
    y = torch.from_numpy(np.stack([s.mask for s in samples])[:, None].astype(np.float32))
    return x, y


# ---------------------------------------------------------------------------
# synthetic vessels


@dataclass(frozen=True)
class SynthSpec:
    size: int = 128
    channels: int = 3
    vessel_min: int = 3
    vessel_max: int = 6
    width_min: float = 2.0
    width_max: float = 5.0
    curvature: float = 0.35
    noise: float = 0.05
    vessel_low: float = 0.05
    vessel_high: float = 0.35
    background_low: float = 0.55
    background_high: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ConfigError("synthetic size must be >= 32")
        if not 1 <= self.vessel_min <= self.vessel_max:
            raise ConfigError("need 1 <= vessel_min <= vessel_max")
        if not 1 <= self.width_min <= self.width_max:
            raise ConfigError("need 1 <= width_min <= width_max")
        if self.vessel_low > self.vessel_high or self.background_low > self.background_high:
            raise ConfigError("intensity ranges must be non-empty")
        if self.noise < 0 or self.curvature < 0 or self.channels < 1:
            raise ConfigError("noise, curvature must be >= 0 and channels >= 1")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "SynthSpec":
        return cls(**parse_fields(cls, dict(_kv_lines(text))))


def bezier(p0, p1, p2, t):
    t = t[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def rasterize_stroke(mask: np.ndarray, points: np.ndarray, widths: np.ndarray) -> None:
    """Paint a variable-width stroke into ``mask`` in place.

    ``points`` are ``(row, col)`` samples dense enough that consecutive samples are
    under a pixel apart. A pixel is painted when it is the nearest pixel of a sample
    or its centre lies within ``width / 2`` of one.
    """
    h, w = mask.shape
    nearest = np.rint(points).astype(np.int64)
    mask[np.clip(nearest[:, 0], 0, h - 1), np.clip(nearest[:, 1], 0, w - 1)] = True
    reach = int(np.ceil(widths.max() / 2))
    if reach == 0:
        return
    offs = np.arange(-reach, reach + 1)
    dr, dc = np.meshgrid(offs, offs, indexing="ij")
    rows = nearest[:, 0, None] + dr.ravel()[None]
    cols = nearest[:, 1, None] + dc.ravel()[None]
    dist2 = (rows - points[:, 0, None]) ** 2 + (cols - points[:, 1, None]) ** 2
    hit = (dist2 <= (widths[:, None] / 2) ** 2) & (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    mask[rows[hit], cols[hit]] = True


def _draw_vessels(spec: SynthSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    n = spec.size
    hi = n - 1.0
    mask = np.zeros((n, n), dtype=bool)
    intensity = np.zeros((n, n), dtype=np.float64)
    for _ in range(int(rng.integers(spec.vessel_min, spec.vessel_max + 1))):
        p0, p2 = rng.uniform(0, hi, 2), rng.uniform(0, hi, 2)
        p1 = np.clip((p0 + p2) / 2 + rng.uniform(-1, 1, 2) * spec.curvature * n, 0, hi)
        w0, w1 = rng.uniform(spec.width_min, spec.width_max, 2)
        level = rng.uniform(spec.vessel_low, spec.vessel_high)
        length = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
        t = np.linspace(0.0, 1.0, int(np.ceil(length * 4)) + 2)
        stroke = np.zeros_like(mask)
        rasterize_stroke(stroke, bezier(p0, p1, p2, t), w0 + (w1 - w0) * t)
        mask |= stroke
        intensity[stroke] = level
    return mask, intensity


def synth_sample(spec: SynthSpec, index: int) -> Sample:
    """Generate sample ``index``; fully determined by ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    while True:
        mask, intensity = _draw_vessels(spec, rng)
        frac = mask.mean()
        if 0 < frac < 0.5:
            break
    yy, xx = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    corners = rng.uniform(spec.background_low, spec.background_high, 3)
    background = corners[0] + (corners[1] - corners[0]) * xx + (corners[2] - corners[0]) * yy
    background = np.clip(background, spec.background_low, spec.background_high)
    base = np.where(mask, intensity, background)
    image = np.repeat(base[None], spec.channels, axis=0)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask, f"synth_{spec.seed}_{index}")


def synth_generate(spec: SynthSpec, count: int) -> list[Sample]:
    return [synth_sample(spec, i) for i in range(count)]


def write_dataset(samples: list, root, spec: SynthSpec | None = None) -> Path:
    root = Path(root)
    for s in samples:
        save_pair(s, root)
    if spec is not None:
        (root / "spec.txt").write_text(spec.to_text())
    return root
