"""Joint image/label augmentation: resize, crop, flip, colour noise, brightness.

Geometric ops move image and label together; photometric ops touch the image
only.  Every op draws from an explicit generator, and :func:`sample_rng`
derives one stream per ``(seed, epoch, sample index)`` so results do not
depend on worker scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .functional import IGNORE_ID, resize_array


@dataclass
class Sample:
    """``image`` is ``(1, 3, H, W)`` float32 (already normalized); ``label`` is ``(1, H, W)``."""

    image: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 4 or self.label.ndim != 3 or self.image.shape[2:] != self.label.shape[1:]:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} do not match")

    @property
    def size(self) -> tuple[int, int]:
        return self.label.shape[1], self.label.shape[2]


@dataclass
class AugmentConfig:
    scale_range: tuple = (0.5, 2.0)
    crop: tuple = (128, 256)
    flip_p: float = 0.5
    noise_std: float = 0.02
    gain_range: tuple = (0.75, 1.25)
    ignore_id: int = IGNORE_ID


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    """Source index for each output pixel under half-pixel centers."""
    src = np.floor((np.arange(out_size) + 0.5) * in_size / out_size).astype(np.intp)
    return np.minimum(src, in_size - 1)


def random_resize(sample: Sample, rng: np.random.Generator, scale_range=(0.5, 2.0),
                  scale: Optional[float] = None) -> Sample:
    s = rng.uniform(*scale_range) if scale is None else scale
    h, w = sample.size
    oh, ow = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (oh, ow) == (h, w):
        return replace(sample)
    image = resize_array(sample.image, oh, ow)
    label = sample.label[:, nearest_indices(h, oh)][:, :, nearest_indices(w, ow)]
    return Sample(image, label)


def random_crop(sample: Sample, crop_h: int, crop_w: int, rng: np.random.Generator,
                ignore_id: int = IGNORE_ID) -> Sample:
    """Uniform crop window; short sides are padded (image 0, label ``ignore_id``) first."""
    image, label = sample.image, sample.label
    h, w = sample.size
    ph, pw = max(crop_h - h, 0), max(crop_w - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)))
        label = np.pad(label, ((0, 0), (0, ph), (0, pw)), constant_values=ignore_id)
        h, w = h + ph, w + pw
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    return Sample(image[:, :, y0:y0 + crop_h, x0:x0 + crop_w].copy(),
                  label[:, y0:y0 + crop_h, x0:x0 + crop_w].copy())


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[..., ::-1].copy(), sample.label[..., ::-1].copy())


def random_hflip(sample: Sample, rng: np.random.Generator, p: float = 0.5) -> Sample:
    return hflip(sample) if rng.random() < p else sample


def color_noise(sample: Sample, std: float, rng: np.random.Generator) -> Sample:
    if std <= 0:
        return sample
    noise = rng.normal(0.0, std, size=sample.image.shape).astype(sample.image.dtype)
    return Sample(sample.image + noise, sample.label)


def brightness(sample: Sample, gain_range, rng: np.random.Generator) -> Sample:
    lo, hi = gain_range
    gain = lo if lo == hi else rng.uniform(lo, hi)
    if gain == 1.0:
        return sample
    return Sample(sample.image * sample.image.dtype.type(gain), sample.label)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """resize -> crop -> hflip -> noise -> brightness."""
    s = random_resize(sample, rng, cfg.scale_range)
    s = random_crop(s, cfg.crop[0], cfg.crop[1], rng, cfg.ignore_id)
    s = random_hflip(s, rng, cfg.flip_p)
    s = color_noise(s, cfg.noise_std, rng)
    return brightness(s, cfg.gain_range, rng)
