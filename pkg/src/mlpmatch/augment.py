"""Weak, strong and feature-level perturbations, plus CutMix for unlabeled strong views.

Image-level ops work on H x W x 3 numpy arrays (one sample at a time) and take
an explicit ``numpy.random.Generator``. Batch-level ops (CutMix, feature
dropout) work on torch tensors in N x C x H x W layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from mlpmatch.dataset import IGNORE_INDEX, Sample
from mlpmatch.errors import ConfigError


@dataclass
class WeakAugSpec:
    crop_size: int = 64
    scale_range: tuple = (0.5, 2.0)
    hflip_prob: float = 0.5

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if self.crop_size < 1:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")


@dataclass
class StrongAugSpec:
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    cutmix_prob: float = 0.5
    # brightness, contrast, saturation, hue
    jitter_strengths: tuple = (0.5, 0.5, 0.5, 0.25)

    def validate(self) -> None:
        for name in ("color_jitter_prob", "grayscale_prob", "blur_prob", "cutmix_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if len(self.jitter_strengths) != 4 or min(self.jitter_strengths) < 0:
            raise ConfigError(f"jitter_strengths must be 4 non-negative reals, got {self.jitter_strengths}")
        if self.jitter_strengths[3] > 0.5:
            raise ConfigError("hue jitter strength must be <= 0.5")


@dataclass(frozen=True)
class CutMixBox:
    top: int
    left: int
    height: int
    width: int

    def slices(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


def _resize(image: np.ndarray, label, size):
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    image = t[0].permute(1, 2, 0).numpy()
    if label is not None:
        lt = torch.from_numpy(label.astype(np.float32))[None, None]
        label = F.interpolate(lt, size=size, mode="nearest")[0, 0].numpy().astype(np.int64)
    return image, label


def weak_augment(sample: Sample, spec: WeakAugSpec, rng: np.random.Generator) -> Sample:
    """Random rescale, random crop (padding with the ignore label) and horizontal flip."""
    image, label = sample.image, sample.label
    h, w = image.shape[:2]
    lo, hi = spec.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) != (h, w):
        image, label = _resize(image, label, (nh, nw))

    c = spec.crop_size
    if nh < c or nw < c:
        ph, pw = max(c - nh, 0), max(c - nw, 0)
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), constant_values=0.0)
        if label is not None:
            label = np.pad(label, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
        nh, nw = image.shape[:2]
    top = int(rng.integers(0, nh - c + 1))
    left = int(rng.integers(0, nw - c + 1))
    image = image[top:top + c, left:left + c]
    if label is not None:
        label = label[top:top + c, left:left + c]

    if rng.random() < spec.hflip_prob:
        image = image[:, ::-1]
        if label is not None:
            label = label[:, ::-1]

    image = np.ascontiguousarray(image, dtype=np.float32)
    if label is not None:
        label = np.ascontiguousarray(label)
    return Sample(image, label, sample.id)


def _color_jitter(t: torch.Tensor, strengths, rng) -> torch.Tensor:
    b, c, s, h = strengths
    factors = [
        rng.uniform(max(0.0, 1 - b), 1 + b),
        rng.uniform(max(0.0, 1 - c), 1 + c),
        rng.uniform(max(0.0, 1 - s), 1 + s),
        rng.uniform(-h, h),
    ]
    ops = [TF.adjust_brightness, TF.adjust_contrast, TF.adjust_saturation, TF.adjust_hue]
    for i in rng.permutation(4):
        t = ops[i](t, factors[i])
    return t


def strong_augment(image: np.ndarray, spec: StrongAugSpec, rng: np.random.Generator) -> np.ndarray:
    """Photometric-only strong view of an already weakly augmented image.

    Pixel positions never move, so pseudo-labels from the weak view stay aligned.
    """
    do_jitter = rng.random() < spec.color_jitter_prob
    do_gray = rng.random() < spec.grayscale_prob
    do_blur = rng.random() < spec.blur_prob
    if not (do_jitter or do_gray or do_blur):
        return image.copy()

    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    if do_jitter:
        t = _color_jitter(t, spec.jitter_strengths, rng)
    if do_gray:
        t = TF.rgb_to_grayscale(t, num_output_channels=3)
    if do_blur:
        sigma = float(rng.uniform(0.1, 2.0))
        k = 2 * math.ceil(3 * sigma) + 1
        k = min(k, 2 * (min(t.shape[1:]) // 2) - 1)
        if k >= 3:
            t = TF.gaussian_blur(t, [k, k], [sigma, sigma])
    return t.clamp(0.0, 1.0).permute(1, 2, 0).contiguous().numpy()


def make_cutmix_box(height: int, width: int, rng: np.random.Generator,
                    area_range=(0.25, 0.5), ratio_range=(0.5, 2.0)) -> CutMixBox:
    """Sample a box covering ``area_range`` of the image; ratio is box height / width."""
    area = rng.uniform(*area_range) * height * width
    ratio = math.exp(rng.uniform(math.log(ratio_range[0]), math.log(ratio_range[1])))
    bh = min(height, max(1, int(round(math.sqrt(area * ratio)))))
    bw = min(width, max(1, int(round(area / bh))))
    top = int(rng.integers(0, height - bh + 1))
    left = int(rng.integers(0, width - bw + 1))
    return CutMixBox(top, left, bh, bw)


def cutmix_pair(images: torch.Tensor, pseudo_labels: torch.Tensor, masks: torch.Tensor,
                prob: float, rng: np.random.Generator, area_range=(0.25, 0.5)):
    """Paste a box from the batch-rolled partner (sample ``i - 1``) into sample ``i``.

    Image, pseudo-label and confidence mask share the identical box.
    """
    n = images.shape[0]
    if prob > 0 and n < 2:
        raise ConfigError("CutMix needs a batch of at least 2")
    if images.shape[-2:] != pseudo_labels.shape[-2:] or pseudo_labels.shape != masks.shape:
        raise ConfigError("CutMix inputs are not spatially aligned")
    if prob <= 0:
        return images, pseudo_labels, masks

    partner = torch.roll(torch.arange(n), 1).tolist()
    out_i, out_p, out_m = images.clone(), pseudo_labels.clone(), masks.clone()
    h, w = images.shape[-2:]
    for i in range(n):
        if rng.random() >= prob:
            continue
        ys, xs = make_cutmix_box(h, w, rng, area_range).slices()
        j = partner[i]
        out_i[i, :, ys, xs] = images[j, :, ys, xs]
        out_p[i, ys, xs] = pseudo_labels[j, ys, xs]
        out_m[i, ys, xs] = masks[j, ys, xs]
    return out_i, out_p, out_m


def feature_dropout(features: torch.Tensor, rate: float, rng: np.random.Generator) -> torch.Tensor:
    """Channel-wise dropout: each (sample, channel) map is zeroed or scaled by 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"feature dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return features
    lead = features.shape[:-2]
    keep = rng.random(lead) >= rate
    scale = torch.from_numpy(keep).to(features.dtype) / (1.0 - rate)
    return features * scale[..., None, None]
