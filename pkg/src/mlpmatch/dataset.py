"""Samples, splits, the synthetic shape generator and a VOC-style loader."""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from mlpmatch.errors import ConfigError, DataError

IGNORE_INDEX = 255

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# (r, g, b) base colors for classes 1..8; hue and luminance both differ so
# grayscale views stay partially informative.
_CLASS_COLORS = [
    (0.90, 0.20, 0.15),
    (0.15, 0.75, 0.25),
    (0.95, 0.90, 0.30),
    (0.55, 0.25, 0.85),
    (0.10, 0.85, 0.90),
    (0.95, 0.55, 0.10),
    (0.98, 0.98, 0.98),
    (0.45, 0.30, 0.10),
]
_SHAPES = ("disc", "rectangle", "triangle")


@dataclass
class Sample:
    """An H x W x 3 float image in [0, 1] with an optional H x W class-id label."""

    image: np.ndarray
    label: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"sample {self.id!r}: image must be HxWx3, got {self.image.shape}")
        if self.label is not None and self.label.shape != self.image.shape[:2]:
            raise DataError(
                f"sample {self.id!r}: label shape {self.label.shape} "
                f"does not match image {self.image.shape[:2]}"
            )

    def without_label(self) -> "Sample":
        return Sample(self.image, None, self.id)


@dataclass
class SplitSpec:
    labeled_ids: list
    unlabeled_ids: list = field(default_factory=list)
    num_classes: int = 21

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if len(self.labeled_ids) < 1:
            raise ConfigError("split needs at least one labeled id")
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise ConfigError(f"labeled and unlabeled ids overlap: {sorted(overlap)[:5]}")


@dataclass
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 4
    shapes_per_image: tuple = (1, 3)
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image_size must be at least 8, got {self.image_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid shapes_per_image range {self.shapes_per_image}")


def _class_color(k: int) -> np.ndarray:
    if k <= len(_CLASS_COLORS):
        return np.array(_CLASS_COLORS[k - 1])
    # golden-ratio hue walk for larger class sets
    h = (k * 0.618034) % 1.0
    v = 0.5 + 0.45 * ((k * 0.381966) % 1.0)
    return np.array(colorsys.hsv_to_rgb(h, 0.8, v))


def _shape_mask(kind, cy, cx, r, angle, yy, xx):
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        return (np.abs(yy - cy) <= 0.8 * r) & (np.abs(xx - cx) <= r)
    verts = [
        (cy + r * math.sin(angle + i * 2 * math.pi / 3), cx + r * math.cos(angle + i * 2 * math.pi / 3))
        for i in range(3)
    ]
    inside = np.ones_like(yy, dtype=bool)
    sign = None
    for (y0, x0), (y1, x1) in zip(verts, verts[1:] + verts[:1]):
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        s = np.sign((x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0))
        sign = s if sign is None else sign
        inside &= cross * s >= 0
    return inside


def _render(spec: SyntheticSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5

    # background: dim, low-saturation gradient
    base = rng.uniform(0.25, 0.45) + rng.uniform(-0.05, 0.05, size=3)
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    image = base[None, None, :] + (gy * yy[..., None] + gx * xx[..., None]) / s
    label = np.zeros((s, s), dtype=np.int64)

    lo, hi = spec.shapes_per_image
    for j in range(int(rng.integers(lo, hi + 1))):
        # the first shape cycles through the foreground classes so any run of
        # num_classes - 1 consecutive images contains every class
        k = 1 + index % (spec.num_classes - 1) if j == 0 else int(rng.integers(1, spec.num_classes))
        kind = _SHAPES[(k - 1) % len(_SHAPES)]
        r = rng.uniform(0.12, 0.25) * s
        cy, cx = rng.uniform(r, s - r, size=2)
        inside = _shape_mask(kind, cy, cx, r, rng.uniform(0, 2 * math.pi), yy, xx)
        color = np.clip(_class_color(k) + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        image[inside] = color
        label[inside] = k

    image = image + rng.normal(0.0, 0.06, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, label, f"syn{spec.seed}_{index:05d}")


def generate_synthetic(spec: SyntheticSpec, count: int, start: int = 0) -> list[Sample]:
    """Render ``count`` labeled shape images; sample ``i`` depends only on (seed, start + i)."""
    spec.validate()
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    return [_render(spec, start + i) for i in range(count)]


def make_synthetic_split(spec: SyntheticSpec, num_labeled: int, num_unlabeled: int, num_eval: int):
    """Disjoint labeled / unlabeled / eval sets. Unlabeled samples have their labels dropped."""
    labeled = generate_synthetic(spec, num_labeled)
    unlabeled = []
    if num_unlabeled > 0:
        unlabeled = [s.without_label() for s in generate_synthetic(spec, num_unlabeled, start=num_labeled)]
    evaluation = []
    if num_eval > 0:
        evaluation = generate_synthetic(spec, num_eval, start=num_labeled + num_unlabeled)
    return labeled, unlabeled, evaluation


def read_split_file(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"split file not found: {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def _find_image(root: Path, sample_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        p = root / "images" / f"{sample_id}{suffix}"
        if p.is_file():
            return p
    raise DataError(f"image for id {sample_id!r} not found under {root / 'images'}")


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _read_mask(path: Path, sample_id: str, num_classes: int) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise DataError(f"mask for id {sample_id!r} is not palette-indexed (mode {im.mode})")
        mask = np.asarray(im, dtype=np.int64)
    bad = (mask >= num_classes) & (mask != IGNORE_INDEX)
    if bad.any():
        raise DataError(
            f"mask for id {sample_id!r} has values outside 0..{num_classes - 1} and {IGNORE_INDEX}: "
            f"{sorted(set(np.unique(mask[bad]).tolist()))[:5]}"
        )
    return mask


def load_voc_dir(root, split: SplitSpec, with_unlabeled_masks: bool = False):
    """Load a VOC-style directory: ``images/<id>.{png,jpg}`` and ``masks/<id>.png``.

    Returns ``(labeled, unlabeled)``; unlabeled samples carry no label.
    """
    root = Path(root)
    split.validate()

    def load(sample_id, labeled):
        image = _read_image(_find_image(root, sample_id))
        label = None
        if labeled:
            mask_path = root / "masks" / f"{sample_id}.png"
            if not mask_path.is_file():
                raise DataError(f"mask for id {sample_id!r} not found: {mask_path}")
            label = _read_mask(mask_path, sample_id, split.num_classes)
        return Sample(image, label, sample_id)

    labeled = [load(i, True) for i in split.labeled_ids]
    unlabeled = [load(i, with_unlabeled_masks) for i in split.unlabeled_ids]
    return labeled, unlabeled


def _palette(num_colors: int = 256) -> list[int]:
    # standard VOC bit-interleaved color map
    pal = []
    for i in range(num_colors):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal += [r, g, b]
    return pal


def write_voc_dir(root, splits: dict, num_classes: int) -> Path:
    """Write samples in the layout read by :func:`load_voc_dir`.

    ``splits`` maps a split name to a list of samples; each name gets a
    ``<name>.txt`` id list. Samples without labels get no mask file.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    palette = _palette()
    for name, samples in splits.items():
        for s in samples:
            pixels = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(pixels, "RGB").save(root / "images" / f"{s.id}.png")
            if s.label is not None:
                mask = Image.fromarray(s.label.astype(np.uint8), "P")
                mask.putpalette(palette)
                mask.save(root / "masks" / f"{s.id}.png")
        (root / f"{name}.txt").write_text("".join(f"{s.id}\n" for s in samples))
    (root / "meta.json").write_text(json.dumps({"num_classes": num_classes, "splits": sorted(splits)}))
    return root


def read_meta(root) -> dict:
    p = Path(root) / "meta.json"
    if not p.is_file():
        return {}
    return json.loads(p.read_text())


def steps_per_epoch(num_unlabeled: int, batch_size: int) -> int:
    return math.ceil(num_unlabeled / (batch_size // 2))


def make_epoch_iterator(
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample],
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> Iterator[tuple[list[Sample], list[Sample]]]:
    """Yield one epoch of ``(labeled_batch, unlabeled_batch)`` pairs.

    Each half of the mini-batch holds ``batch_size // 2`` samples. The
    unlabeled set defines the epoch; the labeled set is cycled, reshuffled on
    every pass. Order depends only on ``(seed, epoch)``.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch_size must be even and >= 2, got {batch_size}")
    if not labeled:
        raise ConfigError("semi-supervised training needs a non-empty labeled set")
    if not unlabeled:
        raise ConfigError("semi-supervised training needs a non-empty unlabeled set")
    ids_x = {s.id for s in labeled}
    clash = ids_x.intersection(s.id for s in unlabeled)
    if clash:
        raise ConfigError(f"samples in both labeled and unlabeled streams: {sorted(clash)[:5]}")
    return _epoch(labeled, unlabeled, batch_size // 2, seed, epoch)


def _epoch(labeled, unlabeled, half, seed, epoch):
    rng_u = np.random.default_rng([seed, epoch, 0])
    rng_x = np.random.default_rng([seed, epoch, 1])
    order_u = rng_u.permutation(len(unlabeled))
    steps = math.ceil(len(unlabeled) / half)
    need = steps * half
    order_x = np.concatenate(
        [rng_x.permutation(len(labeled)) for _ in range(math.ceil(need / len(labeled)))]
    )
    for step in range(steps):
        ub = [unlabeled[i] for i in order_u[step * half:(step + 1) * half]]
        xb = [labeled[i] for i in order_x[step * half:(step + 1) * half]]
        yield xb, ub
