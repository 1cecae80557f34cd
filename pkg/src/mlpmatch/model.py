"""Encoder-decoder segmentation network with switchable residual bottlenecks.

Every bottleneck can run ACTIVE (normal residual block) or SKIP (residual
branch not evaluated, shortcut only). A perturbed forward puts exactly one
eligible bottleneck into SKIP for the duration of that call, turning the
normal encoder into its weakened variant.
"""

from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mlpmatch.augment import feature_dropout
from mlpmatch.errors import ConfigError


class Mode(enum.Enum):
    ACTIVE = "active"
    SKIP = "skip"


def _conv_bn(cin, cout, k=1, stride=1, dilation=1, relu=True):
    pad = dilation * (k - 1) // 2
    layers = [nn.Conv2d(cin, cout, k, stride, pad, dilation=dilation, bias=False), nn.BatchNorm2d(cout)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block with an identity or 1x1 projection shortcut."""

    def __init__(self, cin, cout, stride=1, dilation=1, reduction=4, relu_on_projection_skip=True):
        super().__init__()
        mid = max(cout // reduction, 4)
        self.residual = nn.Sequential(
            _conv_bn(cin, mid, 1),
            _conv_bn(mid, mid, 3, stride=stride, dilation=dilation),
            _conv_bn(mid, cout, 1, relu=False),
        )
        if stride != 1 or cin != cout:
            self.shortcut = _conv_bn(cin, cout, 1, stride=stride, relu=False)
        else:
            self.shortcut = nn.Identity()
        self.relu_on_projection_skip = relu_on_projection_skip
        self.mode = Mode.ACTIVE

    @property
    def has_projection(self) -> bool:
        return not isinstance(self.shortcut, nn.Identity)

    def shortcut_path(self, x):
        out = self.shortcut(x)
        if self.has_projection and self.relu_on_projection_skip:
            out = F.relu(out)
        return out

    def forward(self, x):
        if self.mode is Mode.SKIP:
            return self.shortcut_path(x)
        return F.relu(self.shortcut(x) + self.residual(x))


class Decoder(nn.Module):
    """Light DeepLabV3+-style head: atrous context on deep features, fused with a shallow skip."""

    def __init__(self, high_ch, low_ch, num_classes, width=48, low_width=12, rate=2):
        super().__init__()
        self.b1 = _conv_bn(high_ch, width, 1)
        self.b2 = _conv_bn(high_ch, width, 3, dilation=rate)
        # no norm on the pooled branch: 1x1 spatial maps break batch statistics at batch size 1
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(high_ch, width, 1), nn.ReLU(inplace=True))
        self.project = _conv_bn(3 * width, width, 1)
        self.low = _conv_bn(low_ch, low_width, 1)
        self.fuse = _conv_bn(width + low_width, width, 3)
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, low, high, size):
        pooled = self.pool(high).expand(-1, -1, *high.shape[-2:])
        ctx = self.project(torch.cat([self.b1(high), self.b2(high), pooled], 1))
        ctx = F.interpolate(ctx, size=low.shape[-2:], mode="bilinear", align_corners=False)
        out = self.fuse(torch.cat([ctx, self.low(low)], 1))
        out = self.classifier(out)
        return F.interpolate(out, size=size, mode="bilinear", align_corners=False)


@dataclass
class PerturbationPolicy:
    enabled: bool = False
    max_skipped: int = 1
    # per-stage selection weights; None falls back to the model's weights
    stage_weights: Optional[Sequence[float]] = None


class PerturbableSegModel(nn.Module):
    def __init__(self, num_classes, stem_ch, stage_channels, depth_spec, strides, dilations,
                 decoder_width=48, relu_on_projection_skip=True, eligible=None, stage_weights=None):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.stem = _conv_bn(3, stem_ch, 3, stride=2)
        stages = []
        cin = stem_ch
        for cout, n, s, d in zip(stage_channels, depth_spec, strides, dilations):
            blocks = [Bottleneck(cin if i == 0 else cout, cout, s if i == 0 else 1, d,
                                 relu_on_projection_skip=relu_on_projection_skip) for i in range(n)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.decoder = Decoder(stage_channels[-1], stage_channels[0], num_classes, width=decoder_width)

        self.block_ids = [f"layer{s + 1}.{b}" for s, stage in enumerate(self.stages) for b in range(len(stage))]
        self.eligible = list(self.block_ids if eligible is None else eligible)
        unknown = set(self.eligible) - set(self.block_ids)
        if unknown:
            raise ConfigError(f"unknown eligible blocks {sorted(unknown)}; valid: {self.block_ids}")
        n_stages = len(self.stages)
        self.stage_weights = list(stage_weights or [1.0 / n_stages] * n_stages)
        if len(self.stage_weights) != n_stages or min(self.stage_weights) < 0 or sum(self.stage_weights) <= 0:
            raise ConfigError(f"stage_weights must be {n_stages} non-negative reals, got {self.stage_weights}")

    def block(self, block_id: str) -> Bottleneck:
        stage, idx = block_id[len("layer"):].split(".")
        return self.stages[int(stage) - 1][int(idx)]

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("decoder.")]

    def decoder_parameters(self):
        return list(self.decoder.parameters())

    def encode(self, x):
        x = self.stem(x)
        low = self.stages[0](x)
        high = low
        for stage in self.stages[1:]:
            high = stage(high)
        return low, high

    def forward(self, x, fp_rate: Optional[float] = None, rng=None):
        low, high = self.encode(x)
        if fp_rate is not None:
            low = feature_dropout(low, fp_rate, rng)
            high = feature_dropout(high, fp_rate, rng)
        return self.decoder(low, high, x.shape[-2:])

    def skipped_blocks(self) -> list[str]:
        return [b for b in self.block_ids if self.block(b).mode is Mode.SKIP]


@contextlib.contextmanager
def skip_blocks(model: PerturbableSegModel, block_ids):
    """Temporarily put the given bottlenecks into SKIP mode."""
    blocks = [model.block(b) for b in block_ids]
    try:
        for blk in blocks:
            blk.mode = Mode.SKIP
        yield
    finally:
        for blk in blocks:
            blk.mode = Mode.ACTIVE


def choose_blocks(model: PerturbableSegModel, policy: PerturbationPolicy, rng: np.random.Generator) -> list[str]:
    """Pick ``policy.max_skipped`` distinct eligible blocks: stage by weight, then block uniformly."""
    if not model.eligible:
        raise ConfigError("network perturbation enabled but the eligible block set is empty")
    if policy.max_skipped < 1 or policy.max_skipped > len(model.eligible):
        raise ConfigError(f"max_skipped must be in 1..{len(model.eligible)}, got {policy.max_skipped}")
    weights = list(policy.stage_weights or model.stage_weights)
    if len(weights) != len(model.stages):
        raise ConfigError(f"expected {len(model.stages)} stage weights, got {len(weights)}")
    pool = {s: [b for b in model.eligible if b.startswith(f"layer{s + 1}.")] for s in range(len(model.stages))}
    chosen = []
    for _ in range(policy.max_skipped):
        w = np.array([weights[s] if pool[s] else 0.0 for s in range(len(weights))], dtype=np.float64)
        if w.sum() <= 0:
            raise ConfigError("stage_weights give zero probability to every eligible block")
        stage = int(rng.choice(len(w), p=w / w.sum()))
        candidates = pool[stage]
        pick = candidates[int(rng.integers(len(candidates)))]
        candidates.remove(pick)
        chosen.append(pick)
    return chosen


def forward(model: PerturbableSegModel, images: torch.Tensor, perturb: Optional[PerturbationPolicy] = None,
            feature_dropout_rate: Optional[float] = None, rng: Optional[np.random.Generator] = None):
    """Run the model, optionally through the weakened encoder or with feature dropout.

    Returns ``(logits, chosen)`` where ``chosen`` is the skipped block id (or a
    ``+``-joined list when several are skipped), or None for an unperturbed pass.
    """
    perturbed = perturb is not None and perturb.enabled
    if perturbed and feature_dropout_rate is not None:
        raise ConfigError("network perturbation and feature dropout cannot share one forward")
    if (perturbed or feature_dropout_rate is not None) and rng is None:
        raise ConfigError("a random generator is required for perturbed forwards")
    if not perturbed:
        return model(images, fp_rate=feature_dropout_rate, rng=rng), None
    chosen = choose_blocks(model, perturb, rng)
    with skip_blocks(model, chosen):
        logits = model(images)
    return logits, "+".join(chosen)


def build_model(num_classes: int, width_multiplier: float = 1.0, depth_spec=(2, 2, 2, 2),
                eligible=None, stage_weights=None, relu_on_projection_skip: bool = True) -> PerturbableSegModel:
    """Four-stage miniature residual encoder with an atrous decoder.

    Output stride 8 for the deep features, 4 for the shallow skip; the last two
    stages keep resolution and dilate instead.
    """
    if len(depth_spec) != 4 or min(depth_spec) < 1:
        raise ConfigError(f"depth_spec must list 4 positive block counts, got {depth_spec}")

    def ch(c):
        return max(4, int(round(c * width_multiplier / 4)) * 4)

    return PerturbableSegModel(
        num_classes,
        stem_ch=ch(16),
        stage_channels=[ch(32), ch(48), ch(64), ch(96)],
        depth_spec=tuple(depth_spec),
        strides=(2, 2, 1, 1),
        dilations=(1, 1, 2, 4),
        decoder_width=ch(48),
        relu_on_projection_skip=relu_on_projection_skip,
        eligible=eligible,
        stage_weights=stage_weights,
    )


@torch.no_grad()
def predict_probs(model: PerturbableSegModel, images: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities (N x C x H x W) from an unperturbed forward."""
    return torch.softmax(model(images), dim=1)
