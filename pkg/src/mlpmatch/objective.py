"""Confidence masks, pseudo-labels and the five loss terms with their weighted total."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from mlpmatch.augment import cutmix_pair
from mlpmatch.dataset import IGNORE_INDEX
from mlpmatch.errors import ConfigError, ContractError
from mlpmatch.model import PerturbationPolicy, forward

TERMS = ("l_x", "l_x_np", "l_u_s", "l_u_fp", "l_u_np")


@dataclass
class BatchLosses:
    l_x: object = 0.0
    l_x_np: object = 0.0
    l_u_s: object = 0.0
    l_u_fp: object = 0.0
    l_u_np: object = 0.0
    total: object = 0.0

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass
class LossWeights:
    lambda_x: float = 1.0
    lambda_x_np: float = 0.0
    lambda_u_s: float = 0.5
    lambda_u_fp: float = 0.25
    lambda_u_np: float = 0.25

    def validate(self) -> None:
        if self.lambda_x_np < 0 or self.lambda_x_np > self.lambda_x:
            raise ConfigError(
                f"need 0 <= lambda_x_np <= lambda_x, got lambda_x_np={self.lambda_x_np}, lambda_x={self.lambda_x}"
            )
        for name in ("lambda_u_s", "lambda_u_fp", "lambda_u_np"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class UnlabeledLosses:
    l_u_s: torch.Tensor
    l_u_fp: torch.Tensor
    l_u_np: torch.Tensor
    mask_pass_rate: float
    chosen_block: Optional[str] = None


def masked_ce(logits: torch.Tensor, targets: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-pixel cross-entropy, optionally multiplied by ``mask``, averaged over non-ignored pixels.

    Masked-out pixels still count in the denominator.
    """
    if logits.dim() != 4 or targets.shape != (logits.shape[0], *logits.shape[2:]):
        raise ContractError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} are not aligned")
    if mask is not None and mask.shape != targets.shape:
        raise ContractError(f"mask {tuple(mask.shape)} does not match targets {tuple(targets.shape)}")
    loss = F.cross_entropy(logits, targets, ignore_index=IGNORE_INDEX, reduction="none")
    if mask is not None:
        loss = loss * mask.to(loss.dtype)
    valid = (targets != IGNORE_INDEX).sum()
    return loss.sum() / valid.clamp(min=1)


@torch.no_grad()
def confidence_targets(weak_logits: torch.Tensor, tau: float, ignore: Optional[torch.Tensor] = None):
    """Pseudo-labels (argmax, lowest index on ties) and the binary confidence mask.

    Ignored pixels get the ignore label and a zero mask. Outputs are detached.
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    probs = torch.softmax(weak_logits.detach().double(), dim=1)
    conf, pseudo = probs.max(dim=1)
    if tau >= 1.0:
        # softmax of finite logits is strictly below 1; float rounding can reach it
        mask = torch.zeros_like(conf)
    else:
        mask = (conf > tau).to(conf.dtype)
    if ignore is not None:
        pseudo = pseudo.masked_fill(ignore, IGNORE_INDEX)
        mask = mask.masked_fill(ignore, 0.0)
    return pseudo, mask.to(weak_logits.dtype)


def _split_batch(batch):
    images, labels = batch
    if labels is None:
        raise ContractError("supervised loss needs labels")
    return images, labels


def supervised_loss(model, batch) -> torch.Tensor:
    images, labels = _split_batch(batch)
    logits, _ = forward(model, images)
    return masked_ce(logits, labels)


def volatile_supervised_loss(model, batch, policy: PerturbationPolicy, rng: np.random.Generator):
    """Supervised loss through the weakened encoder. Returns ``(loss, chosen_block)``."""
    if not policy.enabled:
        raise ContractError("volatile learning needs an enabled perturbation policy")
    images, labels = _split_batch(batch)
    logits, chosen = forward(model, images, perturb=policy, rng=rng)
    return masked_ce(logits, labels), chosen


def unlabeled_losses(model, weak: torch.Tensor, strong1: torch.Tensor, strong2: torch.Tensor, tau: float,
                     policy: Optional[PerturbationPolicy], fp_rate: Optional[float], rng: np.random.Generator,
                     ignore: Optional[torch.Tensor] = None, cutmix_prob: float = 0.0,
                     compute_fp: bool = True) -> UnlabeledLosses:
    """Weak-to-strong consistency at input, feature and network level.

    Pseudo-labels come from an unperturbed, gradient-free forward of ``weak``.
    Both strong views are CutMix-ed (image, pseudo-label and mask together)
    before their forward. The feature-dropout and weakened-encoder predictions
    are made on the same ``weak`` tensor.
    """
    if strong1.shape != weak.shape or strong2.shape != weak.shape:
        raise ContractError("strong views must be pixel-aligned with the weak view")
    if ignore is not None and ignore.shape != (weak.shape[0], *weak.shape[2:]):
        raise ContractError("ignore map does not match the weak batch")

    with torch.no_grad():
        weak_logits, _ = forward(model, weak)
    pseudo, mask = confidence_targets(weak_logits, tau, ignore)
    valid = pseudo != IGNORE_INDEX
    pass_rate = float(mask.sum() / valid.sum().clamp(min=1))

    views, targets, masks = [], [], []
    for strong in (strong1, strong2):
        img, pl, m = cutmix_pair(strong, pseudo, mask, cutmix_prob, rng)
        views.append(img)
        targets.append(pl)
        masks.append(m)
    n = weak.shape[0]
    strong_logits, _ = forward(model, torch.cat(views))
    l_u_s = 0.5 * (masked_ce(strong_logits[:n], targets[0], masks[0])
                   + masked_ce(strong_logits[n:], targets[1], masks[1]))

    zero = strong_logits.new_zeros(())
    l_u_fp = zero
    if compute_fp and fp_rate is not None:
        fp_logits, _ = forward(model, weak, feature_dropout_rate=fp_rate, rng=rng)
        l_u_fp = masked_ce(fp_logits, pseudo, mask)

    l_u_np, chosen = zero, None
    if policy is not None and policy.enabled:
        np_logits, chosen = forward(model, weak, perturb=policy, rng=rng)
        l_u_np = masked_ce(np_logits, pseudo, mask)
    return UnlabeledLosses(l_u_s, l_u_fp, l_u_np, pass_rate, chosen)


def total_loss(terms, weights: LossWeights):
    """``(lx - lx_np) * L_x + lx_np * L_x^np + lus * L_u^s + lufp * L_u^fp + lunp * L_u^np``."""
    weights.validate()
    get = terms.get if isinstance(terms, dict) else lambda k: getattr(terms, k)
    return ((weights.lambda_x - weights.lambda_x_np) * get("l_x")
            + weights.lambda_x_np * get("l_x_np")
            + weights.lambda_u_s * get("l_u_s")
            + weights.lambda_u_fp * get("l_u_fp")
            + weights.lambda_u_np * get("l_u_np"))
