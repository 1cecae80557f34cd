"""Schedules, the training step, mIoU evaluation, checkpoints and the run loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from mlpmatch import __version__
from mlpmatch.augment import strong_augment, weak_augment
from mlpmatch.config import TrainConfig, dumps, resolve_run_dir
from mlpmatch.dataset import (
    IGNORE_INDEX,
    Sample,
    SplitSpec,
    load_voc_dir,
    make_epoch_iterator,
    make_synthetic_split,
    read_meta,
    read_split_file,
    steps_per_epoch,
)
from mlpmatch.errors import CheckpointError, ConfigError, ContractError, NumericalAbort
from mlpmatch.model import PerturbableSegModel, build_model
from mlpmatch.objective import (
    TERMS,
    BatchLosses,
    LossWeights,
    supervised_loss,
    total_loss,
    unlabeled_losses,
    volatile_supervised_loss,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", *TERMS, "total", "lr", "lambda_x_np", "mask_pass_rate", "chosen_block", "miou")
CHECKPOINT_FORMAT = "mlpmatch.checkpoint"


@dataclass(frozen=True)
class ScheduleState:
    t: int
    total: int

    def __post_init__(self):
        if not 0 <= self.t < self.total:
            raise ConfigError(f"schedule iteration {self.t} outside [0, {self.total})")


def lambda_x_np(state: ScheduleState, lambda_max: float) -> float:
    """Linear ramp from 0 at the first iteration to ``lambda_max`` at the last."""
    if state.total < 2:
        raise ConfigError("a linear schedule needs at least 2 iterations")
    return lambda_max * state.t / (state.total - 1)


def poly_lr(state: ScheduleState, base_lr: float, power: float = 0.9) -> float:
    return base_lr * (1.0 - state.t / state.total) ** power


def scheduled_weights(config: TrainConfig, state: ScheduleState) -> LossWeights:
    if config.lambda_x_np_schedule == "fixed":
        lam = config.lambda_x_np_max
    else:
        lam = lambda_x_np(state, config.lambda_x_np_max)
    return LossWeights(config.lambda_x, lam, config.lambda_u_s, config.lambda_u_fp, config.lambda_u_np)


def step_rngs(seed: int, t: int) -> dict:
    """Independent generators for one iteration; keyed by (seed, t) so runs can resume mid-way."""
    children = np.random.SeedSequence([seed, t]).spawn(3)
    return dict(zip(("labeled", "unlabeled", "perturb"), (np.random.default_rng(c) for c in children)))


def _dtype(config: TrainConfig):
    return torch.float64 if config.double_precision else torch.float32


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous().to(dtype)


def prepare_labeled(samples, config: TrainConfig, rng):
    weak = [weak_augment(s, config.weak_aug(), rng) for s in samples]
    x = images_to_tensor([s.image for s in weak], _dtype(config))
    y = torch.from_numpy(np.stack([s.label for s in weak])).long()
    return x, y


def prepare_unlabeled(samples, config: TrainConfig, rng):
    """Weak view, two strong views and the padding ignore map for a batch of unlabeled samples."""
    weak_spec, strong_spec = config.weak_aug(), config.strong_aug()
    weak = []
    for s in samples:
        # a zero placeholder label records which pixels the crop padded
        placeholder = Sample(s.image, np.zeros(s.image.shape[:2], dtype=np.int64), s.id)
        weak.append(weak_augment(placeholder, weak_spec, rng))
    s1 = [strong_augment(w.image, strong_spec, rng) for w in weak]
    s2 = [strong_augment(w.image, strong_spec, rng) for w in weak]
    dtype = _dtype(config)
    ignore = torch.from_numpy(np.stack([w.label == IGNORE_INDEX for w in weak]))
    return (images_to_tensor([w.image for w in weak], dtype), images_to_tensor(s1, dtype),
            images_to_tensor(s2, dtype), ignore)


def uses_unlabeled(config: TrainConfig) -> bool:
    return config.lambda_u_s > 0 or config.lambda_u_fp > 0 or (config.np_enabled and config.lambda_u_np > 0)


def build_optimizer(model: PerturbableSegModel, config: TrainConfig) -> torch.optim.SGD:
    groups = [
        {"params": model.encoder_parameters(), "lr": config.base_lr, "lr_mult": 1.0},
        {"params": model.decoder_parameters(), "lr": config.base_lr * config.decoder_lr_mult,
         "lr_mult": config.decoder_lr_mult},
    ]
    return torch.optim.SGD(groups, lr=config.base_lr, momentum=config.momentum, weight_decay=config.weight_decay)


def train_step(model, optimizer, labeled, unlabeled, config: TrainConfig, state: ScheduleState):
    """One optimizer update on the full objective. Returns ``(BatchLosses, diagnostics)``."""
    rngs = step_rngs(config.seed, state.t)
    model.train()
    weights = scheduled_weights(config, state)
    lr = poly_lr(state, config.base_lr, config.poly_power)
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_mult", 1.0)

    policy = config.policy()
    x, y = prepare_labeled(labeled, config, rngs["labeled"])
    zero = torch.zeros((), dtype=x.dtype)
    terms = dict.fromkeys(TERMS, zero)
    chosen = []
    terms["l_x"] = supervised_loss(model, (x, y))
    if policy.enabled and config.lambda_x_np_max > 0:
        terms["l_x_np"], block = volatile_supervised_loss(model, (x, y), policy, rngs["perturb"])
        chosen.append(f"x={block}")

    pass_rate = float("nan")
    if uses_unlabeled(config):
        uw, us1, us2, ignore = prepare_unlabeled(unlabeled, config, rngs["unlabeled"])
        np_policy = policy if config.lambda_u_np > 0 else None
        u = unlabeled_losses(model, uw, us1, us2, config.tau, np_policy, config.fp_rate, rngs["perturb"],
                             ignore=ignore, cutmix_prob=config.cutmix_prob, compute_fp=config.lambda_u_fp > 0)
        terms.update(l_u_s=u.l_u_s, l_u_fp=u.l_u_fp, l_u_np=u.l_u_np)
        pass_rate = u.mask_pass_rate
        if u.chosen_block:
            chosen.append(f"u={u.chosen_block}")

    total = total_loss(terms, weights)
    values = {k: float(v.detach()) for k, v in terms.items()}
    values["total"] = float(total.detach())
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericalAbort(f"non-finite loss at iteration {state.t}: {values}", values)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    losses = BatchLosses(**values)
    diagnostics = {"lr": lr, "lambda_x_np": weights.lambda_x_np, "mask_pass_rate": pass_rate,
                   "chosen_block": ";".join(chosen)}
    return losses, diagnostics


@dataclass
class EvalReport:
    per_class_iou: list
    miou: float
    confusion: np.ndarray


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns prediction; ignored pixels are dropped."""
    valid = gt != IGNORE_INDEX
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(confusion: np.ndarray):
    """Per-class IoU (NaN where a class is absent from both prediction and truth) and their mean."""
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(0) + confusion.sum(1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou.tolist(), miou


@torch.no_grad()
def predict_labels(model, images: torch.Tensor) -> np.ndarray:
    return model(images).argmax(1).numpy()


def evaluate(model: PerturbableSegModel, samples: Sequence[Sample], batch_size: int = 16) -> EvalReport:
    """Confusion matrix and mIoU over full-size images, unperturbed, in eval mode."""
    if not samples:
        raise ContractError("evaluation needs at least one sample")
    if any(s.label is None for s in samples):
        raise ContractError("evaluation samples must carry labels")
    c = model.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        i = 0
        while i < len(samples):
            shape = samples[i].image.shape
            j = i
            while j < len(samples) and j - i < batch_size and samples[j].image.shape == shape:
                j += 1
            chunk = samples[i:j]
            pred = predict_labels(model, images_to_tensor([s.image for s in chunk], dtype))
            for p, s in zip(pred, chunk):
                confusion += confusion_matrix(p, s.label, c)
            i = j
    finally:
        model.train(was_training)
    if confusion.sum() == 0:
        raise ContractError("every evaluation pixel is ignored; mIoU is undefined")
    per_class, miou = iou_from_confusion(confusion)
    return EvalReport(per_class, miou, confusion)


def save_checkpoint(path, model, optimizer, config: TrainConfig, iteration: int, best_miou: float) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "num_classes": model.num_classes,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": config.to_dict(),
        "iteration": iteration,
        "best_miou": best_miou,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an mlpmatch checkpoint")
    return payload


def config_from_checkpoint(payload: dict) -> TrainConfig:
    cfg = dict(payload["config"])
    for k, v in cfg.items():
        if isinstance(v, list):
            cfg[k] = tuple(v)
    return TrainConfig(**cfg)


def model_from_config(config: TrainConfig) -> PerturbableSegModel:
    model = build_model(config.num_classes, config.width_multiplier, config.depth_spec,
                        eligible=list(config.eligible_blocks) or None, stage_weights=list(config.stage_weights),
                        relu_on_projection_skip=config.relu_on_projection_skip)
    return model.to(_dtype(config))


def model_from_checkpoint(payload: dict) -> PerturbableSegModel:
    config = config_from_checkpoint(payload)
    model = model_from_config(config)
    try:
        model.load_state_dict(payload["model"])
    except (RuntimeError, KeyError) as exc:
        raise CheckpointError(f"checkpoint weights do not fit the configured model: {exc}") from None
    return model


def load_data(config: TrainConfig):
    """``(labeled, unlabeled, eval)`` sample lists from the synthetic generator or a VOC-style root."""
    if not config.data_root:
        return make_synthetic_split(config.synthetic_spec(), config.num_labeled, config.num_unlabeled,
                                    config.num_eval)
    root = Path(config.data_root)
    meta = read_meta(root)
    if meta and meta.get("num_classes") not in (None, config.num_classes):
        raise ConfigError(f"data root has {meta['num_classes']} classes, config has {config.num_classes}")
    split = SplitSpec(read_split_file(root / config.labeled_split),
                      read_split_file(root / config.unlabeled_split), config.num_classes)
    labeled, unlabeled = load_voc_dir(root, split)
    eval_split = SplitSpec(read_split_file(root / config.eval_split), [], config.num_classes)
    evaluation, _ = load_voc_dir(root, eval_split)
    return labeled, unlabeled, evaluation


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    best_checkpoint: Optional[Path]
    metrics_path: Path
    report: Optional[EvalReport]
    best_miou: float
    iterations: int
    history: list = field(default_factory=list)


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _read_rows(path: Path, upto: int) -> list:
    if not path.is_file():
        return []
    with path.open(newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["iteration"]) <= upto]


def run_training(config: TrainConfig, resume_from=None, stop_after: Optional[int] = None,
                 data=None) -> TrainResult:
    """Train for ``epochs`` over the unlabeled stream, evaluating every ``eval_every`` iterations.

    Writes ``metrics.csv``, ``last.pt``, ``best.pt``, ``config.ini`` and, on
    completion, ``manifest.json`` into the run directory. ``stop_after`` halts
    after that many completed iterations (used to simulate interruption).
    """
    config.validate()
    started = datetime.now(timezone.utc).isoformat()
    run_dir = resolve_run_dir(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(dumps(config))
    metrics_path = run_dir / "metrics.csv"

    labeled, unlabeled, evaluation = data if data is not None else load_data(config)
    steps = steps_per_epoch(len(unlabeled), config.batch_size)
    total = config.epochs * steps

    torch.manual_seed(config.seed)
    model = model_from_config(config)
    optimizer = build_optimizer(model, config)
    start, best = 0, float("-inf")
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["num_classes"] != config.num_classes:
            raise CheckpointError(
                f"checkpoint has {payload['num_classes']} classes, config has {config.num_classes}")
        model.load_state_dict(payload["model"])
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        start, best = int(payload["iteration"]), float(payload["best_miou"])
    rows = _read_rows(metrics_path, start) if start else []

    last_path, best_path = run_dir / "last.pt", run_dir / "best.pt"
    report = None
    with metrics_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
        fh.flush()

        done = start
        epoch = start // steps
        while done < total:
            batches = make_epoch_iterator(labeled, unlabeled, config.batch_size, config.seed, epoch)
            for k, (xb, ub) in enumerate(batches):
                if epoch * steps + k < done:
                    continue
                state = ScheduleState(done, total)
                losses, diag = train_step(model, optimizer, xb, ub, config, state)
                done += 1
                writer.writerow({"iteration": done, **{k2: _fmt(v) for k2, v in losses.as_floats().items()},
                                 **{k2: _fmt(v) for k2, v in diag.items()}, "miou": ""})
                if config.log_every and done % config.log_every == 0:
                    log.info("iter %d/%d total=%.4f l_x=%.4f pass=%.3f lr=%.2e", done, total, losses.total,
                             losses.l_x, diag["mask_pass_rate"], diag["lr"])

                if (config.eval_every and done % config.eval_every == 0) or done == total:
                    report = evaluate(model, evaluation) if evaluation else None
                    miou = report.miou if report else float("nan")
                    writer.writerow({"iteration": done, "miou": _fmt(miou)})
                    if report is not None and miou > best:
                        best = miou
                        save_checkpoint(best_path, model, optimizer, config, done, best)
                    save_checkpoint(last_path, model, optimizer, config, done, best)
                    log.info("iter %d eval miou=%.4f best=%.4f", done, miou, best)
                fh.flush()
                if done >= total or (stop_after is not None and done >= stop_after):
                    break
            if stop_after is not None and done >= stop_after:
                break
            epoch += 1

    if stop_after is not None and done < total:
        if not last_path.is_file() or load_checkpoint(last_path)["iteration"] != done:
            save_checkpoint(last_path, model, optimizer, config, done, best)
    else:
        manifest = {
            "config": config.to_dict(),
            "build_id": build_id(),
            "seed": config.seed,
            "start": started,
            "end": datetime.now(timezone.utc).isoformat(),
            "final_metrics": {
                "iterations": done,
                "miou": report.miou if report else None,
                "best_miou": best if math.isfinite(best) else None,
                "per_class_iou": [v if math.isfinite(v) else None for v in report.per_class_iou] if report else None,
            },
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    return TrainResult(run_dir, last_path, best_path if best_path.is_file() else None, metrics_path, report,
                       best, done)
