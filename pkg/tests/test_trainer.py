import csv
import json
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn

from mlpmatch.dataset import IGNORE_INDEX, Sample, make_synthetic_split
from mlpmatch.errors import CheckpointError, ConfigError, ContractError, NumericalAbort
from mlpmatch.model import build_model
from mlpmatch.objective import supervised_loss
from mlpmatch.trainer import (
    METRIC_COLUMNS,
    ScheduleState,
    build_optimizer,
    confusion_matrix,
    evaluate,
    iou_from_confusion,
    lambda_x_np,
    load_checkpoint,
    model_from_checkpoint,
    model_from_config,
    poly_lr,
    prepare_labeled,
    run_training,
    save_checkpoint,
    step_rngs,
    train_step,
)


class FixedPredictor(nn.Module):
    """Predicts the class id written into channel 0 of the image (as id / 10)."""

    def __init__(self, num_classes):
        super().__init__()
        self.num_classes = num_classes
        self.dummy = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        pred = torch.round(x[:, 0] * 10).long()
        return nn.functional.one_hot(pred, self.num_classes).permute(0, 3, 1, 2).float() + self.dummy


def _pair_sample(pred, gt, i=0):
    img = np.zeros((*pred.shape, 3), np.float32)
    img[..., 0] = pred / 10.0
    return Sample(img, np.asarray(gt, np.int64), f"s{i}")


def test_lambda_schedule_endpoints():
    assert lambda_x_np(ScheduleState(0, 101), 0.25) == 0.0
    assert lambda_x_np(ScheduleState(100, 101), 0.25) == 0.25
    assert lambda_x_np(ScheduleState(50, 101), 0.25) == pytest.approx(0.125)
    with pytest.raises(ConfigError):
        lambda_x_np(ScheduleState(0, 1), 0.25)


def test_poly_lr():
    assert poly_lr(ScheduleState(0, 100), 0.001) == 0.001
    assert poly_lr(ScheduleState(50, 100), 0.001, 0.9) == pytest.approx(5.359e-4, rel=1e-4)
    values = [poly_lr(ScheduleState(t, 1000), 0.01) for t in range(1000)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-4


def test_schedule_state_bounds():
    with pytest.raises(ConfigError):
        ScheduleState(10, 10)


def test_miou_perfect():
    gt = np.array([[0, 1], [2, 2]])
    report = evaluate(FixedPredictor(3), [_pair_sample(gt, gt)])
    assert report.miou == 1.0


def test_miou_hand_case():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    report = evaluate(FixedPredictor(2), [_pair_sample(pred, gt)])
    assert report.per_class_iou == pytest.approx([1 / 2, 2 / 3])
    assert report.miou == pytest.approx(7 / 12)
    assert report.confusion.tolist() == [[1, 1], [0, 2]]


def test_miou_excludes_absent_classes():
    gt = np.array([[0, 0], [1, 1]])
    report = evaluate(FixedPredictor(4), [_pair_sample(gt, gt)])
    assert report.miou == 1.0
    assert np.isnan(report.per_class_iou[2]) and np.isnan(report.per_class_iou[3])


def test_confusion_sums(rng):
    gt = rng.integers(0, 5, (30, 30))
    gt[0] = IGNORE_INDEX
    pred = rng.integers(0, 5, (30, 30))
    cm = confusion_matrix(pred, gt, 5)
    valid = gt != IGNORE_INDEX
    assert cm.sum() == valid.sum()
    assert cm.sum(1).tolist() == [int(((gt == c) & valid).sum()) for c in range(5)]
    assert cm.sum(0).tolist() == [int(((pred == c) & valid).sum()) for c in range(5)]


def test_eval_errors():
    with pytest.raises(ContractError):
        evaluate(FixedPredictor(2), [])
    gt = np.full((2, 2), IGNORE_INDEX)
    with pytest.raises(ContractError):
        evaluate(FixedPredictor(2), [_pair_sample(np.zeros((2, 2)), gt)])
    with pytest.raises(ContractError):
        evaluate(FixedPredictor(2), [Sample(np.zeros((2, 2, 3), np.float32), None, "u")])


def test_eval_never_perturbs():
    torch.manual_seed(0)
    samples = make_synthetic_split(replace_spec(), 1, 0, 3)[2]
    m = build_model(4, 0.5, (1, 1, 1, 1))
    seen = []
    handle = m.decoder.register_forward_pre_hook(lambda *_: seen.append(m.skipped_blocks()))
    a = evaluate(m, samples)
    handle.remove()
    assert seen and all(s == [] for s in seen)
    m.stage_weights = [0.0, 0.0, 0.0, 1.0]
    m.eligible = ["layer4.0"]
    b = evaluate(m, samples)
    assert a.miou == b.miou and np.array_equal(a.confusion, b.confusion)


def replace_spec():
    from mlpmatch.dataset import SyntheticSpec

    return SyntheticSpec(image_size=32)


@pytest.fixture
def data(tiny_config):
    return make_synthetic_split(tiny_config.synthetic_spec(), tiny_config.num_labeled,
                                tiny_config.num_unlabeled, tiny_config.num_eval)


def _steps(config, data, n):
    labeled, unlabeled, _ = data
    torch.manual_seed(config.seed)
    model = model_from_config(config)
    opt = build_optimizer(model, config)
    out = []
    for t in range(n):
        xb, ub = labeled[(2 * t) % 4:(2 * t) % 4 + 2], unlabeled[(2 * t) % 8:(2 * t) % 8 + 2]
        out.append(train_step(model, opt, xb, ub, config, ScheduleState(t, n)))
    return model, out


def test_train_step_deterministic(tiny_config, data):
    _, a = _steps(tiny_config, data, 10)
    _, b = _steps(tiny_config, data, 10)
    assert [x[0] for x in a] == [x[0] for x in b]
    assert [x[1] for x in a] == [x[1] for x in b]
    assert all(d["chosen_block"].startswith("x=") for _, d in a)


def test_train_step_logs_diagnostics(tiny_config, data):
    _, out = _steps(tiny_config, data, 3)
    losses, diag = out[-1]
    assert diag["lambda_x_np"] == pytest.approx(0.25)
    assert 0.0 <= diag["mask_pass_rate"] <= 1.0
    assert losses.total == pytest.approx(
        0.75 * losses.l_x + 0.25 * losses.l_x_np + 0.5 * losses.l_u_s + 0.25 * losses.l_u_fp
        + 0.25 * losses.l_u_np, rel=1e-6)


def test_supervised_reduction(tiny_config, data):
    """With every unlabeled weight and the volatile weight at zero, training is plain supervised SGD."""
    cfg = replace(tiny_config, lambda_u_s=0.0, lambda_u_fp=0.0, lambda_u_np=0.0, lambda_x_np_max=0.0)
    model, out = _steps(cfg, data, 4)

    labeled = data[0]
    torch.manual_seed(cfg.seed)
    ref = model_from_config(cfg)
    opt = build_optimizer(ref, cfg)
    for t in range(4):
        for g in opt.param_groups:
            g["lr"] = poly_lr(ScheduleState(t, 4), cfg.base_lr, cfg.poly_power) * g["lr_mult"]
        ref.train()
        x, y = prepare_labeled(labeled[(2 * t) % 4:(2 * t) % 4 + 2], cfg, step_rngs(cfg.seed, t)["labeled"])
        loss = supervised_loss(ref, (x, y))
        assert float(loss) == out[t][0].l_x == out[t][0].total
        opt.zero_grad()
        loss.backward()
        opt.step()
    for a, b in zip(model.state_dict().values(), ref.state_dict().values()):
        assert torch.equal(a, b)


def test_nan_abort(tiny_config, data):
    cfg = replace(tiny_config, base_lr=1e6)
    with pytest.raises(NumericalAbort) as info:
        _steps(cfg, data, 8)
    assert set(info.value.terms) >= {"l_x", "total"}


def test_checkpoint_roundtrip(tiny_config, tmp_path):
    torch.manual_seed(0)
    model = model_from_config(tiny_config)
    model.eval()
    x = torch.rand(2, 3, 32, 32)
    before = model(x)
    path = save_checkpoint(tmp_path / "c.pt", model, build_optimizer(model, tiny_config), tiny_config, 7, 0.5)
    payload = load_checkpoint(path)
    assert payload["iteration"] == 7 and payload["best_miou"] == 0.5
    restored = model_from_checkpoint(payload).eval()
    assert torch.equal(restored(x), before)


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    torch.save({"weights": torch.zeros(1)}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_training_outputs(tiny_config):
    result = run_training(tiny_config)
    rows = _rows(result.metrics_path)
    assert list(rows[0].keys()) == list(METRIC_COLUMNS)
    steps = [r for r in rows if r["total"]]
    evals = [r for r in rows if r["miou"]]
    assert len(steps) == result.iterations == 8
    assert len(evals) == 4
    assert len(rows) == len(steps) + len(evals)
    assert result.checkpoint.is_file() and result.best_checkpoint.is_file()
    manifest = json.loads((result.run_dir / "manifest.json").read_text())
    assert manifest["seed"] == tiny_config.seed
    assert manifest["config"]["tau"] == tiny_config.tau
    assert manifest["final_metrics"]["iterations"] == 8


def test_run_training_rerun_identical(tiny_config, tmp_path):
    a = run_training(replace(tiny_config, out_dir=str(tmp_path / "a")))
    b = run_training(replace(tiny_config, out_dir=str(tmp_path / "b")))
    assert a.metrics_path.read_text() == b.metrics_path.read_text()


def test_resume_matches_uninterrupted(tiny_config, tmp_path):
    full = run_training(replace(tiny_config, out_dir=str(tmp_path / "full")))
    cfg = replace(tiny_config, out_dir=str(tmp_path / "split"))
    part = run_training(cfg, stop_after=4)
    assert part.iterations == 4
    assert not (part.run_dir / "manifest.json").exists()
    resumed = run_training(cfg, resume_from=part.checkpoint)
    assert resumed.iterations == 8
    assert resumed.metrics_path.read_text() == full.metrics_path.read_text()
    assert resumed.report.miou == full.report.miou


def test_resume_class_mismatch(tiny_config, tmp_path):
    part = run_training(tiny_config, stop_after=2)
    with pytest.raises(CheckpointError):
        run_training(replace(tiny_config, num_classes=5, out_dir=str(tmp_path / "x")), resume_from=part.checkpoint)
