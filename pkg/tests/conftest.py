import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """A config small enough for a few training steps inside a unit test."""
    from mlpmatch.config import TrainConfig

    return TrainConfig(
        num_labeled=4, num_unlabeled=8, num_eval=4, image_size=32, crop_size=32,
        width_multiplier=0.5, depth_spec=(1, 1, 1, 1), stage_weights=(0.25, 0.25, 0.25, 0.25),
        epochs=2, batch_size=4, base_lr=0.01, decoder_lr_mult=1.0, eval_every=2, log_every=0,
        out_dir=str(tmp_path / "run"),
    )


# ---- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary ----

ACCEPTANCE_LINES = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.rep_call = report


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion: the test fills in ``id``, ``title`` and optional ``notes``."""
    import time

    rec = {"id": "?", "title": request.node.name, "notes": [], "soft": None}
    start = time.perf_counter()
    yield rec
    elapsed = time.perf_counter() - start
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    if rec["soft"] is not None:
        status = f"{'PASS' if rec['soft'] else 'FAIL'} (soft, not gated)"
    notes = f"  [{'; '.join(rec['notes'])}]" if rec["notes"] else ""
    ACCEPTANCE_LINES.append((rec["id"], f"criterion {rec['id']:>2}: {status:<24} {elapsed:7.1f}s  {rec['title']}{notes}"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: int(x[0]) if str(x[0]).isdigit() else 99):
            terminalreporter.write_line(line)
