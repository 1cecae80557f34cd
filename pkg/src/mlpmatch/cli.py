"""Command-line entry points: train, eval, ablate, make-data, show-config.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 numerical abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from mlpmatch import config as cfgio
from mlpmatch.config import TrainConfig, resolve_run_dir
from mlpmatch.errors import CheckpointError, ConfigError, ContractError, DataError, NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
AXES = ("np_layers", "lambda_x_np", "components")
DEFAULT_SWEEPS = {
    "components": ("baseline", "np_unlabeled", "full"),
    "lambda_x_np": ("linear-0.25", "linear-0.5", "fixed-0.25"),
    "np_layers": ("k1", "k2", "k4", "stage4"),
}

log = logging.getLogger("mlpmatch")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_config(path, overrides) -> TrainConfig:
    return cfgio.load(path).with_overrides(overrides).validate()


def cmd_train(config_path, overrides=(), resume=None) -> int:
    from mlpmatch.trainer import run_training

    config = _load_config(config_path, overrides)
    result = run_training(config, resume_from=resume)
    miou = result.report.miou if result.report else float("nan")
    print(f"run dir: {result.run_dir}")
    print(f"iterations: {result.iterations}  final mIoU: {miou:.4f}  best mIoU: {result.best_miou:.4f}")
    return EXIT_OK


def cmd_eval(checkpoint_path, data_path=None, split="eval.txt", num_classes=None, out=None):
    """Evaluate a checkpoint; returns the EvalReport and writes a one-row CSV."""
    from mlpmatch.dataset import SplitSpec, load_voc_dir, read_meta, read_split_file
    from mlpmatch.trainer import evaluate, load_checkpoint, load_data, model_from_checkpoint

    payload = load_checkpoint(checkpoint_path)
    model = model_from_checkpoint(payload)
    ckpt_classes = payload["num_classes"]
    if data_path is None:
        from mlpmatch.trainer import config_from_checkpoint

        if num_classes and num_classes != ckpt_classes:
            raise ConfigError(f"checkpoint has num_classes={ckpt_classes} but num_classes={num_classes} was requested")
        _, _, samples = load_data(config_from_checkpoint(payload))
    else:
        root = Path(data_path)
        data_classes = num_classes or read_meta(root).get("num_classes") or ckpt_classes
        if data_classes != ckpt_classes:
            raise ConfigError(f"checkpoint has num_classes={ckpt_classes} but the data has num_classes={data_classes}")
        samples, _ = load_voc_dir(root, SplitSpec(read_split_file(root / split), [], data_classes))
    report = evaluate(model, samples)
    for c, iou in enumerate(report.per_class_iou):
        print(f"class {c:3d}  IoU {iou:.4f}")
    print(f"mIoU {report.miou:.4f}")
    out = Path(out) if out else Path(checkpoint_path).with_name("eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"iou_{c}" for c in range(len(report.per_class_iou))] + ["miou"])
        w.writerow([repr(float(v)) for v in report.per_class_iou] + [repr(report.miou)])
    return report


def variant_config(base: TrainConfig, axis: str, token: str) -> TrainConfig:
    """Config for one ablation grid cell."""
    if axis == "components":
        if token == "baseline":
            # unlabeled weight kept at 1: the freed NP share goes back to feature perturbation
            return replace(base, lambda_x_np_max=0.0, lambda_u_np=0.0,
                           lambda_u_fp=base.lambda_u_fp + base.lambda_u_np)
        if token == "np_unlabeled":
            return replace(base, lambda_x_np_max=0.0)
        if token == "full":
            return base
    elif axis == "lambda_x_np":
        schedule, _, value = token.partition("-")
        if schedule in ("linear", "fixed") and value:
            try:
                return replace(base, lambda_x_np_schedule=schedule, lambda_x_np_max=float(value))
            except ValueError:
                pass
    elif axis == "np_layers":
        if token.startswith("k") and token[1:].isdigit():
            return replace(base, max_skipped=int(token[1:]))
        if token.startswith("stage") and token[5:].isdigit():
            s = int(token[5:])
            weights = tuple(1.0 if i == s - 1 else 0.0 for i in range(len(base.depth_spec)))
            return replace(base, stage_weights=weights)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: {', '.join(AXES)}")
    raise ConfigError(f"invalid {axis} variant {token!r}")


def ablation_grid(base: TrainConfig, axis: str, sweep=None, seeds=None):
    """``(variant, seed, config)`` triples with per-cell run directories."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: {', '.join(AXES)}")
    tokens = list(sweep or DEFAULT_SWEEPS[axis])
    seeds = list(seeds if seeds is not None else [base.seed])
    root = Path(base.out_dir) / f"ablate_{axis}"
    grid = []
    for token in tokens:
        for seed in seeds:
            cfg = replace(variant_config(base, axis, token), seed=seed,
                          out_dir=str(root / f"{token}_seed{seed}")).validate()
            grid.append((token, seed, cfg))
    return grid


def _run_cell(cell):
    import torch

    from mlpmatch.trainer import run_training

    torch.set_num_threads(1)
    token, seed, cfg = cell
    result = run_training(cfg)
    return {
        "variant": token,
        "seed": seed,
        "config_hash": cfg.digest(),
        "miou": result.report.miou if result.report else float("nan"),
        "best_miou": result.best_miou,
        "iterations": result.iterations,
        "run_dir": str(result.run_dir),
    }


def _bar_chart(rows, axis, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = list(dict.fromkeys(r["variant"] for r in rows))
    means = [np.mean([r["miou"] for r in rows if r["variant"] == v]) for v in variants]
    stds = [np.std([r["miou"] for r in rows if r["variant"] == v]) for v in variants]
    fig, ax = plt.subplots(figsize=(1.6 * len(variants) + 2, 3.5))
    ax.bar(variants, means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_ylabel("mIoU")
    ax.set_title(f"ablation: {axis}")
    lo = min(means) - max(stds) - 0.05
    ax.set_ylim(max(0.0, lo), 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_ablate(config_path, axis, overrides=(), sweep=None, seeds=None, parallel=1) -> Path:
    """Run every grid cell, write ``results.csv`` and ``<axis>.png``; returns the CSV path."""
    base = _load_config(config_path, overrides)
    grid = ablation_grid(base, axis, sweep, seeds)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_run_cell, grid))
    else:
        rows = [_run_cell(cell) for cell in grid]

    out_dir = resolve_run_dir(replace(base, out_dir=str(Path(base.out_dir) / f"ablate_{axis}")))
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "results.csv"
    with table.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", *rows[0].keys()])
        w.writeheader()
        for r in rows:
            w.writerow({"axis": axis, **{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}})
    _bar_chart(rows, axis, out_dir / f"{axis}.png")
    for r in rows:
        print(f"{r['variant']:>14s} seed={r['seed']}  mIoU={r['miou']:.4f}  [{r['config_hash']}]")
    print(f"table: {table}")
    return table


def cmd_make_data(out_dir, config_path=None, overrides=()) -> Path:
    from mlpmatch.dataset import generate_synthetic, make_synthetic_split, write_voc_dir

    base = cfgio.load(config_path) if config_path else TrainConfig()
    config = base.with_overrides(overrides).validate()
    labeled, unlabeled, evaluation = make_synthetic_split(
        config.synthetic_spec(), config.num_labeled, config.num_unlabeled, config.num_eval)
    # unlabeled images keep their masks on disk so the directory also serves as a fully labeled set
    full_unlabeled = []
    if config.num_unlabeled:
        full_unlabeled = generate_synthetic(config.synthetic_spec(), config.num_unlabeled, start=config.num_labeled)
    root = write_voc_dir(out_dir, {"labeled": labeled, "unlabeled": full_unlabeled, "eval": evaluation},
                         config.num_classes)
    print(f"wrote {len(labeled)} labeled, {len(unlabeled)} unlabeled, {len(evaluation)} eval samples to {root}")
    return root


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mlpmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_set(sp):
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("config")
    t.add_argument("--resume", metavar="CHECKPOINT")
    add_set(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("data", nargs="?", help="VOC-style data directory (default: the run's own eval set)")
    e.add_argument("--split", default="eval.txt", help="split file inside the data directory")
    e.add_argument("--num-classes", type=int)
    e.add_argument("--out", help="CSV report path (default: eval.csv next to the checkpoint)")

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("config")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--sweep", help="comma-separated variants, e.g. fixed-0.25,linear-0.25")
    a.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    a.add_argument("--parallel", type=int, default=1, metavar="N")
    add_set(a)

    m = sub.add_parser("make-data", help="write the synthetic dataset in VOC-style layout")
    m.add_argument("out_dir")
    m.add_argument("--config")
    add_set(m)

    s = sub.add_parser("show-config", help="print a configuration (defaults unless a file is given)")
    s.add_argument("config", nargs="?")
    add_set(s)
    return p


def _split_list(text, kind=str):
    if not text:
        return None
    try:
        return [kind(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"invalid list {text!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.overrides, args.resume)
        if args.command == "eval":
            cmd_eval(args.checkpoint, args.data, args.split, args.num_classes, args.out)
            return EXIT_OK
        if args.command == "ablate":
            cmd_ablate(args.config, args.axis, args.overrides, _split_list(args.sweep),
                       _split_list(args.seeds, int), args.parallel)
            return EXIT_OK
        if args.command == "make-data":
            cmd_make_data(args.out_dir, args.config, args.overrides)
            return EXIT_OK
        if args.command == "show-config":
            base = cfgio.load(args.config) if args.config else TrainConfig()
            sys.stdout.write(cfgio.dumps(base.with_overrides(args.overrides).validate()))
            return EXIT_OK
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        for k, v in exc.terms.items():
            print(f"  {k} = {v!r}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
