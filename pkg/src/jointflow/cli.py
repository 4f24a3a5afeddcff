"""Command line entry point: ``jointflow <command> [options]``.

Exit codes: 0 success, 2 bad config or input files, 3 numeric failure,
4 checkpoint/config fingerprint mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import runconfig
from .data import denormalize, load_medmnist, make_synthetic
from .errors import ConfigMismatch, DataError, FormatError, InvalidArgument, NumericFailure
from .evaluation import DEFAULT_FRACTIONS, arc_curve, evaluate_records, write_arc, write_metrics
from .pipelines import (
    classify_batch,
    generate,
    load_autoencoder,
    load_checkpoint,
    reconstruction_mse,
    save_autoencoder,
    save_checkpoint,
    train,
    train_autoencoder,
)
from .seeding import substream

logger = logging.getLogger("jointflow")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def load_splits(dataset_cfg: dict, seed: int) -> dict:
    """{split: LabeledImageDataset} from an archive or the synthetic generator."""
    if dataset_cfg["path"] is not None:
        return load_medmnist(dataset_cfg["path"], num_classes=dataset_cfg["num_classes"])
    syn = dataset_cfg["synthetic"]
    k, size = syn["num_classes"], syn["size"]
    data_seed = int(substream(seed, "data").integers(2**31 - 1))
    return {
        "train": make_synthetic(k, syn["per_class"], size, seed=data_seed, split="train"),
        "val": make_synthetic(k, syn["test_per_class"], size, seed=data_seed + 1, split="val"),
        "test": make_synthetic(k, syn["test_per_class"], size, seed=data_seed + 2, split="test"),
    }


def _resolved_config(args) -> dict:
    cfg = runconfig.load(args.config) if getattr(args, "config", None) else runconfig.resolve({})
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "runs", None) is not None:
        overrides["runs"] = args.runs
    if overrides:
        cfg = runconfig.resolve({**cfg, **overrides})
    return cfg


def _autoencoder_for(cfg, splits, out_dir):
    ae_cfg = cfg["autoencoder"]
    if ae_cfg["path"] is not None:
        return load_autoencoder(ae_cfg["path"])
    model = train_autoencoder(
        splits["train"],
        latent_channels=ae_cfg["latent_channels"],
        downsample=ae_cfg["downsample"],
        epochs=ae_cfg["epochs"],
        rng=substream(cfg["seed"], "autoencoder"),
        batch_size=ae_cfg["batch_size"],
        learning_rate=ae_cfg["learning_rate"],
        hidden_channels=ae_cfg["hidden_channels"],
        kl_weight=ae_cfg["kl_weight"],
    )
    save_autoencoder(model, Path(out_dir) / "autoencoder.pt")
    return model


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    runconfig.dump(cfg, out / "config.yaml")
    splits = load_splits(cfg["dataset"], cfg["seed"])
    ae = _autoencoder_for(cfg, splits, out) if cfg["latent"] else None
    tcfg = runconfig.train_config(cfg)
    ncfg = runconfig.net_config(cfg, image_channels=splits["train"].channels)
    try:
        ckpt = train(tcfg, splits["train"], net_config=ncfg, autoencoder=ae)
    except NumericFailure as err:
        if err.checkpoint is not None:
            save_checkpoint(err.checkpoint, out / "checkpoint.last_good.pt")
        raise
    ckpt.extra["run_config"] = cfg
    save_checkpoint(ckpt, out / "checkpoint.pt")
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(ckpt.loss_history):
            w.writerow([i, repr(v)])
    print(f"wrote {out / 'checkpoint.pt'} (final loss {ckpt.loss_history[-1]:.5f})")
    return EXIT_OK


def cmd_train_vae(args) -> int:
    cfg = _resolved_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    runconfig.dump(cfg, out / "config.yaml")
    splits = load_splits(cfg["dataset"], cfg["seed"])
    cfg["autoencoder"]["path"] = None
    model = _autoencoder_for(cfg, splits, out)
    mse = {split: reconstruction_mse(model, splits[split]) for split in ("train", "test")}
    (out / "autoencoder_metrics.json").write_text(json.dumps(mse, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'autoencoder.pt'} (test reconstruction mse {mse['test']:.5f})")
    return EXIT_OK


def _load_ckpt(args):
    expected = None
    cfg = None
    if args.config:
        cfg = runconfig.load(args.config)
    try:
        if cfg is not None:
            probe = load_checkpoint(args.checkpoint)
            expected = runconfig.net_config(cfg, image_channels=probe.image_shape[0])
        return load_checkpoint(args.checkpoint, expected_net_config=expected), cfg
    except ConfigMismatch as err:
        raise CliError(str(err), EXIT_MISMATCH) from err


def cmd_classify(args) -> int:
    ckpt, cfg = _load_ckpt(args)
    cfg = cfg or runconfig.resolve(ckpt.extra.get("run_config", {}))
    steps = args.steps if args.steps is not None else cfg["steps"]
    runs = args.runs if args.runs is not None else cfg["runs"]
    seed = args.seed if args.seed is not None else cfg["seed"]
    split = load_splits(cfg["dataset"], cfg["seed"])[args.split]
    records = classify_batch(
        ckpt, split.images, steps=steps, runs=runs, seed=seed,
        freeze_image=cfg["freeze_image"], temperature=cfg["score_temperature"],
    )
    out = Path(args.out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"predictions_{args.split}.jsonl"
    with open(path, "w") as fh:
        for i, (rec, label) in enumerate(zip(records, split.labels)):
            row = {"index": i, "label": int(label), **rec.to_dict()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {len(records)} predictions to {path}")
    return EXIT_OK


def read_predictions(path):
    records, labels = [], []
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                row = json.loads(line)
                for key in ("label", "predicted_class", "uncertainty", "scores", "runs"):
                    if key not in row:
                        raise CliError(f"{path}:{n}: missing '{key}'")
                labels.append(int(row["label"]))
                records.append(row)
    except json.JSONDecodeError as err:
        raise CliError(f"{path}: malformed JSON ({err})") from err
    if not records:
        raise CliError(f"{path}: no prediction records")
    return records, np.array(labels)


def _fractions(text):
    if text is None:
        return DEFAULT_FRACTIONS
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as err:
        raise CliError(f"bad --fractions value: {text}") from err


def cmd_evaluate(args) -> int:
    records, labels = read_predictions(args.predictions)
    report = evaluate_records(records, labels, _fractions(args.fractions))
    out = Path(args.out or Path(args.predictions).parent)
    json_path, _ = write_metrics(report, out)
    d = report.to_dict()
    print(f"accuracy {d['accuracy_pm']}  auc {d['auc_pm']}  -> {json_path}")
    return EXIT_OK


def cmd_arc(args) -> int:
    records, labels = read_predictions(args.predictions)
    pred = np.array([r["predicted_class"] for r in records])
    unc = np.array([r["uncertainty"] for r in records])
    points = arc_curve(pred == labels, unc, _fractions(args.fractions))
    out = Path(args.out or Path(args.predictions).parent)
    csv_path, png_path = write_arc(points, out)
    print(f"wrote {csv_path} and {png_path}")
    return EXIT_OK


def image_grid(images, pad=2):
    """Row-major grid of N x H x W x C images in [-1, 1] as a uint8 array."""
    n, h, w, c = images.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad, c), dtype=np.uint8)
    tiles = denormalize(images)
    for i in range(n):
        r, col = divmod(i, cols)
        y0, x0 = pad + r * (h + pad), pad + col * (w + pad)
        grid[y0:y0 + h, x0:x0 + w] = tiles[i]
    return grid[..., 0] if c == 1 else grid


def cmd_sample(args) -> int:
    ckpt, cfg = _load_ckpt(args)
    cfg = cfg or runconfig.resolve(ckpt.extra.get("run_config", {}))
    seed = args.seed if args.seed is not None else cfg["seed"]
    steps = args.steps if args.steps is not None else cfg["steps"]
    images = generate(ckpt, args.class_index, args.count, steps=steps,
                      rng=substream(seed, "generate", args.class_index), perturb_label=cfg["perturb_label"])
    out = Path(args.out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"samples_class{args.class_index}_seed{seed}.png"
    Image.fromarray(image_grid(images)).save(path)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")

    sp = sub.add_parser("train", help="train the joint velocity field")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("train-vae", help="train the latent autoencoder alone")
    common(sp)
    sp.set_defaults(func=cmd_train_vae)

    sp = sub.add_parser("classify", help="write per-image predictions for a split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--runs", type=int)
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("sample", help="generate an image grid for one class")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--class", dest="class_index", type=int, required=True)
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("evaluate", help="accuracy / AUC report from a predictions file")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--fractions")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("arc", help="accuracy-rejection curve from a predictions file")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--fractions", help="comma-separated rejection fractions in [0, 1)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_arc)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except runconfig.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except NumericFailure as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigMismatch as err:
        print(f"checkpoint mismatch: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, DataError, InvalidArgument, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
