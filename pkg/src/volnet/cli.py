"""Batch command line: train, predict, eval, fuse.

One command is one process with deterministic file outputs.  Exit codes
are a scripting contract: 0 on success, 2 for usage or validation
problems, 3 for numeric failures (non-finite values where finite ones
are required).  Configuration comes from a JSON file; a handful of flat
flags override single fields so hyperparameter sweeps can stay in shell
loops.  `VOLNET_THREADS` caps data-loading workers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    DataConfig,
    ManifestDataset,
    ManifestEntry,
    labels_by_id,
    load_manifest,
)
from .ensemble import (
    PredictionSet,
    fuse,
    read_predictions_csv,
    write_predictions_csv,
)
from .errors import AlignmentError, ConfigError, NumericError, VolnetError
from .figures import save_roc_figure, save_training_figure
from .metrics import evaluate, roc_curve, write_roc_csv, youden_threshold
from .regnet3d import RegNet3d, RegNetConfig
from .tensor import Rng, Tensor
from .training import (
    LossConfig,
    OPTIMIZER_KINDS,
    OptimizerConfig,
    load_checkpoint,
    make_optimizer,
    restore_model,
    run_training,
    save_checkpoint,
    sigmoid,
    snapshot,
    write_train_log,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


@dataclass
class RunConfig:
    """One training run, fully specified: the machine form of a sweep row."""

    architecture: RegNetConfig
    optimizer: OptimizerConfig
    loss: LossConfig
    data: DataConfig
    manifest: str
    output_dir: str
    seed: int = 0
    epochs: int = 10
    batch_size: int = 2

    def validate(self) -> None:
        self.architecture.validate()
        self.optimizer.validate()
        self.loss.validate()
        self.data.validate()
        if not self.manifest:
            raise ConfigError("data.manifest is required")
        if not os.path.isfile(self.manifest):
            raise ConfigError(f"manifest {self.manifest!r} does not exist")
        if not self.output_dir:
            raise ConfigError("output_dir is required (config field or --output-dir)")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if int(self.epochs) < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


_RUN_KEYS = {"architecture", "optimizer", "loss", "data", "seed", "epochs",
             "batch_size", "output_dir"}


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a JSON run config; `overrides` (flag values) win over the file.

    Relative paths in the file (manifest, output_dir) are resolved
    against the config file's directory, so a config is portable with
    the data it names.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(raw) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config fields: {', '.join(sorted(unknown))}")
    if "architecture" not in raw:
        raise ConfigError(f"{path}: config is missing 'architecture'")
    if "data" not in raw or "manifest" not in raw.get("data", {}):
        raise ConfigError(f"{path}: config is missing 'data.manifest'")

    overrides = overrides or {}
    optimizer_raw = dict(raw.get("optimizer", {}))
    loss_raw = dict(raw.get("loss", {}))
    data_raw = dict(raw["data"])
    manifest = data_raw.pop("manifest")
    if overrides.get("lr") is not None:
        optimizer_raw["learning_rate"] = overrides["lr"]
    if overrides.get("optimizer") is not None:
        optimizer_raw["kind"] = overrides["optimizer"]
    if overrides.get("loss_weight") is not None:
        loss_raw["pos_weight"] = overrides["loss_weight"]

    base = Path(path).resolve().parent

    def resolved(p) -> str:
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    output_dir = overrides.get("output_dir")
    if output_dir is None:
        output_dir = raw.get("output_dir")
        output_dir = resolved(output_dir) if output_dir else ""

    cfg = RunConfig(
        architecture=RegNetConfig.from_dict(raw["architecture"]),
        optimizer=OptimizerConfig.from_dict(optimizer_raw),
        loss=LossConfig.from_dict(loss_raw),
        data=DataConfig.from_dict(data_raw),
        manifest=resolved(manifest),
        output_dir=str(output_dir),
        seed=int(overrides.get("seed", raw.get("seed", 0))),
        epochs=int(overrides.get("epochs", raw.get("epochs", 10))),
        batch_size=int(overrides.get("batch_size", raw.get("batch_size", 2))),
    )
    cfg.validate()
    return cfg


def _checked_entries(manifest_path) -> list[ManifestEntry]:
    entries = load_manifest(manifest_path)
    for entry in entries:
        if not os.path.exists(entry.path):
            raise ConfigError(
                f"volume {entry.path!r} (sample {entry.sample_id!r}) does not exist"
            )
    return entries


def predict_probabilities(model: RegNet3d, dataset: ManifestDataset,
                          batch_size: int = 2) -> np.ndarray:
    """Eval-mode sigmoid probabilities, one per dataset entry, in order."""
    probs = np.zeros(len(dataset), dtype=np.float64)

    def flush(batch) -> None:
        x = Tensor(np.stack([t.data for _, t, _ in batch]))
        logits = model.forward(x, mode="eval")
        for row, (index, _, _) in enumerate(batch):
            probs[index] = sigmoid(float(logits.data[row, 0]))

    batch = []
    for sample in dataset.eval_samples():
        batch.append(sample)
        if len(batch) == batch_size:
            flush(batch)
            batch = []
    if batch:
        flush(batch)
    return probs


def cmd_train(args) -> int:
    overrides = {
        "lr": args.lr,
        "loss_weight": args.loss_weight,
        "optimizer": args.optimizer,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "output_dir": args.output_dir,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    cfg = load_run_config(args.config, overrides)
    entries = _checked_entries(cfg.manifest)
    dataset = ManifestDataset(entries, cfg.data, seed=cfg.seed)

    rng = Rng(cfg.seed)
    model = RegNet3d(cfg.architecture, rng)
    optimizer = make_optimizer(cfg.optimizer, model.named_parameters())
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "data": cfg.data.to_dict(),
        "loss": cfg.loss.to_dict(),
        "seed": int(cfg.seed),
        "batch_size": int(cfg.batch_size),
        "manifest": str(cfg.manifest),
    }

    def on_epoch(stats) -> bool:
        done = stats.epoch + 1
        save_checkpoint(
            out / f"epoch_{done}.ckpt", snapshot(model, optimizer, done, rng, extra)
        )
        print(
            f"epoch {done}/{cfg.epochs}: mean_loss={stats.mean_loss!r} "
            f"train_accuracy={stats.train_accuracy!r}"
        )
        return False

    history = run_training(
        model, dataset, optimizer, cfg.loss, rng,
        epochs=cfg.epochs, batch_size=cfg.batch_size, on_epoch=on_epoch,
    )
    save_checkpoint(
        out / "final.ckpt", snapshot(model, optimizer, len(history), rng, extra)
    )
    write_train_log(out / "train_log.csv", history)
    save_training_figure(out / "train_log.png", history)
    print(f"wrote {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    data_cfg = DataConfig.from_dict(ckpt.extra.get("data", {}))
    entries = _checked_entries(args.manifest)
    dataset = ManifestDataset(entries, data_cfg, seed=0)
    probs = predict_probabilities(model, dataset)
    predictions = PredictionSet(
        model_id=Path(args.ckpt).stem,
        sample_ids=[entry.sample_id for entry in entries],
        probabilities=probs,
    )
    write_predictions_csv(args.out, predictions)
    print(f"wrote {args.out}")
    return EXIT_OK


def _aligned_labels(predictions: PredictionSet, manifest_path) -> list[int]:
    labels = labels_by_id(load_manifest(manifest_path))
    missing = [sid for sid in predictions.sample_ids if sid not in labels]
    if missing:
        raise AlignmentError(
            f"manifest {manifest_path!r} has no labels for: {', '.join(missing)}"
        )
    return [labels[sid] for sid in predictions.sample_ids]


def _pick_threshold(args):
    """(threshold, source, notes) from the mutually exclusive options."""
    if args.threshold is not None:
        return float(args.threshold), "given", []
    if args.threshold_pred is not None:
        val = read_predictions_csv(args.threshold_pred)
        val_labels = _aligned_labels(val, args.threshold_manifest)
        picked = youden_threshold(roc_curve(val.probabilities, val_labels))
        return picked.threshold, "validation", []
    note = ("threshold selected on the evaluated predictions themselves; "
            "metrics are optimistically biased")
    return None, "youden", [note]


def _report(predictions: PredictionSet, args) -> None:
    labels = _aligned_labels(predictions, args.manifest)
    threshold, source, notes = _pick_threshold(args)
    report = evaluate(predictions.probabilities, labels, threshold=threshold)
    report.threshold_source = source
    report.notes.extend(notes)
    print(report.as_text())
    if args.roc_out:
        curve = roc_curve(predictions.probabilities, labels)
        write_roc_csv(args.roc_out, curve)
        root, ext = os.path.splitext(str(args.roc_out))
        figure_path = root + ".png" if ext != ".png" else root + "_figure.png"
        save_roc_figure(
            figure_path, curve,
            auc_value=report.auc,
            operating_point=(report.fpr, report.tpr),
        )


def cmd_eval(args) -> int:
    predictions = read_predictions_csv(args.pred)
    _report(predictions, args)
    return EXIT_OK


def cmd_fuse(args) -> int:
    members = [read_predictions_csv(p, model_id=Path(p).stem) for p in args.pred]
    fused = fuse(members)
    write_predictions_csv(args.out, fused)
    _report(fused, args)
    print(f"wrote {args.out}")
    return EXIT_OK


def _threshold_flags(parser) -> None:
    parser.add_argument("--threshold", type=float, default=None,
                        help="fixed decision threshold (score >= threshold is positive)")
    parser.add_argument("--threshold-pred", default=None, metavar="CSV",
                        help="pick the Youden threshold from this prediction file instead "
                             "of the evaluated one")
    parser.add_argument("--threshold-manifest", default=None, metavar="CSV",
                        help="labels for --threshold-pred (defaults to --manifest)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volnet",
        description="Train, run, and fuse volumetric binary classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a JSON run config")
    train.add_argument("--config", required=True, help="JSON run config path")
    train.add_argument("--lr", type=float, default=None, help="override optimizer.learning_rate")
    train.add_argument("--loss-weight", type=float, default=None,
                       help="override loss.pos_weight")
    train.add_argument("--optimizer", choices=OPTIMIZER_KINDS, default=None,
                       help="override optimizer.kind")
    train.add_argument("--seed", type=int, default=None, help="override seed")
    train.add_argument("--epochs", type=int, default=None, help="override epochs")
    train.add_argument("--batch-size", type=int, default=None, help="override batch_size")
    train.add_argument("--output-dir", default=None, help="override output_dir")
    train.set_defaults(handler=cmd_train)

    predict = sub.add_parser("predict", help="write per-sample probabilities for a manifest")
    predict.add_argument("--ckpt", required=True, help="checkpoint path")
    predict.add_argument("--manifest", required=True, help="manifest CSV path")
    predict.add_argument("--out", required=True, help="output prediction CSV path")
    predict.set_defaults(handler=cmd_predict)

    ev = sub.add_parser("eval", help="score a prediction file against manifest labels")
    ev.add_argument("--pred", required=True, help="prediction CSV path")
    ev.add_argument("--manifest", required=True, help="manifest CSV with labels")
    ev.add_argument("--roc-out", default=None,
                    help="write the ROC curve CSV here (plus a PNG companion)")
    _threshold_flags(ev)
    ev.set_defaults(handler=cmd_eval)

    fu = sub.add_parser("fuse", help="average prediction files and score the ensemble")
    fu.add_argument("--pred", action="append", required=True,
                    help="prediction CSV (repeat once per member)")
    fu.add_argument("--manifest", required=True, help="manifest CSV with labels")
    fu.add_argument("--out", required=True, help="fused prediction CSV path")
    fu.add_argument("--roc-out", default=None,
                    help="write the ROC curve CSV here (plus a PNG companion)")
    _threshold_flags(fu)
    fu.set_defaults(handler=cmd_fuse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "threshold_pred", None) is not None and args.threshold_manifest is None:
        args.threshold_manifest = args.manifest
    try:
        return args.handler(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolnetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
