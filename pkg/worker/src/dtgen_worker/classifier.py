"""Classifier training on exported training bundles.

A bundle is a directory with one subdirectory per class and an ``index.csv``
whose rows carry relative image paths and integer labels; that is exactly
what the pipeline's export stage writes.  Training uses AdamW with a step
learning-rate schedule, logs one JSON line per epoch, and stops early once
the training set is fully fit.  After training the model predicts on the
evaluation bundle (the training bundle when none is given) and writes the
predictions in the shared CSV format, one row per evaluation image.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from dtgen.eval_metrics import write_predictions
from dtgen.imaging import decode_image
from dtgen.seeding import derive_seed, stable_hex

from .config import WorkerConfig
from .modeling import build_classifier, pixels_to_tensor

logger = logging.getLogger(__name__)

__all__ = [
    "ClassifierSpec",
    "BundleError",
    "TASK_NUM_CLASSES",
    "job_id_for",
    "load_bundle",
    "run_classifier",
]

TASK_NUM_CLASSES = {"binary": 2, "three-class": 3}


class BundleError(ValueError):
    """The referenced bundle is missing, malformed, or does not fit the task."""


@dataclass(frozen=True)
class ClassifierSpec:
    """One classifier training job, as carried on the wire."""

    bundle_ref: str
    task: str
    epochs: int | None = None
    seed: int = 0
    eval_ref: str | None = None

    def __post_init__(self) -> None:
        if self.task not in TASK_NUM_CLASSES:
            raise ValueError(f"unknown task {self.task!r} (expected {sorted(TASK_NUM_CLASSES)})")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def job_id_for(spec: ClassifierSpec) -> str:
    return "cls-" + stable_hex(
        "worker-classifier",
        spec.bundle_ref,
        spec.task,
        spec.epochs if spec.epochs is not None else "-",
        spec.seed,
        spec.eval_ref or "-",
    )[:16]


def load_bundle(
    bundle_dir: Path, num_classes: int, image_size: int
) -> tuple[list[str], torch.Tensor, torch.Tensor]:
    """Read a bundle directory into (ids, images (N,3,S,S), labels (N,))."""
    index_path = bundle_dir / "index.csv"
    if not index_path.is_file():
        raise BundleError(f"no index.csv under {bundle_dir}")
    ids: list[str] = []
    images: list[torch.Tensor] = []
    labels: list[int] = []
    with open(index_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise BundleError(f"{index_path} lacks the path and label columns")
        for row_no, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise BundleError(f"{index_path} line {row_no}: label is not an integer") from None
            if not 0 <= label < num_classes:
                raise BundleError(
                    f"{index_path} line {row_no}: label {label} does not fit a "
                    f"{num_classes}-class task"
                )
            image_path = bundle_dir / row["path"]
            if not image_path.is_file():
                raise BundleError(f"missing bundle image {image_path}")
            pixels = decode_image(image_path.read_bytes())
            ids.append(Path(row["path"]).stem)
            images.append(pixels_to_tensor(pixels, size=image_size))
            labels.append(label)
    if not ids:
        raise BundleError(f"{index_path} has no data rows")
    return ids, torch.stack(images), torch.tensor(labels, dtype=torch.long)


def run_classifier(
    cfg: WorkerConfig,
    spec: ClassifierSpec,
    bundle_dir: Path,
    eval_dir: Path | None,
    artifacts_dir: Path,
) -> dict[str, object]:
    """Train a head for the task, evaluate, and persist all artifacts."""
    num_classes = TASK_NUM_CLASSES[spec.task]
    job_id = job_id_for(spec)
    out_dir = artifacts_dir / "classifiers" / job_id
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = artifacts_dir / "logs" / f"{job_id}.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)

    train_ids, train_x, train_y = load_bundle(bundle_dir, num_classes, cfg.image_size)
    if eval_dir is not None:
        eval_ids, eval_x, eval_y = load_bundle(eval_dir, num_classes, cfg.image_size)
    else:
        eval_ids, eval_x, eval_y = train_ids, train_x, train_y

    model = build_classifier(cfg.classifier_backbone, num_classes, cfg.channels)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.classifier_lr)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=cfg.lr_step_size, gamma=cfg.lr_gamma
    )
    gen = torch.Generator()
    gen.manual_seed(derive_seed(spec.seed, "classifier-batches"))

    epochs = spec.epochs or cfg.classifier_epochs
    n = train_x.shape[0]
    batch = min(cfg.batch_size, n)
    accuracy = 0.0
    epochs_run = 0
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(1, epochs + 1):
            epochs_run = epoch
            model.train()
            order = torch.randperm(n, generator=gen)
            epoch_loss = 0.0
            for start in range(0, n, batch):
                chunk = order[start : start + batch]
                logits = model(train_x[chunk])
                loss = F.cross_entropy(logits, train_y[chunk])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_loss += loss.detach().item() * len(chunk)
            scheduler.step()
            model.eval()
            with torch.no_grad():
                accuracy = float((model(train_x).argmax(dim=1) == train_y).float().mean())
            log_fh.write(
                json.dumps(
                    {
                        "epoch": epoch,
                        "loss": epoch_loss / n,
                        "train_accuracy": accuracy,
                        "lr": scheduler.get_last_lr()[0],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            if accuracy == 1.0:
                break

    model.eval()
    with torch.no_grad():
        predicted = model(eval_x).argmax(dim=1)
    predictions_path = out_dir / "predictions.csv"
    write_predictions(
        str(predictions_path),
        [
            (sample_id, int(true), int(pred))
            for sample_id, true, pred in zip(eval_ids, eval_y.tolist(), predicted.tolist())
        ],
    )

    checkpoint_path = out_dir / "model.pt"
    torch.save(model.state_dict(), checkpoint_path)
    meta = {
        "job_id": job_id,
        "backbone": cfg.classifier_backbone,
        "task": spec.task,
        "num_classes": num_classes,
        "epochs_run": epochs_run,
        "train_accuracy": accuracy,
        "learning_rate": cfg.classifier_lr,
        "batch_size": batch,
        "schedule": {"type": "step", "step_size": cfg.lr_step_size, "gamma": cfg.lr_gamma},
        "train_size": n,
        "eval_size": len(eval_ids),
        "seed": spec.seed,
    }
    with open(out_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    logger.info(
        "classifier %s reached train accuracy %.3f in %d epochs", job_id, accuracy, epochs_run
    )
    return {
        "artifact_ref": f"classifiers/{job_id}",
        "predictions_ref": f"classifiers/{job_id}/predictions.csv",
        "train_accuracy": accuracy,
    }
