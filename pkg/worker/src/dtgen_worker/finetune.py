"""Low-rank adapter training on the denoiser's attention projections.

The objective is standard noise prediction: corrupt an image with Gaussian
noise at a random schedule position, predict the noise, take the mean
squared error, and add the explicit penalty lam * ||A||_F^2 + mu * ||B||_F^2
summed over the four adapted projections.  Only the adapter matrices train;
the base network stays frozen.

Every step appends one JSON line to the training log with the loss terms
reported separately (denoising, penalty on A, penalty on B, total).  After
the last step the adapters are written in the shared serialization format
and a final log line records the penalty recomputed from the saved files,
so an auditor can verify the artifact against the log without rerunning
anything.

Captions come from the dataset itself: records that carry a stored prompt
use it verbatim; real images, which have only a label, get a caption
rendered from the prompt template with the dirtiness slot pinned to the
label's severity and the remaining slots hash-picked per sample.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from dtgen import prompt_grammar
from dtgen.adapter_math import RegularizerConfig, load_adapter, regularizer, save_adapter
from dtgen.dataset_store import DatasetStore
from dtgen.imaging import decode_image
from dtgen.seeding import derive_seed, hash_uint, stable_hex

from .config import WorkerConfig
from .modeling import TextEncoder, TinyDenoiser, pixels_to_tensor

logger = logging.getLogger(__name__)

__all__ = [
    "FinetuneSpec",
    "FinetuneDataError",
    "DivergenceError",
    "job_id_for",
    "adapter_id_for",
    "caption_for",
    "run_finetune",
]

LABEL_SEVERITY = {
    "clean": "clean",
    "lightly_dirty": "light",
    "heavily_dirty": "heavy",
    "dirty": "heavy",
}


class FinetuneDataError(ValueError):
    """The referenced dataset cannot back a training run."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class FinetuneSpec:
    """One adapter training job, as carried on the wire."""

    manifest_ref: str
    rank: int = 8
    steps: int = 1000
    lam: float = 0.0
    mu: float = 0.0
    seed: int = 0
    base_model: str | None = None

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lam < 0 or self.mu < 0:
            raise ValueError(f"penalty weights must be >= 0, got {self.lam}, {self.mu}")


def _job_key(spec: FinetuneSpec) -> str:
    return stable_hex(
        "worker-finetune",
        spec.manifest_ref,
        spec.rank,
        spec.steps,
        spec.lam,
        spec.mu,
        spec.seed,
        spec.base_model or "-",
    )


def job_id_for(spec: FinetuneSpec) -> str:
    return "ft-" + _job_key(spec)[:16]


def adapter_id_for(spec: FinetuneSpec) -> str:
    return "adapter-" + _job_key(spec)[:12]


def caption_for(
    label_name: str, sample_id: str, template: prompt_grammar.PromptTemplate
) -> str:
    """Deterministic caption for a labeled image without a stored prompt.

    The severity-tagged slot is restricted to options matching the label's
    severity; all other slots are hash-picked per sample so captions vary
    across the dataset instead of collapsing onto one string.
    """
    severity = LABEL_SEVERITY.get(label_name)
    if severity is None:
        raise FinetuneDataError(f"no severity mapping for label {label_name!r}")
    choices: dict[str, int] = {}
    for slot in template.slots:
        if slot.has_severity_tags():
            matching = [i for i, opt in enumerate(slot.options) if opt.severity == severity]
            if not matching:
                raise FinetuneDataError(
                    f"template slot {slot.name!r} has no option with severity {severity!r}"
                )
            pick = hash_uint(len(matching), "caption", sample_id, slot.name)
            choices[slot.name] = matching[pick]
        else:
            choices[slot.name] = hash_uint(slot.cardinality, "caption", sample_id, slot.name)
    return prompt_grammar.render(template, choices).text


def load_captioned_images(
    store_root: Path, image_size: int, template: prompt_grammar.PromptTemplate | None = None
) -> tuple[torch.Tensor, list[str]]:
    """Real records of a dataset store as (N, 3, S, S) tensors plus captions."""
    store = DatasetStore(store_root)
    records = store.load_manifest().real()
    if not records:
        raise FinetuneDataError(f"no real records in the manifest under {store_root}")
    template = template or prompt_grammar.default_template()
    images: list[torch.Tensor] = []
    captions: list[str] = []
    for record in records:
        pixels = decode_image(store.read_blob(record))
        images.append(pixels_to_tensor(pixels, size=image_size))
        caption = record.prompt_text or caption_for(record.label_name, record.sample_id, template)
        captions.append(caption)
    return torch.stack(images), captions


def run_finetune(
    denoiser: TinyDenoiser,
    text_encoder: TextEncoder,
    cfg: WorkerConfig,
    spec: FinetuneSpec,
    store_root: Path,
    artifacts_dir: Path,
) -> dict[str, object]:
    """Train, save, and log one adapter set; returns job result fields.

    The denoiser must be a dedicated instance: its projection layers gain
    trainable low-rank parameters for the duration of the run.
    """
    job_id = job_id_for(spec)
    adapter_id = adapter_id_for(spec)
    adapter_dir = artifacts_dir / "adapters" / adapter_id
    log_path = artifacts_dir / "logs" / f"{job_id}.jsonl"
    adapter_dir.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    images, captions = load_captioned_images(store_root, cfg.image_size)
    text, mask = text_encoder.encode_batch(captions)

    targets = denoiser.attention.targets()
    init_gen = torch.Generator()
    init_gen.manual_seed(derive_seed(spec.seed, "lora-init"))
    for layer in targets.values():
        layer.enable_lora(spec.rank, init_gen)
    params = [p for layer in targets.values() for p in (layer.lora_a, layer.lora_b)]
    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=0.0)

    data_gen = torch.Generator()
    data_gen.manual_seed(derive_seed(spec.seed, "batches"))
    n = images.shape[0]
    batch = min(cfg.batch_size, n)

    with open(log_path, "w", encoding="utf-8") as log_fh:
        for step in range(1, spec.steps + 1):
            idx = torch.randint(0, n, (batch,), generator=data_gen)
            t = torch.rand(batch, generator=data_gen) * 0.998 + 1e-3
            noise = torch.randn(batch, 3, cfg.image_size, cfg.image_size, generator=data_gen)
            keep = torch.cos(t * math.pi / 2.0).pow(2).view(-1, 1, 1, 1)
            noisy = keep.sqrt() * images[idx] + (1.0 - keep).sqrt() * noise

            predicted = denoiser(noisy, t, text[idx], mask[idx])
            denoising = F.mse_loss(predicted, noise)
            if spec.lam or spec.mu:
                penalty_a = spec.lam * sum(layer.lora_a.square().sum() for layer in targets.values())
                penalty_b = spec.mu * sum(layer.lora_b.square().sum() for layer in targets.values())
            else:
                penalty_a = torch.zeros(())
                penalty_b = torch.zeros(())
            loss = denoising + penalty_a + penalty_b
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}: {loss.item()}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            log_fh.write(
                json.dumps(
                    {
                        "step": step,
                        "denoising": denoising.detach().item(),
                        "penalty_a": penalty_a.detach().item(),
                        "penalty_b": penalty_b.detach().item(),
                        "loss": loss.detach().item(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )

        files = []
        for name, layer in targets.items():
            path = adapter_dir / f"{name}.json"
            save_adapter(layer.as_adapter(), str(path))
            files.append(path.name)
        reg_cfg = RegularizerConfig(lam=spec.lam, mu=spec.mu)
        saved_penalty = sum(
            regularizer(load_adapter(str(adapter_dir / name)), reg_cfg) for name in files
        )
        meta = {
            "adapter_id": adapter_id,
            "job_id": job_id,
            "base_model": denoiser.model_id,
            "rank": spec.rank,
            "steps": spec.steps,
            "lam": spec.lam,
            "mu": spec.mu,
            "seed": spec.seed,
            "learning_rate": cfg.learning_rate,
            "batch_size": batch,
            "image_size": cfg.image_size,
            "targets": sorted(targets),
            "num_images": n,
        }
        with open(adapter_dir / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        log_fh.write(
            json.dumps(
                {
                    "event": "adapter_saved",
                    "adapter_id": adapter_id,
                    "files": files,
                    "regularizer": saved_penalty,
                },
                sort_keys=True,
            )
            + "\n"
        )

    logger.info("finetune %s saved adapter %s after %d steps", job_id, adapter_id, spec.steps)
    return {
        "adapter_id": adapter_id,
        "artifact_ref": f"adapters/{adapter_id}",
    }
