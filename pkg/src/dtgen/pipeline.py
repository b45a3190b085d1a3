"""Stage orchestration shared by the CLI.

A pipeline run lives in one storage root containing ``config.json``, the
prompt template, the manifest, blobs, and stage outputs.  Stages are:

1. finetune  - submit an adapter job over the ingested real manifest
2. generate  - sample prompts, call the generation service, ingest results
3. filter    - embed, score, apply adaptive thresholds, record decisions
4. export / eval - write the training bundle; compute metrics from
   prediction files

Stage completion is recorded as config snapshot lines in the manifest, so
re-running a finished stage is a no-op unless forced, and the manifest alone
documents how its records came to be.  All derived randomness comes from the
master seed via stable hashing; with the mock backend two runs with the same
seed produce byte-identical manifests, reports, and exports.  File contents
never include timestamps or absolute paths for the same reason.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import backend_gateway as gw
from . import eval_metrics, figures, prompt_grammar, quality_filter
from .dataset_store import (
    SEVERITY_TO_LABEL,
    DatasetStore,
    IngestItem,
    StoreError,
    StoreLock,
)
from .mock_backend import MockBackend
from .seeding import derive_seed, hash_uint, stable_hex

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
TEMPLATE_NAME = "template.json"
FILTER_REPORT_NAME = "filter_report.json"
REPORT_NAME = "report.json"
MOCK_ENDPOINT = "mock:"
ENDPOINT_ENV = "DTGEN_ENDPOINT"


class PipelineError(RuntimeError):
    """Validation-level pipeline failure (exit code 1)."""


class PartialFailure(RuntimeError):
    """Some requests of a stage failed; the successful subset was kept (exit 3)."""

    def __init__(self, message: str, failures: list[dict[str, Any]]):
        super().__init__(message)
        self.failures = failures


@dataclass
class PipelineConfig:
    """Run configuration persisted as ``config.json`` in the storage root.

    Defaults are desk-scale: small mock-rendered images and the in-process
    mock endpoint.  Paper-scale settings (large images, real endpoints, 3600
    samples) are plain config edits.
    """

    master_seed: int = 20250817
    template_path: str = TEMPLATE_NAME
    n: int = 3600
    width: int = 64
    height: int = 64
    steps: int = 4
    alpha: float = 1.5
    rule: str = quality_filter.LOWER_TAIL
    min_group_size: int = 5
    endpoint: str = MOCK_ENDPOINT
    adapter_rank: int = 8
    adapter_steps: int = 1000
    lam: float = 0.0
    mu: float = 0.0
    max_in_flight: int = 4
    alpha_by_severity: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise PipelineError(f"n must be >= 1, got {self.n}")
        if not 0 <= self.master_seed < 2**63:
            raise PipelineError(f"master_seed must fit in 63 bits, got {self.master_seed}")
        if self.adapter_rank < 1:
            raise PipelineError(f"adapter_rank must be >= 1, got {self.adapter_rank}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "master_seed": self.master_seed,
            "template_path": self.template_path,
            "n": self.n,
            "width": self.width,
            "height": self.height,
            "steps": self.steps,
            "alpha": self.alpha,
            "rule": self.rule,
            "min_group_size": self.min_group_size,
            "endpoint": self.endpoint,
            "adapter_rank": self.adapter_rank,
            "adapter_steps": self.adapter_steps,
            "lam": self.lam,
            "mu": self.mu,
            "max_in_flight": self.max_in_flight,
            "alpha_by_severity": dict(self.alpha_by_severity),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> PipelineConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class RunContext:
    """Everything a stage needs: root, config, store, template."""

    root: Path
    config: PipelineConfig
    store: DatasetStore
    template: prompt_grammar.PromptTemplate
    seed_override: int | None = None

    @property
    def master_seed(self) -> int:
        return self.seed_override if self.seed_override is not None else self.config.master_seed


def _write_json(path: Path, payload: dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def init_run(root: str | Path, template_src: str | None = None, force: bool = False) -> Path:
    """Scaffold a storage root: config, template, manifest header."""
    root = Path(root)
    config_path = root / CONFIG_NAME
    if config_path.exists() and not force:
        raise PipelineError(f"{config_path} exists; pass --force to overwrite")
    root.mkdir(parents=True, exist_ok=True)

    if template_src is not None:
        template = prompt_grammar.load_template(template_src)
    else:
        template = prompt_grammar.default_template()
    with open(root / TEMPLATE_NAME, "w", encoding="utf-8") as fh:
        json.dump(template.to_dict(), fh, indent=2)
        fh.write("\n")

    config = PipelineConfig()
    _write_json(config_path, config.to_dict())

    store = DatasetStore(root)
    manifest_path = store.manifest_path
    if manifest_path.exists() and force:
        manifest_path.unlink()
    store.initialize(manifest_id=stable_hex("manifest", config.master_seed))
    store.append_config(
        {
            "template_version": template.version,
            "master_seed": config.master_seed,
            "alpha": config.alpha,
            "rule": config.rule,
        }
    )
    return root


def load_context(root: str | Path, seed_override: int | None = None) -> RunContext:
    root = Path(root)
    config_path = root / CONFIG_NAME
    if not config_path.exists():
        raise PipelineError(f"no {CONFIG_NAME} in {root}; run init first")
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            config = PipelineConfig.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read {config_path}: {exc}") from exc
    template = prompt_grammar.load_template(str(root / config.template_path))
    return RunContext(
        root=root,
        config=config,
        store=DatasetStore(root),
        template=template,
        seed_override=seed_override,
    )


def make_client(
    ctx: RunContext,
    endpoint_override: str | None = None,
    sleeper: Callable[[float], None] | None = None,
) -> tuple[gw.GatewayClient, MockBackend | None]:
    """Build the gateway client; ``mock:`` endpoints run fully in-process.

    Precedence for the endpoint: explicit override, then the DTGEN_ENDPOINT
    environment variable, then the config value.
    """
    endpoint = endpoint_override or os.environ.get(ENDPOINT_ENV) or ctx.config.endpoint
    limits = gw.GatewayLimits(max_in_flight=ctx.config.max_in_flight)
    if endpoint == MOCK_ENDPOINT:
        backend = MockBackend(blob_root=ctx.root)
        transport: gw.Transport = gw.LocalTransport(backend)
        client = gw.GatewayClient(transport, limits, sleeper=sleeper or (lambda s: None))
        return client, backend
    client = gw.GatewayClient(gw.HttpTransport(endpoint), limits, sleeper=sleeper or time.sleep)
    return client, None


def stage_completed(ctx: RunContext, stage: str) -> bool:
    snapshot = ctx.store.load_manifest().config_snapshot()
    return bool(snapshot.get(f"stage_{stage}"))


def _mark_stage(ctx: RunContext, stage: str, extra: dict[str, Any] | None = None) -> None:
    snapshot = {f"stage_{stage}": "done"}
    if extra:
        snapshot.update(extra)
    ctx.store.append_config(snapshot)


def ingest_directory(
    ctx: RunContext, data_dir: str | Path, origin: str, split: str
) -> dict[str, int]:
    """Ingest ``<data_dir>/<label_name>/*`` images under the given split."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise PipelineError(f"data directory {data_dir} does not exist")
    items: list[IngestItem] = []
    for label_dir in sorted(p for p in data_dir.iterdir() if p.is_dir()):
        for image_path in sorted(label_dir.iterdir()):
            if not image_path.is_file():
                continue
            items.append(
                IngestItem(
                    image_bytes=image_path.read_bytes(),
                    label_name=label_dir.name,
                    split=split,
                    source=str(image_path),
                )
            )
    if not items:
        logger.warning("no images found under %s", data_dir)
        return {}
    records = ctx.store.ingest(items, origin=origin)
    counts: dict[str, int] = {}
    for record in records:
        counts[record.label_name] = counts.get(record.label_name, 0) + 1
    return counts


def stage_finetune(
    ctx: RunContext, client: gw.GatewayClient, force: bool = False
) -> dict[str, Any]:
    """Submit the adapter job over the real-data manifest; store adapter_id."""
    if stage_completed(ctx, "finetune") and not force:
        snapshot = ctx.store.load_manifest().config_snapshot()
        return {"skipped": True, "adapter_id": snapshot.get("adapter_id")}
    manifest = ctx.store.load_manifest()
    real = manifest.real()
    if not real:
        raise PipelineError("no real records in the manifest; ingest real data first")
    job = gw.FinetuneJob(
        manifest_ref=ctx.store.manifest_path.name,
        rank=ctx.config.adapter_rank,
        steps=ctx.config.adapter_steps,
        lam=ctx.config.lam,
        mu=ctx.config.mu,
        seed=derive_seed(ctx.master_seed, "finetune"),
    )
    status = client.submit_finetune(job)
    if status.status not in ("done", "failed"):
        status = client.wait_for_job(status.job_id)
    if status.status == "failed":
        raise gw.BackendError(f"finetune job failed: {status.error}", False)
    _mark_stage(
        ctx,
        "finetune",
        {
            "adapter_id": status.adapter_id,
            "finetune_job": status.job_id,
            "adapter_rank": ctx.config.adapter_rank,
            "adapter_steps": ctx.config.adapter_steps,
            "lam": ctx.config.lam,
            "mu": ctx.config.mu,
        },
    )
    return {"skipped": False, "adapter_id": status.adapter_id, "job_id": status.job_id}


def stage_generate(
    ctx: RunContext,
    client: gw.GatewayClient,
    n: int | None = None,
    force: bool = False,
) -> dict[str, Any]:
    """Sample prompts, generate images, ingest them as synthetic records."""
    if stage_completed(ctx, "generate") and not force:
        return {"skipped": True}
    n = n if n is not None else ctx.config.n
    if n < 1:
        raise PipelineError(f"generation count must be >= 1, got {n}")
    snapshot = ctx.store.load_manifest().config_snapshot()
    adapter_id = snapshot.get("adapter_id")

    seed = ctx.master_seed
    prompts = prompt_grammar.sample_uniform(
        ctx.template, n, derive_seed(seed, "prompt-sample")
    )
    requests = []
    by_request_id: dict[str, prompt_grammar.RenderedPrompt] = {}
    for i, prompt in enumerate(prompts):
        request_id = "gen-" + stable_hex("gen-request", seed, i)
        by_request_id[request_id] = prompt
        requests.append(
            gw.GenerationRequest(
                prompt=prompt.text,
                seed=hash_uint(2**63, "gen-seed", seed, i),
                request_id=request_id,
                width=ctx.config.width,
                height=ctx.config.height,
                steps=ctx.config.steps,
                adapter_id=adapter_id,
            )
        )
    outcome = client.generate_batch(requests)
    if not outcome.results:
        raise gw.BackendError(
            f"all {len(requests)} generation requests failed; first: "
            f"{outcome.failures[0].message}",
            True,
        )

    items: list[IngestItem] = []
    for result in outcome.results:
        prompt = by_request_id[result.request_id]
        if result.image_bytes is None:
            raise gw.ContractError(
                f"result {result.request_id} returned no inline image; "
                "reference-only results are not supported by the mock pipeline"
            )
        severity = prompt.attributes.get("severity", "clean")
        items.append(
            IngestItem(
                image_bytes=result.image_bytes,
                label_name=SEVERITY_TO_LABEL[severity],
                split="train",
                source=result.request_id,
                extra={
                    "prompt_id": prompt.prompt_id,
                    "prompt_text": prompt.text,
                    "slot_choices": prompt.slot_choices,
                    "severity": severity,
                    "model_id": result.model_id,
                    "adapter_id": result.adapter_id,
                    "request_id": result.request_id,
                },
            )
        )
    records = ctx.store.ingest(items, origin="synthetic")
    _mark_stage(
        ctx,
        "generate",
        {
            "generate_n": n,
            "generate_succeeded": len(outcome.results),
            "generate_failed": len(outcome.failures),
            "generator_model": outcome.results[0].model_id,
        },
    )
    summary = {
        "skipped": False,
        "requested": n,
        "succeeded": len(outcome.results),
        "failed": len(outcome.failures),
        "records": len(records),
    }
    if outcome.failures:
        raise PartialFailure(
            f"{len(outcome.failures)} of {n} generation requests failed; "
            f"{len(outcome.results)} results ingested",
            [
                {"request_id": f.request_id, "message": f.message, "attempts": f.attempts}
                for f in outcome.failures
            ],
        )
    return summary


def stage_filter(
    ctx: RunContext,
    client: gw.GatewayClient,
    alpha: float | None = None,
    rule: str | None = None,
    force: bool = False,
) -> dict[str, Any]:
    """Embed, score, and partition the synthetic set; persist the report."""
    if stage_completed(ctx, "filter") and not force:
        return {"skipped": True}
    manifest = ctx.store.load_manifest()
    synthetic = manifest.synthetic()
    if not synthetic:
        raise PipelineError("no synthetic records to filter; run generate first")

    cfg = quality_filter.FilterConfig(
        alpha=alpha if alpha is not None else ctx.config.alpha,
        rule=rule if rule is not None else ctx.config.rule,
        min_group_size=ctx.config.min_group_size,
        alpha_by_severity=dict(ctx.config.alpha_by_severity),
    )

    text_requests: list[gw.EmbeddingRequest] = []
    seen_prompts: set[str] = set()
    for record in synthetic:
        if record.prompt_id not in seen_prompts:
            seen_prompts.add(record.prompt_id)
            text_requests.append(
                gw.EmbeddingRequest(
                    request_id=f"embt-{record.prompt_id}",
                    modality="text",
                    text=record.prompt_text,
                )
            )
    image_requests = [
        gw.EmbeddingRequest(
            request_id=f"embi-{record.sample_id}",
            modality="image",
            image_bytes=ctx.store.read_blob(record),
        )
        for record in synthetic
    ]
    outcome = client.embed_batch(text_requests + image_requests)
    vectors = {r.request_id: r.vector for r in outcome.results}
    embed_model = outcome.results[0].model_id if outcome.results else "unknown"

    scores: list[quality_filter.ScoredSample] = []
    invalid: list[dict[str, str]] = []
    failed_ids = {f.request_id: f.message for f in outcome.failures}
    for record in synthetic:
        text_key = f"embt-{record.prompt_id}"
        image_key = f"embi-{record.sample_id}"
        if text_key in failed_ids or image_key in failed_ids:
            reason = failed_ids.get(image_key) or failed_ids.get(text_key) or "embedding failed"
            invalid.append({"sample_id": record.sample_id, "reason": reason})
            continue
        pair = quality_filter.EmbeddingPair(
            image_embedding=vectors[image_key], text_embedding=vectors[text_key]
        )
        try:
            score = quality_filter.cosine_score(pair)
        except quality_filter.ScoringError as exc:
            invalid.append({"sample_id": record.sample_id, "reason": str(exc)})
            continue
        scores.append(
            quality_filter.ScoredSample(
                sample_id=record.sample_id,
                prompt_id=record.prompt_id or "",
                score=score,
                severity=record.severity,
            )
        )
    if not scores:
        raise PipelineError("no synthetic sample could be scored")

    stats = quality_filter.group_stats(scores, cfg)
    result = quality_filter.apply_filter(scores, stats, cfg)
    report = quality_filter.build_filter_report(result, stats, cfg, invalid)
    report["embed_model"] = embed_model
    _write_json(ctx.root / FILTER_REPORT_NAME, report)

    thresholds = (
        {g.group_key: g.threshold for g in stats}
        if len(stats) <= 8
        else {"median-threshold": sorted(g.threshold for g in stats)[len(stats) // 2]}
    )
    figures.score_histogram(
        [s.score for s in scores], thresholds, ctx.root / "filter_scores.png"
    )

    counts = ctx.store.apply_filter_report(report)
    _mark_stage(
        ctx,
        "filter",
        {
            "alpha": cfg.alpha,
            "rule": cfg.rule,
            "embed_model": embed_model,
            "filter_kept": counts["kept"],
            "filter_rejected": counts["rejected"],
        },
    )
    if counts["kept"] == 0:
        logger.warning("filter kept zero samples; export will refuse to run")
    summary = {
        "skipped": False,
        "scored": len(scores),
        "kept": counts["kept"],
        "rejected": counts["rejected"],
        "invalid": len(invalid),
        "retention": result.retention,
        "report": str(ctx.root / FILTER_REPORT_NAME),
    }
    if outcome.failures:
        raise PartialFailure(
            f"{len(outcome.failures)} embedding requests failed; "
            f"{len(scores)} samples scored",
            [
                {"request_id": f.request_id, "message": f.message, "attempts": f.attempts}
                for f in outcome.failures
            ],
        )
    return summary


def stage_export(ctx: RunContext, task: str, out_dir: str | Path | None = None) -> dict[str, Any]:
    out = Path(out_dir) if out_dir else ctx.root / f"export-{task}"
    summary = ctx.store.export_training_set(out, task)
    _mark_stage(ctx, f"export_{task}", {"export_dir": out.name, "export_total": summary["total"]})
    return summary


def stage_eval(
    ctx: RunContext, pred_path: str, task: str, out_dir: str | Path | None = None
) -> dict[str, Any]:
    """Metric computation from a prediction CSV; writes metrics.json + figure."""
    from .dataset_store import TASK_CLASS_NAMES

    if task not in TASK_CLASS_NAMES:
        raise PipelineError(f"unknown task {task!r} (expected {sorted(TASK_CLASS_NAMES)})")
    class_names = TASK_CLASS_NAMES[task]
    y_true, y_pred, _ = eval_metrics.load_predictions(pred_path)
    cm = eval_metrics.confusion(y_true, y_pred, len(class_names), class_names)
    positive = class_names.index("dirty") if task == "binary" else None
    report = eval_metrics.metrics(cm, positive_class=positive)
    table = eval_metrics.table_report([(task, report)])

    out = Path(out_dir) if out_dir else ctx.root
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "task": task,
        "confusion": cm.to_dict(),
        "metrics": report.to_dict(),
        "table": table["rows"],
    }
    _write_json(out / "metrics.json", payload)
    figures.confusion_heatmap(
        [list(row) for row in cm.counts], class_names, out / "confusion.png"
    )
    payload["table_text"] = table["text"]
    return payload


def stage_report(ctx: RunContext) -> dict[str, Any]:
    """Write report.json plus its figures; returns the report dict."""
    report = ctx.store.build_report()
    _write_json(ctx.root / REPORT_NAME, report)
    figures.render_report_figures(report, ctx.root)
    return report


def run_locked(root: str | Path, action: Callable[[], Any]) -> Any:
    """Run ``action`` while holding the storage-root lock."""
    with StoreLock(root):
        return action()
