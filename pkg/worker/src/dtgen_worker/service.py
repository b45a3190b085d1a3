"""HTTP surface of the worker: the server side of the gateway contract.

Every request body is validated against the shared JSON Schemas before any
work happens, and every success body is validated again before it leaves,
so a worker bug surfaces as an explicit 500 instead of a malformed message.
Errors always travel as the contract's error shape with a retryable flag:
400 for requests that will never succeed, 503 when a required model is not
loaded, 500 for unexpected faults.

Generation and embedding execute inline under a bounded semaphore;
fine-tuning and classifier training are submitted to the job registry and
polled via ``/v1/jobs/{id}``.  Dataset and bundle references resolve against
the worker's data root (or absolutely), and oversized generated images spool
to disk under the artifacts directory, addressed by their content hash.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import threading
import time
from pathlib import Path
from typing import Any, Callable

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from dtgen.adapter_math import AdapterError, LowRankAdapter, load_adapter
from dtgen.backend_gateway import (
    CONTRACT_HEADER,
    CONTRACT_VERSION,
    INLINE_LIMIT_BYTES,
    ContractError,
    validate_message,
)
from dtgen.imaging import encode_png

from . import classifier as classifier_mod
from . import finetune as finetune_mod
from .config import WorkerConfig
from .generation import Sampler
from .jobs import JobRegistry
from .modeling import (
    Embedder,
    ModelLoadError,
    build_classifier,
    build_denoiser,
    build_embedder,
    build_text_encoder,
)

logger = logging.getLogger(__name__)

__all__ = ["WorkerRuntime", "create_app"]

SPOOL_DIR = "spool"


def _ok(body: dict[str, Any]) -> tuple[int, dict[str, Any]]:
    return 200, body

def _err(status: int, message: str, retryable: bool) -> tuple[int, dict[str, Any]]:
    return status, {
        "contract": CONTRACT_VERSION,
        "error": {"message": message, "retryable": retryable},
    }


class WorkerRuntime:
    """Loaded models, job registry, and filesystem roots for one worker."""

    def __init__(self, cfg: WorkerConfig, artifacts_dir: str | Path, data_root: str | Path):
        self.cfg = cfg
        self.artifacts_dir = Path(artifacts_dir)
        self.data_root = Path(data_root)
        self.artifacts_dir.mkdir(parents=True, exist_ok=True)
        self.load_errors: dict[str, str] = {}
        self.registry = JobRegistry()
        self._pool = threading.BoundedSemaphore(cfg.pool_size)

        self.sampler: Sampler | None = None
        try:
            denoiser = build_denoiser(cfg.generator_model, cfg.channels, cfg.text_dim)
            cond_encoder = build_text_encoder(cfg.generator_model, cfg.text_dim)
            self.sampler = Sampler(denoiser, cond_encoder, cfg.generator_model)
        except ModelLoadError as exc:
            self.load_errors["generator"] = str(exc)

        self.embedder: Embedder | None = None
        try:
            self.embedder = build_embedder(cfg.embed_model, cfg.embed_dim, cfg.channels)
        except ModelLoadError as exc:
            self.load_errors["embedder"] = str(exc)

        try:
            build_classifier(cfg.classifier_backbone, 2, cfg.channels)
            self.classifier_available = True
        except ModelLoadError as exc:
            self.classifier_available = False
            self.load_errors["classifier"] = str(exc)

        if self.load_errors:
            logger.warning("worker degraded; load errors: %s", self.load_errors)

    # -- reference resolution

    def resolve_ref(self, ref: str) -> Path | None:
        path = Path(ref)
        if path.is_absolute():
            return path if path.exists() else None
        for root in (self.artifacts_dir, self.data_root):
            candidate = root / path
            if candidate.exists():
                return candidate
        return None

    def store_root_for(self, manifest_ref: str) -> Path | None:
        """A manifest reference names either the manifest file or its root."""
        resolved = self.resolve_ref(manifest_ref)
        if resolved is None:
            return None
        if resolved.is_file():
            return resolved.parent
        if (resolved / "manifest.jsonl").is_file():
            return resolved
        return None

    def load_adapters(self, adapter_id: str) -> dict[str, LowRankAdapter]:
        adapter_dir = self.artifacts_dir / "adapters" / adapter_id
        if not adapter_dir.is_dir():
            raise KeyError(adapter_id)
        adapters: dict[str, LowRankAdapter] = {}
        for path in sorted(adapter_dir.glob("*.json")):
            if path.name == "meta.json":
                continue
            adapter = load_adapter(str(path))
            adapters[adapter.target_name] = adapter
        if not adapters:
            raise KeyError(adapter_id)
        return adapters

    def spool_image(self, png: bytes, content_hash: str) -> str:
        ref = f"{SPOOL_DIR}/{content_hash}.png"
        target = self.artifacts_dir / ref
        target.parent.mkdir(parents=True, exist_ok=True)
        if not target.exists():
            target.write_bytes(png)
        return ref

    def health_doc(self) -> dict[str, Any]:
        models: dict[str, Any] = {
            "generator": self.cfg.generator_model,
            "embedder": self.cfg.embed_model,
            "classifier": self.cfg.classifier_backbone,
        }
        if self.load_errors:
            models["errors"] = dict(self.load_errors)
        return {
            "contract": CONTRACT_VERSION,
            "status": "degraded" if self.load_errors else "ok",
            "models": models,
        }

    # -- endpoint logic (pure request dict -> (status, response dict))

    def handle_generate(self, payload: dict[str, Any]) -> tuple[int, dict[str, Any]]:
        try:
            validate_message("generate_request", payload)
        except ContractError as exc:
            return _err(400, str(exc), False)
        if self.sampler is None:
            return _err(503, f"generator unavailable: {self.load_errors.get('generator')}", False)
        adapters = None
        adapter_id = payload.get("adapter_id")
        if adapter_id is not None:
            try:
                adapters = self.load_adapters(adapter_id)
            except KeyError:
                return _err(400, f"unknown adapter_id {adapter_id!r}", False)
            except AdapterError as exc:
                return _err(400, f"corrupt adapter {adapter_id!r}: {exc}", False)
        started = time.perf_counter()
        with self._pool:
            pixels = self.sampler.generate(
                prompt=payload["prompt"],
                seed=payload["seed"],
                width=payload["width"],
                height=payload["height"],
                steps=payload["steps"],
                adapters=adapters,
            )
        png = encode_png(pixels)
        body: dict[str, Any] = {
            "contract": CONTRACT_VERSION,
            "request_id": payload["request_id"],
            "content_hash": hashlib.sha256(png).hexdigest(),
            "model_id": self.sampler.model_id,
            "adapter_id": adapter_id,
            "timing_s": time.perf_counter() - started,
        }
        if len(png) <= INLINE_LIMIT_BYTES:
            body["image_b64"] = base64.b64encode(png).decode("ascii")
        else:
            body["image_ref"] = self.spool_image(png, body["content_hash"])
        validate_message("generate_response", body)
        return _ok(body)

    def handle_embed(self, payload: dict[str, Any]) -> tuple[int, dict[str, Any]]:
        try:
            validate_message("embed_request", payload)
        except ContractError as exc:
            return _err(400, str(exc), False)
        if self.embedder is None:
            return _err(503, f"embedder unavailable: {self.load_errors.get('embedder')}", False)
        with self._pool:
            if payload["modality"] == "text":
                vector = self.embedder.encode_text(payload["text"])
            else:
                if "image_b64" in payload:
                    image = base64.b64decode(payload["image_b64"])
                else:
                    resolved = self.resolve_ref(payload["image_ref"])
                    if resolved is None or not resolved.is_file():
                        return _err(400, f"unknown image_ref {payload['image_ref']!r}", False)
                    image = resolved.read_bytes()
                try:
                    vector = self.embedder.encode_image(image)
                except Exception as exc:
                    return _err(400, f"undecodable image: {exc}", False)
        body = {
            "contract": CONTRACT_VERSION,
            "request_id": payload["request_id"],
            "vector": [float(x) for x in vector],
            "model_id": self.embedder.model_id,
        }
        validate_message("embed_response", body)
        return _ok(body)

    def handle_finetune(self, payload: dict[str, Any]) -> tuple[int, dict[str, Any]]:
        try:
            validate_message("finetune_request", payload)
        except ContractError as exc:
            return _err(400, str(exc), False)
        if self.sampler is None:
            return _err(503, f"generator unavailable: {self.load_errors.get('generator')}", False)
        base_model = payload.get("base_model")
        if base_model is not None and base_model != self.cfg.generator_model:
            return _err(
                400,
                f"base_model {base_model!r} is not served here "
                f"(this worker runs {self.cfg.generator_model!r})",
                False,
            )
        store_root = self.store_root_for(payload["manifest_ref"])
        if store_root is None:
            return _err(400, f"manifest_ref {payload['manifest_ref']!r} not found", False)
        spec = finetune_mod.FinetuneSpec(
            manifest_ref=payload["manifest_ref"],
            rank=payload["rank"],
            steps=payload["steps"],
            lam=payload["lam"],
            mu=payload["mu"],
            seed=payload.get("seed", 0),
            base_model=base_model,
        )
        job_id = finetune_mod.job_id_for(spec)
        adapter_id = finetune_mod.adapter_id_for(spec)

        def runner() -> dict[str, Any]:
            # a dedicated denoiser instance: training must not mutate the
            # module concurrently serving /v1/generate
            denoiser = build_denoiser(self.cfg.generator_model, self.cfg.channels, self.cfg.text_dim)
            return finetune_mod.run_finetune(
                denoiser,
                self.sampler.text_encoder,
                self.cfg,
                spec,
                store_root,
                self.artifacts_dir,
            )

        job_doc = self.registry.submit(job_id, "finetune", runner)
        body = {
            "contract": CONTRACT_VERSION,
            "job_id": job_id,
            "status": job_doc["status"],
            "adapter_id": adapter_id,
            "config_echo": {k: v for k, v in payload.items() if k != "contract"},
        }
        validate_message("finetune_response", body)
        return _ok(body)

    def handle_classifier(self, payload: dict[str, Any]) -> tuple[int, dict[str, Any]]:
        try:
            validate_message("classifier_request", payload)
        except ContractError as exc:
            return _err(400, str(exc), False)
        if not self.classifier_available:
            return _err(503, f"classifier unavailable: {self.load_errors.get('classifier')}", False)
        bundle_dir = self.resolve_ref(payload["bundle_ref"])
        if bundle_dir is None or not bundle_dir.is_dir():
            return _err(400, f"bundle_ref {payload['bundle_ref']!r} not found", False)
        eval_dir: Path | None = None
        if "eval_ref" in payload:
            eval_dir = self.resolve_ref(payload["eval_ref"])
            if eval_dir is None or not eval_dir.is_dir():
                return _err(400, f"eval_ref {payload['eval_ref']!r} not found", False)
        spec = classifier_mod.ClassifierSpec(
            bundle_ref=payload["bundle_ref"],
            task=payload["task"],
            epochs=payload.get("epochs"),
            seed=payload.get("seed", 0),
            eval_ref=payload.get("eval_ref"),
        )
        job_id = classifier_mod.job_id_for(spec)

        def runner() -> dict[str, Any]:
            return classifier_mod.run_classifier(
                self.cfg, spec, bundle_dir, eval_dir, self.artifacts_dir
            )

        job_doc = self.registry.submit(job_id, "classifier", runner)
        body = {
            "contract": CONTRACT_VERSION,
            "job_id": job_id,
            "status": job_doc["status"],
            "config_echo": {k: v for k, v in payload.items() if k != "contract"},
        }
        validate_message("classifier_response", body)
        return _ok(body)

    def handle_job(self, job_id: str) -> tuple[int, dict[str, Any]]:
        doc = self.registry.get_wire(job_id)
        if doc is None:
            return _err(404, f"unknown job {job_id}", False)
        validate_message("job_response", doc)
        return _ok(doc)

    def handle_health(self) -> tuple[int, dict[str, Any]]:
        body = self.health_doc()
        validate_message("health_response", body)
        return _ok(body)


def create_app(runtime: WorkerRuntime) -> FastAPI:
    """Wire the runtime's handlers into a FastAPI application."""
    app = FastAPI(title="dtgen-worker", docs_url=None, redoc_url=None, openapi_url=None)

    @app.middleware("http")
    async def contract_header(request: Request, call_next: Callable) -> Response:
        response = await call_next(request)
        response.headers[CONTRACT_HEADER] = str(CONTRACT_VERSION)
        return response

    def respond(status: int, body: dict[str, Any]) -> JSONResponse:
        return JSONResponse(content=body, status_code=status)

    async def dispatch_post(
        request: Request, handler: Callable[[dict[str, Any]], tuple[int, dict[str, Any]]]
    ) -> JSONResponse:
        header = request.headers.get(CONTRACT_HEADER)
        if header is not None and header != str(CONTRACT_VERSION):
            return respond(*_err(400, f"unsupported contract version {header!r}", False))
        try:
            payload = await request.json()
        except Exception:
            return respond(*_err(400, "request body is not JSON", False))
        if not isinstance(payload, dict):
            return respond(*_err(400, "request body must be a JSON object", False))
        try:
            status, body = await run_in_threadpool(handler, payload)
        except Exception as exc:
            logger.exception("handler failure")
            status, body = _err(500, f"internal error: {exc}", True)
        return respond(status, body)

    @app.post("/v1/generate")
    async def generate(request: Request) -> JSONResponse:
        return await dispatch_post(request, runtime.handle_generate)

    @app.post("/v1/embed")
    async def embed(request: Request) -> JSONResponse:
        return await dispatch_post(request, runtime.handle_embed)

    @app.post("/v1/finetune")
    async def finetune(request: Request) -> JSONResponse:
        return await dispatch_post(request, runtime.handle_finetune)

    @app.post("/v1/train-classifier")
    async def train_classifier(request: Request) -> JSONResponse:
        return await dispatch_post(request, runtime.handle_classifier)

    @app.get("/v1/jobs/{job_id}")
    async def job_status(job_id: str) -> JSONResponse:
        return respond(*runtime.handle_job(job_id))

    @app.get("/v1/health")
    async def health() -> JSONResponse:
        return respond(*runtime.handle_health())

    @app.api_route("/{rest:path}", methods=["GET", "POST", "PUT", "DELETE", "PATCH"])
    async def fallback(request: Request, rest: str) -> JSONResponse:
        return respond(*_err(404, f"no route {request.method} /{rest}", False))

    return app
