"""Client-side contract for generation and embedding services.

The gateway speaks HTTP with JSON bodies, one logical request per call:

- ``POST /v1/generate``   one image from (prompt, seed, size, steps, adapter)
- ``POST /v1/embed``      one embedding from text or an image payload
- ``POST /v1/finetune``   submit an adapter training job
- ``POST /v1/train-classifier``  submit a classifier training job
- ``GET  /v1/jobs/{id}``  poll job status
- ``GET  /v1/health``     service and contract probe

Every message carries ``"contract": 1`` (also sent as the
``x-dtgen-contract`` header) and is validated against the JSON Schemas in
``SCHEMAS``, which are the single source of truth for both this client and
any server implementation.  Image payloads ride inline as base64 below
``INLINE_LIMIT_BYTES`` and as content-addressed references above it.

Batch semantics: ``generate_batch`` and ``embed_batch`` fan requests out
over a bounded thread pool (``max_in_flight``), retry transient failures
with exponential backoff, and report per-request failures without aborting
the batch.  Results are keyed by ``request_id``; resubmitting a request_id
returns the cached result (idempotency).
"""

from __future__ import annotations

import base64
import hashlib
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import jsonschema
import requests

logger = logging.getLogger(__name__)

CONTRACT_VERSION = 1
CONTRACT_HEADER = "x-dtgen-contract"
INLINE_LIMIT_BYTES = 1 << 20
GENERATE_TIMEOUT_S = 120.0
EMBED_TIMEOUT_S = 30.0

JOB_STATUSES = ("queued", "running", "done", "failed")


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Network-level failure (connect, timeout); retryable."""


class ContractError(GatewayError):
    """Message failed schema validation or integrity checks; not retryable."""


class BackendError(GatewayError):
    """The backend answered with an error payload."""

    def __init__(self, message: str, retryable: bool):
        super().__init__(message)
        self.retryable = retryable


# --- wire schemas -----------------------------------------------------------

_CONTRACT = {"const": CONTRACT_VERSION}
_HEX64 = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
_NON_EMPTY = {"type": "string", "minLength": 1}
_VECTOR = {"type": "array", "items": {"type": "number"}, "minItems": 1}

SCHEMAS: dict[str, dict[str, Any]] = {
    "generate_request": {
        "type": "object",
        "required": ["contract", "request_id", "prompt", "seed", "width", "height", "steps"],
        "properties": {
            "contract": _CONTRACT,
            "request_id": _NON_EMPTY,
            "prompt": _NON_EMPTY,
            "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
            "width": {"type": "integer", "minimum": 1},
            "height": {"type": "integer", "minimum": 1},
            "steps": {"type": "integer", "minimum": 1},
            "adapter_id": {"type": ["string", "null"]},
        },
        "additionalProperties": False,
    },
    "generate_response": {
        "type": "object",
        "required": ["contract", "request_id", "content_hash", "model_id", "timing_s"],
        "properties": {
            "contract": _CONTRACT,
            "request_id": _NON_EMPTY,
            "image_b64": {"type": "string"},
            "image_ref": {"type": "string"},
            "content_hash": _HEX64,
            "model_id": _NON_EMPTY,
            "adapter_id": {"type": ["string", "null"]},
            "timing_s": {"type": "number", "minimum": 0},
        },
        "oneOf": [{"required": ["image_b64"]}, {"required": ["image_ref"]}],
        "additionalProperties": False,
    },
    "embed_request": {
        "type": "object",
        "required": ["contract", "request_id", "modality"],
        "properties": {
            "contract": _CONTRACT,
            "request_id": _NON_EMPTY,
            "modality": {"enum": ["text", "image"]},
            "text": {"type": "string"},
            "image_b64": {"type": "string"},
            "image_ref": {"type": "string"},
        },
        "allOf": [
            {
                "if": {"properties": {"modality": {"const": "text"}}},
                "then": {"required": ["text"]},
            },
            {
                "if": {"properties": {"modality": {"const": "image"}}},
                "then": {"oneOf": [{"required": ["image_b64"]}, {"required": ["image_ref"]}]},
            },
        ],
        "additionalProperties": False,
    },
    "embed_response": {
        "type": "object",
        "required": ["contract", "request_id", "vector", "model_id"],
        "properties": {
            "contract": _CONTRACT,
            "request_id": _NON_EMPTY,
            "vector": _VECTOR,
            "model_id": _NON_EMPTY,
        },
        "additionalProperties": False,
    },
    "finetune_request": {
        "type": "object",
        "required": ["contract", "manifest_ref", "rank", "steps", "lam", "mu"],
        "properties": {
            "contract": _CONTRACT,
            "manifest_ref": _NON_EMPTY,
            "rank": {"type": "integer", "minimum": 1},
            "steps": {"type": "integer", "minimum": 1},
            "lam": {"type": "number", "minimum": 0},
            "mu": {"type": "number", "minimum": 0},
            "seed": {"type": "integer", "minimum": 0},
            "base_model": {"type": "string"},
        },
        "additionalProperties": False,
    },
    "finetune_response": {
        "type": "object",
        "required": ["contract", "job_id", "status", "config_echo"],
        "properties": {
            "contract": _CONTRACT,
            "job_id": _NON_EMPTY,
            "status": {"enum": list(JOB_STATUSES)},
            "adapter_id": {"type": ["string", "null"]},
            "config_echo": {"type": "object"},
        },
        "additionalProperties": False,
    },
    "classifier_request": {
        "type": "object",
        "required": ["contract", "bundle_ref", "task"],
        "properties": {
            "contract": _CONTRACT,
            "bundle_ref": _NON_EMPTY,
            "task": {"enum": ["binary", "three-class"]},
            "epochs": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer", "minimum": 0},
            "eval_ref": {"type": "string"},
        },
        "additionalProperties": False,
    },
    "classifier_response": {
        "type": "object",
        "required": ["contract", "job_id", "status"],
        "properties": {
            "contract": _CONTRACT,
            "job_id": _NON_EMPTY,
            "status": {"enum": list(JOB_STATUSES)},
            "config_echo": {"type": "object"},
        },
        "additionalProperties": False,
    },
    "job_response": {
        "type": "object",
        "required": ["contract", "job_id", "status"],
        "properties": {
            "contract": _CONTRACT,
            "job_id": _NON_EMPTY,
            "status": {"enum": list(JOB_STATUSES)},
            "adapter_id": {"type": ["string", "null"]},
            "artifact_ref": {"type": ["string", "null"]},
            "predictions_ref": {"type": ["string", "null"]},
            "train_accuracy": {"type": ["number", "null"]},
            "error": {"type": ["string", "null"]},
        },
        "additionalProperties": False,
    },
    "health_response": {
        "type": "object",
        "required": ["contract", "status", "models"],
        "properties": {
            "contract": _CONTRACT,
            "status": {"enum": ["ok", "degraded"]},
            "models": {"type": "object"},
        },
        "additionalProperties": False,
    },
    "error_response": {
        "type": "object",
        "required": ["contract", "error"],
        "properties": {
            "contract": _CONTRACT,
            "error": {
                "type": "object",
                "required": ["message", "retryable"],
                "properties": {
                    "message": {"type": "string"},
                    "retryable": {"type": "boolean"},
                },
                "additionalProperties": False,
            },
        },
        "additionalProperties": False,
    },
}

_VALIDATORS = {
    kind: jsonschema.Draft202012Validator(schema) for kind, schema in SCHEMAS.items()
}


def validate_message(kind: str, payload: dict[str, Any]) -> None:
    """Validate ``payload`` against the named schema; raise ContractError."""
    validator = _VALIDATORS.get(kind)
    if validator is None:
        raise ContractError(f"unknown message kind {kind!r}")
    errors = sorted(validator.iter_errors(payload), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.absolute_path) or "<root>"
        raise ContractError(f"{kind} invalid at {where}: {first.message}")


# --- request/result types ---------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff: base delay, multiplier, attempt cap."""

    max_attempts: int = 5
    base_delay_s: float = 1.0
    factor: float = 2.0

    def delay(self, attempt: int) -> float:
        return self.base_delay_s * self.factor ** (attempt - 1)


@dataclass(frozen=True)
class GatewayLimits:
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    generate_timeout_s: float = GENERATE_TIMEOUT_S
    embed_timeout_s: float = EMBED_TIMEOUT_S

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise GatewayError(f"max_in_flight must be >= 1, got {self.max_in_flight}")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    seed: int
    request_id: str
    width: int = 64
    height: int = 64
    steps: int = 4
    adapter_id: str | None = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise GatewayError("prompt must be non-empty")
        if not self.request_id:
            raise GatewayError("request_id must be non-empty")
        if self.width < 1 or self.height < 1:
            raise GatewayError(f"image size must be positive, got {self.width}x{self.height}")
        if self.steps < 1:
            raise GatewayError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.seed < 2**63:
            raise GatewayError(f"seed must fit in 63 bits, got {self.seed}")

    def to_wire(self) -> dict[str, Any]:
        return {
            "contract": CONTRACT_VERSION,
            "request_id": self.request_id,
            "prompt": self.prompt,
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "steps": self.steps,
            "adapter_id": self.adapter_id,
        }


@dataclass(frozen=True)
class GenerationResult:
    request_id: str
    image_bytes: bytes | None
    image_ref: str | None
    content_hash: str
    model_id: str
    adapter_id: str | None
    timing_s: float
    attempts: int = 1


@dataclass(frozen=True)
class EmbeddingRequest:
    request_id: str
    modality: str
    text: str | None = None
    image_bytes: bytes | None = None
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.request_id:
            raise GatewayError("request_id must be non-empty")
        if self.modality == "text":
            if self.text is None:
                raise GatewayError("text modality requires text")
        elif self.modality == "image":
            if (self.image_bytes is None) == (self.image_ref is None):
                raise GatewayError("image modality requires exactly one of bytes or ref")
        else:
            raise GatewayError(f"modality must be 'text' or 'image', got {self.modality!r}")

    def to_wire(self) -> dict[str, Any]:
        msg: dict[str, Any] = {
            "contract": CONTRACT_VERSION,
            "request_id": self.request_id,
            "modality": self.modality,
        }
        if self.modality == "text":
            msg["text"] = self.text
        elif self.image_bytes is not None:
            if len(self.image_bytes) > INLINE_LIMIT_BYTES:
                raise GatewayError(
                    f"inline image of {len(self.image_bytes)} bytes exceeds "
                    f"{INLINE_LIMIT_BYTES}; pass image_ref instead"
                )
            msg["image_b64"] = base64.b64encode(self.image_bytes).decode("ascii")
        else:
            msg["image_ref"] = self.image_ref
        return msg


@dataclass(frozen=True)
class EmbeddingResult:
    request_id: str
    vector: tuple[float, ...]
    model_id: str
    attempts: int = 1


@dataclass(frozen=True)
class RequestFailure:
    request_id: str
    message: str
    attempts: int
    retryable: bool


@dataclass(frozen=True)
class BatchOutcome:
    """Per-request results and failures; together they cover the batch."""

    results: tuple[Any, ...]
    failures: tuple[RequestFailure, ...]

    @property
    def ok(self) -> bool:
        return not self.failures


@dataclass(frozen=True)
class FinetuneJob:
    manifest_ref: str
    rank: int = 8
    steps: int = 1000
    lam: float = 0.0
    mu: float = 0.0
    seed: int | None = None
    base_model: str | None = None

    def to_wire(self) -> dict[str, Any]:
        msg: dict[str, Any] = {
            "contract": CONTRACT_VERSION,
            "manifest_ref": self.manifest_ref,
            "rank": self.rank,
            "steps": self.steps,
            "lam": self.lam,
            "mu": self.mu,
        }
        if self.seed is not None:
            msg["seed"] = self.seed
        if self.base_model is not None:
            msg["base_model"] = self.base_model
        return msg


@dataclass(frozen=True)
class ClassifierJob:
    bundle_ref: str
    task: str
    epochs: int | None = None
    seed: int | None = None
    eval_ref: str | None = None

    def to_wire(self) -> dict[str, Any]:
        msg: dict[str, Any] = {
            "contract": CONTRACT_VERSION,
            "bundle_ref": self.bundle_ref,
            "task": self.task,
        }
        if self.epochs is not None:
            msg["epochs"] = self.epochs
        if self.seed is not None:
            msg["seed"] = self.seed
        if self.eval_ref is not None:
            msg["eval_ref"] = self.eval_ref
        return msg


@dataclass(frozen=True)
class JobStatus:
    job_id: str
    status: str
    adapter_id: str | None = None
    artifact_ref: str | None = None
    predictions_ref: str | None = None
    train_accuracy: float | None = None
    error: str | None = None


# --- transports --------------------------------------------------------------


class Transport(Protocol):
    """Minimal HTTP-shaped interface: JSON in, (status, JSON) out."""

    def post(self, path: str, payload: dict[str, Any], timeout_s: float) -> tuple[int, dict[str, Any]]: ...

    def get(self, path: str, timeout_s: float) -> tuple[int, dict[str, Any]]: ...


class HttpTransport:
    """Real HTTP transport over ``requests`` with the contract header set."""

    def __init__(self, base_url: str, token: str | None = None):
        self.base_url = base_url.rstrip("/")
        self._session = requests.Session()
        self._session.headers[CONTRACT_HEADER] = str(CONTRACT_VERSION)
        if token:
            self._session.headers["authorization"] = f"Bearer {token}"

    def post(self, path: str, payload: dict[str, Any], timeout_s: float) -> tuple[int, dict[str, Any]]:
        try:
            resp = self._session.post(self.base_url + path, json=payload, timeout=timeout_s)
            return resp.status_code, resp.json()
        except requests.RequestException as exc:
            raise TransportError(f"POST {path}: {exc}") from exc
        except ValueError as exc:
            raise ContractError(f"POST {path}: response is not JSON: {exc}") from exc

    def get(self, path: str, timeout_s: float) -> tuple[int, dict[str, Any]]:
        try:
            resp = self._session.get(self.base_url + path, timeout=timeout_s)
            return resp.status_code, resp.json()
        except requests.RequestException as exc:
            raise TransportError(f"GET {path}: {exc}") from exc
        except ValueError as exc:
            raise ContractError(f"GET {path}: response is not JSON: {exc}") from exc


class LocalTransport:
    """In-process transport delegating to a backend with a ``handle`` method.

    The backend sees exactly the wire payloads an HTTP server would, so mock
    runs exercise the full contract surface.
    """

    def __init__(self, backend: Any):
        self._backend = backend

    def post(self, path: str, payload: dict[str, Any], timeout_s: float) -> tuple[int, dict[str, Any]]:
        return self._backend.handle("POST", path, payload)

    def get(self, path: str, timeout_s: float) -> tuple[int, dict[str, Any]]:
        return self._backend.handle("GET", path, None)


# --- client -------------------------------------------------------------------


def _error_from_body(status: int, body: dict[str, Any]) -> BackendError:
    try:
        validate_message("error_response", body)
        message = body["error"]["message"]
        retryable = bool(body["error"]["retryable"])
    except (ContractError, KeyError, TypeError):
        message = f"malformed error body (HTTP {status})"
        retryable = status >= 500
    return BackendError(message, retryable or status >= 500)


class GatewayClient:
    """Batched, retrying, idempotent client over a Transport."""

    def __init__(
        self,
        transport: Transport,
        limits: GatewayLimits | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport
        self.limits = limits or GatewayLimits()
        self._sleeper = sleeper
        self._cache: dict[str, Any] = {}
        self._cache_lock = threading.Lock()

    # -- low-level call with retry

    def _post_with_retry(
        self, path: str, payload: dict[str, Any], timeout_s: float
    ) -> tuple[dict[str, Any], int]:
        """Returns (response body, attempts); raises BackendError/ContractError."""
        policy = self.limits.retry
        attempt = 0
        while True:
            attempt += 1
            try:
                status, body = self.transport.post(path, payload, timeout_s)
            except TransportError as exc:
                if attempt >= policy.max_attempts:
                    final = BackendError(f"{exc} (after {attempt} attempts)", True)
                    final.attempts = attempt
                    raise final from exc
                self._sleeper(policy.delay(attempt))
                continue
            if status == 200:
                return body, attempt
            err = _error_from_body(status, body)
            if not err.retryable or attempt >= policy.max_attempts:
                final = BackendError(f"{err} (after {attempt} attempts)", err.retryable)
                final.attempts = attempt
                raise final
            self._sleeper(policy.delay(attempt))

    def _run_batch(
        self,
        requests_: Sequence[Any],
        runner: Callable[[Any], Any],
    ) -> BatchOutcome:
        if not requests_:
            raise GatewayError("empty batch")
        ids = [r.request_id for r in requests_]
        unique: dict[str, Any] = {}
        for req in requests_:
            unique.setdefault(req.request_id, req)
        if len(unique) < len(ids):
            logger.info("batch contains %d duplicate request ids", len(ids) - len(unique))

        def run_one(req: Any) -> tuple[str, Any | None, RequestFailure | None]:
            with self._cache_lock:
                cached = self._cache.get(req.request_id)
            if cached is not None:
                return req.request_id, cached, None
            try:
                result = runner(req)
            except (BackendError, ContractError) as exc:
                attempts = getattr(exc, "attempts", 1)
                retryable = getattr(exc, "retryable", False)
                return req.request_id, None, RequestFailure(
                    req.request_id, str(exc), attempts, retryable
                )
            with self._cache_lock:
                self._cache[req.request_id] = result
            return req.request_id, result, None

        results: list[Any] = []
        failures: list[RequestFailure] = []
        with ThreadPoolExecutor(max_workers=self.limits.max_in_flight) as pool:
            for _, result, failure in pool.map(run_one, unique.values()):
                if failure is not None:
                    failures.append(failure)
                else:
                    results.append(result)
        return BatchOutcome(tuple(results), tuple(failures))

    # -- operations

    def generate_batch(self, requests_: Sequence[GenerationRequest]) -> BatchOutcome:
        """One image per unique request_id; failures reported, not raised."""

        def run(req: GenerationRequest) -> GenerationResult:
            payload = req.to_wire()
            validate_message("generate_request", payload)
            body, attempts = self._post_with_retry(
                "/v1/generate", payload, self.limits.generate_timeout_s
            )
            validate_message("generate_response", body)
            if body["request_id"] != req.request_id:
                raise ContractError(
                    f"response request_id {body['request_id']} != {req.request_id}"
                )
            image_bytes: bytes | None = None
            if "image_b64" in body:
                image_bytes = base64.b64decode(body["image_b64"])
                digest = hashlib.sha256(image_bytes).hexdigest()
                if digest != body["content_hash"]:
                    raise ContractError(
                        f"content_hash mismatch for {req.request_id}: "
                        f"{digest} != {body['content_hash']}"
                    )
            return GenerationResult(
                request_id=body["request_id"],
                image_bytes=image_bytes,
                image_ref=body.get("image_ref"),
                content_hash=body["content_hash"],
                model_id=body["model_id"],
                adapter_id=body.get("adapter_id"),
                timing_s=float(body["timing_s"]),
                attempts=attempts,
            )

        return self._run_batch(requests_, run)

    def embed_batch(self, requests_: Sequence[EmbeddingRequest]) -> BatchOutcome:
        """One vector per unique request_id; text and image requests may mix."""

        def run(req: EmbeddingRequest) -> EmbeddingResult:
            payload = req.to_wire()
            validate_message("embed_request", payload)
            body, attempts = self._post_with_retry(
                "/v1/embed", payload, self.limits.embed_timeout_s
            )
            validate_message("embed_response", body)
            if body["request_id"] != req.request_id:
                raise ContractError(
                    f"response request_id {body['request_id']} != {req.request_id}"
                )
            return EmbeddingResult(
                request_id=body["request_id"],
                vector=tuple(float(x) for x in body["vector"]),
                model_id=body["model_id"],
                attempts=attempts,
            )

        return self._run_batch(requests_, run)

    def submit_finetune(self, job: FinetuneJob) -> JobStatus:
        payload = job.to_wire()
        validate_message("finetune_request", payload)
        body, _ = self._post_with_retry("/v1/finetune", payload, self.limits.generate_timeout_s)
        validate_message("finetune_response", body)
        return JobStatus(
            job_id=body["job_id"],
            status=body["status"],
            adapter_id=body.get("adapter_id"),
        )

    def submit_classifier(self, job: ClassifierJob) -> JobStatus:
        payload = job.to_wire()
        validate_message("classifier_request", payload)
        body, _ = self._post_with_retry(
            "/v1/train-classifier", payload, self.limits.generate_timeout_s
        )
        validate_message("classifier_response", body)
        return JobStatus(job_id=body["job_id"], status=body["status"])

    def poll_job(self, job_id: str) -> JobStatus:
        status, body = self.transport.get(f"/v1/jobs/{job_id}", self.limits.embed_timeout_s)
        if status != 200:
            raise _error_from_body(status, body)
        validate_message("job_response", body)
        return JobStatus(
            job_id=body["job_id"],
            status=body["status"],
            adapter_id=body.get("adapter_id"),
            artifact_ref=body.get("artifact_ref"),
            predictions_ref=body.get("predictions_ref"),
            train_accuracy=body.get("train_accuracy"),
            error=body.get("error"),
        )

    def wait_for_job(self, job_id: str, poll_interval_s: float = 0.05, timeout_s: float = 600.0) -> JobStatus:
        """Poll until the job reaches a terminal status."""
        deadline = time.monotonic() + timeout_s
        while True:
            state = self.poll_job(job_id)
            if state.status in ("done", "failed"):
                return state
            if time.monotonic() > deadline:
                raise GatewayError(f"job {job_id} did not finish within {timeout_s}s")
            self._sleeper(poll_interval_s)

    def health(self) -> dict[str, Any]:
        status, body = self.transport.get("/v1/health", self.limits.embed_timeout_s)
        if status != 200:
            raise _error_from_body(status, body)
        validate_message("health_response", body)
        return body
