"""Deterministic in-process mock services for desk-scale pipeline runs.

The mock backend implements the same wire contract as a real serving stack
(see :mod:`dtgen.backend_gateway`), validates every incoming payload against
the shared schemas, and produces outputs that are pure functions of request
content, so two runs with the same seeds yield byte-identical artifacts.

Generation embeds a recoverable fingerprint: row 0 of the image carries the
SHA-256 digest of the prompt text in the red channel of its first 32 pixels.
The mock embedder reads that fingerprint back, reconstructs the prompt's
text direction, and returns an image vector whose cosine against the text
vector is approximately Normal(0.90, 0.04) across seeds.  Filtered mock runs
therefore show realistic retention behavior without any model inference.

Fault injection: ``fail_transient`` maps a request_id to a number of 503
responses served before success; ids in ``fail_permanent`` always get a 400.
Instrumentation records per-path call counts and the peak number of
concurrently served requests, which bounds checking tests rely on.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import math
import threading
from pathlib import Path
from typing import Any

import numpy as np

from .backend_gateway import CONTRACT_VERSION, ContractError, validate_message
from .imaging import decode_image, encode_png
from .seeding import hash_bytes, hash_normals, stable_hex

logger = logging.getLogger(__name__)

GENERATOR_MODEL_ID = "mock-diffusion-v1"
EMBEDDER_MODEL_ID = "mock-embed-v1"
EMBED_DIM = 64
DIGEST_PIXELS = 32
IMAGE_VECTOR_SCALE = 1.8
COSINE_CENTER = 0.90
COSINE_SPREAD = 0.04


def text_direction(prompt_digest_hex: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit direction deterministically derived from a prompt digest."""
    vec = np.array(hash_normals(dim, "mock-text-dir", prompt_digest_hex))
    return vec / np.linalg.norm(vec)


def mock_text_vector(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit text embedding, a pure function of the text."""
    digest_hex = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return text_direction(digest_hex, dim)


def mock_image_pixels(
    prompt: str, seed: int, width: int, height: int, adapter_id: str | None
) -> np.ndarray:
    """Deterministic RGB pixels for (prompt, seed, size, adapter).

    The first DIGEST_PIXELS pixels of row 0 carry sha256(prompt) in the red
    channel so the mock embedder can recover the prompt identity from pixels
    alone, exactly as a real cross-modal embedder recovers semantics.
    """
    stream = hash_bytes(
        height * width * 3, "mock-image", prompt, seed, adapter_id or "-", width, height
    )
    pixels = np.frombuffer(stream, dtype=np.uint8).reshape(height, width, 3).copy()
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    n = min(DIGEST_PIXELS, width)
    pixels[0, :n, 0] = np.frombuffer(digest[:n], dtype=np.uint8)
    return pixels


def mock_image_vector(image_bytes: bytes, dim: int = EMBED_DIM) -> np.ndarray:
    """Image embedding whose cosine against the prompt's text vector is
    approximately Normal(0.90, 0.04), deterministic per image content."""
    pixels = decode_image(image_bytes)
    n = min(DIGEST_PIXELS, pixels.shape[1])
    digest_hex = bytes(pixels[0, :n, 0].tolist()).hex()
    t_hat = text_direction(digest_hex, dim)

    content_hex = hashlib.sha256(image_bytes).hexdigest()
    z = hash_normals(1, "mock-image-z", content_hex)[0]
    c = max(-0.999, min(0.999, COSINE_CENTER + COSINE_SPREAD * z))
    noise = np.array(hash_normals(dim, "mock-image-noise", content_hex))
    noise -= float(noise @ t_hat) * t_hat
    n_hat = noise / np.linalg.norm(noise)
    return IMAGE_VECTOR_SCALE * (c * t_hat + math.sqrt(1.0 - c * c) * n_hat)


def _ok(body: dict[str, Any]) -> tuple[int, dict[str, Any]]:
    return 200, body


def _err(status: int, message: str, retryable: bool) -> tuple[int, dict[str, Any]]:
    return status, {
        "contract": CONTRACT_VERSION,
        "error": {"message": message, "retryable": retryable},
    }


class MockBackend:
    """In-process server for the full gateway contract.

    Use through :class:`dtgen.backend_gateway.LocalTransport`.  Thread-safe;
    all responses are deterministic functions of the request payload.
    """

    def __init__(
        self,
        blob_root: str | Path | None = None,
        fail_transient: dict[str, int] | None = None,
        fail_permanent: set[str] | None = None,
        embed_dim: int = EMBED_DIM,
    ):
        self.blob_root = Path(blob_root) if blob_root else None
        self.embed_dim = embed_dim
        self._fail_transient = dict(fail_transient or {})
        self._fail_permanent = set(fail_permanent or ())
        self._jobs: dict[str, dict[str, Any]] = {}
        self._lock = threading.Lock()
        self.calls: dict[str, int] = {}
        self.seen_request_ids: dict[str, int] = {}
        self._in_flight = 0
        self.peak_in_flight = 0

    # -- instrumentation

    def _enter(self, path: str) -> None:
        with self._lock:
            self.calls[path] = self.calls.get(path, 0) + 1
            self._in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)

    def _exit(self) -> None:
        with self._lock:
            self._in_flight -= 1

    def _fault_for(self, request_id: str) -> tuple[int, dict[str, Any]] | None:
        with self._lock:
            self.seen_request_ids[request_id] = self.seen_request_ids.get(request_id, 0) + 1
            if request_id in self._fail_permanent:
                return _err(400, f"scripted permanent failure for {request_id}", False)
            remaining = self._fail_transient.get(request_id, 0)
            if remaining > 0:
                self._fail_transient[request_id] = remaining - 1
                return _err(503, f"scripted transient failure for {request_id}", True)
        return None

    # -- dispatch

    def handle(self, method: str, path: str, payload: dict[str, Any] | None) -> tuple[int, dict[str, Any]]:
        self._enter(path)
        try:
            if method == "POST" and path == "/v1/generate":
                return self._generate(payload or {})
            if method == "POST" and path == "/v1/embed":
                return self._embed(payload or {})
            if method == "POST" and path == "/v1/finetune":
                return self._finetune(payload or {})
            if method == "POST" and path == "/v1/train-classifier":
                return self._classifier(payload or {})
            if method == "GET" and path.startswith("/v1/jobs/"):
                return self._job(path.removeprefix("/v1/jobs/"))
            if method == "GET" and path == "/v1/health":
                return self._health()
            return _err(404, f"no route {method} {path}", False)
        except ContractError as exc:
            return _err(400, str(exc), False)
        except Exception as exc:  # pragma: no cover - defensive
            logger.exception("mock backend failure")
            return _err(500, f"internal error: {exc}", True)
        finally:
            self._exit()

    # -- endpoints

    def _generate(self, payload: dict[str, Any]) -> tuple[int, dict[str, Any]]:
        validate_message("generate_request", payload)
        fault = self._fault_for(payload["request_id"])
        if fault is not None:
            return fault
        pixels = mock_image_pixels(
            payload["prompt"],
            payload["seed"],
            payload["width"],
            payload["height"],
            payload.get("adapter_id"),
        )
        png = encode_png(pixels)
        content_hash = hashlib.sha256(png).hexdigest()
        body: dict[str, Any] = {
            "contract": CONTRACT_VERSION,
            "request_id": payload["request_id"],
            "content_hash": content_hash,
            "model_id": GENERATOR_MODEL_ID,
            "adapter_id": payload.get("adapter_id"),
            "timing_s": 0.0,
        }
        if len(png) <= (1 << 20) or self.blob_root is None:
            body["image_b64"] = base64.b64encode(png).decode("ascii")
        else:
            ref = f"spool/{content_hash}.png"
            target = self.blob_root / ref
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(png)
            body["image_ref"] = ref
        return _ok(body)

    def _embed(self, payload: dict[str, Any]) -> tuple[int, dict[str, Any]]:
        validate_message("embed_request", payload)
        fault = self._fault_for(payload["request_id"])
        if fault is not None:
            return fault
        if payload["modality"] == "text":
            vector = mock_text_vector(payload["text"], self.embed_dim)
        else:
            if "image_b64" in payload:
                image = base64.b64decode(payload["image_b64"])
            else:
                if self.blob_root is None:
                    return _err(400, "image_ref requires the mock to have a blob root", False)
                target = self.blob_root / payload["image_ref"]
                if not target.is_file():
                    return _err(400, f"unknown image_ref {payload['image_ref']}", False)
                image = target.read_bytes()
            try:
                vector = mock_image_vector(image, self.embed_dim)
            except ValueError as exc:
                return _err(400, f"undecodable image: {exc}", False)
        return _ok(
            {
                "contract": CONTRACT_VERSION,
                "request_id": payload["request_id"],
                "vector": [float(x) for x in vector],
                "model_id": EMBEDDER_MODEL_ID,
            }
        )

    def _finetune(self, payload: dict[str, Any]) -> tuple[int, dict[str, Any]]:
        validate_message("finetune_request", payload)
        echo = {k: v for k, v in payload.items() if k != "contract"}
        job_id = "ft-" + stable_hex(
            "mock-finetune",
            payload["manifest_ref"],
            payload["rank"],
            payload["steps"],
            payload["lam"],
            payload["mu"],
            payload.get("seed", "-"),
        )
        adapter_id = "adapter-" + job_id.removeprefix("ft-")[:12]
        with self._lock:
            self._jobs[job_id] = {
                "contract": CONTRACT_VERSION,
                "job_id": job_id,
                "status": "done",
                "adapter_id": adapter_id,
                "artifact_ref": None,
                "error": None,
            }
        return _ok(
            {
                "contract": CONTRACT_VERSION,
                "job_id": job_id,
                "status": "done",
                "adapter_id": adapter_id,
                "config_echo": echo,
            }
        )

    def _classifier(self, payload: dict[str, Any]) -> tuple[int, dict[str, Any]]:
        validate_message("classifier_request", payload)
        echo = {k: v for k, v in payload.items() if k != "contract"}
        job_id = "cls-" + stable_hex(
            "mock-classifier", payload["bundle_ref"], payload["task"], payload.get("seed", "-")
        )
        with self._lock:
            self._jobs[job_id] = {
                "contract": CONTRACT_VERSION,
                "job_id": job_id,
                "status": "done",
                "train_accuracy": 1.0,
                "predictions_ref": None,
                "error": None,
            }
        return _ok(
            {
                "contract": CONTRACT_VERSION,
                "job_id": job_id,
                "status": "done",
                "config_echo": echo,
            }
        )

    def _job(self, job_id: str) -> tuple[int, dict[str, Any]]:
        with self._lock:
            body = self._jobs.get(job_id)
        if body is None:
            return _err(404, f"unknown job {job_id}", False)
        return _ok(dict(body))

    def _health(self) -> tuple[int, dict[str, Any]]:
        return _ok(
            {
                "contract": CONTRACT_VERSION,
                "status": "ok",
                "models": {
                    "generator": GENERATOR_MODEL_ID,
                    "embedder": EMBEDDER_MODEL_ID,
                },
            }
        )
