"""Wire-contract conformance: every worker response validates against the
shared gateway schemas, generation and embedding are deterministic under
fixed seeds, and error paths use the contract's error shape."""

from __future__ import annotations

import base64
import hashlib
import math
import time

import pytest

from dtgen import backend_gateway as gw
from dtgen.backend_gateway import CONTRACT_HEADER, CONTRACT_VERSION, validate_message
from dtgen.imaging import decode_image

from dtgen_worker.config import get_profile
from dtgen_worker.service import WorkerRuntime, create_app

from workerkit import InProcessTransport, build_bundle, build_store, tinted_png


def generate_payload(**overrides):
    payload = {
        "contract": CONTRACT_VERSION,
        "request_id": "req-1",
        "prompt": "a photo of a clean road bicycle",
        "seed": 7,
        "width": 48,
        "height": 48,
        "steps": 3,
    }
    payload.update(overrides)
    return payload


def poll_until_done(api, job_id: str, timeout_s: float = 120.0) -> dict:
    deadline = time.monotonic() + timeout_s
    while True:
        resp = api.get(f"/v1/jobs/{job_id}")
        assert resp.status_code == 200
        doc = resp.json()
        validate_message("job_response", doc)
        if doc["status"] in ("done", "failed"):
            return doc
        assert time.monotonic() < deadline, f"job {job_id} stuck in {doc['status']}"
        time.sleep(0.02)


def test_health_ok_and_contract_header(api):
    resp = api.get("/v1/health")
    assert resp.status_code == 200
    doc = resp.json()
    validate_message("health_response", doc)
    assert doc["status"] == "ok"
    assert doc["models"]["generator"] == "tiny-denoiser-v1"
    assert resp.headers[CONTRACT_HEADER] == str(CONTRACT_VERSION)


def test_generate_valid_deterministic_and_hashed(api, tmp_path):
    first = api.post("/v1/generate", json=generate_payload())
    second = api.post("/v1/generate", json=generate_payload())
    assert first.status_code == 200 and second.status_code == 200
    body = first.json()
    validate_message("generate_response", body)
    png = base64.b64decode(body["image_b64"])
    assert hashlib.sha256(png).hexdigest() == body["content_hash"]
    pixels = decode_image(png)
    assert pixels.shape == (48, 48, 3)
    assert body["content_hash"] == second.json()["content_hash"]
    assert base64.b64decode(second.json()["image_b64"]) == png

    # a fresh runtime rebuilds the same weights, so bytes match across processes
    other = WorkerRuntime(get_profile("tiny"), tmp_path / "a2", tmp_path / "d2")
    status, doc = other.handle_generate(generate_payload())
    assert status == 200
    assert doc["content_hash"] == body["content_hash"]

    different = api.post("/v1/generate", json=generate_payload(seed=8)).json()
    assert different["content_hash"] != body["content_hash"]


def test_generate_rejects_malformed_payloads(api):
    resp = api.post("/v1/generate", json={"contract": CONTRACT_VERSION})
    assert resp.status_code == 400
    body = resp.json()
    validate_message("error_response", body)
    assert body["error"]["retryable"] is False

    resp = api.post("/v1/generate", json=generate_payload(seed=-1))
    assert resp.status_code == 400
    validate_message("error_response", resp.json())

    resp = api.post("/v1/generate", json=generate_payload(extra_field=1))
    assert resp.status_code == 400

    resp = api.post(
        "/v1/generate", content=b"{not json", headers={"content-type": "application/json"}
    )
    assert resp.status_code == 400
    validate_message("error_response", resp.json())


def test_generate_unknown_adapter_rejected(api):
    resp = api.post("/v1/generate", json=generate_payload(adapter_id="adapter-missing"))
    assert resp.status_code == 400
    assert "adapter" in resp.json()["error"]["message"]


def test_contract_header_mismatch_rejected(api):
    resp = api.post(
        "/v1/generate", json=generate_payload(), headers={CONTRACT_HEADER: "2"}
    )
    assert resp.status_code == 400
    validate_message("error_response", resp.json())


def test_embed_text_deterministic_unit_norm(api):
    payload = {
        "contract": CONTRACT_VERSION,
        "request_id": "emb-1",
        "modality": "text",
        "text": "a heavily soiled mountain bike",
    }
    first = api.post("/v1/embed", json=payload)
    second = api.post("/v1/embed", json=payload)
    assert first.status_code == 200
    body = first.json()
    validate_message("embed_response", body)
    assert len(body["vector"]) == 64
    assert math.isclose(sum(x * x for x in body["vector"]), 1.0, rel_tol=1e-6)
    assert body["vector"] == second.json()["vector"]
    assert body["model_id"] == "tiny-embed-v1"


def test_embed_image_inline_and_by_ref(api, runtime):
    png = tinted_png(0, 0)
    inline = {
        "contract": CONTRACT_VERSION,
        "request_id": "emb-2",
        "modality": "image",
        "image_b64": base64.b64encode(png).decode("ascii"),
    }
    first = api.post("/v1/embed", json=inline)
    assert first.status_code == 200
    vector = first.json()["vector"]
    validate_message("embed_response", first.json())
    assert math.isclose(sum(x * x for x in vector), 1.0, rel_tol=1e-6)

    # same image via a data-root ref and via a worker-spooled ref
    (runtime.data_root / "imgs").mkdir(parents=True)
    (runtime.data_root / "imgs" / "x.png").write_bytes(png)
    spooled = runtime.spool_image(png, hashlib.sha256(png).hexdigest())
    for ref in ("imgs/x.png", spooled):
        resp = api.post(
            "/v1/embed",
            json={
                "contract": CONTRACT_VERSION,
                "request_id": f"emb-{ref}",
                "modality": "image",
                "image_ref": ref,
            },
        )
        assert resp.status_code == 200, ref
        assert resp.json()["vector"] == vector


def test_embed_unknown_ref_rejected(api):
    resp = api.post(
        "/v1/embed",
        json={
            "contract": CONTRACT_VERSION,
            "request_id": "emb-3",
            "modality": "image",
            "image_ref": "nowhere/y.png",
        },
    )
    assert resp.status_code == 400
    validate_message("error_response", resp.json())


def test_unknown_routes_return_contract_errors(api):
    for method, path in (("GET", "/v1/nope"), ("POST", "/v1/health"), ("GET", "/")):
        resp = getattr(api, method.lower())(path)
        assert resp.status_code == 404, (method, path)
        validate_message("error_response", resp.json())


def test_unknown_job_returns_404(api):
    resp = api.get("/v1/jobs/ft-0000000000000000")
    assert resp.status_code == 404
    validate_message("error_response", resp.json())


def test_finetune_job_lifecycle(api, runtime):
    build_store(runtime.data_root / "store", per_class=3)
    payload = {
        "contract": CONTRACT_VERSION,
        "manifest_ref": "store/manifest.jsonl",
        "rank": 2,
        "steps": 4,
        "lam": 0.001,
        "mu": 0.001,
        "seed": 5,
    }
    resp = api.post("/v1/finetune", json=payload)
    assert resp.status_code == 200
    ack = resp.json()
    validate_message("finetune_response", ack)
    assert ack["config_echo"] == {k: v for k, v in payload.items() if k != "contract"}
    assert ack["adapter_id"].startswith("adapter-")

    doc = poll_until_done(api, ack["job_id"])
    assert doc["status"] == "done"
    assert doc["adapter_id"] == ack["adapter_id"]
    assert doc["artifact_ref"] == f"adapters/{ack['adapter_id']}"

    # resubmission of the same request reuses the finished job
    again = api.post("/v1/finetune", json=payload).json()
    assert again["job_id"] == ack["job_id"]
    assert again["status"] == "done"

    # the adapter is immediately usable for conditioned generation
    with_adapter = api.post(
        "/v1/generate", json=generate_payload(adapter_id=ack["adapter_id"])
    )
    assert with_adapter.status_code == 200
    validate_message("generate_response", with_adapter.json())
    base = api.post("/v1/generate", json=generate_payload())
    assert with_adapter.json()["content_hash"] != base.json()["content_hash"]


def test_finetune_missing_manifest_rejected(api):
    payload = {
        "contract": CONTRACT_VERSION,
        "manifest_ref": "missing/manifest.jsonl",
        "rank": 2,
        "steps": 2,
        "lam": 0.0,
        "mu": 0.0,
    }
    resp = api.post("/v1/finetune", json=payload)
    assert resp.status_code == 400
    validate_message("error_response", resp.json())


def test_finetune_full_scale_config_echo_and_failure_reason(api, runtime):
    # full-scale knobs are echoed verbatim; an empty manifest fails the job
    # with a diagnosable reason instead of hanging
    store_dir = runtime.data_root / "empty"
    from dtgen.dataset_store import DatasetStore

    DatasetStore(store_dir).initialize()
    payload = {
        "contract": CONTRACT_VERSION,
        "manifest_ref": "empty",
        "rank": 8,
        "steps": 1000,
        "lam": 0.01,
        "mu": 0.001,
        "seed": 11,
        "base_model": "tiny-denoiser-v1",
    }
    ack = api.post("/v1/finetune", json=payload).json()
    validate_message("finetune_response", ack)
    assert ack["config_echo"]["rank"] == 8
    assert ack["config_echo"]["steps"] == 1000
    assert ack["config_echo"]["base_model"] == "tiny-denoiser-v1"

    doc = poll_until_done(api, ack["job_id"])
    assert doc["status"] == "failed"
    assert "no real records" in doc["error"]


def test_finetune_wrong_base_model_rejected(api, runtime):
    build_store(runtime.data_root / "store", per_class=1)
    payload = {
        "contract": CONTRACT_VERSION,
        "manifest_ref": "store",
        "rank": 2,
        "steps": 2,
        "lam": 0.0,
        "mu": 0.0,
        "base_model": "some-other-diffusion",
    }
    resp = api.post("/v1/finetune", json=payload)
    assert resp.status_code == 400
    assert "base_model" in resp.json()["error"]["message"]


def test_classifier_job_lifecycle(api, runtime):
    build_bundle(runtime.data_root / "bundle", num_classes=2, per_class=4)
    payload = {
        "contract": CONTRACT_VERSION,
        "bundle_ref": "bundle",
        "task": "binary",
        "epochs": 8,
        "seed": 3,
    }
    resp = api.post("/v1/train-classifier", json=payload)
    assert resp.status_code == 200
    ack = resp.json()
    validate_message("classifier_response", ack)
    assert ack["config_echo"]["task"] == "binary"

    doc = poll_until_done(api, ack["job_id"])
    assert doc["status"] == "done"
    assert doc["train_accuracy"] is not None and 0.0 <= doc["train_accuracy"] <= 1.0
    assert doc["predictions_ref"].endswith("predictions.csv")
    assert (runtime.artifacts_dir / doc["predictions_ref"]).is_file()


def test_classifier_missing_bundle_rejected(api):
    payload = {
        "contract": CONTRACT_VERSION,
        "bundle_ref": "no-bundle",
        "task": "binary",
    }
    resp = api.post("/v1/train-classifier", json=payload)
    assert resp.status_code == 400
    validate_message("error_response", resp.json())


def test_gateway_client_round_trip(app, client, runtime):
    """The primary's own client, with its validation and hash checks, accepts
    everything this worker sends."""
    build_store(runtime.data_root / "store", per_class=3)

    gen = client.generate_batch(
        [
            gw.GenerationRequest(
                prompt="a photo of a muddy bicycle", seed=i, request_id=f"g-{i}",
                width=48, height=48, steps=3,
            )
            for i in range(3)
        ]
    )
    assert gen.ok
    assert all(r.image_bytes for r in gen.results)

    emb = client.embed_batch(
        [
            gw.EmbeddingRequest(request_id="e-t", modality="text", text="clean bike"),
            gw.EmbeddingRequest(
                request_id="e-i", modality="image", image_bytes=gen.results[0].image_bytes
            ),
        ]
    )
    assert emb.ok
    assert all(len(r.vector) == 64 for r in emb.results)

    submitted = client.submit_finetune(
        gw.FinetuneJob(manifest_ref="store", rank=2, steps=3, seed=1)
    )
    final = client.wait_for_job(submitted.job_id, poll_interval_s=0.02, timeout_s=120.0)
    assert final.status == "done"
    assert final.adapter_id

    health = client.health()
    assert health["status"] == "ok"


def test_production_profile_degrades_not_crashes(tmp_path):
    runtime = WorkerRuntime(get_profile("production"), tmp_path / "a", tmp_path / "d")
    assert set(runtime.load_errors) == {"generator", "embedder", "classifier"}

    doc = runtime.health_doc()
    validate_message("health_response", doc)
    assert doc["status"] == "degraded"
    assert doc["models"]["generator"] == "stable-diffusion-3.5-large"

    app = create_app(runtime)
    transport = InProcessTransport(app)
    status, body = transport.post("/v1/generate", generate_payload(), 5.0)
    assert status == 503
    validate_message("error_response", body)
