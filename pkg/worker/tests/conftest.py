"""Shared fixtures; the underlying helpers live in workerkit."""

from __future__ import annotations

from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from dtgen import backend_gateway as gw

from dtgen_worker.config import get_profile
from dtgen_worker.service import WorkerRuntime, create_app

from workerkit import InProcessTransport


@pytest.fixture
def runtime(tmp_path: Path) -> WorkerRuntime:
    cfg = get_profile("tiny")
    data_root = tmp_path / "data"
    data_root.mkdir()
    return WorkerRuntime(cfg, tmp_path / "artifacts", data_root)


@pytest.fixture
def app(runtime: WorkerRuntime):
    return create_app(runtime)


@pytest.fixture
def api(app) -> TestClient:
    client = TestClient(app, raise_server_exceptions=False)
    client.headers[gw.CONTRACT_HEADER] = str(gw.CONTRACT_VERSION)
    return client


@pytest.fixture
def client(app) -> gw.GatewayClient:
    return gw.GatewayClient(InProcessTransport(app), sleeper=lambda _: None)
