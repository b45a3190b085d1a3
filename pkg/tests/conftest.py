"""Shared fixtures; the underlying helpers live in testkit."""

from __future__ import annotations

from pathlib import Path

import pytest

from dtgen import backend_gateway as gw
from dtgen import pipeline
from dtgen.mock_backend import MockBackend

from testkit import build_real_dataset


@pytest.fixture
def real_data_dir(tmp_path: Path) -> Path:
    return build_real_dataset(tmp_path / "real")


@pytest.fixture
def run_root(tmp_path: Path) -> Path:
    root = tmp_path / "run"
    pipeline.init_run(root)
    return root


@pytest.fixture
def mock_client(tmp_path: Path) -> gw.GatewayClient:
    backend = MockBackend(blob_root=tmp_path / "backend")
    return gw.GatewayClient(gw.LocalTransport(backend), sleeper=lambda _: None)
