"""Shared test helpers: tinted toy images, stores, bundles, in-process transport."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Any

import numpy as np
from fastapi.testclient import TestClient

from dtgen import backend_gateway as gw
from dtgen.dataset_store import DatasetStore, IngestItem
from dtgen.imaging import encode_png
from dtgen.seeding import derive_seed

# saturated per-class tints so small models can separate classes quickly
CLASS_TINTS = ((210, 40, 40), (40, 210, 40), (40, 40, 210))


def tinted_pixels(class_idx: int, index: int, size: int = 48) -> np.ndarray:
    """Class-tinted pixels with mild deterministic texture."""
    rng = np.random.default_rng(derive_seed(0, "toy-tint", class_idx, index))
    base = np.array(CLASS_TINTS[class_idx], dtype=np.float64)
    noise = rng.normal(0.0, 18.0, size=(size, size, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def tinted_png(class_idx: int, index: int, size: int = 48) -> bytes:
    return encode_png(tinted_pixels(class_idx, index, size))


def build_store(root: Path, per_class: int = 20, size: int = 48) -> DatasetStore:
    """A dataset store of real images, half clean and half heavily dirty."""
    store = DatasetStore(root)
    store.initialize()
    items = []
    for i in range(per_class):
        items.append(IngestItem(image_bytes=tinted_png(0, i, size), label_name="clean"))
        items.append(
            IngestItem(image_bytes=tinted_png(1, i, size), label_name="heavily_dirty")
        )
    store.ingest(items, origin="real")
    return store


def build_bundle(root: Path, num_classes: int, per_class: int = 8, size: int = 48) -> Path:
    """A training bundle shaped like a store export: class dirs + index.csv."""
    root.mkdir(parents=True, exist_ok=True)
    rows: list[dict[str, Any]] = []
    for cls in range(num_classes):
        class_dir = root / f"class_{cls}"
        class_dir.mkdir(exist_ok=True)
        for i in range(per_class):
            name = f"sample_{cls}_{i:03d}.png"
            (class_dir / name).write_bytes(tinted_png(cls, i, size))
            rows.append(
                {
                    "path": f"class_{cls}/{name}",
                    "label": cls,
                    "origin": "synthetic",
                    "prompt_id": "",
                    "score": "",
                }
            )
    with open(root / "index.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["path", "label", "origin", "prompt_id", "score"], lineterminator="\n"
        )
        writer.writeheader()
        writer.writerows(rows)
    return root


class InProcessTransport:
    """Gateway transport backed by an in-process ASGI app."""

    def __init__(self, app: Any):
        self._client = TestClient(app, raise_server_exceptions=False)
        self._client.headers[gw.CONTRACT_HEADER] = str(gw.CONTRACT_VERSION)

    def post(self, path: str, payload: dict[str, Any], timeout_s: float) -> tuple[int, dict[str, Any]]:
        resp = self._client.post(path, json=payload)
        return resp.status_code, resp.json()

    def get(self, path: str, timeout_s: float) -> tuple[int, dict[str, Any]]:
        resp = self._client.get(path)
        return resp.status_code, resp.json()
