"""Content-addressed image store with append-only JSONL manifests.

Images live under ``blobs/<first-2-hex>/<sha256>.png``; the manifest is a
JSON Lines file where each line is a header, a config snapshot, or a sample
record.  Records are never mutated: new information about a sample (a
duplicate ingest, a filter decision) appends a superseding record with the
same ``sample_id``, and the effective view of the manifest is the last
record per sample, ordered by first appearance.

Record labels are canonical names: ``clean``, ``dirty``, ``lightly_dirty``,
``heavily_dirty``.  Real few-shot data typically arrives binary (clean or
dirty); synthetic data carries the finer severity-derived names.  Task
exports map names onto contiguous class indices: the three-class task
refuses coarse ``dirty`` records as unmappable, the binary task collapses
all dirt severities into ``dirty``.

Training exports draw exclusively from the kept synthetic records
(D_selected) and refuse anything marked ``split=test``, preserving the
held-out protocol.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .imaging import decode_image, image_format
from .seeding import stable_hex

logger = logging.getLogger(__name__)

RECORD_LABELS = ("clean", "dirty", "lightly_dirty", "heavily_dirty")
SEVERITY_TO_LABEL = {"clean": "clean", "light": "lightly_dirty", "heavy": "heavily_dirty"}
SPLITS = ("train", "test", "none")
ORIGINS = ("real", "synthetic")

TASK_CLASS_MAPS: dict[str, dict[str, int]] = {
    "three-class": {"clean": 0, "lightly_dirty": 1, "heavily_dirty": 2},
    "binary": {"clean": 0, "dirty": 1, "lightly_dirty": 1, "heavily_dirty": 1},
}
TASK_CLASS_NAMES: dict[str, tuple[str, ...]] = {
    "three-class": ("clean", "lightly_dirty", "heavily_dirty"),
    "binary": ("clean", "dirty"),
}

MANIFEST_NAME = "manifest.jsonl"
BLOB_DIR = "blobs"
INDEX_COLUMNS = ("path", "label", "origin", "prompt_id", "score")


class StoreError(ValueError):
    """Raised for ingest, manifest, or export violations."""


class StoreLockError(RuntimeError):
    """Raised when the storage root is already locked by another run."""


def _dumps(obj: dict[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class SampleRecord:
    """One image's manifest entry; optional fields are omitted when unset."""

    sample_id: str
    origin: str
    label: int
    label_name: str
    split: str
    path: str
    prompt_id: str | None = None
    prompt_text: str | None = None
    slot_choices: dict[str, int] | None = None
    severity: str | None = None
    score: float | None = None
    filter_decision: dict[str, str] | None = None
    multiplicity: int = 1
    model_id: str | None = None
    adapter_id: str | None = None
    generation_seed: int | None = None
    request_id: str | None = None

    def __post_init__(self) -> None:
        if self.origin not in ORIGINS:
            raise StoreError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        if self.split not in SPLITS:
            raise StoreError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.label_name not in RECORD_LABELS:
            raise StoreError(f"unknown label {self.label_name!r}")
        if self.label != RECORD_LABELS.index(self.label_name):
            raise StoreError(
                f"label index {self.label} does not match name {self.label_name!r}"
            )
        if self.origin == "real" and self.prompt_id is not None:
            raise StoreError("real records must not carry a prompt_id")
        if self.origin == "synthetic" and self.prompt_id is None:
            raise StoreError("synthetic records must carry a prompt_id")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": "record",
            "sample_id": self.sample_id,
            "origin": self.origin,
            "label": self.label,
            "label_name": self.label_name,
            "split": self.split,
            "path": self.path,
        }
        optional = {
            "prompt_id": self.prompt_id,
            "prompt_text": self.prompt_text,
            "slot_choices": self.slot_choices,
            "severity": self.severity,
            "score": self.score,
            "filter_decision": self.filter_decision,
            "model_id": self.model_id,
            "adapter_id": self.adapter_id,
            "generation_seed": self.generation_seed,
            "request_id": self.request_id,
        }
        for key, value in optional.items():
            if value is not None:
                out[key] = value
        if self.multiplicity != 1:
            out["multiplicity"] = self.multiplicity
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> SampleRecord:
        return cls(
            sample_id=raw["sample_id"],
            origin=raw["origin"],
            label=raw["label"],
            label_name=raw["label_name"],
            split=raw["split"],
            path=raw["path"],
            prompt_id=raw.get("prompt_id"),
            prompt_text=raw.get("prompt_text"),
            slot_choices=raw.get("slot_choices"),
            severity=raw.get("severity"),
            score=raw.get("score"),
            filter_decision=raw.get("filter_decision"),
            multiplicity=raw.get("multiplicity", 1),
            model_id=raw.get("model_id"),
            adapter_id=raw.get("adapter_id"),
            generation_seed=raw.get("generation_seed"),
            request_id=raw.get("request_id"),
        )

    def superseded(self, **changes: Any) -> SampleRecord:
        """A copy with ``changes`` applied, for appending as the new truth."""
        current = {
            "sample_id": self.sample_id,
            "origin": self.origin,
            "label": self.label,
            "label_name": self.label_name,
            "split": self.split,
            "path": self.path,
            "prompt_id": self.prompt_id,
            "prompt_text": self.prompt_text,
            "slot_choices": self.slot_choices,
            "severity": self.severity,
            "score": self.score,
            "filter_decision": self.filter_decision,
            "multiplicity": self.multiplicity,
            "model_id": self.model_id,
            "adapter_id": self.adapter_id,
            "generation_seed": self.generation_seed,
            "request_id": self.request_id,
        }
        current.update(changes)
        return SampleRecord(**current)


@dataclass(frozen=True)
class IngestItem:
    image_bytes: bytes
    label_name: str
    split: str = "train"
    source: str = "<memory>"
    extra: dict[str, Any] | None = None


@dataclass
class DatasetManifest:
    """Parsed manifest: raw entries plus derived effective views."""

    manifest_id: str
    entries: list[dict[str, Any]] = field(default_factory=list)

    def records(self) -> list[SampleRecord]:
        """Last record per sample_id, ordered by first appearance."""
        latest: dict[str, SampleRecord] = {}
        order: list[str] = []
        for entry in self.entries:
            if entry.get("kind") != "record":
                continue
            record = SampleRecord.from_dict(entry)
            if record.sample_id not in latest:
                order.append(record.sample_id)
            latest[record.sample_id] = record
        return [latest[sid] for sid in order]

    def config_snapshot(self) -> dict[str, Any]:
        """All config entries merged in order; later keys win."""
        merged: dict[str, Any] = {}
        for entry in self.entries:
            if entry.get("kind") == "config":
                merged.update(entry.get("snapshot", {}))
        return merged

    def counts_by_label(self, origin: str | None = None) -> dict[str, int]:
        counts: dict[str, int] = {}
        for record in self.records():
            if origin is not None and record.origin != origin:
                continue
            counts[record.label_name] = counts.get(record.label_name, 0) + 1
        return counts

    def selected(self) -> list[SampleRecord]:
        """D_selected: synthetic records whose filter decision is kept."""
        return [
            r
            for r in self.records()
            if r.origin == "synthetic"
            and r.filter_decision is not None
            and r.filter_decision.get("status") == "kept"
        ]

    def synthetic(self) -> list[SampleRecord]:
        return [r for r in self.records() if r.origin == "synthetic"]

    def real(self) -> list[SampleRecord]:
        return [r for r in self.records() if r.origin == "real"]


class StoreLock:
    """Exclusive lock file guarding one storage root; context manager."""

    def __init__(self, root: str | Path):
        self.path = Path(root) / ".dtgen.lock"
        self._fd: int | None = None

    def __enter__(self) -> StoreLock:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreLockError(
                f"storage root is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        self.path.unlink(missing_ok=True)


class DatasetStore:
    """Blobs + manifest under one root directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest_path = self.root / MANIFEST_NAME
        self.blob_root = self.root / BLOB_DIR

    # -- manifest primitives

    def initialize(self, manifest_id: str | None = None) -> str:
        """Create the manifest with a header line; idempotent."""
        self.root.mkdir(parents=True, exist_ok=True)
        if self.manifest_path.exists():
            return self.load_manifest().manifest_id
        manifest_id = manifest_id or stable_hex("manifest", self.root.name)
        with open(self.manifest_path, "w", encoding="utf-8") as fh:
            fh.write(_dumps({"kind": "header", "manifest_id": manifest_id}) + "\n")
        return manifest_id

    def _append(self, entries: Iterable[dict[str, Any]]) -> None:
        if not self.manifest_path.exists():
            raise StoreError(f"manifest not initialized at {self.manifest_path}")
        with open(self.manifest_path, "a", encoding="utf-8") as fh:
            for entry in entries:
                fh.write(_dumps(entry) + "\n")

    def append_records(self, records: Sequence[SampleRecord]) -> None:
        self._append(r.to_dict() for r in records)

    def append_config(self, snapshot: dict[str, Any]) -> None:
        self._append([{"kind": "config", "snapshot": snapshot}])

    def load_manifest(self) -> DatasetManifest:
        if not self.manifest_path.exists():
            raise StoreError(f"no manifest at {self.manifest_path}")
        entries: list[dict[str, Any]] = []
        manifest_id = ""
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreError(f"manifest line {line_no} is not JSON: {exc}") from exc
                if entry.get("kind") == "header":
                    manifest_id = entry.get("manifest_id", "")
                entries.append(entry)
        if not manifest_id:
            raise StoreError("manifest has no header line")
        return DatasetManifest(manifest_id=manifest_id, entries=entries)

    def save_manifest(self, manifest: DatasetManifest, path: str | Path) -> None:
        """Serialize a manifest to ``path`` in canonical line format."""
        with open(path, "w", encoding="utf-8") as fh:
            for entry in manifest.entries:
                fh.write(_dumps(entry) + "\n")

    # -- blobs

    def store_blob(self, image_bytes: bytes) -> tuple[str, str]:
        """Write (or find) the blob; returns (sample_id, relative path)."""
        sample_id = hashlib.sha256(image_bytes).hexdigest()
        ext = image_format(image_bytes)
        rel = f"{BLOB_DIR}/{sample_id[:2]}/{sample_id}.{ext}"
        target = self.root / rel
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_suffix(".tmp")
            tmp.write_bytes(image_bytes)
            os.replace(tmp, target)
        return sample_id, rel

    def read_blob(self, record: SampleRecord) -> bytes:
        return (self.root / record.path).read_bytes()

    # -- operations

    def ingest(
        self, items: Sequence[IngestItem], origin: str, **record_fields: Any
    ) -> list[SampleRecord]:
        """Append one record per item; duplicates bump multiplicity.

        Returns the appended records (including superseding duplicates).
        An empty ``items`` is a no-op, not an error.
        """
        if origin not in ORIGINS:
            raise StoreError(f"origin must be one of {ORIGINS}, got {origin!r}")
        existing = {r.sample_id: r for r in self.load_manifest().records()}
        appended: list[SampleRecord] = []
        for item in items:
            if item.label_name not in RECORD_LABELS:
                raise StoreError(
                    f"unknown label {item.label_name!r} for {item.source} "
                    f"(expected one of {RECORD_LABELS})"
                )
            try:
                decode_image(item.image_bytes)
            except Exception as exc:
                raise StoreError(f"undecodable image {item.source}: {exc}") from exc
            sample_id, rel = self.store_blob(item.image_bytes)
            prior = existing.get(sample_id)
            if prior is not None:
                if prior.origin != origin or prior.label_name != item.label_name:
                    raise StoreError(
                        f"duplicate image {sample_id} conflicts with existing record "
                        f"({prior.origin}/{prior.label_name} vs {origin}/{item.label_name})"
                    )
                record = prior.superseded(multiplicity=prior.multiplicity + 1)
                logger.info("duplicate image %s; multiplicity now %d", sample_id, record.multiplicity)
            else:
                fields = {**record_fields, **(item.extra or {})}
                record = SampleRecord(
                    sample_id=sample_id,
                    origin=origin,
                    label=RECORD_LABELS.index(item.label_name),
                    label_name=item.label_name,
                    split=item.split,
                    path=rel,
                    **fields,
                )
            existing[sample_id] = record
            appended.append(record)
        self.append_records(appended)
        return appended

    def apply_filter_report(self, report: dict[str, Any]) -> dict[str, int]:
        """Record per-sample filter decisions; returns kept/rejected counts.

        Every decision must reference a known synthetic sample.  Kept records
        form D_selected; rejected ones stay in the manifest with reasons.
        """
        manifest = self.load_manifest()
        by_id = {r.sample_id: r for r in manifest.records()}
        appended: list[SampleRecord] = []
        counts = {"kept": 0, "rejected": 0}
        for decision in report.get("decisions", []):
            sample_id = decision["sample_id"]
            record = by_id.get(sample_id)
            if record is None:
                raise StoreError(f"filter report references unknown sample {sample_id}")
            if record.origin != "synthetic":
                raise StoreError(f"filter report references non-synthetic sample {sample_id}")
            status = "kept" if decision["kept"] else "rejected"
            counts[status] += 1
            appended.append(
                record.superseded(
                    score=decision["score"],
                    filter_decision={"status": status, "reason": decision["reason"]},
                )
            )
        for entry in report.get("invalid", []):
            sample_id = entry["sample_id"]
            record = by_id.get(sample_id)
            if record is None:
                raise StoreError(f"filter report references unknown sample {sample_id}")
            appended.append(
                record.superseded(
                    filter_decision={"status": "invalid", "reason": entry["reason"]}
                )
            )
        self.append_records(appended)
        if counts["kept"] == 0:
            logger.warning("filter kept zero samples; training export will refuse to run")
        return counts

    def export_training_set(self, out_dir: str | Path, task: str) -> dict[str, Any]:
        """Write directory-per-class training data from D_selected.

        Refuses empty selections, labels the task cannot map, and any record
        marked split=test.  Returns a summary with per-class counts.
        """
        if task not in TASK_CLASS_MAPS:
            raise StoreError(f"unknown task {task!r} (expected {sorted(TASK_CLASS_MAPS)})")
        class_map = TASK_CLASS_MAPS[task]
        class_names = TASK_CLASS_NAMES[task]
        selected = self.load_manifest().selected()
        if not selected:
            raise StoreError("export refused: D_selected is empty")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows: list[dict[str, Any]] = []
        counts = {name: 0 for name in class_names}
        for record in selected:
            if record.split == "test":
                raise StoreError(
                    f"export refused: sample {record.sample_id} is in the test split"
                )
            if record.label_name not in class_map:
                raise StoreError(
                    f"label {record.label_name!r} of sample {record.sample_id} "
                    f"is unmappable under the {task} task"
                )
            class_idx = class_map[record.label_name]
            class_name = class_names[class_idx]
            rel = f"{class_name}/{Path(record.path).name}"
            target = out / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(self.read_blob(record))
            counts[class_name] += 1
            rows.append(
                {
                    "path": rel,
                    "label": class_idx,
                    "origin": record.origin,
                    "prompt_id": record.prompt_id or "",
                    "score": "" if record.score is None else repr(record.score),
                }
            )
        index_path = out / "index.csv"
        with open(index_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(INDEX_COLUMNS), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        return {
            "task": task,
            "classes": list(class_names),
            "counts": counts,
            "total": len(rows),
            "index": str(index_path),
        }

    def build_report(self) -> dict[str, Any]:
        """Machine-readable pipeline summary over the current manifest."""
        manifest = self.load_manifest()
        records = manifest.records()
        synthetic = [r for r in records if r.origin == "synthetic"]
        decided = [r for r in synthetic if r.filter_decision is not None]
        kept = [r for r in decided if r.filter_decision.get("status") == "kept"]
        rejected = [r for r in decided if r.filter_decision.get("status") == "rejected"]

        coverage: dict[str, dict[str, int]] = {}
        for record in synthetic:
            for slot_name, option_idx in (record.slot_choices or {}).items():
                slot_cov = coverage.setdefault(slot_name, {})
                key = str(option_idx)
                slot_cov[key] = slot_cov.get(key, 0) + 1

        total_decided = len(kept) + len(rejected)
        return {
            "manifest_id": manifest.manifest_id,
            "counts": {
                "real": len([r for r in records if r.origin == "real"]),
                "synthetic": len(synthetic),
                "selected": len(kept),
                "rejected": len(rejected),
            },
            "labels": {
                "real": manifest.counts_by_label("real"),
                "synthetic": manifest.counts_by_label("synthetic"),
            },
            "retention": (len(kept) / total_decided) if total_decided else 0.0,
            "slot_coverage": coverage,
            "config": manifest.config_snapshot(),
        }

    def verify_blobs(self) -> list[str]:
        """Re-hash every stored blob; returns sample_ids that fail to match."""
        bad: list[str] = []
        for record in self.load_manifest().records():
            digest = hashlib.sha256(self.read_blob(record)).hexdigest()
            if digest != record.sample_id:
                bad.append(record.sample_id)
        return bad
