"""Few-shot tableware-dirt data augmentation pipeline.

The package turns a small labeled image set into a large, quality-filtered
synthetic training dataset by driving external generation and embedding
services.  It provides:

- ``prompt_grammar``: structured slot templates, Cartesian enumeration,
  uniform sampling, rendering, and label derivation.
- ``adapter_math``: low-rank adapter algebra (merge, rank, regularizer).
- ``quality_filter``: embedding cosine scoring and adaptive group thresholds.
- ``backend_gateway``: HTTP/JSON client contract with retries, bounded
  concurrency, and idempotency.
- ``mock_backend``: deterministic in-process mock services for desk-scale
  runs and golden tests.
- ``dataset_store``: content-addressed blobs plus append-only JSONL
  manifests, exports, and reports.
- ``eval_metrics``: confusion matrices, precision/recall/F1/accuracy, and
  comparison tables.
- ``cli``: the ``dtgen`` command orchestrating the four pipeline stages.
"""

from __future__ import annotations

__version__ = "0.1.0"
