"""Low-rank adapter algebra on plain matrices.

A low-rank adapter perturbs a frozen base weight W (d x k) by the product
B @ A, where B is d x r and A is r x k with r small relative to min(d, k).
This module implements the merge, the numerical rank of the update, the
Frobenius-norm regularization term, and the parameter-savings ratio as pure
matrix operations, independent of any neural framework; attaching adapters
to live attention weights is the serving worker's job.

Serialization is a JSON document (see ``save_adapter``) with a format tag,
the shape header {d, k, r, target_name, scale}, and row-major nested lists
for A and B.  Floats round-trip exactly through repr, so save/load is
lossless.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj")
RANK_TOLERANCE = 1e-9
FORMAT_TAG = "dtgen-adapter/1"


class AdapterError(ValueError):
    """Raised for shape, rank, or serialization violations."""


@dataclass(frozen=True)
class RegularizerConfig:
    """Weights of the Frobenius penalty: lam * ||A||_F^2 + mu * ||B||_F^2."""

    lam: float = 0.0
    mu: float = 0.0

    def __post_init__(self) -> None:
        if self.lam < 0 or self.mu < 0:
            raise AdapterError(f"regularizer weights must be >= 0, got {self.lam}, {self.mu}")


class LowRankAdapter:
    """An (A, B) pair targeting one attention projection weight.

    A has shape (r, k), B has shape (d, r).  ``scale`` multiplies the update
    at merge time and defaults to 1 (no rescaling).  Construction enforces
    r <= min(d, k) and warns when r exceeds min(d, k) / 2, where the
    low-rank assumption stops saving parameters meaningfully.
    """

    def __init__(
        self,
        a: np.ndarray,
        b: np.ndarray,
        target_name: str,
        scale: float = 1.0,
    ) -> None:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2:
            raise AdapterError(f"A and B must be 2-D, got shapes {a.shape} and {b.shape}")
        if b.shape[1] != a.shape[0]:
            raise AdapterError(
                f"inner dimensions disagree: B is {b.shape}, A is {a.shape}"
            )
        if target_name not in TARGETS:
            raise AdapterError(f"target_name must be one of {TARGETS}, got {target_name!r}")
        r = a.shape[0]
        d, k = b.shape[0], a.shape[1]
        if r > min(d, k):
            raise AdapterError(f"rank {r} exceeds min(d, k) = {min(d, k)}")
        if r > min(d, k) / 2:
            logger.warning(
                "adapter rank %d is above min(d, k)/2 = %.1f; low-rank benefit is marginal",
                r,
                min(d, k) / 2,
            )
        self.a = a
        self.b = b
        self.target_name = target_name
        self.scale = float(scale)

    @property
    def r(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k(self) -> int:
        return self.a.shape[1]

    def delta(self) -> np.ndarray:
        """The dense update scale * (B @ A), shape (d, k)."""
        return self.scale * (self.b @ self.a)

    def scaled(self, factor: float) -> LowRankAdapter:
        """A new adapter whose update is ``factor`` times this one's (scales B)."""
        return LowRankAdapter(self.a, factor * self.b, self.target_name, self.scale)

    def __repr__(self) -> str:
        return (
            f"LowRankAdapter(target={self.target_name!r}, d={self.d}, k={self.k}, "
            f"r={self.r}, scale={self.scale})"
        )


def merge(base: np.ndarray, adapter: LowRankAdapter) -> np.ndarray:
    """Return base + scale * (B @ A), exact elementwise."""
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2 or base.shape != (adapter.d, adapter.k):
        raise AdapterError(
            f"base shape {base.shape} does not match adapter ({adapter.d}, {adapter.k})"
        )
    return base + adapter.delta()


def delta_rank(adapter: LowRankAdapter) -> int:
    """Numerical rank of B @ A: singular values above 1e-9 * largest."""
    singular = np.linalg.svd(adapter.b @ adapter.a, compute_uv=False)
    if singular.size == 0:
        return 0
    cutoff = RANK_TOLERANCE * float(singular[0])
    return int(np.count_nonzero(singular > cutoff)) if singular[0] > 0 else 0


def regularizer(adapter: LowRankAdapter, cfg: RegularizerConfig) -> float:
    """lam * sum(A^2) + mu * sum(B^2)."""
    return float(cfg.lam * np.sum(adapter.a**2) + cfg.mu * np.sum(adapter.b**2))


def parameter_savings(d: int, k: int, r: int) -> float:
    """Trainable-parameter ratio r * (d + k) / (d * k) of adapter vs dense.

    Values above 1 mean the adapter holds more parameters than the dense
    matrix it perturbs; the boundary case d = k = r yields 2 and warns.
    """
    if d < 1 or k < 1:
        raise AdapterError(f"d and k must be positive, got {d}, {k}")
    if r < 0:
        raise AdapterError(f"r must be >= 0, got {r}")
    if r > min(d, k):
        raise AdapterError(f"r = {r} exceeds min(d, k) = {min(d, k)}")
    ratio = (r * (d + k)) / (d * k)
    if ratio >= 1:
        logger.warning("parameter 'savings' ratio %.3f >= 1: adapter larger than dense", ratio)
    return ratio


def save_adapter(adapter: LowRankAdapter, path: str) -> None:
    """Write the adapter as a JSON document with shape header and matrices."""
    doc = {
        "format": FORMAT_TAG,
        "d": adapter.d,
        "k": adapter.k,
        "r": adapter.r,
        "target_name": adapter.target_name,
        "scale": adapter.scale,
        "a": adapter.a.tolist(),
        "b": adapter.b.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_adapter(path: str) -> LowRankAdapter:
    """Read an adapter written by ``save_adapter``; validates the header."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT_TAG:
        raise AdapterError(f"unsupported adapter format: {doc.get('format')!r}")
    adapter = LowRankAdapter(
        a=np.array(doc["a"], dtype=np.float64),
        b=np.array(doc["b"], dtype=np.float64),
        target_name=doc["target_name"],
        scale=float(doc.get("scale", 1.0)),
    )
    header = (doc["d"], doc["k"], doc["r"])
    actual = (adapter.d, adapter.k, adapter.r)
    if header != actual:
        raise AdapterError(f"header shape {header} disagrees with matrices {actual}")
    return adapter
