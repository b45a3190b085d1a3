"""Stable, hash-based randomness for reproducible pipeline runs.

Every random decision in the pipeline (prompt sampling, mock backends,
per-image generation seeds) is derived from the master seed through SHA-256
so that artifacts are byte-identical across runs, machines, and library
upgrades. Nothing here depends on the stream behavior of any RNG library.
"""

from __future__ import annotations

import hashlib
import math

_SEP = b"\x1f"


def stable_digest(*parts: object) -> bytes:
    """SHA-256 digest over the string forms of ``parts``, order-sensitive."""
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(_SEP)
    return h.digest()


def stable_hex(*parts: object, length: int = 16) -> str:
    """Short hex token derived from ``parts``."""
    return stable_digest(*parts).hex()[:length]


def derive_seed(master_seed: int, *labels: object) -> int:
    """Split a master seed into an independent 63-bit per-stage seed."""
    digest = stable_digest("seed", master_seed, *labels)
    return int.from_bytes(digest[:8], "big") >> 1


def hash_uint(below: int, *parts: object) -> int:
    """Uniform integer in [0, below) derived from ``parts``.

    Modulo bias is on the order of below / 2**256 and is irrelevant for any
    realistic option-set size.
    """
    if below <= 0:
        raise ValueError("below must be positive")
    return int.from_bytes(stable_digest(*parts), "big") % below


def hash_bytes(n: int, *parts: object) -> bytes:
    """Deterministic byte stream of length ``n`` expanded from ``parts``."""
    base = stable_digest(*parts)
    out = bytearray()
    counter = 0
    while len(out) < n:
        out.extend(hashlib.sha256(base + counter.to_bytes(4, "big")).digest())
        counter += 1
    return bytes(out[:n])


def hash_unit_floats(n: int, *parts: object) -> list[float]:
    """``n`` floats in [0, 1) derived from ``parts``."""
    raw = hash_bytes(8 * n, *parts)
    return [
        int.from_bytes(raw[8 * i : 8 * (i + 1)], "big") / 2**64 for i in range(n)
    ]


def hash_normals(n: int, *parts: object) -> list[float]:
    """``n`` standard-normal draws via Box-Muller on hash-derived uniforms."""
    pairs = (n + 1) // 2
    uniforms = hash_unit_floats(2 * pairs, *parts)
    out: list[float] = []
    for i in range(pairs):
        # shift away from 0 so log() is always defined
        u1 = (uniforms[2 * i] + 2**-64) / (1 + 2**-64)
        u2 = uniforms[2 * i + 1]
        radius = math.sqrt(-2.0 * math.log(u1))
        out.append(radius * math.cos(2.0 * math.pi * u2))
        out.append(radius * math.sin(2.0 * math.pi * u2))
    return out[:n]
