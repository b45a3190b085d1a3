"""Image encode/decode helpers.

``encode_png`` writes PNGs with stored (uncompressed) deflate blocks so the
byte stream is a pure function of the pixel data: no compressor heuristics,
no library-version drift. That property is what makes content hashes of
generated images stable enough to check into golden files. Decoding goes
through Pillow and accepts any format Pillow knows.
"""

from __future__ import annotations

import hashlib
import io
import struct
import zlib

import numpy as np
from PIL import Image

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_STORED_BLOCK_MAX = 0xFFFF


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def _stored_zlib(data: bytes) -> bytes:
    """zlib stream using only stored deflate blocks (fully deterministic)."""
    out = bytearray(b"\x78\x01")
    pos = 0
    while True:
        block = data[pos : pos + _STORED_BLOCK_MAX]
        pos += len(block)
        final = pos >= len(data)
        out.append(0x01 if final else 0x00)
        out.extend(struct.pack("<H", len(block)))
        out.extend(struct.pack("<H", len(block) ^ 0xFFFF))
        out.extend(block)
        if final:
            break
    out.extend(struct.pack(">I", zlib.adler32(data) & 0xFFFFFFFF))
    return bytes(out)


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode an (H, W, 3) uint8 array as a deterministic RGB PNG."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("expected an (H, W, 3) uint8 array")
    height, width = arr.shape[:2]
    raw = bytearray()
    for row in arr:
        raw.append(0)  # filter type: none
        raw.extend(row.tobytes())
    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    return b"".join(
        [
            _PNG_SIGNATURE,
            _chunk(b"IHDR", header),
            _chunk(b"IDAT", _stored_zlib(bytes(raw))),
            _chunk(b"IEND", b""),
        ]
    )


def decode_image(data: bytes) -> np.ndarray:
    """Decode image bytes to an (H, W, 3) uint8 array."""
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def image_format(data: bytes) -> str:
    """Lower-case format name of encoded image bytes (e.g. 'png', 'jpeg')."""
    with Image.open(io.BytesIO(data)) as img:
        return (img.format or "bin").lower()


def content_hash(data: bytes) -> str:
    """SHA-256 hex digest over raw encoded bytes; the store's sample id."""
    return hashlib.sha256(data).hexdigest()
