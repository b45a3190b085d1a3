"""Torch models behind the worker's endpoints.

Every network here is deterministic end to end: weights are filled from
hash-seeded generators keyed on the model identity (so two processes build
bit-identical models), tokenization is a pure function of the text, and
inference runs in eval mode with no stochastic layers.  That is what makes
"same request, same bytes" hold across calls and restarts.

Only the ``tiny-*`` model identities are constructible; the production
identities name external checkpoints that this package does not ship, and
asking for them raises :class:`ModelLoadError` so the service can degrade
its health status instead of silently substituting a different model.

The low-rank adapter convention matches ``dtgen.adapter_math``: a frozen
weight W of shape (d, k) is perturbed by B @ A with A of shape (r, k) and B
of shape (d, r).  ``LoRALinear.as_adapter`` hands the pair over in exactly
that orientation.
"""

from __future__ import annotations

import math
import re
import threading
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dtgen.adapter_math import LowRankAdapter
from dtgen.imaging import decode_image
from dtgen.seeding import derive_seed, hash_uint

__all__ = [
    "ModelLoadError",
    "LoRALinear",
    "CrossAttention",
    "TinyDenoiser",
    "TextEncoder",
    "ImageEncoder",
    "Embedder",
    "TinyClassifier",
    "build_denoiser",
    "build_text_encoder",
    "build_embedder",
    "build_classifier",
    "pixels_to_tensor",
    "TINY_GENERATOR",
    "TINY_EMBEDDER",
    "TINY_CLASSIFIER",
]

TINY_GENERATOR = "tiny-denoiser-v1"
TINY_EMBEDDER = "tiny-embed-v1"
TINY_CLASSIFIER = "tiny-cnn-v1"

_WEIGHT_SEED_NAMESPACE = 0x5EED


class ModelLoadError(RuntimeError):
    """A configured model identity has no loadable weights on this host."""


def _generator(*key: object) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(_WEIGHT_SEED_NAMESPACE, "worker-weights", *key))
    return gen


def seeded_init(module: nn.Module, *key: object) -> None:
    """Fill all parameters deterministically, keyed on ``key``.

    Matrices get fan-in-scaled normals, norm gains get 1, everything else
    (biases) gets 0.  Parameters are visited in name order so the result does
    not depend on registration order.
    """
    gen = _generator(*key)
    with torch.no_grad():
        for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if param.ndim >= 2:
                fan_in = param.shape[1] * (param[0, 0].numel() if param.ndim > 2 else 1)
                param.normal_(0.0, math.sqrt(2.0 / max(fan_in, 1)), generator=gen)
            elif name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()


def pixels_to_tensor(pixels: np.ndarray, size: int | None = None) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H', W') float in [-1, 1], optionally resized."""
    # copy: decoded arrays can be read-only views, which torch rejects
    tensor = torch.from_numpy(np.array(pixels, copy=True)).permute(2, 0, 1).float()
    tensor = tensor / 127.5 - 1.0
    if size is not None and tensor.shape[-2:] != (size, size):
        tensor = F.interpolate(
            tensor.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
        ).squeeze(0)
    return tensor


def _sinusoidal(values: torch.Tensor, dim: int) -> torch.Tensor:
    """(N,) -> (N, dim) fixed sin/cos features over geometric frequencies."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half))
    angles = values[:, None] * freqs[None, :]
    feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if feats.shape[1] < dim:
        feats = F.pad(feats, (0, dim - feats.shape[1]))
    return feats


class LoRALinear(nn.Module):
    """A frozen linear map plus an optional low-rank additive update.

    The update is active in two mutually exclusive modes: ``enable_lora``
    creates trainable parameters (fine-tuning), ``install_lora`` attaches
    fixed tensors loaded from an adapter artifact (serving).
    """

    def __init__(self, in_features: int, out_features: int, target_name: str):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=False)
        self.base.weight.requires_grad_(False)
        self.target_name = target_name
        self.lora_a: nn.Parameter | torch.Tensor | None = None
        self.lora_b: nn.Parameter | torch.Tensor | None = None
        self.lora_scale = 1.0

    def enable_lora(self, rank: int, gen: torch.Generator) -> None:
        if rank < 1 or rank > min(self.base.in_features, self.base.out_features):
            raise ValueError(
                f"rank {rank} invalid for {self.target_name} "
                f"({self.base.out_features} x {self.base.in_features})"
            )
        # B starts at zero so the update is exactly zero before training.
        a = torch.randn(rank, self.base.in_features, generator=gen)
        a = a / math.sqrt(self.base.in_features)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(self.base.out_features, rank))
        self.lora_scale = 1.0

    def install_lora(self, adapter: LowRankAdapter) -> None:
        if adapter.target_name != self.target_name:
            raise ValueError(f"adapter targets {adapter.target_name}, layer is {self.target_name}")
        if adapter.k != self.base.in_features or adapter.d != self.base.out_features:
            raise ValueError(
                f"adapter shape ({adapter.d}, {adapter.k}) does not fit "
                f"{self.target_name} ({self.base.out_features}, {self.base.in_features})"
            )
        self.lora_a = torch.as_tensor(adapter.a, dtype=torch.float32)
        self.lora_b = torch.as_tensor(adapter.b, dtype=torch.float32)
        self.lora_scale = float(adapter.scale)

    def clear_lora(self) -> None:
        self.lora_a = None
        self.lora_b = None
        self.lora_scale = 1.0

    def as_adapter(self) -> LowRankAdapter:
        if self.lora_a is None or self.lora_b is None:
            raise ValueError(f"{self.target_name} has no active low-rank update")
        return LowRankAdapter(
            a=self.lora_a.detach().cpu().double().numpy(),
            b=self.lora_b.detach().cpu().double().numpy(),
            target_name=self.target_name,
            scale=self.lora_scale,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.base.weight)
        if self.lora_a is not None and self.lora_b is not None:
            y = y + self.lora_scale * F.linear(F.linear(x, self.lora_a), self.lora_b)
        return y


class CrossAttention(nn.Module):
    """Single-head attention from spatial tokens onto text tokens.

    The four projections are the only adapter targets in the denoiser; their
    names match the serialization format's target vocabulary.
    """

    def __init__(self, dim: int, text_dim: int):
        super().__init__()
        self.q_proj = LoRALinear(dim, dim, "q_proj")
        self.k_proj = LoRALinear(text_dim, dim, "k_proj")
        self.v_proj = LoRALinear(text_dim, dim, "v_proj")
        self.o_proj = LoRALinear(dim, dim, "o_proj")
        self.scale = dim**-0.5

    def targets(self) -> dict[str, LoRALinear]:
        return {
            "q_proj": self.q_proj,
            "k_proj": self.k_proj,
            "v_proj": self.v_proj,
            "o_proj": self.o_proj,
        }

    def forward(self, x: torch.Tensor, text: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q = self.q_proj(x)
        k = self.k_proj(text)
        v = self.v_proj(text)
        scores = torch.bmm(q, k.transpose(1, 2)) * self.scale
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        return self.o_proj(torch.bmm(torch.softmax(scores, dim=-1), v))


class TinyDenoiser(nn.Module):
    """Conditional noise predictor: conv encoder, text cross-attention, conv decoder.

    Input pixels are in [-1, 1]; the output has the same shape and predicts
    the noise component.  Odd image sizes are padded to even internally and
    cropped back, so any size from 8 up works.
    """

    def __init__(self, channels: int, text_dim: int, model_id: str):
        super().__init__()
        self.model_id = model_id
        c = channels
        groups = max(1, c // 4)
        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.norm_stem = nn.GroupNorm(groups, c)
        self.down = nn.Conv2d(c, c, 4, stride=2, padding=1)
        self.norm_down = nn.GroupNorm(groups, c)
        self.time_mlp = nn.Linear(c, c)
        self.attention = CrossAttention(c, text_dim)
        self.up = nn.ConvTranspose2d(c, c, 4, stride=2, padding=1)
        self.norm_up = nn.GroupNorm(groups, c)
        self.out = nn.Conv2d(c, 3, 3, padding=1)
        seeded_init(self, "denoiser", model_id, channels, text_dim)
        self.requires_grad_(False)
        self.eval()

    def forward(
        self, x: torch.Tensor, t: torch.Tensor, text: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        height, width = x.shape[-2:]
        pad_h, pad_w = height % 2, width % 2
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        h = F.silu(self.norm_stem(self.stem(x)))
        h = F.silu(self.norm_down(self.down(h)))
        h = h + self.time_mlp(_sinusoidal(t, h.shape[1]))[:, :, None, None]
        b, c, hh, ww = h.shape
        tokens = h.flatten(2).transpose(1, 2)
        tokens = tokens + self.attention(tokens, text, mask)
        h = tokens.transpose(1, 2).reshape(b, c, hh, ww)
        h = F.silu(self.norm_up(self.up(h)))
        out = self.out(h)
        return out[..., :height, :width]


class TextEncoder(nn.Module):
    """Hash-bucketed token embeddings with fixed sinusoidal positions.

    Tokenization hashes each lowercase word into a fixed vocabulary, so the
    same string maps to the same id sequence in every process with no
    vocabulary file to distribute.  The module is frozen; it provides both
    per-token features (for cross-attention) and a pooled unit vector (for
    the embedding endpoint).
    """

    VOCAB = 512
    MAX_TOKENS = 32

    def __init__(self, dim: int, model_id: str):
        super().__init__()
        self.dim = dim
        self.model_id = model_id
        self.embed = nn.Embedding(self.VOCAB, dim)
        self.proj = nn.Linear(dim, dim)
        seeded_init(self, "text-encoder", model_id, dim)
        self.requires_grad_(False)
        self.eval()

    def token_ids(self, text: str) -> list[int]:
        words = re.findall(r"[a-z0-9]+", text.lower())[: self.MAX_TOKENS]
        if not words:
            words = ["<empty>"]
        return [hash_uint(self.VOCAB, "worker-token", w) for w in words]

    def encode_batch(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (B, L, dim) padded features and a (B, L) True-where-real mask."""
        ids = [self.token_ids(t) for t in texts]
        length = max(len(seq) for seq in ids)
        tokens = torch.zeros(len(ids), length, dtype=torch.long)
        mask = torch.zeros(len(ids), length, dtype=torch.bool)
        for row, seq in enumerate(ids):
            tokens[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
            mask[row, : len(seq)] = True
        positions = _sinusoidal(torch.arange(length, dtype=torch.float32), self.dim)
        feats = self.embed(tokens) + positions[None, :, :]
        return feats * mask[:, :, None], mask

    def pooled(self, text: str) -> np.ndarray:
        """Unit-norm float64 vector for one string."""
        with torch.no_grad():
            feats, mask = self.encode_batch([text])
            mean = feats.sum(dim=1) / mask.sum(dim=1, keepdim=True)
            vec = F.normalize(self.proj(mean), dim=-1)
        return vec[0].double().numpy()


class ImageEncoder(nn.Module):
    """Small frozen convnet: pixels at any resolution to a unit vector."""

    def __init__(self, embed_dim: int, channels: int, model_id: str):
        super().__init__()
        self.model_id = model_id
        c = channels
        groups = max(1, c // 4)
        self.conv1 = nn.Conv2d(3, c, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(groups, c)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.norm2 = nn.GroupNorm(groups, 2 * c)
        self.conv3 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.head = nn.Linear(2 * c, embed_dim)
        seeded_init(self, "image-encoder", model_id, embed_dim, channels)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = F.silu(self.norm2(self.conv2(h)))
        h = F.silu(self.conv3(h))
        pooled = h.mean(dim=(2, 3))
        return F.normalize(self.head(pooled), dim=-1)

    def encode(self, image_bytes: bytes) -> np.ndarray:
        pixels = decode_image(image_bytes)
        with torch.no_grad():
            vec = self.forward(pixels_to_tensor(pixels).unsqueeze(0))
        return vec[0].double().numpy()


class Embedder:
    """Two-tower embedding model sharing one output space.

    Text and image vectors have the same dimension and unit norm, so their
    dot product is directly the cosine score the filtering stage consumes.
    """

    def __init__(self, embed_dim: int, channels: int, model_id: str):
        self.model_id = model_id
        self.embed_dim = embed_dim
        self.text = TextEncoder(embed_dim, model_id + "/text")
        self.image = ImageEncoder(embed_dim, channels, model_id + "/image")

    def encode_text(self, text: str) -> np.ndarray:
        return self.text.pooled(text)

    def encode_image(self, image_bytes: bytes) -> np.ndarray:
        return self.image.encode(image_bytes)


class TinyClassifier(nn.Module):
    """Conv backbone with a task-sized linear head.

    The backbone is shared across tasks; the head is built per job with the
    class count the task requires.
    """

    def __init__(self, num_classes: int, channels: int, model_id: str):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.model_id = model_id
        self.num_classes = num_classes
        c = channels
        groups = max(1, c // 4)
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1),
            nn.GroupNorm(groups, c),
            nn.SiLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c, 2 * c, 3, padding=1),
            nn.GroupNorm(groups, 2 * c),
            nn.SiLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(2 * c, num_classes)
        seeded_init(self, "classifier", model_id, num_classes, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).flatten(1))


# --- builders ------------------------------------------------------------------
#
# Only the tiny identities resolve to constructible models.  Everything else
# is treated as an external checkpoint that is absent on this host.


def build_denoiser(model_id: str, channels: int, text_dim: int) -> TinyDenoiser:
    if model_id != TINY_GENERATOR:
        raise ModelLoadError(
            f"no local weights for generator {model_id!r}; only {TINY_GENERATOR!r} "
            "is available on this host"
        )
    return TinyDenoiser(channels, text_dim, model_id)


def build_text_encoder(model_id: str, text_dim: int) -> TextEncoder:
    if model_id != TINY_GENERATOR:
        raise ModelLoadError(
            f"no local text tower for generator {model_id!r}; only {TINY_GENERATOR!r} "
            "is available on this host"
        )
    return TextEncoder(text_dim, model_id + "/cond")


def build_embedder(model_id: str, embed_dim: int, channels: int) -> Embedder:
    if model_id != TINY_EMBEDDER:
        raise ModelLoadError(
            f"no local weights for embedder {model_id!r}; only {TINY_EMBEDDER!r} "
            "is available on this host"
        )
    return Embedder(embed_dim, channels, model_id)


def build_classifier(model_id: str, num_classes: int, channels: int) -> TinyClassifier:
    if model_id != TINY_CLASSIFIER:
        raise ModelLoadError(
            f"no local weights for classifier backbone {model_id!r}; only "
            f"{TINY_CLASSIFIER!r} is available on this host"
        )
    return TinyClassifier(num_classes, channels, model_id)


# Serving mutates LoRA state on shared modules; hold this while installing
# adapters and running the forward passes that depend on them.
class AdapterScope:
    """Context manager that installs adapters on a denoiser, then removes them."""

    def __init__(
        self,
        denoiser: TinyDenoiser,
        adapters: dict[str, LowRankAdapter] | None,
        lock: threading.Lock,
    ):
        self._denoiser = denoiser
        self._adapters = adapters or {}
        self._lock = lock

    def __enter__(self) -> TinyDenoiser:
        self._lock.acquire()
        targets = self._denoiser.attention.targets()
        try:
            for name, adapter in self._adapters.items():
                if name not in targets:
                    raise ValueError(f"unknown adapter target {name!r}")
                targets[name].install_lora(adapter)
        except Exception:
            self._release()
            raise
        return self._denoiser

    def __exit__(self, *exc_info: object) -> None:
        self._release()

    def _release(self) -> None:
        for layer in self._denoiser.attention.targets().values():
            layer.clear_lora()
        self._lock.release()
