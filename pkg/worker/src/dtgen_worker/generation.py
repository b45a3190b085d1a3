"""Deterministic image synthesis from the denoiser.

The sampler starts from seed-derived Gaussian noise and walks a fixed
contraction schedule: each step subtracts the predicted noise scaled by the
remaining step budget.  There is no stochastic term after the initial draw,
so (prompt, seed, size, steps, adapter) fully determines the output pixels
and therefore the PNG bytes and content hash.
"""

from __future__ import annotations

import threading

import numpy as np
import torch

from dtgen.adapter_math import LowRankAdapter

from .modeling import AdapterScope, TextEncoder, TinyDenoiser

__all__ = ["Sampler"]


class Sampler:
    """Serializes generation on one denoiser instance.

    Adapter installation mutates the shared module, so the whole
    install-forward-remove sequence runs under one lock; embedding and job
    endpoints are unaffected.
    """

    def __init__(self, denoiser: TinyDenoiser, text_encoder: TextEncoder, model_id: str):
        self.denoiser = denoiser
        self.text_encoder = text_encoder
        self.model_id = model_id
        self._lock = threading.Lock()

    def generate(
        self,
        prompt: str,
        seed: int,
        width: int,
        height: int,
        steps: int,
        adapters: dict[str, LowRankAdapter] | None = None,
    ) -> np.ndarray:
        """Returns (height, width, 3) uint8 pixels."""
        text, mask = self.text_encoder.encode_batch([prompt])
        gen = torch.Generator()
        gen.manual_seed(int(seed))
        x = torch.randn(1, 3, height, width, generator=gen)
        schedule = torch.linspace(1.0, 1.0 / steps, steps)
        with AdapterScope(self.denoiser, adapters, self._lock) as model:
            with torch.no_grad():
                for t in schedule:
                    eps = model(x, t.view(1), text, mask)
                    x = x - eps / steps
        pixels = ((torch.tanh(x[0]) + 1.0) * 127.5).round().clamp(0, 255).to(torch.uint8)
        return pixels.permute(1, 2, 0).numpy()
