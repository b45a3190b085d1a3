"""Worker profiles: which models to serve and how to train.

A profile bundles model identities with training hyperparameters.  The
``production`` profile names full-scale public checkpoints and is the
default for real deployments; since this package ships no weights for them,
a worker started with it reports a degraded health status and refuses the
affected operations.  The ``tiny`` profile backs every model with a small
seeded network that loads instantly, which is what CI and local smoke runs
use.

Training hyperparameters that the wire contract does not carry (batch size,
learning rates, schedule shape) live here so every job log can record the
exact values it ran with.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

__all__ = ["WorkerConfig", "PROFILES", "get_profile"]


@dataclass(frozen=True)
class WorkerConfig:
    """Everything a worker instance needs besides filesystem locations."""

    profile: str
    generator_model: str
    embed_model: str
    classifier_backbone: str
    image_size: int
    embed_dim: int
    text_dim: int
    channels: int
    rank: int
    steps: int
    lam: float
    mu: float
    learning_rate: float
    batch_size: int
    classifier_epochs: int
    classifier_lr: float
    lr_step_size: int
    lr_gamma: float
    pool_size: int

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.rank < 1 or self.steps < 1:
            raise ValueError(f"rank and steps must be >= 1, got {self.rank}, {self.steps}")
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")

    def with_overrides(self, **changes: object) -> "WorkerConfig":
        return replace(self, **changes)


PROFILES: dict[str, WorkerConfig] = {
    "production": WorkerConfig(
        profile="production",
        generator_model="stable-diffusion-3.5-large",
        embed_model="clip-vit-base-patch32",
        classifier_backbone="resnet50-imagenet",
        image_size=1024,
        embed_dim=512,
        text_dim=2048,
        channels=320,
        rank=8,
        steps=1000,
        lam=1e-4,
        mu=1e-4,
        learning_rate=1e-4,
        batch_size=4,
        classifier_epochs=20,
        classifier_lr=1e-3,
        lr_step_size=8,
        lr_gamma=0.3,
        pool_size=4,
    ),
    "tiny": WorkerConfig(
        profile="tiny",
        generator_model="tiny-denoiser-v1",
        embed_model="tiny-embed-v1",
        classifier_backbone="tiny-cnn-v1",
        image_size=48,
        embed_dim=64,
        text_dim=32,
        channels=16,
        rank=4,
        steps=50,
        lam=1e-4,
        mu=1e-4,
        learning_rate=3e-3,
        batch_size=8,
        classifier_epochs=20,
        classifier_lr=3e-3,
        lr_step_size=8,
        lr_gamma=0.3,
        pool_size=4,
    ),
}


def get_profile(name: str) -> WorkerConfig:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r} (expected one of {sorted(PROFILES)})") from None
