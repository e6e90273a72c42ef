"""Model dimensions and seeds shared by every component."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    factor: int = 4
    base_channels: int = 32
    mid_channels: int = 64
    groups: int = 8
    cond_dim: int = 64
    text_len: int = 16
    vocab_size: int = 4096
    num_image_tokens: int = 16
    patch_size: int = 8
    feature_dim: int = 64
    detail_hidden: int = 128
    time_dim: int = 64
    train_steps: int = 1000
    encoder_seed: int = 1234
    init_seed: int = 0

    @property
    def latent_channels(self) -> int:
        return 3 * self.factor**2

    @property
    def latent_size(self) -> int:
        return self.image_size // self.factor

    @property
    def input_channels(self) -> int:
        return 2 * self.latent_channels + 1

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
