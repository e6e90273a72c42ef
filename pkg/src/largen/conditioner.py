"""Conditioning signals: text tokens, projected subject tokens, detail tokens.

Everything except the detail MLP is a frozen buffer drawn from a seeded
generator, so a checkpoint's ``encoder_seed`` alone reproduces it.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .config import ModelConfig

PAD_ID = 0
_WORD = re.compile(r"[^\s,.;:!?]+")


def tokenize(s: str, vocab_size: int = 4096, max_len: int = 16) -> list[int]:
    """Lowercase, split on whitespace/punctuation, hash each word into the vocabulary.

    Id 0 is reserved for padding. Words past ``max_len`` are dropped.
    """
    ids = []
    for word in _WORD.findall(s.lower())[:max_len]:
        h = int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8).digest(), "little")
        ids.append(1 + h % (vocab_size - 1))
    return ids + [PAD_ID] * (max_len - len(ids))


@dataclass
class ConditionBundle:
    text: torch.Tensor
    image_tokens: torch.Tensor
    detail_tokens: torch.Tensor | None = None
    text_null: bool = False
    image_null: bool = False

    def replace(self, **kw) -> "ConditionBundle":
        return replace(self, **kw)


def _frozen(gen: torch.Generator, *shape: int, scale: float) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64).float() * scale


class Conditioner(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        d, fd = cfg.cond_dim, cfg.feature_dim
        patch_in = 3 * cfg.patch_size**2
        gen = torch.Generator().manual_seed(cfg.encoder_seed)
        self.register_buffer("text_table", _frozen(gen, cfg.vocab_size, d, scale=1.0))
        self.register_buffer("text_pos", _frozen(gen, cfg.text_len, d, scale=0.1))
        self.register_buffer("patch_embed", _frozen(gen, patch_in, fd, scale=patch_in**-0.5))
        self.register_buffer("proj_weight", _frozen(gen, fd, cfg.num_image_tokens * d, scale=fd**-0.5))
        self.register_buffer("proj_bias", _frozen(gen, cfg.num_image_tokens * d, scale=0.1))
        self.detail_mlp = nn.Sequential(
            nn.Linear(fd, cfg.detail_hidden), nn.GELU(), nn.Linear(cfg.detail_hidden, d)
        )
        mlp_gen = torch.Generator().manual_seed(cfg.encoder_seed + 1)
        with torch.no_grad():
            for layer in (self.detail_mlp[0], self.detail_mlp[2]):
                fan_in = layer.weight.shape[1]
                layer.weight.copy_(_frozen(mlp_gen, *layer.weight.shape, scale=fan_in**-0.5))
                layer.bias.zero_()

    # text
    def token_ids(self, prompts: str | list[str]) -> torch.Tensor:
        single = isinstance(prompts, str)
        batch = [prompts] if single else prompts
        ids = torch.tensor([tokenize(p, self.cfg.vocab_size, self.cfg.text_len) for p in batch])
        return ids[0] if single else ids

    def embed_text(self, prompts: str | list[str]) -> torch.Tensor:
        return self.text_table[self.token_ids(prompts)] + self.text_pos

    # image
    def _check_resolution(self, x: torch.Tensor) -> None:
        s = self.cfg.image_size
        if x.shape[-3:] != (s, s, 3):
            raise ValueError(f"subject image must be {s}x{s}x3, got {tuple(x.shape)}")

    def patch_features(self, x_obj: torch.Tensor) -> torch.Tensor:
        """Frozen linear patch features, ``(..., P, feature_dim)``."""
        self._check_resolution(x_obj)
        p = self.cfg.patch_size
        g = self.cfg.image_size // p
        lead = x_obj.shape[:-3]
        x = x_obj.reshape(*lead, g, p, g, p, 3).transpose(-4, -3)
        x = x.reshape(*lead, g * g, p * p * 3)
        return x @ self.patch_embed.to(x.dtype)

    def project_image(self, x_obj: torch.Tensor) -> torch.Tensor:
        pooled = self.patch_features(x_obj).mean(dim=-2)
        tokens = pooled @ self.proj_weight.to(pooled.dtype) + self.proj_bias.to(pooled.dtype)
        return tokens.reshape(*pooled.shape[:-1], self.cfg.num_image_tokens, self.cfg.cond_dim)

    def encode_detail(self, x_obj: torch.Tensor) -> torch.Tensor:
        return self.detail_mlp(self.patch_features(x_obj))

    def null_image_tokens(self, *lead: int, dtype=torch.float32) -> torch.Tensor:
        return torch.zeros(*lead, self.cfg.num_image_tokens, self.cfg.cond_dim, dtype=dtype)

    def null_bundle(self) -> ConditionBundle:
        return ConditionBundle(
            text=self.embed_text(""),
            image_tokens=self.null_image_tokens(),
            detail_tokens=None,
            text_null=True,
            image_null=True,
        )

    def bundle(self, prompt: str | None, x_obj: torch.Tensor | None, detail: bool = False) -> ConditionBundle:
        """Condition for one request; a missing modality becomes its null value."""
        text = self.embed_text(prompt or "")
        if x_obj is None:
            return ConditionBundle(text, self.null_image_tokens(), None, not prompt, True)
        return ConditionBundle(
            text,
            self.project_image(x_obj),
            self.encode_detail(x_obj) if detail else None,
            not prompt,
            False,
        )
