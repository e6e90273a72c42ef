"""RefineNet: a reference copy of the denoiser that supplies subject detail tokens.

It denoises the noised subject latent at the main branch's timestep, with
cross-attention reading only the detail tokens, and hands the input tokens of
its decoder self-attention layers to the main denoiser as extra keys/values.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import codec
from .denoiser import Denoiser, DenoiserError


@dataclass
class FeatureStash:
    entries: list[tuple[int, torch.Tensor]]

    def __len__(self) -> int:
        return len(self.entries)

    def buffers(self) -> list[torch.Tensor]:
        return [tokens for _, tokens in self.entries]


class RefineNet(nn.Module):
    """Wraps a denoiser clone; only its cross-attention weights are trainable."""

    def __init__(self, net: Denoiser):
        super().__init__()
        self.net = net
        self.stash_calls = 0
        self.set_trainable()

    @classmethod
    def from_denoiser(cls, main: Denoiser) -> "RefineNet":
        twin = copy.deepcopy(main)
        for layer in twin.cross_attention_layers():
            layer.image_branch = True
        return cls(twin)

    def cross_attention_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if ".cross_attn." in n}

    def set_trainable(self, flag: bool = True) -> None:
        names = self.cross_attention_names()
        for n, p in self.named_parameters():
            p.requires_grad_(flag and n in names)

    def refine_input(self, z_obj_t: torch.Tensor) -> torch.Tensor:
        """Noised subject latent padded with an empty mask channel and a zero source latent."""
        B, c, h, w = z_obj_t.shape
        return torch.cat([z_obj_t, z_obj_t.new_zeros(B, 1 + c, h, w)], dim=1)

    def stash_features(self, x_obj: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                       cond_detail: torch.Tensor, schedule) -> FeatureStash:
        """Batched: ``x_obj`` (B,H,W,3), ``t`` (B,), ``noise`` (B,c,h,w), ``cond_detail`` (B,P,d)."""
        t = torch.as_tensor(t)
        if bool((t < 0).any()) or bool((t >= schedule.T).any()):
            raise DenoiserError(f"timestep outside [0, {schedule.T})")
        self.stash_calls += 1
        z_obj = codec.encode(x_obj, self.net.cfg.factor).to(noise.dtype)
        z_t = schedule.add_noise(z_obj, t, noise)
        feats = self.net(self.refine_input(z_t), t, None, cond_detail, 1.0, capture=True)
        return FeatureStash(list(enumerate(feats)))
