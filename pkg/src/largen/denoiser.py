"""Noise-prediction U-Net with decoupled cross-attention and injectable self-attention.

Two resolutions (latent h and h/2). Each stage on both paths is two
residual blocks, one self-attention block and one cross-attention block.
Cross-attention fuses a text branch and an image branch as ``Z + beta * Z'``.
Decoder self-attention blocks accept extra key/value tokens from a reference
network; they never add query rows.
"""
from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


def attention_weights(q: torch.Tensor, k: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask, float("-inf"))
    return logits.softmax(dim=-1)


def attend(q, k, v, key_mask=None):
    """``Softmax(q k^T / sqrt(d)) v`` with ``d`` the query width."""
    return F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask)


def _matrix(rows: int, cols: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(rows, cols) * rows**-0.5)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=-1).float()


class DecoupledCrossAttention(nn.Module):
    """Shared queries over text keys and image keys; outputs ``(Z + beta Z') W_o``."""

    def __init__(self, channels: int, cond_dim: int, tokens: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.pos = nn.Parameter(torch.randn(tokens, channels) * 0.02)
        self.W_q = _matrix(channels, channels)
        self.W_k = _matrix(cond_dim, channels)
        self.W_v = _matrix(cond_dim, channels)
        self.W_k_img = _matrix(cond_dim, channels)
        self.W_v_img = _matrix(cond_dim, channels)
        self.W_o = _matrix(channels, channels)
        self.image_branch = True

    def attend(self, x: torch.Tensor, text: torch.Tensor | None, image: torch.Tensor | None,
               beta: float) -> torch.Tensor:
        q = x @ self.W_q
        if text is not None:
            z = attend(q, text @ self.W_k, text @ self.W_v)
        else:
            z = torch.zeros_like(q)
        if self.image_branch and image is not None:
            z = z + beta * attend(q, image @ self.W_k_img, image @ self.W_v_img)
        return z @ self.W_o

    def forward(self, h, text, image, beta):
        B, C, H, W = h.shape
        tokens = self.norm(h).flatten(2).transpose(1, 2) + self.pos
        out = self.attend(tokens, text, image, beta)
        return h + out.transpose(1, 2).reshape(B, C, H, W)


class InjectedSelfAttention(nn.Module):
    """Self-attention whose keys/values may be extended with reference tokens."""

    def __init__(self, channels: int, tokens: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.pos = nn.Parameter(torch.randn(tokens, channels) * 0.02)
        self.W_qs = _matrix(channels, channels)
        self.W_ks = _matrix(channels, channels)
        self.W_vs = _matrix(channels, channels)
        self.W_o = _matrix(channels, channels)

    def attend(self, c_ctx: torch.Tensor, c_obj: torch.Tensor | None = None,
               obj_keep: torch.Tensor | None = None) -> torch.Tensor:
        if c_obj is None:
            kv, key_mask = c_ctx, None
        else:
            if c_obj.shape[-1] != c_ctx.shape[-1]:
                raise ValueError(f"injected width {c_obj.shape[-1]} != context width {c_ctx.shape[-1]}")
            kv = torch.cat([c_ctx, c_obj.to(c_ctx.dtype)], dim=-2)
            key_mask = None
            if obj_keep is not None:
                n_ctx, n_obj = c_ctx.shape[-2], c_obj.shape[-2]
                keep = torch.cat([
                    torch.ones(obj_keep.shape[0], n_ctx, dtype=torch.bool),
                    obj_keep[:, None].expand(-1, n_obj),
                ], dim=1)
                key_mask = keep[:, None, :]
        q = c_ctx @ self.W_qs
        return attend(q, kv @ self.W_ks, kv @ self.W_vs, key_mask) @ self.W_o

    def tokens(self, h: torch.Tensor) -> torch.Tensor:
        return self.norm(h).flatten(2).transpose(1, 2) + self.pos

    def forward(self, h, c_obj=None, obj_keep=None, capture: list | None = None):
        B, C, H, W = h.shape
        c_ctx = self.tokens(h)
        if capture is not None:
            capture.append(c_ctx)
        out = self.attend(c_ctx, c_obj, obj_keep)
        return h + out.transpose(1, 2).reshape(B, C, H, W)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Stage(nn.Module):
    def __init__(self, cin: int, ch: int, tokens: int, cfg: ModelConfig):
        super().__init__()
        self.block0 = ResBlock(cin, ch, cfg.time_dim, cfg.groups)
        self.block1 = ResBlock(ch, ch, cfg.time_dim, cfg.groups)
        self.self_attn = InjectedSelfAttention(ch, tokens, cfg.groups)
        self.cross_attn = DecoupledCrossAttention(ch, cfg.cond_dim, tokens, cfg.groups)


class DenoiserError(ValueError):
    pass


class Denoiser(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c, c0, c1 = cfg.latent_channels, cfg.base_channels, cfg.mid_channels
        n0 = cfg.latent_size**2
        n1 = (cfg.latent_size // 2) ** 2
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.time_mlp = nn.Sequential(
                nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
            )
            self.conv_in = nn.Conv2d(cfg.input_channels, c0, 3, padding=1)
            self.enc = nn.ModuleDict({"res0": Stage(c0, c0, n0, cfg), "res1": Stage(c1, c1, n1, cfg)})
            self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
            self.mid = ResBlock(c1, c1, cfg.time_dim, cfg.groups)
            self.dec = nn.ModuleDict({"res1": Stage(2 * c1, c1, n1, cfg), "res0": Stage(2 * c0, c0, n0, cfg)})
            self.up = nn.Conv2d(c1, c0, 3, padding=1)
            self.norm_out = nn.GroupNorm(cfg.groups, c0)
            self.conv_out = nn.Conv2d(c0, c, 3, padding=1)
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)
            # per-channel, time-dependent linear path from the noisy latent to the output
            self.skip_gate = nn.Linear(cfg.time_dim, c)
            nn.init.zeros_(self.skip_gate.weight)
            nn.init.zeros_(self.skip_gate.bias)

    # decoder self-attention layers in execution order; stash indices follow it
    DECODER_ORDER = ("res1", "res0")

    @property
    def num_decoder_self_attn(self) -> int:
        return len(self.DECODER_ORDER)

    def decoder_token_widths(self) -> list[int]:
        return [self.dec[k].self_attn.W_qs.shape[0] for k in self.DECODER_ORDER]

    def cross_attention_layers(self) -> list[DecoupledCrossAttention]:
        return [m for m in self.modules() if isinstance(m, DecoupledCrossAttention)]

    def without_image_branch(self) -> "Denoiser":
        """A copy whose cross-attention layers compute the text branch only."""
        twin = copy.deepcopy(self)
        for layer in twin.cross_attention_layers():
            layer.image_branch = False
        return twin

    def _validate(self, z_tilde: torch.Tensor, t: torch.Tensor) -> None:
        if z_tilde.ndim != 4 or z_tilde.shape[1] != self.cfg.input_channels:
            raise DenoiserError(
                f"expected (B, {self.cfg.input_channels}, h, w) input, got {tuple(z_tilde.shape)}"
            )
        s = self.cfg.latent_size
        if z_tilde.shape[-2:] != (s, s):
            raise DenoiserError(f"latent grid must be {s}x{s}, got {tuple(z_tilde.shape[-2:])}")
        if t.ndim != 1 or t.shape[0] != z_tilde.shape[0]:
            raise DenoiserError("t must be a 1-D tensor with one timestep per sample")
        if bool((t < 0).any()) or bool((t >= self.cfg.train_steps).any()):
            raise DenoiserError(f"timestep outside [0, {self.cfg.train_steps})")

    def _stage(self, stage: Stage, h, temb, text, image, beta, c_obj=None, obj_keep=None,
               capture=None, cross=True):
        h = stage.block0(h, temb)
        h = stage.block1(h, temb)
        h = stage.self_attn(h, c_obj, obj_keep, capture)
        return stage.cross_attn(h, text, image, beta) if cross else h

    def forward(self, z_tilde: torch.Tensor, t: torch.Tensor, text: torch.Tensor | None,
                image: torch.Tensor | None, beta: float = 1.0,
                injected: list[torch.Tensor] | None = None, obj_keep: torch.Tensor | None = None,
                capture: bool = False):
        """Predict noise, or with ``capture=True`` return the decoder self-attention inputs.

        ``injected`` holds one token buffer per decoder self-attention layer in
        ``DECODER_ORDER``; ``obj_keep`` (B,) switches injection off per sample.
        """
        self._validate(z_tilde, t)
        if injected is not None:
            if len(injected) != self.num_decoder_self_attn:
                raise DenoiserError(f"expected {self.num_decoder_self_attn} injected buffers, got {len(injected)}")
        else:
            injected = [None] * self.num_decoder_self_attn
        stash = [] if capture else None
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(z_tilde.dtype))

        h0 = self._stage(self.enc["res0"], self.conv_in(z_tilde), temb, text, image, beta)
        h1 = self._stage(self.enc["res1"], self.down(h0), temb, text, image, beta)
        h = self.mid(h1, temb)
        h = self._stage(self.dec["res1"], torch.cat([h, h1], 1), temb, text, image, beta,
                        injected[0], obj_keep, stash)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        # the last stash entry is recorded before the final cross-attention
        h = self._stage(self.dec["res0"], torch.cat([self.up(h), h0], 1), temb, text, image, beta,
                        injected[1], obj_keep, stash, cross=not capture)
        if capture:
            return stash
        z_t = z_tilde[:, : self.cfg.latent_channels]
        return self.conv_out(F.silu(self.norm_out(h))) + self.skip_gate(temb)[:, :, None, None] * z_t


def predict_noise(model: Denoiser, z_tilde: torch.Tensor, t, text, image, beta=1.0, injected=None):
    """Single-sample convenience: ``(2c+1, h, w)`` in, ``(c, h, w)`` out."""
    t = torch.as_tensor([int(t)])
    inj = None if injected is None else [x[None] for x in injected]
    out = model(z_tilde[None], t, None if text is None else text[None],
                None if image is None else image[None], beta, inj)
    return out[0]
