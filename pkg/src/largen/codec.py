"""Pixel/latent plumbing for the locate mechanism.

Images are float tensors shaped ``(..., H, W, 3)`` with values in [0, 1].
Latents are channel-first, ``(..., c, h, w)``, so they feed convolutions
directly. The codec is an exact space-to-depth rearrangement: ``c = 3 f**2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CropWindow:
    x0: int
    y0: int
    side: int

    def to_json(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "side": self.side}

    @classmethod
    def from_json(cls, d: dict) -> "CropWindow":
        return cls(int(d["x0"]), int(d["y0"]), int(d["side"]))

    def crop(self, x: torch.Tensor) -> torch.Tensor:
        """Crop an ``(..., H, W[, 3])`` image or mask; mask if ``x.ndim == 2``."""
        if x.ndim >= 3 and x.shape[-1] == 3:
            return x[..., self.y0:self.y0 + self.side, self.x0:self.x0 + self.side, :]
        return x[..., self.y0:self.y0 + self.side, self.x0:self.x0 + self.side]


@dataclass
class LatentBundle:
    z: torch.Tensor
    m_star: torch.Tensor
    z_s: torch.Tensor
    z_tilde: torch.Tensor


def _check_divisible(h: int, w: int, f: int) -> None:
    if h <= 0 or w <= 0 or h % f or w % f:
        raise CodecError(f"image size {h}x{w} is not a positive multiple of f={f}")


def encode(image: torch.Tensor, f: int = 4) -> torch.Tensor:
    image = torch.as_tensor(image)
    if image.ndim < 3 or image.shape[-1] != 3:
        raise CodecError(f"expected (..., H, W, 3) image, got {tuple(image.shape)}")
    _check_divisible(image.shape[-3], image.shape[-2], f)
    lead = image.shape[:-3]
    x = image.reshape(-1, *image.shape[-3:]).permute(0, 3, 1, 2)
    z = F.pixel_unshuffle(x, f)
    return z.reshape(*lead, *z.shape[1:])


def decode(latent: torch.Tensor, f: int = 4) -> torch.Tensor:
    latent = torch.as_tensor(latent)
    c = latent.shape[-3]
    if c != 3 * f * f:
        raise CodecError(f"latent has {c} channels, expected {3 * f * f} for f={f}")
    lead = latent.shape[:-3]
    x = F.pixel_shuffle(latent.reshape(-1, *latent.shape[-3:]), f)
    x = x.permute(0, 2, 3, 1)
    return x.reshape(*lead, *x.shape[1:])


def _check_mask_pair(x: torch.Tensor, m: torch.Tensor) -> None:
    if m.shape != x.shape[:-1]:
        raise CodecError(f"mask shape {tuple(m.shape)} does not match image {tuple(x.shape)}")


def encode_masked_source(x_s: torch.Tensor, m: torch.Tensor, f: int = 4) -> torch.Tensor:
    x_s, m = torch.as_tensor(x_s), torch.as_tensor(m)
    _check_mask_pair(x_s, m)
    keep = (m == 0).unsqueeze(-1)
    return encode(torch.where(keep, x_s, torch.zeros_like(x_s)), f)


def resize_mask(m: torch.Tensor, f: int = 4) -> torch.Tensor:
    """Max-pool a binary mask to latent resolution; keeps the input dtype."""
    m = torch.as_tensor(m)
    _check_divisible(m.shape[-2], m.shape[-1], f)
    lead = m.shape[:-2]
    flat = m.reshape(-1, 1, *m.shape[-2:]).to(torch.float64)
    pooled = F.max_pool2d(flat, f)
    pooled = (pooled > 0).to(m.dtype)
    return pooled.reshape(*lead, *pooled.shape[-2:])


def assemble_input(z: torch.Tensor, m_star: torch.Tensor, z_s: torch.Tensor) -> LatentBundle:
    if z.shape != z_s.shape:
        raise CodecError(f"z {tuple(z.shape)} and z_s {tuple(z_s.shape)} differ")
    if m_star.shape != z.shape[:-3] + z.shape[-2:]:
        raise CodecError(f"m* {tuple(m_star.shape)} does not match latent grid {tuple(z.shape)}")
    z_tilde = torch.cat([z, m_star.unsqueeze(-3).to(z.dtype), z_s], dim=-3)
    return LatentBundle(z=z, m_star=m_star, z_s=z_s, z_tilde=z_tilde)


def mask_bbox(m: torch.Tensor) -> tuple[int, int, int, int]:
    """Bounding box ``(x0, y0, x1, y1)`` with exclusive upper corners."""
    ys, xs = torch.nonzero(torch.as_tensor(m), as_tuple=True)
    if ys.numel() == 0:
        raise CodecError("empty mask")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def zoom_window(m: torch.Tensor, margin: float = 0.5, f: int = 4) -> CropWindow:
    """Square crop around the mask.

    Side is ``ceil(max(bw, bh) * (1 + margin))`` rounded up to a multiple of
    ``f`` and capped at the short image edge; the window is centred on the
    mask box then shifted inside the image.
    """
    m = torch.as_tensor(m)
    H, W = m.shape[-2:]
    _check_divisible(H, W, f)
    if margin < 0:
        raise CodecError("margin must be non-negative")
    x0, y0, x1, y1 = mask_bbox(m)
    extent = max(x1 - x0, y1 - y0)
    side = math.ceil(extent * (1.0 + margin))
    side = -(-side // f) * f
    side = min(side, H, W)
    if side < extent:
        raise CodecError(f"mask extent {extent} does not fit a square window in {H}x{W}")

    def place(lo: int, hi: int, limit: int) -> int:
        start = math.floor((lo + hi) / 2 - side / 2)
        return min(max(start, 0), limit - side)

    return CropWindow(x0=place(x0, x1, W), y0=place(y0, y1, H), side=side)


def composite(x_s: torch.Tensor, m: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    x_s, m, generated = map(torch.as_tensor, (x_s, m, generated))
    _check_mask_pair(x_s, m)
    if generated.shape != x_s.shape:
        raise CodecError(f"generated {tuple(generated.shape)} does not match source {tuple(x_s.shape)}")
    return torch.where((m != 0).unsqueeze(-1), generated.to(x_s.dtype), x_s)


def resize_image(x: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of an ``(H, W, 3)`` image to ``size x size``."""
    if x.shape[-3] == size and x.shape[-2] == size:
        return x
    y = F.interpolate(x.permute(2, 0, 1)[None], size=(size, size), mode="bilinear",
                      align_corners=False, antialias=True)
    return y[0].permute(1, 2, 0).clamp(0.0, 1.0)


def resize_binary(m: torch.Tensor, size: int) -> torch.Tensor:
    if m.shape[-2] == size and m.shape[-1] == size:
        return m
    y = F.interpolate(m[None, None].float(), size=(size, size), mode="nearest")
    return (y[0, 0] > 0.5).to(m.dtype)
