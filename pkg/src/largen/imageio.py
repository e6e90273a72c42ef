"""8-bit PNG round trip for images and masks."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(x: torch.Tensor) -> np.ndarray:
    arr = torch.as_tensor(x).detach().to(torch.float64).clamp(0.0, 1.0).cpu().numpy()
    return np.rint(arr * 255.0).astype(np.uint8)


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Snap to the 1/255 grid, the values that survive a PNG round trip."""
    return torch.from_numpy(to_uint8(x).astype(np.float32) / 255.0)


def png_bytes(x: torch.Tensor, mask: bool = False) -> bytes:
    if mask:
        arr = np.where(torch.as_tensor(x).cpu().numpy() > 0, 255, 0).astype(np.uint8)
    else:
        arr = to_uint8(x)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L" if mask else "RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_image(path: str | Path, x: torch.Tensor) -> None:
    Path(path).write_bytes(png_bytes(x))


def save_mask(path: str | Path, m: torch.Tensor) -> None:
    Path(path).write_bytes(png_bytes(m, mask=True))


def load_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def load_mask(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return torch.from_numpy((arr > 127).astype(np.float32))
