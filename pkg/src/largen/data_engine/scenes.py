"""Synthetic scenes: flat shapes on gray backgrounds with exact ground truth.

Backgrounds are strictly gray (r == g == b) while every object color has
unequal channels, so an object's mask is exactly the set of pixels that differ
from the empty background render.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.10, 0.70, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.20, 0.75),
    "orange": (0.98, 0.55, 0.10),
    "cyan": (0.10, 0.80, 0.85),
}
SHAPES = ("circle", "square", "triangle")
TEXTURES = ("plain", "striped")
NON_ENTITY_TAGS = ("sky", "nature", "skin")
STRIPE_SHADE = 0.55


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _grid(v: float) -> float:
    return round(v * 255) / 255


@dataclass
class SceneObject:
    shape: str
    color: str
    texture: str
    bbox: tuple[int, int, int, int]
    mask: torch.Tensor = field(repr=False)

    @property
    def tag(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass
class SyntheticScene:
    size: int
    background: dict
    objects: list[SceneObject]
    extra_tags: list[str]

    def find(self, tag: str) -> SceneObject | None:
        return next((o for o in self.objects if o.tag == tag), None)


def render_background(spec: dict, size: int) -> torch.Tensor:
    if spec["kind"] == "solid":
        col = np.full(size, spec["level"])
    else:
        col = np.linspace(spec["top"], spec["bottom"], size)
    col = np.rint(col * 255) / 255
    img = np.repeat(col[:, None], size, axis=1)
    return torch.from_numpy(np.repeat(img[:, :, None], 3, axis=2).astype(np.float32))


def rasterize(shape: str, x0: int, y0: int, side: int, size: int) -> torch.Tensor:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    u, v = (xs - x0) / side, (ys - y0) / side
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    if shape == "circle":
        inside &= (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == "triangle":
        inside &= np.abs(u - 0.5) <= v / 2
    elif shape != "square":
        raise ValueError(f"unknown shape {shape!r}")
    return torch.from_numpy(inside.astype(np.float32))


def _tight_bbox(mask: torch.Tensor) -> tuple[int, int, int, int]:
    ys, xs = torch.nonzero(mask, as_tuple=True)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def paint(image: torch.Tensor, obj: SceneObject) -> None:
    rgb = torch.tensor([_grid(c) for c in COLORS[obj.color]])
    dark = torch.tensor([_grid(c * STRIPE_SHADE) for c in COLORS[obj.color]])
    size = image.shape[0]
    colors = rgb.expand(size, size, 3).clone()
    if obj.texture == "striped":
        rows = (torch.arange(size) - obj.bbox[1]) // 2 % 2 == 1
        colors[rows] = dark
    sel = obj.mask.bool()
    image[sel] = colors[sel]


def generate_scene(seed: int, size: int = 64) -> tuple[torch.Tensor, SyntheticScene]:
    """Render 1-3 non-overlapping objects; same seed, same pixels."""
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        background = {"kind": "solid", "level": float(rng.uniform(0.35, 0.8))}
    else:
        top, bottom = rng.uniform(0.3, 0.85, size=2)
        background = {"kind": "gradient", "top": float(top), "bottom": float(bottom)}
    image = render_background(background, size)

    wanted = int(rng.integers(1, 4))
    objects: list[SceneObject] = []
    occupied = torch.zeros(size, size, dtype=torch.bool)
    attempts = 0
    while len(objects) < wanted and attempts < 60:
        attempts += 1
        r = rng.random()
        if r < 0.08:
            side = int(rng.integers(4, 8))
        elif r < 0.16:
            side = int(rng.integers(48, 58))
        else:
            side = int(rng.integers(12, 30))
        side = min(side, size)
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        texture = TEXTURES[int(rng.integers(len(TEXTURES)))]
        if any(o.shape == shape and o.color == color for o in objects):
            continue
        box = torch.zeros(size, size, dtype=torch.bool)
        box[max(y0 - 1, 0):y0 + side + 1, max(x0 - 1, 0):x0 + side + 1] = True
        if (box & occupied).any():
            continue
        mask = rasterize(shape, x0, y0, side, size)
        if mask.sum() == 0:
            continue
        occupied |= box
        objects.append(SceneObject(shape, color, texture, _tight_bbox(mask), mask))
    if not objects:  # the first attempt always fits an empty canvas; kept as a guard
        raise RuntimeError(f"scene {seed} has no objects")
    for obj in objects:
        paint(image, obj)
    extra = list(rng.choice(NON_ENTITY_TAGS, size=int(rng.integers(1, 3)), replace=False))
    return image, SyntheticScene(size, background, objects, [str(t) for t in extra])


def global_caption(scene: SyntheticScene) -> str:
    """Whole-image description; names shapes but not colors."""
    kind = "plain" if scene.background["kind"] == "solid" else "shaded"
    parts = [f"a {o.shape}" for o in scene.objects]
    listed = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    return f"a {kind} gray picture with {listed}"


def regional_caption(obj: SceneObject) -> str:
    return f"a {obj.texture} {obj.color} {obj.shape}"
