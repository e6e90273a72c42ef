"""Benchmark assembly and CLIP-style region metrics.

A benchmark is the full cross product scenes x subjects x prompt templates,
ordered scene-major. Every template holds one ``S*`` placeholder that is
replaced by the subject's category label. Metrics compare the mask-box crop
of the output with the background-free subject (image score) and with the
instantiated prompt (text score) under a pluggable pair of unit-norm embedders.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import codec
from .conditioner import tokenize
from .data_engine.scenes import COLORS, STRIPE_SHADE
from .imageio import load_image, load_mask, save_image, save_mask
from .sampler import GuidanceConfig, InpaintRequest, sample_batch

PLACEHOLDER = "S*"
BG_GRAY = 0.5

PROMPTS_NON_LIVE = (
    "a S* on top of a white fabric",
    "a S* on top of a purple rug",
    "a S* nearby some books",
    "a S* on top of a wooden box",
    "a red S*",
    "a green S*",
    "a S*, and some sunflowers at around",
    "a S*, and some autumn leaves at around",
    "a S* nearby a ball",
    "a S* in front of a cube-shaped metal",
)
PROMPTS_LIVE = (
    "a S* running",
    "a S* on top of a purple rug",
    "a S* nearby some books",
    "a S* wearing a bowtie",
    "a S* wearing a top hat",
    "a S* plays with a ball",
    "a S*, and some sunflowers at around",
    "a S*, and some autumn leaves at around",
    "a S* wearing sunglasses",
    "a S* wearing a rainbow scarf",
)
ABLATION_VARIANTS = ("baseline", "+locate", "+assign", "+refine")


class BenchmarkError(ValueError):
    pass


@dataclass
class Scene:
    name: str
    image: torch.Tensor
    mask: torch.Tensor


@dataclass
class Subject:
    name: str
    image: torch.Tensor
    bg_free: torch.Tensor
    label: str


@dataclass
class BenchSample:
    sample_id: str
    scene: int
    subject: int
    template: int
    prompt: str
    seed: int


@dataclass
class Benchmark:
    scenes: list[Scene]
    subjects: list[Subject]
    prompts: list[str]
    samples: list[BenchSample]


def sample_seed(sample_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(sample_id.encode(), digest_size=4).digest(), "little") & 0x7FFFFFFF


def instantiate(template: str, label: str) -> str:
    if template.count(PLACEHOLDER) != 1:
        raise BenchmarkError(f"template must contain exactly one {PLACEHOLDER}: {template!r}")
    return template.replace(PLACEHOLDER, label)


def background_free(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.where((mask != 0).unsqueeze(-1), image, torch.full_like(image, BG_GRAY))


def cross_product(scenes: list[Scene], subjects: list[Subject], prompts: list[str]) -> Benchmark:
    if not scenes or not subjects or not prompts:
        raise BenchmarkError("benchmark needs at least one scene, subject and prompt")
    samples = []
    for i, _ in enumerate(scenes):
        for j, subj in enumerate(subjects):
            for k, template in enumerate(prompts):
                sid = f"sc{i:03d}_sj{j:03d}_p{k:03d}"
                samples.append(BenchSample(sid, i, j, k, instantiate(template, subj.label), sample_seed(sid)))
    return Benchmark(scenes, subjects, list(prompts), samples)


def read_prompt_file(path: str | Path) -> list[str]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    prompts = [ln for ln in lines if ln]
    for p in prompts:
        if p.count(PLACEHOLDER) != 1:
            raise BenchmarkError(f"template must contain exactly one {PLACEHOLDER}: {p!r}")
    return prompts


def _subdirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise BenchmarkError(f"missing benchmark directory {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise BenchmarkError(f"no assets under {root}")
    return dirs


def build_benchmark(scene_dir: str | Path, subject_dir: str | Path, prompt_file: str | Path) -> Benchmark:
    """Scenes: ``<name>/{image,mask}.png``. Subjects: ``<name>/{image,mask}.png`` + ``meta.json`` label."""
    try:
        scenes = [Scene(d.name, load_image(d / "image.png"), load_mask(d / "mask.png"))
                  for d in _subdirs(Path(scene_dir))]
        subjects = []
        for d in _subdirs(Path(subject_dir)):
            img, mask = load_image(d / "image.png"), load_mask(d / "mask.png")
            label = json.loads((d / "meta.json").read_text())["label"]
            subjects.append(Subject(d.name, img, background_free(img, mask), label))
        prompts = read_prompt_file(prompt_file)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise BenchmarkError(f"unreadable benchmark asset: {exc}") from exc
    for s in scenes:
        if s.mask.shape != s.image.shape[:-1] or not bool(s.mask.any()):
            raise BenchmarkError(f"scene {s.name} has a bad mask")
    return cross_product(scenes, subjects, prompts)


def write_benchmark(out: str | Path, scenes: Sequence[tuple[torch.Tensor, torch.Tensor]],
                    subjects: Sequence[tuple[torch.Tensor, torch.Tensor, str]], prompts: Sequence[str]) -> dict:
    out = Path(out)
    for i, (img, mask) in enumerate(scenes):
        d = out / "scenes" / f"{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        save_image(d / "image.png", img)
        save_mask(d / "mask.png", mask)
    for j, (img, mask, label) in enumerate(subjects):
        d = out / "subjects" / f"{j:03d}"
        d.mkdir(parents=True, exist_ok=True)
        save_image(d / "image.png", img)
        save_mask(d / "mask.png", mask)
        (d / "meta.json").write_text(json.dumps({"label": label}, sort_keys=True) + "\n")
    (out / "prompts.txt").write_text("\n".join(prompts) + "\n")
    return {"scenes": str(out / "scenes"), "subjects": str(out / "subjects"), "prompts": str(out / "prompts.txt")}


def make_toy_benchmark(dataset_root: str | Path, out: str | Path, n_scenes: int = 4, n_subjects: int = 3,
                       prompts: Sequence[str] = PROMPTS_NON_LIVE[:5]) -> dict:
    """Scenes and subjects drawn from a built quadruplet dataset; subjects have distinct tags."""
    from .data_engine import load_dataset

    quads = load_dataset(dataset_root)
    scenes, seen_scene = [], set()
    for q in quads:
        if q.meta["scene_seed"] not in seen_scene and len(scenes) < n_scenes:
            seen_scene.add(q.meta["scene_seed"])
            scenes.append((q.source, q.mask))
    subjects, seen_tag = [], set()
    for q in quads:
        if q.meta["tag"] not in seen_tag and len(subjects) < n_subjects:
            seen_tag.add(q.meta["tag"])
            subjects.append((q.subject, q.subject_mask(), q.meta["tag"]))
    if len(scenes) < n_scenes or len(subjects) < n_subjects:
        raise BenchmarkError("dataset too small for the requested benchmark")
    return write_benchmark(out, scenes, subjects, prompts)


# embedders

def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.to(torch.float64), b.to(torch.float64)
    return float((a @ b) / (a.norm() * b.norm()))


class EmbedderPair:
    def __init__(self, image: Callable[[torch.Tensor], torch.Tensor], text: Callable[[str], torch.Tensor]):
        self._image = image
        self._text = text

    @staticmethod
    def _unit(v: torch.Tensor) -> torch.Tensor:
        v = v.to(torch.float64)
        n = v.norm()
        if not torch.isfinite(n) or n == 0:
            raise ValueError("embedding has zero or non-finite norm")
        return v / n

    def image(self, x: torch.Tensor) -> torch.Tensor:
        return self._unit(self._image(x))

    def text(self, s: str) -> torch.Tensor:
        return self._unit(self._text(s))


class ToyEmbedders(EmbedderPair):
    """Seeded stand-in for a joint image/text embedder.

    Both modalities share a color-concept block (palette color fractions for
    images, color words for text) next to a seeded random appearance block.
    """

    def __init__(self, seed: int = 7, resolution: int = 16, appearance_dim: int = 48, concept_weight: float = 2.0):
        self.resolution = resolution
        self.concept_weight = concept_weight
        gen = torch.Generator().manual_seed(seed)
        n_pix = 3 * resolution**2
        self.pixel_proj = torch.randn(n_pix, appearance_dim, generator=gen, dtype=torch.float64) / math.sqrt(n_pix)
        self.word_table = torch.randn(4096, appearance_dim, generator=gen, dtype=torch.float64)
        self.color_names = list(COLORS)
        full = torch.tensor([COLORS[c] for c in self.color_names], dtype=torch.float64)
        self.palette = torch.cat([full, full * STRIPE_SHADE])
        super().__init__(self._embed_image, self._embed_text)

    def _resize(self, x: torch.Tensor) -> torch.Tensor:
        r = self.resolution
        y = F.interpolate(x.to(torch.float64).permute(2, 0, 1)[None], size=(r, r), mode="bilinear",
                          align_corners=False, antialias=True)
        return y[0].permute(1, 2, 0)

    def color_fractions(self, x: torch.Tensor) -> torch.Tensor:
        px = self._resize(x).reshape(-1, 3)
        dist = torch.cdist(px, self.palette)
        chroma = px.max(dim=1).values - px.min(dim=1).values
        nearest = dist.argmin(dim=1) % len(self.color_names)
        colored = chroma > 0.15
        counts = torch.bincount(nearest[colored], minlength=len(self.color_names)).to(torch.float64)
        return counts / px.shape[0]

    def _embed_image(self, x: torch.Tensor) -> torch.Tensor:
        if x.numel() == 0:
            raise ValueError("empty image region")
        appearance = (self._resize(x).reshape(-1) - 0.5) @ self.pixel_proj
        concept = self.color_fractions(x)
        concept = concept / concept.norm() if concept.norm() > 0 else concept
        return torch.cat([self.concept_weight * concept, appearance / (appearance.norm() + 1e-12)])

    def _embed_text(self, s: str) -> torch.Tensor:
        words = s.lower().replace(",", " ").split()
        concept = torch.tensor([float(c in words) for c in self.color_names], dtype=torch.float64)
        concept = concept / concept.norm() if concept.norm() > 0 else concept
        ids = [i for i in tokenize(s, 4096, 64) if i]
        appearance = self.word_table[ids].sum(0) if ids else torch.zeros(self.word_table.shape[1], dtype=torch.float64)
        return torch.cat([self.concept_weight * concept, appearance / (appearance.norm() + 1e-12)])


def inpainted_region(output: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = codec.mask_bbox(mask)
    return output[y0:y1, x0:x1]


def clip_i(region: torch.Tensor, subject_bg_free: torch.Tensor, emb: EmbedderPair) -> float:
    if region.numel() == 0:
        raise ValueError("empty region")
    return float(emb.image(region) @ emb.image(subject_bg_free))


def clip_t(region: torch.Tensor, prompt: str, emb: EmbedderPair) -> float:
    if region.numel() == 0:
        raise ValueError("empty region")
    return float(emb.image(region) @ emb.text(prompt))


# experiments

@dataclass
class MetricRow:
    sample_id: str
    beta: float
    clip_i: float
    clip_t: float
    variant: str
    seed: int


def evaluate(bench: Benchmark, model, gcfg: GuidanceConfig, emb: EmbedderPair | None = None,
             variant: str = "main", use_subject: bool = True, batch_size: int = 64,
             samples: Sequence[BenchSample] | None = None) -> list[MetricRow]:
    """Inpaint every benchmark sample with its paired seed and score the mask-box region."""
    emb = emb or ToyEmbedders()
    size = model.cfg.image_size
    todo = list(samples if samples is not None else bench.samples)
    rows: list[MetricRow] = []
    for start in range(0, len(todo), batch_size):
        chunk = todo[start:start + batch_size]
        reqs = []
        for s in chunk:
            scene, subj = bench.scenes[s.scene], bench.subjects[s.subject]
            if scene.image.shape[:2] != (size, size):
                raise BenchmarkError(f"scene {scene.name} must be {size}x{size}")
            x_obj = codec.resize_image(subj.image, size) if use_subject else None
            reqs.append(InpaintRequest(scene.image, scene.mask, x_obj, s.prompt))
        outs = sample_batch(reqs, gcfg, model, seeds=[s.seed for s in chunk])
        for s, out in zip(chunk, outs):
            region = inpainted_region(out, bench.scenes[s.scene].mask)
            subj = bench.subjects[s.subject]
            rows.append(MetricRow(s.sample_id, gcfg.beta, clip_i(region, subj.bg_free, emb),
                                  clip_t(region, s.prompt, emb), variant, s.seed))
    return rows


def summarize(rows: Sequence[MetricRow], key: Callable[[MetricRow], object]) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault(key(r), []).append(r)
    return [{"key": k, "mean_clip_i": float(np.mean([r.clip_i for r in g])),
             "mean_clip_t": float(np.mean([r.clip_t for r in g])), "n": len(g)} for k, g in groups.items()]


def sweep_beta(bench: Benchmark, model, betas: Sequence[float], gcfg: GuidanceConfig | None = None,
               emb: EmbedderPair | None = None, **kw) -> tuple[list[MetricRow], list[dict]]:
    """One summary row per beta; every beta reuses the same per-sample seeds."""
    gcfg = gcfg or GuidanceConfig()
    rows = []
    for beta in betas:
        cfg = GuidanceConfig(**{**gcfg.to_dict(), "beta": float(beta)})
        rows.extend(evaluate(bench, model, cfg, emb, variant=kw.get("variant", "main"),
                             batch_size=kw.get("batch_size", 64)))
    summary = [{"beta": s["key"], **{k: v for k, v in s.items() if k != "key"}}
               for s in summarize(rows, lambda r: r.beta)]
    return rows, summary


def parse_betas(spec: str) -> list[float]:
    """``"0.1:1.0:0.1"`` (inclusive range) or ``"0.1,0.5,1"``."""
    if ":" in spec:
        lo, hi, step = (float(v) for v in spec.split(":"))
        if step <= 0 or hi < lo:
            raise ValueError(f"bad beta range {spec!r}")
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return [float(v) for v in spec.split(",") if v.strip()]


def variant_settings(name: str, manifest: dict) -> dict:
    """Evaluation switches for an ablation row, read from its checkpoint's training flags."""
    flags = manifest.get("ablation", {})
    return {"use_subject": bool(flags.get("assign", True)), "refine": bool(flags.get("refine", False))}


def ablation_table(bench: Benchmark, variants: dict[str, str | Path], gcfg: GuidanceConfig | None = None,
                   emb: EmbedderPair | None = None, batch_size: int = 64) -> tuple[list[MetricRow], list[dict]]:
    from .checkpoint import load_checkpoint

    missing = [v for v in ABLATION_VARIANTS if v not in variants or not Path(variants[v], "manifest.json").is_file()]
    if missing:
        raise BenchmarkError(f"missing variant checkpoints: {', '.join(missing)}")
    gcfg = gcfg or GuidanceConfig()
    rows = []
    for name in ABLATION_VARIANTS:
        model, manifest = load_checkpoint(variants[name])
        st = variant_settings(name, manifest)
        cfg = GuidanceConfig(**{**gcfg.to_dict(), "refine": st["refine"],
                                "beta": gcfg.beta if st["use_subject"] else 0.0})
        rows.extend(evaluate(bench, model, cfg, emb, variant=name, use_subject=st["use_subject"],
                             batch_size=batch_size))
    summary = [{"variant": s["key"], **{k: v for k, v in s.items() if k != "key"}}
               for s in summarize(rows, lambda r: r.variant)]
    return rows, summary


def write_results_csv(path: str | Path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "beta", "clip_i", "clip_t", "variant", "seed"])
        for r in rows:
            w.writerow([r.sample_id, repr(r.beta), repr(r.clip_i), repr(r.clip_t), r.variant, r.seed])


def write_summary_csv(path: str | Path, summary: Sequence[dict], key: str = "beta") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, "mean_clip_i", "mean_clip_t", "n"])
        for s in summary:
            w.writerow([repr(s[key]) if isinstance(s[key], float) else s[key],
                        repr(s["mean_clip_i"]), repr(s["mean_clip_t"]), s["n"]])
