"""Quadruplet factory: tag -> localize -> segment -> caption, then persist."""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .. import codec
from ..imageio import load_image, load_mask, save_image, save_mask
from .annotators import AnnotatorError, AnnotatorSuite
from .scenes import NON_ENTITY_TAGS, generate_scene, scene_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SIZE_RANGE = (0.02, 0.50)


class DataEngineError(RuntimeError):
    pass


@dataclass
class Quadruplet:
    source: torch.Tensor
    mask: torch.Tensor
    subject: torch.Tensor
    prompt: str
    meta: dict

    def validate(self, image_size: int = 64) -> None:
        if self.source.shape[-1] != 3 or self.mask.shape != self.source.shape[:-1]:
            raise DataEngineError("mask and source shapes disagree")
        if not torch.all((self.mask == 0) | (self.mask == 1)):
            raise DataEngineError("mask is not binary")
        if self.subject.shape != (image_size, image_size, 3):
            raise DataEngineError(f"subject is {tuple(self.subject.shape)}, expected {image_size}x{image_size}x3")
        ratio = float(self.mask.sum()) / self.mask.numel()
        if ratio == 0 or ratio > SIZE_RANGE[1]:
            raise DataEngineError(f"mask area ratio {ratio:.4f} outside thresholds")
        x0, y0, x1, y1 = self.meta["bbox"]
        outside = self.mask.clone()
        outside[y0:y1, x0:x1] = 0
        if outside.any():
            raise DataEngineError("mask extends outside its bounding box")
        if not self.prompt:
            raise DataEngineError("empty prompt")

    def subject_mask(self) -> torch.Tensor:
        """Tight mask cropped to the box and resized to the subject image."""
        x0, y0, x1, y1 = self.meta["bbox"]
        return crop_resize_mask(self.mask, (x0, y0, x1, y1), self.subject.shape[0])


def filter_tags(tags: Sequence[str], stoplist: Sequence[str] = NON_ENTITY_TAGS) -> list[str]:
    stop = {s.lower() for s in stoplist}
    return [t for t in tags if t.lower() not in stop]


def filter_size(bbox, image_dims: tuple[int, int], size_range: tuple[float, float] = SIZE_RANGE) -> bool:
    """Keep iff the box covers between ``size_range`` of the image area."""
    x0, y0, x1, y1 = bbox
    area = max(x1 - x0, 0) * max(y1 - y0, 0)
    if area == 0:
        return False
    ratio = area / (image_dims[0] * image_dims[1])
    return size_range[0] <= ratio <= size_range[1]


def crop_resize(image: torch.Tensor, bbox, size: int) -> torch.Tensor:
    x0, y0, x1, y1 = bbox
    crop = image[y0:y1, x0:x1]
    if crop.numel() == 0:
        raise DataEngineError("empty crop")
    y = torch.nn.functional.interpolate(crop.permute(2, 0, 1)[None], size=(size, size), mode="bilinear",
                                        align_corners=False, antialias=True)
    return y[0].permute(1, 2, 0).clamp(0.0, 1.0)


def crop_resize_mask(mask: torch.Tensor, bbox, size: int) -> torch.Tensor:
    x0, y0, x1, y1 = bbox
    return codec.resize_binary(mask[y0:y1, x0:x1], size)


def caption_region(crop: torch.Tensor, tag: str, captioner) -> str:
    if crop.numel() == 0:
        raise DataEngineError("empty crop")
    return captioner(crop, tag)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def build_dataset(n: int, seed: int, suite: AnnotatorSuite, out_dir: str | Path, image_size: int = 64,
                  size_range: tuple[float, float] = SIZE_RANGE,
                  stoplist: Sequence[str] = NON_ENTITY_TAGS) -> dict:
    """Run the annotation pipeline over ``n`` synthetic scenes and persist quadruplets."""
    if n <= 0:
        raise DataEngineError("empty dataset requested")
    out = Path(out_dir)
    samples_dir = out / "samples"
    if samples_dir.exists():
        shutil.rmtree(samples_dir)
    samples_dir.mkdir(parents=True)

    stats = {"candidates": 0, "kept": 0, "excluded_by_tag": 0, "excluded_by_size": 0,
             "skipped": 0, "skipped_images": 0}
    sample_ids: list[str] = []
    failures: list[dict] = []
    for idx in range(n):
        sseed = scene_seed(seed, idx)
        image, scene = generate_scene(sseed, image_size)
        scene_id = f"{idx:06d}"
        bound = suite.bind(scene_id, scene)
        local = {"candidates": 0, "excluded_by_tag": 0, "excluded_by_size": 0}
        records = []
        try:
            tags = bound.tagger(image)
            local["candidates"] = len(tags)
            entity = filter_tags(tags, stoplist)
            local["excluded_by_tag"] = len(tags) - len(entity)
            located = []
            for tag in entity:
                bbox = bound.localizer(image, tag)
                if bbox is None:
                    raise AnnotatorError("localizing", f"no box for tag {tag!r}")
                located.append((tag, tuple(bbox)))
            for tag, bbox in located:
                mask = bound.segmenter(image, bbox)
                if not filter_size(bbox, (image_size, image_size), size_range):
                    local["excluded_by_size"] += 1
                    continue
                crop = image[bbox[1]:bbox[3], bbox[0]:bbox[2]]
                records.append((tag, bbox, mask, caption_region(crop, tag, bound.captioner)))
            whole = bound.captioner.caption_global(image) if records else ""
        except AnnotatorError as exc:
            log.warning("scene %s skipped at %s", scene_id, exc)
            failures.append({"scene": scene_id, "stage": exc.stage, "error": str(exc)})
            stats["skipped_images"] += 1
            stats["candidates"] += local["candidates"]
            stats["excluded_by_tag"] += local["excluded_by_tag"]
            stats["skipped"] += local["candidates"] - local["excluded_by_tag"]
            continue
        for k in ("candidates", "excluded_by_tag", "excluded_by_size"):
            stats[k] += local[k]
        for k, (tag, bbox, mask, caption) in enumerate(records):
            sid = f"{scene_id}_{k}"
            sdir = samples_dir / sid
            sdir.mkdir()
            save_image(sdir / "source.png", image)
            save_mask(sdir / "mask.png", mask)
            save_image(sdir / "subject.png", crop_resize(image, bbox, image_size))
            _write_json(sdir / "meta.json", {
                "tag": tag, "bbox": list(bbox), "caption_regional": caption,
                "caption_global": whole, "scene_seed": sseed,
            })
            sample_ids.append(sid)
            stats["kept"] += 1

    if stats["skipped_images"] * 2 > n:
        stage = failures[-1]["stage"]
        raise DataEngineError(
            f"aborted: {stats['skipped_images']}/{n} images failed (last failure at stage {stage}: "
            f"{failures[-1]['error']})"
        )
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "num_scenes": n,
        "count": stats["kept"],
        "image_size": image_size,
        "size_range": list(size_range),
        "stoplist": list(stoplist),
        "filter_stats": stats,
        "failures": failures,
        "samples": sample_ids,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_quadruplet(sample_dir: str | Path, image_size: int = 64, validate: bool = True) -> Quadruplet:
    d = Path(sample_dir)
    meta = json.loads((d / "meta.json").read_text())
    q = Quadruplet(load_image(d / "source.png"), load_mask(d / "mask.png"), load_image(d / "subject.png"),
                   meta["caption_regional"], meta)
    if validate:
        q.validate(image_size)
    return q


def load_dataset(root: str | Path, limit: int | None = None) -> list[Quadruplet]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataEngineError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    ids = manifest["samples"][:limit] if limit else manifest["samples"]
    if not ids:
        raise DataEngineError(f"dataset at {root} is empty")
    return [load_quadruplet(root / "samples" / sid, manifest.get("image_size", 64)) for sid in ids]
