"""The four annotation stages: tagging, localizing, segmenting, captioning.

A suite is bound to one image before use. The oracle suite answers from scene
ground truth. Remote and replay suites speak the same JSON wire format: a
request carries the image as base64 PNG plus the stage inputs; a response is
the stage product. Replay reads saved responses from
``<dir>/<scene_id>/<stage>.json``.
"""
from __future__ import annotations

import base64
import io
import json
import urllib.request
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
from PIL import Image

from ..imageio import png_bytes
from .scenes import SyntheticScene, global_caption, regional_caption

STAGES = ("tagging", "localizing", "segmenting", "captioning")
GLOBAL_KEY = "__global__"

BBox = tuple[int, int, int, int]


class AnnotatorError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class Tagger(Protocol):
    def __call__(self, image: torch.Tensor) -> list[str]: ...


class Localizer(Protocol):
    def __call__(self, image: torch.Tensor, tag: str) -> BBox | None: ...


class Segmenter(Protocol):
    def __call__(self, image: torch.Tensor, bbox: BBox) -> torch.Tensor: ...


class Captioner(Protocol):
    def __call__(self, crop: torch.Tensor, tag: str) -> str: ...

    def caption_global(self, image: torch.Tensor) -> str: ...


class BoundSuite:
    def __init__(self, tagger: Tagger, localizer: Localizer, segmenter: Segmenter, captioner: Captioner):
        self.tagger = tagger
        self.localizer = localizer
        self.segmenter = segmenter
        self.captioner = captioner


class AnnotatorSuite(Protocol):
    def bind(self, scene_id: str, scene: SyntheticScene | None) -> BoundSuite: ...


# wire format

def bbox_key(bbox: BBox) -> str:
    return ",".join(str(int(v)) for v in bbox)


def encode_mask(mask: torch.Tensor) -> str:
    return base64.b64encode(png_bytes(mask, mask=True)).decode("ascii")


def decode_mask(payload: str) -> torch.Tensor:
    with Image.open(io.BytesIO(base64.b64decode(payload))) as im:
        arr = np.asarray(im.convert("L"))
    return torch.from_numpy((arr > 127).astype(np.float32))


def build_request(stage: str, image: torch.Tensor, inputs: dict) -> dict:
    return {
        "stage": stage,
        "image_png_b64": base64.b64encode(png_bytes(image)).decode("ascii"),
        "inputs": inputs,
    }


def parse_response(stage: str, payload: dict):
    try:
        if stage == "tagging":
            return [str(t) for t in payload["tags"]]
        if stage == "localizing":
            box = payload["bbox"]
            return None if box is None else tuple(int(v) for v in box)
        if stage == "segmenting":
            return decode_mask(payload["mask_png_b64"])
        if stage == "captioning":
            return str(payload["caption"])
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotatorError(stage, f"malformed response: {exc}") from exc
    raise AnnotatorError(stage, "unknown stage")


def response_for(stage: str, product) -> dict:
    if stage == "tagging":
        return {"tags": list(product)}
    if stage == "localizing":
        return {"bbox": None if product is None else list(product)}
    if stage == "segmenting":
        return {"mask_png_b64": encode_mask(product)}
    return {"caption": product}


# oracle

class _OracleStages:
    def __init__(self, scene: SyntheticScene):
        self.scene = scene

    def tag(self, image):
        return [o.tag for o in self.scene.objects] + list(self.scene.extra_tags)

    def localize(self, image, tag):
        obj = self.scene.find(tag)
        return None if obj is None else obj.bbox

    def segment(self, image, bbox):
        for obj in self.scene.objects:
            if obj.bbox == tuple(bbox):
                return obj.mask.clone()
        raise AnnotatorError("segmenting", f"no object in box {bbox}")

    def caption(self, crop, tag):
        obj = self.scene.find(tag)
        if obj is None:
            raise AnnotatorError("captioning", f"unknown tag {tag!r}")
        return regional_caption(obj)


class _Captioner:
    def __init__(self, regional: Callable, whole: Callable):
        self._regional = regional
        self._global = whole

    def __call__(self, crop, tag):
        return self._regional(crop, tag)

    def caption_global(self, image):
        return self._global(image)


class OracleSuite:
    """Exact annotators over synthetic scene ground truth."""

    def bind(self, scene_id: str, scene: SyntheticScene | None) -> BoundSuite:
        if scene is None:
            raise AnnotatorError("tagging", "oracle annotators need scene ground truth")
        s = _OracleStages(scene)
        return BoundSuite(s.tag, s.localize, s.segment, _Captioner(s.caption, lambda image: global_caption(scene)))


# remote and replay

Transport = Callable[[str, dict], dict]


def http_transport(url: str, payload: dict, timeout: float = 60.0) -> dict:
    req = urllib.request.Request(url, data=json.dumps(payload).encode(), headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read())


class RemoteSuite:
    """Client for annotation services; ``endpoints`` maps stage name to URL."""

    def __init__(self, endpoints: dict[str, str], transport: Transport = http_transport):
        missing = set(STAGES) - set(endpoints)
        if missing:
            raise ValueError(f"no endpoint for stages {sorted(missing)}")
        self.endpoints = endpoints
        self.transport = transport

    def _call(self, stage: str, image, inputs: dict):
        try:
            payload = self.transport(self.endpoints[stage], build_request(stage, image, inputs))
        except AnnotatorError:
            raise
        except Exception as exc:
            raise AnnotatorError(stage, f"request failed: {exc}") from exc
        return parse_response(stage, payload)

    def bind(self, scene_id: str, scene=None) -> BoundSuite:
        return BoundSuite(
            lambda image: self._call("tagging", image, {}),
            lambda image, tag: self._call("localizing", image, {"tag": tag}),
            lambda image, bbox: self._call("segmenting", image, {"bbox": list(bbox)}),
            _Captioner(
                lambda crop, tag: self._call("captioning", crop, {"tag": tag, "scope": "region"}),
                lambda image: self._call("captioning", image, {"scope": "global"}),
            ),
        )


class ReplaySuite:
    """Answers from responses recorded on disk; no network."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _load(self, scene_id: str, stage: str) -> dict:
        path = self.root / scene_id / f"{stage}.json"
        if not path.is_file():
            raise AnnotatorError(stage, f"missing replay file {path}")
        return json.loads(path.read_text())

    def _keyed(self, scene_id: str, stage: str, key: str):
        table = self._load(scene_id, stage)
        if key not in table:
            raise AnnotatorError(stage, f"no recorded response for {key!r}")
        return parse_response(stage, table[key])

    def bind(self, scene_id: str, scene=None) -> BoundSuite:
        return BoundSuite(
            lambda image: parse_response("tagging", self._load(scene_id, "tagging")),
            lambda image, tag: self._keyed(scene_id, "localizing", tag),
            lambda image, bbox: self._keyed(scene_id, "segmenting", bbox_key(bbox)),
            _Captioner(
                lambda crop, tag: self._keyed(scene_id, "captioning", tag),
                lambda image: self._keyed(scene_id, "captioning", GLOBAL_KEY),
            ),
        )


def record_replay(scene_id: str, image: torch.Tensor, scene: SyntheticScene, root: str | Path) -> None:
    """Write oracle answers for one scene in replay layout."""
    s = _OracleStages(scene)
    out = Path(root) / scene_id
    out.mkdir(parents=True, exist_ok=True)
    tags = s.tag(image)
    boxes = {tag: s.localize(image, tag) for tag in tags}
    files = {
        "tagging": response_for("tagging", tags),
        "localizing": {tag: response_for("localizing", b) for tag, b in boxes.items()},
        "segmenting": {bbox_key(b): response_for("segmenting", s.segment(image, b))
                       for b in boxes.values() if b is not None},
        "captioning": {tag: response_for("captioning", s.caption(None, tag)) for tag, b in boxes.items() if b},
    }
    files["captioning"][GLOBAL_KEY] = response_for("captioning", global_caption(scene))
    for stage, payload in files.items():
        (out / f"{stage}.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
