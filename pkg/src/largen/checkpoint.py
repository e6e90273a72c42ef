"""Checkpoint container: ``weights.bin`` plus ``manifest.json``.

``weights.bin`` is a concatenation of little-endian float32 tensors; the
manifest's tensor table maps each dotted name to ``(offset, shape)`` in bytes
and carries a per-tensor sha256 so freeze checks can compare hashes directly.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig

FORMAT = "largen-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def tensor_hash(t: torch.Tensor) -> str:
    arr = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy()).astype("<f4", copy=False)
    return hashlib.sha256(arr.tobytes()).hexdigest()


def state_hashes(module: torch.nn.Module) -> dict[str, str]:
    return {k: tensor_hash(v) for k, v in module.state_dict().items()}


def write_tensors(path: str | Path, tensors: dict[str, torch.Tensor]) -> dict:
    """Write tensors back to back; return the table ``name -> {offset, shape, sha256}``."""
    table = {}
    offset = 0
    with open(path, "wb") as fh:
        for name in tensors:
            arr = np.ascontiguousarray(tensors[name].detach().cpu().to(torch.float32).numpy()).astype("<f4")
            raw = arr.tobytes()
            fh.write(raw)
            table[name] = {"offset": offset, "shape": list(arr.shape), "sha256": hashlib.sha256(raw).hexdigest()}
            offset += len(raw)
    return table


def read_tensors(path: str | Path, table: dict, verify: bool = True) -> dict[str, torch.Tensor]:
    blob = Path(path).read_bytes()
    out = {}
    for name, entry in table.items():
        n = int(np.prod(entry["shape"], dtype=np.int64))
        raw = blob[entry["offset"]:entry["offset"] + 4 * n]
        if len(raw) != 4 * n:
            raise CheckpointError(f"tensor {name} truncated in {path}")
        if verify and hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"hash mismatch for tensor {name}")
        out[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy())
    return out


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(out_dir: str | Path, model, manifest: dict, extra_tensors: dict | None = None) -> dict:
    """Write the model's full state dict; ``manifest`` entries are merged into the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = write_tensors(out / "weights.bin", model.state_dict())
    full = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.cfg.to_dict(),
        "encoder_seeds": {"encoder_seed": model.cfg.encoder_seed, "init_seed": model.cfg.init_seed},
        "has_refine": model.refine is not None,
        "tensors": table,
        "weights_sha256": file_hash(out / "weights.bin"),
        **manifest,
    }
    if extra_tensors:
        full["state_tensors"] = write_tensors(out / "train_state.bin", extra_tensors)
    (out / "manifest.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return full


def read_manifest(ckpt_dir: str | Path) -> dict:
    path = Path(ckpt_dir) / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} manifest")
    return manifest


def load_checkpoint(ckpt_dir: str | Path):
    from .model import LarGen

    manifest = read_manifest(ckpt_dir)
    weights = Path(ckpt_dir) / "weights.bin"
    if file_hash(weights) != manifest["weights_sha256"]:
        raise CheckpointError("weights.bin does not match the manifest hash")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = LarGen(cfg, with_refine=manifest["has_refine"])
    state = read_tensors(weights, manifest["tensors"])
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"checkpoint/model mismatch: missing={missing} unexpected={unexpected}")
    if model.refine is not None:
        model.refine.set_trainable()
    return model, manifest


def load_train_state(ckpt_dir: str | Path) -> dict[str, torch.Tensor]:
    manifest = read_manifest(ckpt_dir)
    if "state_tensors" not in manifest:
        raise CheckpointError("checkpoint has no saved training state")
    return read_tensors(Path(ckpt_dir) / "train_state.bin", manifest["state_tensors"])
