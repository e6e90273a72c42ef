"""Objective and the two-stage training protocol.

Stage 1 trains every main-denoiser weight with image strength 1.
Stage 2 freezes the main denoiser, copies it into RefineNet and trains only
RefineNet's cross-attention weights and the detail MLP, with image strength 0.3.
Batch composition, timesteps, noise and condition dropout at step ``k`` are a
pure function of ``(seed, stage, k)``, so a resumed run replays exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import torch

from . import codec
from .checkpoint import (
    CheckpointError,
    file_hash,
    load_checkpoint,
    load_train_state,
    read_manifest,
    save_checkpoint,
    state_hashes,
)
from .conditioner import ConditionBundle
from .config import ModelConfig
from .data_engine import load_dataset
from .model import LarGen
from .sampler import NoiseSchedule

log = logging.getLogger(__name__)

ADAM = {"betas": (0.9, 0.999), "eps": 1e-8, "weight_decay": 0.0}
REFERENCE_SCALE = {"batch_size": 128, "steps": 20000, "lr": 1e-5, "beta_stage1": 1.0, "beta_stage2": 0.3}


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 8
    steps: int | None = None
    lr: float = 1e-4
    beta_train: float | None = None
    p_text: float = 0.1
    p_image: float = 0.1
    seed: int = 0
    data_root: str = ""
    max_samples: int | None = 64
    loss: str = "l2"
    prompt_field: str = "regional"
    assign: bool = True
    smooth_window: int = 50

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.steps is None:
            self.steps = 2000 if self.stage == 1 else 1000
        if self.beta_train is None:
            self.beta_train = 1.0 if self.stage == 1 else 0.3
        if self.loss not in ("l2", "mse"):
            raise ValueError("loss must be 'l2' or 'mse'")
        if self.prompt_field not in ("regional", "global"):
            raise ValueError("prompt_field must be 'regional' or 'global'")
        for p in (self.p_text, self.p_image):
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def diffusion_loss(pred: torch.Tensor, eps: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    """Batch mean of the per-sample L2 norm of ``eps - pred`` (or plain MSE)."""
    diff = eps - pred
    if kind == "l2":
        value = diff.flatten(1).norm(dim=1).mean()
    elif kind == "mse":
        value = diff.pow(2).mean()
    else:
        raise ValueError(f"unknown loss {kind!r}")
    if not torch.isfinite(value):
        bad = int((~torch.isfinite(pred)).sum())
        raise NumericError(f"non-finite loss ({bad} non-finite prediction entries)")
    return value


def dropout_conditions(cond: ConditionBundle, p_text: float, p_image: float, rng: torch.Generator,
                       null: ConditionBundle) -> ConditionBundle:
    """Independently replace each modality by its null value."""
    if not (0 <= p_text <= 1 and 0 <= p_image <= 1):
        raise ValueError("probabilities must lie in [0, 1]")
    u = torch.rand(2, generator=rng, dtype=torch.float64)
    out = cond
    if u[0] < p_text:
        out = out.replace(text=null.text, text_null=True)
    if u[1] < p_image:
        out = out.replace(image_tokens=null.image_tokens, detail_tokens=None, image_null=True)
    return out


def step_generator(seed: int, stage: int, step: int) -> torch.Generator:
    digest = hashlib.blake2b(f"{seed}:{stage}:{step}".encode(), digest_size=8).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest, "little") & (2**63 - 1))


def smoothed(losses: list[float], window: int) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(losses):
        acc += v
        if i >= window:
            acc -= losses[i - window]
        out.append(acc / min(i + 1, window))
    return out


@dataclass
class TrainData:
    """Dataset tensors precomputed once; frozen encoders make this safe."""
    z0: torch.Tensor
    z_s: torch.Tensor
    m_star: torch.Tensor
    subject: torch.Tensor
    text: torch.Tensor
    image_tokens: torch.Tensor
    prompts: list[str]

    def __len__(self) -> int:
        return self.z0.shape[0]


def prepare_data(model: LarGen, cfg: TrainConfig, quads=None) -> TrainData:
    if quads is None:
        if not cfg.data_root:
            raise FileNotFoundError("no data_root given")
        quads = load_dataset(cfg.data_root, cfg.max_samples)
    elif cfg.max_samples:
        quads = quads[:cfg.max_samples]
    f = model.cfg.factor
    key = "caption_regional" if cfg.prompt_field == "regional" else "caption_global"
    prompts = [q.meta[key] for q in quads]
    with torch.no_grad():
        src = torch.stack([q.source for q in quads])
        mask = torch.stack([q.mask for q in quads])
        subject = torch.stack([q.subject for q in quads])
        return TrainData(
            z0=codec.encode(src, f),
            z_s=codec.encode_masked_source(src, mask, f),
            m_star=codec.resize_mask(mask, f),
            subject=subject,
            text=model.conditioner.embed_text(prompts),
            image_tokens=model.conditioner.project_image(subject),
            prompts=prompts,
        )


@dataclass
class TrainResult:
    model: LarGen
    losses: list[float]
    manifest: dict = field(default_factory=dict)

    @property
    def smoothed(self) -> list[float]:
        return smoothed(self.losses, self.manifest.get("train_config", {}).get("smooth_window", 50))


class Trainer:
    def __init__(self, model: LarGen, cfg: TrainConfig, data: TrainData, schedule: NoiseSchedule | None = None):
        self.model = model
        self.cfg = cfg
        self.data = data
        self.schedule = schedule or NoiseSchedule(model.cfg.train_steps)
        self.step = 0
        self.losses: list[float] = []
        self._configure_trainable()
        self.optimizer = torch.optim.Adam(self.trainable_parameters(), lr=cfg.lr, **ADAM)
        null = model.conditioner.null_bundle()
        self.null_text = null.text
        self.null_image = null.image_tokens

    # parameter sets

    def trainable_names(self) -> list[str]:
        if self.cfg.stage == 1:
            return [f"denoiser.{n}" for n, _ in self.model.denoiser.named_parameters()]
        return sorted(
            [f"refine.{n}" for n in self.model.refine.cross_attention_names()]
            + [f"conditioner.{n}" for n, _ in self.model.conditioner.detail_mlp.named_parameters(prefix="detail_mlp")]
        )

    def _configure_trainable(self) -> None:
        if self.cfg.stage == 2 and self.model.refine is None:
            raise CheckpointError("stage 2 needs a RefineNet; load a stage-1 checkpoint and attach one")
        names = set(self.trainable_names())
        for n, p in self.model.named_parameters():
            p.requires_grad_(n in names)

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = dict(self.model.named_parameters())
        return [params[n] for n in self.trainable_names()]

    # one step

    def draw(self, step: int) -> dict:
        cfg = self.cfg
        g = step_generator(cfg.seed, cfg.stage, step)
        B = cfg.batch_size
        latent = self.data.z0.shape[1:]
        batch = {
            "idx": torch.randint(len(self.data), (B,), generator=g),
            "t": torch.randint(self.schedule.T, (B,), generator=g),
            "eps": torch.randn(B, *latent, generator=g),
            "drop_text": torch.rand(B, generator=g, dtype=torch.float64) < cfg.p_text,
            "drop_image": torch.rand(B, generator=g, dtype=torch.float64) < cfg.p_image,
        }
        if cfg.stage == 2:
            batch["eps_ref"] = torch.randn(B, *latent, generator=g)
        return batch

    def compute_loss(self, batch: dict) -> torch.Tensor:
        d, idx, t, eps = self.data, batch["idx"], batch["t"], batch["eps"]
        z_t = self.schedule.add_noise(d.z0[idx], t, eps)
        z_tilde = codec.assemble_input(z_t, d.m_star[idx], d.z_s[idx]).z_tilde
        text = torch.where(batch["drop_text"][:, None, None], self.null_text, d.text[idx])
        drop_image = batch["drop_image"] | (not self.cfg.assign)
        image = torch.where(drop_image[:, None, None], self.null_image, d.image_tokens[idx])
        beta = self.cfg.beta_train if self.cfg.assign else 0.0
        injected, keep = None, None
        if self.cfg.stage == 2:
            subject = d.subject[idx]
            detail = self.model.conditioner.encode_detail(subject)
            injected = self.model.refine.stash_features(subject, t, batch["eps_ref"], detail, self.schedule).buffers()
            keep = ~batch["drop_image"]
        pred = self.model.denoiser(z_tilde, t, text, image, beta, injected, keep)
        return diffusion_loss(pred, eps, self.cfg.loss)

    def train(self, until: int | None = None, progress: Callable[[int, float], None] | None = None) -> None:
        until = self.cfg.steps if until is None else until
        while self.step < until:
            loss = self.compute_loss(self.draw(self.step))
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()
            self.losses.append(loss.item())
            self.step += 1
            if progress is not None:
                progress(self.step, self.losses[-1])

    # persistence

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"meta.step": torch.tensor([float(self.step)]), "meta.losses": torch.tensor(self.losses)}
        names = self.trainable_names()
        for n, p in zip(names, self.trainable_parameters()):
            st = self.optimizer.state.get(p)
            if not st:
                continue
            out[f"adam.{n}.step"] = st["step"].reshape(1).float()
            out[f"adam.{n}.exp_avg"] = st["exp_avg"]
            out[f"adam.{n}.exp_avg_sq"] = st["exp_avg_sq"]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.step = int(tensors["meta.step"][0])
        self.losses = [float(v) for v in tensors["meta.losses"].tolist()] if self.step else []
        for n, p in zip(self.trainable_names(), self.trainable_parameters()):
            if f"adam.{n}.step" in tensors:
                self.optimizer.state[p] = {
                    "step": tensors[f"adam.{n}.step"][0].clone(),
                    "exp_avg": tensors[f"adam.{n}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"adam.{n}.exp_avg_sq"].clone(),
                }

    def manifest(self, parent_hash: str | None) -> dict:
        return {
            "stage": self.cfg.stage,
            "parent_hash": parent_hash,
            "train_config": self.cfg.to_dict(),
            "optimizer": {"name": "adam", "lr": self.cfg.lr, **{k: list(v) if isinstance(v, tuple) else v
                                                                  for k, v in ADAM.items()}},
            "schedule": {"T": self.schedule.T, "beta_start": 1e-4, "beta_end": 0.02},
            "steps_done": self.step,
            "trainable": self.trainable_names(),
            "weight_hashes": state_hashes(self.model),
            "ablation": {"prompt_field": self.cfg.prompt_field, "assign": self.cfg.assign,
                         "refine": self.cfg.stage == 2},
            "scale_note": {"reference": REFERENCE_SCALE, "toy": {"batch_size": self.cfg.batch_size,
                                                         "steps": self.cfg.steps, "lr": self.cfg.lr}},
        }

    def save(self, out_dir: str | Path, parent_hash: str | None) -> dict:
        out = Path(out_dir)
        manifest = save_checkpoint(out, self.model, self.manifest(parent_hash), self.state_tensors())
        write_loss_csv(out / "loss.csv", self.losses, self.cfg.smooth_window)
        return manifest


def write_loss_csv(path: str | Path, losses: list[float], window: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "smoothed_loss"])
        for i, (v, s) in enumerate(zip(losses, smoothed(losses, window))):
            w.writerow([i, repr(v), repr(s)])


def _run(trainer: Trainer, out_dir, parent_hash, progress) -> TrainResult:
    trainer.train(progress=progress)
    manifest = trainer.save(out_dir, parent_hash) if out_dir else trainer.manifest(parent_hash)
    return TrainResult(trainer.model, list(trainer.losses), manifest)


def train_stage1(cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(), out_dir=None, resume_from=None,
                 quads=None, progress=None) -> TrainResult:
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs stage=1")
    if resume_from:
        model, manifest = load_checkpoint(resume_from)
        if manifest["stage"] != 1:
            raise CheckpointError("can only resume stage 1 from a stage-1 checkpoint")
    else:
        model = LarGen(model_cfg)
    trainer = Trainer(model, cfg, prepare_data(model, cfg, quads))
    if resume_from:
        trainer.load_state_tensors(load_train_state(resume_from))
    return _run(trainer, out_dir, None, progress)


def train_stage2(cfg: TrainConfig, stage1_ckpt, out_dir=None, resume_from=None, quads=None,
                 progress=None) -> TrainResult:
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs stage=2")
    if stage1_ckpt is None:
        raise CheckpointError("stage 2 requires a stage-1 checkpoint (--init-from)")
    parent = read_manifest(stage1_ckpt)
    if parent.get("stage") != 1:
        raise CheckpointError(f"{stage1_ckpt} is not a stage-1 checkpoint")
    parent_hash = file_hash(Path(stage1_ckpt) / "weights.bin")
    if resume_from:
        model, manifest = load_checkpoint(resume_from)
        if manifest.get("parent_hash") != parent_hash:
            raise CheckpointError("resume checkpoint was not initialised from this stage-1 checkpoint")
    else:
        model, _ = load_checkpoint(stage1_ckpt)
        model.attach_refine()
    trainer = Trainer(model, cfg, prepare_data(model, cfg, quads))
    if resume_from:
        trainer.load_state_tensors(load_train_state(resume_from))
    return _run(trainer, out_dir, parent_hash, progress)


def load_config_file(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
