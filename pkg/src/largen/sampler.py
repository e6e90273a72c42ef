"""Forward noising, guidance and the deterministic inpainting sampler."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch

from . import codec
from .codec import CodecError

log = logging.getLogger(__name__)

# timestep index whose cumulative alpha is exactly 1 (no noise)
T_IDENTITY = -1


class NoiseSchedule:
    """Linear beta schedule; ``alpha_bar(T_IDENTITY) == 1``."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.T = T
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = torch.cumprod(self.alphas, 0)

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool((t < T_IDENTITY).any()) or bool((t >= self.T).any()):
            raise ValueError(f"timestep outside [{T_IDENTITY}, {self.T})")
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cumprod])
        return padded[t + 1]

    def add_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        if eps.shape != z0.shape:
            raise ValueError(f"noise {tuple(eps.shape)} does not match latent {tuple(z0.shape)}")
        a = self.alpha_bar(t)
        if a.ndim:
            a = a.reshape(-1, *([1] * (z0.ndim - 1)))
        return (a.sqrt() * z0 + (1.0 - a).sqrt() * eps).to(z0.dtype)

    def timesteps(self, steps: int) -> list[int]:
        """Descending, evenly spaced; the step after the last one is ``T_IDENTITY``."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}]")
        return [(i + 1) * self.T // steps - 1 for i in reversed(range(steps))]

    def ddim_step(self, z_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
        a_t, a_prev = self.alpha_bar(t), self.alpha_bar(t_prev)
        x0 = (z_t - (1.0 - a_t).sqrt() * eps) / a_t.sqrt()
        return (a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * eps).to(z_t.dtype)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Guided noise ``eps_u + w (eps_c - eps_u)``, written so w in {0, 1} is exact."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("guidance branches differ in shape")
    return (1.0 - w) * eps_uncond + w * eps_cond


def blend_step(z_t: torch.Tensor, z_s_t: torch.Tensor, m_star: torch.Tensor) -> torch.Tensor:
    """Keep the model latent inside the mask and the noised source latent outside."""
    if z_t.shape != z_s_t.shape:
        raise ValueError("blend operands differ in shape")
    if m_star.shape != z_t.shape[:-3] + z_t.shape[-2:]:
        raise ValueError("latent mask does not match latent grid")
    return torch.where((m_star != 0).unsqueeze(-3), z_t, z_s_t)


@dataclass
class GuidanceConfig:
    w: float = 7.5
    beta: float = 0.3
    steps: int = 50
    blend: bool = True
    composite: bool = True
    refine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance scale must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InpaintRequest:
    x_s: torch.Tensor
    m: torch.Tensor
    x_obj: torch.Tensor | None = None
    prompt: str | None = None

    def validate(self) -> None:
        if self.m.shape != self.x_s.shape[:-1]:
            raise CodecError(f"mask {tuple(self.m.shape)} does not match scene {tuple(self.x_s.shape)}")
        if not bool((self.m != 0).any()):
            raise CodecError("empty mask")


# called with (step index, timestep reached, latent after update and blend)
TraceFn = Callable[[int, int, torch.Tensor], None]


def sample_batch(requests: Sequence[InpaintRequest], cfg: GuidanceConfig, model, refiner=None,
                 seeds: Sequence[int] | None = None, schedule: NoiseSchedule | None = None,
                 trace: TraceFn | None = None) -> torch.Tensor:
    """Sample several requests at once; each draws its noise from its own seed."""
    schedule = schedule or NoiseSchedule(model.cfg.train_steps)
    mcfg = model.cfg
    if schedule.T != mcfg.train_steps:
        raise ValueError("schedule length does not match the checkpoint")
    if cfg.steps > schedule.T:
        raise ValueError("steps exceed the training schedule")
    f = mcfg.factor
    for r in requests:
        r.validate()
        if r.x_s.shape != (mcfg.image_size, mcfg.image_size, 3):
            raise CodecError(f"scene must be {mcfg.image_size}x{mcfg.image_size}; use inpaint() to zoom")
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(len(requests))]
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    cond = model.conditioner
    denoiser = model.denoiser
    refiner = refiner if refiner is not None else getattr(model, "refine", None)

    with torch.no_grad():
        x_s = torch.stack([r.x_s.float() for r in requests])
        m = torch.stack([r.m.float() for r in requests])
        z_src = codec.encode(x_s, f)
        z_masked = codec.encode_masked_source(x_s, m, f)
        m_star = codec.resize_mask(m, f)
        text = cond.embed_text([r.prompt or "" for r in requests])
        has_obj = torch.tensor([r.x_obj is not None for r in requests])
        obj = torch.stack([r.x_obj.float() if r.x_obj is not None else torch.zeros_like(r.x_s, dtype=torch.float32)
                           for r in requests])
        image = torch.where(has_obj[:, None, None], cond.project_image(obj), cond.null_image_tokens(len(requests)))
        null_text = cond.embed_text([""] * len(requests))
        null_image = cond.null_image_tokens(len(requests))
        use_refine = cfg.refine and refiner is not None and bool(has_obj.any())
        detail = cond.encode_detail(obj) if use_refine else None
        obj_keep = None if bool(has_obj.all()) else has_obj

        latent_shape = z_src.shape[1:]
        z = torch.stack([torch.randn(latent_shape, generator=g) for g in gens])
        eps_src = z.clone()
        ts = schedule.timesteps(cfg.steps)
        if cfg.blend:
            z = blend_step(z, schedule.add_noise(z_src, ts[0], eps_src), m_star)
        B = len(requests)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else T_IDENTITY
            tt = torch.full((B,), t, dtype=torch.long)
            z_tilde = codec.assemble_input(z, m_star, z_masked).z_tilde
            injected = None
            if use_refine:
                noise_ref = torch.stack([torch.randn(latent_shape, generator=g) for g in gens])
                injected = refiner.stash_features(obj, tt, noise_ref, detail, schedule).buffers()
            eps_c = denoiser(z_tilde, tt, text, image, cfg.beta, injected, obj_keep)
            eps_u = denoiser(z_tilde, tt, null_text, null_image, cfg.beta)
            eps = cfg_combine(eps_u, eps_c, cfg.w)
            if not bool(torch.isfinite(eps).all()):
                raise FloatingPointError(f"non-finite noise prediction at t={t}")
            z = schedule.ddim_step(z, eps, t, t_prev)
            if cfg.blend:
                z = blend_step(z, schedule.add_noise(z_src, t_prev, eps_src), m_star)
            if trace is not None:
                trace(i, t_prev, z)
        out = codec.decode(z, f).clamp(0.0, 1.0)
        if cfg.composite:
            out = codec.composite(x_s, m, out)
    return out


def sample(req: InpaintRequest, cfg: GuidanceConfig, model, refiner=None,
           schedule: NoiseSchedule | None = None, trace: TraceFn | None = None) -> torch.Tensor:
    if req.x_obj is None and not req.prompt:
        log.warning("neither subject nor prompt given; running an unconditional fill")
    return sample_batch([req], cfg, model, refiner, [cfg.seed], schedule, trace)[0]


def inpaint(req: InpaintRequest, cfg: GuidanceConfig, model, refiner=None, margin: float = 0.5,
            schedule: NoiseSchedule | None = None, trace: TraceFn | None = None):
    """Zoom in on the mask, sample at model resolution, paste the crop back.

    Returns the full-size image and the crop window used.
    """
    req.validate()
    size = model.cfg.image_size
    win = codec.zoom_window(req.m, margin, model.cfg.factor)
    crop_x = codec.resize_image(win.crop(req.x_s).float(), size)
    crop_m = codec.resize_binary(win.crop(req.m), size)
    if not bool((crop_m != 0).any()):
        raise CodecError("mask vanished after resizing the zoom window")
    x_obj = None if req.x_obj is None else codec.resize_image(req.x_obj.float(), size)
    out = sample(InpaintRequest(crop_x, crop_m, x_obj, req.prompt), cfg, model, refiner, schedule, trace)
    pasted = req.x_s.float().clone()
    region = pasted[win.y0:win.y0 + win.side, win.x0:win.x0 + win.side]
    region[...] = codec.resize_image(out, win.side)
    if cfg.composite:
        pasted = codec.composite(req.x_s.float(), req.m, pasted)
    return pasted, win
