"""Container tying the conditioner, main denoiser and optional RefineNet together."""
from __future__ import annotations

import torch.nn as nn

from .conditioner import Conditioner
from .config import ModelConfig
from .denoiser import Denoiser
from .refiner import RefineNet


class LarGen(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), with_refine: bool = False):
        super().__init__()
        self.cfg = cfg
        self.conditioner = Conditioner(cfg)
        self.denoiser = Denoiser(cfg)
        self.refine: RefineNet | None = RefineNet.from_denoiser(self.denoiser) if with_refine else None

    def attach_refine(self) -> RefineNet:
        """Initialise RefineNet as a copy of the current main denoiser."""
        self.refine = RefineNet.from_denoiser(self.denoiser)
        return self.refine

    def with_denoiser(self, denoiser: Denoiser) -> "LarGen":
        """Same conditioner and RefineNet around a different main denoiser."""
        twin = LarGen.__new__(LarGen)
        nn.Module.__init__(twin)
        twin.cfg = self.cfg
        twin.conditioner = self.conditioner
        twin.denoiser = denoiser
        twin.refine = self.refine
        return twin
