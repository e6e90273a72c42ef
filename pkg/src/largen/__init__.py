"""Subject-guided image inpainting at desk scale."""
from .config import ModelConfig
from .model import LarGen
from .sampler import GuidanceConfig, InpaintRequest, inpaint, sample, sample_batch

__all__ = ["GuidanceConfig", "InpaintRequest", "LarGen", "ModelConfig", "inpaint", "sample", "sample_batch"]
__version__ = "0.1.0"
