"""GCtx-UNet: a GC-ViT based U-shaped network for medical image segmentation."""
from .model import GCtxUNet, ModelConfig, build, count_flops, count_params, small_config
from .numerics import Rng

__all__ = ["GCtxUNet", "ModelConfig", "Rng", "build", "count_flops", "count_params", "small_config"]
__version__ = "0.1.0"
