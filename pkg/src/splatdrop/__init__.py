"""CPU trainer for 3D Gaussian splatting with random dropout regularization
and edge-guided splitting, aimed at sparse-view novel view synthesis."""

__version__ = "0.1.0"

from .camera import Camera, look_at
from .config import TrainConfig
from .gaussians import GaussianCloud, init_random_cloud
from .rasterizer import RasterSettings, render, render_backward
from .trainer import Trainer

__all__ = ["Camera", "look_at", "TrainConfig", "GaussianCloud",
           "init_random_cloud", "RasterSettings", "render",
           "render_backward", "Trainer", "__version__"]
