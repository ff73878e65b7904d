"""Random dropout regularization.

Per iteration a Bernoulli keep/drop mask over primitives defines a
sub-model; the regularizer pulls the sub-model render toward the full
render, which is treated as a constant target.  Dropped primitives are
fully transparent (no color, no occlusion) and opacities are NOT rescaled
by 1/(1-p): the usual dropout compensation is deliberately excluded.
"""

from dataclasses import dataclass

import numpy as np

from . import metrics
from .camera import Camera
from .gaussians import GaussianCloud
from .rasterizer import RasterSettings, RenderOutput, render
from .streams import stream


class RdrError(ValueError):
    pass


@dataclass(frozen=True)
class RdrConfig:
    rate: float = 0.4        # dropout probability p (0.4 forward-facing, 0.3 object sets)
    weight: float = 0.2      # loss coefficient (0.2 forward-facing, 0.5 object sets)
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise RdrError("dropout rate must lie in [0,1]")
        if self.weight < 0:
            raise RdrError("loss weight must be non-negative")


@dataclass(frozen=True)
class DropoutMask:
    bits: np.ndarray      # True = keep
    rate: float
    seed: int
    iteration: int

    def __len__(self):
        return len(self.bits)


def sample_mask(n: int, rate: float, seed: int, iteration: int = 0,
                purpose: str = "dropout") -> DropoutMask:
    """Draw keep bits, each independently true with probability 1-rate."""
    if not 0.0 <= rate <= 1.0:
        raise RdrError("dropout rate must lie in [0,1]")
    rng = stream(seed, purpose, iteration)
    z = rng.random(n)
    return DropoutMask(bits=z >= rate, rate=rate, seed=seed, iteration=iteration)


def sub_model_render(cloud: GaussianCloud, camera: Camera, mask: DropoutMask,
                     background=(0.0, 0.0, 0.0),
                     settings: RasterSettings = RasterSettings(),
                     want_record: bool = False):
    """Render the dropout sub-model. Opacities are passed through unscaled."""
    return render(cloud, camera, mask=mask, background=background,
                  settings=settings, want_record=want_record)


def rdr_loss(full: RenderOutput | np.ndarray, sub: RenderOutput | np.ndarray,
             grad: bool = False):
    """Mean L1 plus (1-SSIM) between full and sub renders.

    The full render is a stop-gradient target; with grad=True the returned
    gradient is with respect to the sub image only.
    """
    c_full = np.asarray(getattr(full, "color", full), dtype=np.float64)
    c_sub = np.asarray(getattr(sub, "color", sub), dtype=np.float64)
    if c_full.shape != c_sub.shape:
        raise RdrError(f"image shape mismatch {c_full.shape} vs {c_sub.shape}")
    if not grad:
        return metrics.l1(c_sub, c_full) + metrics.dssim(c_sub, c_full)
    lv, lg = metrics.l1(c_sub, c_full, grad=True)
    dv, dg = metrics.dssim(c_sub, c_full, grad=True)
    return lv + dv, lg + dg


def ensemble_render(cloud: GaussianCloud, camera: Camera, k: int, rate: float,
                    seed: int, background=(0.0, 0.0, 0.0),
                    settings: RasterSettings = RasterSettings()) -> np.ndarray:
    """Pixel-wise arithmetic mean over k independent sub-model renders.

    Inference-time demonstration of the dropout-as-ensemble view; not a
    training path.
    """
    if k < 1:
        raise RdrError("ensemble size must be at least 1")
    acc = np.zeros((camera.height, camera.width, 3))
    for i in range(k):
        mask = sample_mask(cloud.count, rate, seed, iteration=i, purpose="ensemble")
        out = render(cloud, camera, mask=mask, background=background,
                     settings=settings)
        acc += np.asarray(out.color, dtype=np.float64)
    return acc / k
