"""Image losses and quality metrics.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, K1=0.01,
K2=0.03, dynamic range 1), channel-averaged, with edge-replicate padding
so the local map matches the input resolution.  Losses that appear inside
the training objective expose analytic gradients with respect to the
rendered (first) argument.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
PSNR_CAP = 100.0


class MetricError(ValueError):
    pass


def _window() -> np.ndarray:
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()

_KERNEL = _window()


def _filt(img: np.ndarray) -> np.ndarray:
    """Gaussian-window local mean with edge-replicate boundaries."""
    p = np.pad(img, SSIM_RADIUS, mode="edge")
    p = correlate1d(p, _KERNEL, axis=0, mode="constant")
    p = correlate1d(p, _KERNEL, axis=1, mode="constant")
    r = SSIM_RADIUS
    return p[r:-r, r:-r]


def _filt_adjoint(g: np.ndarray) -> np.ndarray:
    """Exact adjoint of _filt (needed for SSIM gradients)."""
    r = SSIM_RADIUS
    z = np.zeros((g.shape[0] + 2 * r, g.shape[1] + 2 * r))
    z[r:-r, r:-r] = g
    z = correlate1d(z, _KERNEL[::-1], axis=0, mode="constant")
    z = correlate1d(z, _KERNEL[::-1], axis=1, mode="constant")
    # adjoint of edge-replicate padding: fold borders back onto the edges
    z[r, :] += z[:r, :].sum(axis=0)
    z[-r - 1, :] += z[-r:, :].sum(axis=0)
    core = z[r:-r, :]
    core[:, r] += core[:, :r].sum(axis=1)
    core[:, -r - 1] += core[:, -r:].sum(axis=1)
    return core[:, r:-r].copy()


def _as_images(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def _channels(img):
    return img[..., None] if img.ndim == 2 else img


def l1(x, y, grad: bool = False):
    x, y = _as_images(x, y)
    val = float(np.mean(np.abs(x - y)))
    if not grad:
        return val
    return val, np.sign(x - y) / x.size


def mse(x, y, grad: bool = False):
    x, y = _as_images(x, y)
    val = float(np.mean((x - y) ** 2))
    if not grad:
        return val
    return val, 2.0 * (x - y) / x.size


def psnr(x, y) -> float:
    m = mse(x, y)
    if m <= 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / m)), PSNR_CAP)


def _ssim_channel(x, y, grad):
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mx, my = _filt(x), _filt(y)
    fxx, fyy, fxy = _filt(x * x), _filt(y * y), _filt(x * y)
    vx = fxx - mx * mx
    vy = fyy - my * my
    cov = fxy - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * cov + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    val = float(np.mean(s))
    if not grad:
        return val, None
    n = s.size
    # chain rule through the three filter outputs that depend on x,
    # factored so that wherever the two windows are bit-identical the
    # gradient cancels exactly (t1, t2 vanish and u == v bitwise); this
    # keeps the gradient support local to actual image differences
    t1 = my * b1 - mx * a1
    t2 = mx * a2 - my * b2
    g_fx = (2 * a2 * t1 / (b1 * b1 * b2) + 2 * a1 * t2 / (b1 * b2 * b2)) / n
    u = 2 * a1 / (b1 * b2) / n
    v = u * (a2 / b2)
    gx = _filt_adjoint(g_fx) + y * _filt_adjoint(u) - x * _filt_adjoint(v)
    return val, gx


def ssim(x, y, grad: bool = False):
    """Mean SSIM in [-1, 1]; with grad=True also returns dSSIM/dx."""
    x, y = _as_images(x, y)
    xs, ys = _channels(x), _channels(y)
    vals, gxs = [], []
    for ch in range(xs.shape[-1]):
        v, g = _ssim_channel(xs[..., ch], ys[..., ch], grad)
        vals.append(v)
        gxs.append(g)
    val = float(np.mean(vals))
    if not grad:
        return val
    gx = np.stack(gxs, axis=-1) / len(vals)
    return val, gx.reshape(x.shape) if x.ndim == 2 else gx


def dssim(x, y, grad: bool = False):
    """1 - SSIM, minimized at identical images."""
    if not grad:
        return 1.0 - ssim(x, y)
    v, g = ssim(x, y, grad=True)
    return 1.0 - v, -g


def avge(mse_value: float, ssim_value: float, lpips_value: float | None) -> float | None:
    """Geometric mean of MSE, sqrt(1-SSIM) and LPIPS; None without LPIPS."""
    if lpips_value is None:
        return None
    if ssim_value > 1.0:
        raise MetricError("ssim above 1")
    return float((mse_value * np.sqrt(1.0 - ssim_value) * lpips_value) ** (1.0 / 3.0))


GS_SSIM_WEIGHT = 0.2


def gs_loss(rendered, target, grad: bool = False):
    """Base splatting photometric loss: 0.8 L1 + 0.2 (1-SSIM)."""
    if not grad:
        return ((1 - GS_SSIM_WEIGHT) * l1(rendered, target)
                + GS_SSIM_WEIGHT * dssim(rendered, target))
    lv, lg = l1(rendered, target, grad=True)
    dv, dg = dssim(rendered, target, grad=True)
    return ((1 - GS_SSIM_WEIGHT) * lv + GS_SSIM_WEIGHT * dv,
            (1 - GS_SSIM_WEIGHT) * lg + GS_SSIM_WEIGHT * dg)


def depth_loss(rendered_depth, reference_depth, valid_mask=None, grad: bool = False):
    """Scale/shift-invariant depth regularizer: 1 - Pearson correlation.

    Returns (value, degenerate_flag) or (value, gradient, degenerate_flag).
    Degenerate variance on either side yields loss 0 with the flag set.
    """
    d, ref = _as_images(rendered_depth, reference_depth)
    if valid_mask is None:
        valid_mask = np.ones(d.shape, dtype=bool)
    m = np.asarray(valid_mask, dtype=bool)
    dv = d[m]
    rv = ref[m]
    zero_grad = np.zeros(d.shape)
    if dv.size < 2:
        return (0.0, True) if not grad else (0.0, zero_grad, True)
    ad = dv - dv.mean()
    ar = rv - rv.mean()
    p = np.sqrt(np.sum(ad * ad))
    q = np.sqrt(np.sum(ar * ar))
    if p < 1e-12 or q < 1e-12:
        return (0.0, True) if not grad else (0.0, zero_grad, True)
    u = np.sum(ad * ar)
    r = u / (p * q)
    val = float(1.0 - r)
    if not grad:
        return val, False
    g = -(ar / (p * q) - (u / (p ** 3 * q)) * ad)
    g -= g.mean()                      # centering adjoint
    full = zero_grad
    full[m] = g
    return val, full, False


@dataclass
class LossBreakdown:
    l_gs: float
    l_depth: float
    l_rdr: float
    lambda_depth: float
    lambda_rdr: float

    @property
    def total(self) -> float:
        return self.l_gs + self.lambda_depth * self.l_depth + self.lambda_rdr * self.l_rdr


def total_loss(gs: float, depth: float, rdr: float,
               lambda_depth: float, lambda_rdr: float) -> LossBreakdown:
    return LossBreakdown(l_gs=gs, l_depth=depth, l_rdr=rdr,
                         lambda_depth=lambda_depth, lambda_rdr=lambda_rdr)
