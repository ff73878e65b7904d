"""Forward alpha compositing and the analytic backward pass.

A primitive contributes to a pixel when the pixel center lies inside its
extent disk and its alpha clears the skip threshold; contributors blend
front to back with weight w_i = alpha_i * prod_{j<i}(1 - alpha_j).  Depth
composites the same weights over camera z, completed with the far plane.
An optional per-primitive dropout mask removes primitives from both color
and occlusion, exactly as if they were fully transparent.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, sh
from .camera import Camera
from .gaussians import GaussianCloud, quat_rot_grad, normalize_quaternions
from .projection import (TILE, ProjectedCloud, TileGrid, bin_and_sort,
                         depth_order, project_cloud)

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
EARLY_STOP_T = 1e-4


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RasterSettings:
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    early_stop_t: float = EARLY_STOP_T   # 0 disables early termination
    dtype: type = np.float32             # storage dtype of RenderOutput

    def with_(self, **kw) -> "RasterSettings":
        d = {"alpha_min": self.alpha_min, "alpha_max": self.alpha_max,
             "early_stop_t": self.early_stop_t, "dtype": self.dtype}
        d.update(kw)
        return RasterSettings(**d)


ORACLE_SETTINGS = RasterSettings(early_stop_t=0.0, dtype=np.float64)


@dataclass
class RenderOutput:
    color: np.ndarray                 # (H,W,3)
    depth: np.ndarray                 # (H,W)
    final_transmittance: np.ndarray   # (H,W)
    contributor_count: np.ndarray     # (H,W) int32


@dataclass
class BlendRecord:
    """Per-pixel contributor lists plus the forward context needed to replay
    the compositing walk in the backward pass."""
    proj: ProjectedCloud
    grid: TileGrid
    width: int
    height: int
    n_source: int
    settings: RasterSettings
    background: np.ndarray
    far: float
    final_trans: np.ndarray           # (H,W) float64
    n_processed: np.ndarray           # (H,W) int32, tile-list entries walked
    pixel_offsets: np.ndarray         # (H*W+1,)
    slot: np.ndarray                  # flat projected-slot per contribution
    alpha: np.ndarray                 # flat
    t_before: np.ndarray              # flat

    def pixel_entries(self, px: int, py: int):
        """Ordered (source_index, alpha, transmittance-before) at one pixel."""
        lo, hi = self.pixel_offsets[py * self.width + px: py * self.width + px + 2]
        src = self.proj.source_index[self.slot[lo:hi]]
        return list(zip(src.tolist(), self.alpha[lo:hi].tolist(),
                        self.t_before[lo:hi].tolist()))

    @property
    def weights(self) -> np.ndarray:
        """Flat blend weights aligned with `slot`."""
        return self.alpha * self.t_before


def _check_mask(mask, n):
    if mask is None:
        return None
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if bits.shape != (n,):
        raise RenderError(f"mask length {bits.shape} does not match cloud size {n}")
    return bits


def evaluate_alpha(inv_cov2d, mean2d, pixel, opacity,
                   settings: RasterSettings = RasterSettings()):
    """Alpha of one projected Gaussian at a pixel center.

    Returns (alpha, skip) where skip flags values below the blend threshold.
    """
    a, b, c = inv_cov2d
    dx = pixel[0] - mean2d[0]
    dy = pixel[1] - mean2d[1]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    alpha = min(settings.alpha_max, opacity * np.exp(-0.5 * q))
    return alpha, alpha < settings.alpha_min


def render(cloud: GaussianCloud, camera: Camera, mask=None,
           background=(0.0, 0.0, 0.0), settings: RasterSettings = RasterSettings(),
           want_record: bool = False):
    """Tiled forward render. Returns RenderOutput, or (RenderOutput, BlendRecord)."""
    bits = _check_mask(mask, cloud.count)
    proj = project_cloud(cloud, camera, keep=bits)
    grid = bin_and_sort(proj)
    H, W = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)
    radius2 = (proj.radius.astype(np.float64)) ** 2

    out_color = np.zeros((H, W, 3))
    out_depth = np.zeros((H, W))
    out_trans = np.zeros((H, W))
    out_nused = np.zeros((H, W), dtype=np.int32)
    out_nproc = np.zeros((H, W), dtype=np.int32)

    # per-pixel record capacity: every candidate binned into the pixel's tile
    tile_counts = np.diff(grid.offsets)
    py, px = np.divmod(np.arange(H * W), W)
    pixel_tile = (py // TILE) * grid.tiles_x + px // TILE
    caps = tile_counts[pixel_tile]
    single_pass = want_record and int(caps.sum()) <= 100_000_000
    if single_pass:
        cap_offsets = np.zeros(H * W + 1, dtype=np.int64)
        np.cumsum(caps, out=cap_offsets[1:])
        total_cap = int(cap_offsets[-1])
        raw_slot = np.zeros(total_cap, dtype=np.int64)
        raw_alpha = np.zeros(total_cap)
        raw_tbefore = np.zeros(total_cap)
        _kernels.composite_forward_record(
            grid.offsets, grid.entries, grid.tiles_x, grid.tiles_y, W, H,
            proj.mean2d, proj.inv_cov2d, radius2, proj.opacity, proj.color,
            proj.depth, bg, camera.far, settings.alpha_min,
            settings.alpha_max, settings.early_stop_t, cap_offsets,
            raw_slot, raw_alpha, raw_tbefore, out_color, out_depth,
            out_trans, out_nused, out_nproc)
    else:
        _kernels.composite_forward(
            grid.offsets, grid.entries, grid.tiles_x, grid.tiles_y, W, H,
            proj.mean2d, proj.inv_cov2d, radius2, proj.opacity, proj.color,
            proj.depth, bg, camera.far, settings.alpha_min,
            settings.alpha_max, settings.early_stop_t, out_color, out_depth,
            out_trans, out_nused, out_nproc)

    dt = settings.dtype
    out = RenderOutput(color=out_color.astype(dt), depth=out_depth.astype(dt),
                       final_transmittance=out_trans.astype(dt),
                       contributor_count=out_nused)
    if not want_record:
        return out

    counts = out_nused.ravel().astype(np.int64)
    offsets = np.zeros(H * W + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    if single_pass:
        # compact the capacity-spaced entries into a dense layout
        within = np.arange(total) - np.repeat(offsets[:-1], counts)
        gather = np.repeat(cap_offsets[:-1], counts) + within
        rec_slot = raw_slot[gather]
        rec_alpha = raw_alpha[gather]
        rec_tbefore = raw_tbefore[gather]
    else:
        rec_slot = np.zeros(total, dtype=np.int64)
        rec_alpha = np.zeros(total)
        rec_tbefore = np.zeros(total)
        _kernels.fill_record(
            grid.offsets, grid.entries, grid.tiles_x, grid.tiles_y, W, H,
            proj.mean2d, proj.inv_cov2d, radius2, proj.opacity,
            settings.alpha_min, settings.alpha_max, settings.early_stop_t,
            offsets, rec_slot, rec_alpha, rec_tbefore)
    record = BlendRecord(proj=proj, grid=grid, width=W, height=H,
                         n_source=cloud.count, settings=settings,
                         background=bg, far=camera.far, final_trans=out_trans,
                         n_processed=out_nproc, pixel_offsets=offsets,
                         slot=rec_slot, alpha=rec_alpha, t_before=rec_tbefore)
    return out, record


def render_reference(cloud: GaussianCloud, camera: Camera, mask=None,
                     background=(0.0, 0.0, 0.0),
                     settings: RasterSettings = ORACLE_SETTINGS) -> RenderOutput:
    """Untiled per-pixel compositing oracle (dense cumprod, float64).

    Independent of the tile walk: evaluates every projected Gaussian at
    every pixel and blends with a cumulative product.  Early termination
    is not supported here; use it with early_stop_t == 0 on the tiled side.
    """
    if settings.early_stop_t:
        raise RenderError("reference renderer has no early termination")
    bits = _check_mask(mask, cloud.count)
    proj = project_cloud(cloud, camera, keep=bits)
    H, W = camera.height, camera.width
    order = depth_order(proj)
    bg = np.asarray(background, dtype=np.float64)

    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.reshape(-1, 1).astype(np.float64)
    py = ys.reshape(-1, 1).astype(np.float64)
    dx = px - proj.mean2d[order, 0]           # (P,K)
    dy = py - proj.mean2d[order, 1]
    a = proj.inv_cov2d[order, 0]
    b = proj.inv_cov2d[order, 1]
    c = proj.inv_cov2d[order, 2]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    alpha = np.minimum(proj.opacity[order] * np.exp(-0.5 * q), settings.alpha_max)
    inside = dx * dx + dy * dy <= proj.radius[order].astype(np.float64) ** 2
    used = inside & (alpha >= settings.alpha_min)
    alpha = np.where(used, alpha, 0.0)

    one_minus = np.where(used, 1.0 - alpha, 1.0)
    t_before = np.concatenate([np.ones((one_minus.shape[0], 1)),
                               np.cumprod(one_minus, axis=1)[:, :-1]], axis=1)
    w = alpha * t_before
    t_final = np.prod(one_minus, axis=1) if len(order) else np.ones(H * W)
    color = w @ proj.color[order] + t_final[:, None] * bg
    depth = w @ proj.depth[order] + t_final * camera.far
    return RenderOutput(color=color.reshape(H, W, 3),
                        depth=depth.reshape(H, W),
                        final_transmittance=t_final.reshape(H, W),
                        contributor_count=used.sum(axis=1).astype(np.int32).reshape(H, W))


def zero_gradients(cloud: GaussianCloud) -> dict:
    return {
        "means": np.zeros_like(cloud.means, dtype=np.float64),
        "log_scales": np.zeros_like(cloud.log_scales, dtype=np.float64),
        "rotations": np.zeros_like(cloud.rotations, dtype=np.float64),
        "opacity_logits": np.zeros_like(cloud.opacity_logits, dtype=np.float64),
        "sh_coeffs": np.zeros_like(cloud.sh_coeffs, dtype=np.float64),
        "mean2d": np.zeros((cloud.count, 2)),
        "visible": np.zeros(cloud.count, dtype=bool),
    }


def accumulate_gradients(total: dict, part: dict) -> dict:
    for k, v in part.items():
        if k == "visible":
            total[k] |= v
        else:
            total[k] += v
    return total


def scale_gradients(grads: dict, factor: float) -> dict:
    out = {}
    for k, v in grads.items():
        out[k] = v if k == "visible" else v * factor
    return out


def render_backward(cloud: GaussianCloud, camera: Camera, record: BlendRecord,
                    grad_color: np.ndarray, grad_depth: np.ndarray | None = None) -> dict:
    """Backpropagate image-space gradients to cloud parameters.

    Returns per-parameter float64 gradient arrays keyed like the cloud's
    param_dict, plus "mean2d" screen-space gradients and a "visible" flag
    per primitive (densification bookkeeping).  Primitives absent from the
    record (dropped or culled) get exactly-zero gradients.
    """
    if record.n_source != cloud.count:
        raise RenderError("blend record does not match this cloud")
    H, W = record.height, record.width
    grad_color = np.asarray(grad_color, dtype=np.float64)
    if grad_color.shape != (H, W, 3):
        raise RenderError("grad_color shape mismatch")
    if grad_depth is None:
        grad_depth = np.zeros((H, W))
    else:
        grad_depth = np.asarray(grad_depth, dtype=np.float64)
        if grad_depth.shape != (H, W):
            raise RenderError("grad_depth shape mismatch")

    proj, st = record.proj, record.settings
    K = len(proj.source_index)
    g_mean2d = np.zeros((K, 2))
    g_invcov = np.zeros((K, 3))
    g_opacity = np.zeros(K)
    g_depthval = np.zeros(K)
    g_color = np.zeros((K, 3))
    _kernels.composite_backward_rec(
        record.pixel_offsets, record.slot, record.alpha, record.t_before,
        W, H, proj.mean2d, proj.inv_cov2d, proj.opacity, proj.color,
        proj.depth, grad_color, grad_depth, record.background, record.far,
        st.alpha_max, record.final_trans,
        g_mean2d, g_invcov, g_opacity, g_depthval, g_color)

    grads = zero_gradients(cloud)
    if K == 0:
        return grads
    src = proj.source_index

    # inv_cov -> cov2d:  dL/dC = -Lam G Lam
    a, b, c = proj.inv_cov2d[:, 0], proj.inv_cov2d[:, 1], proj.inv_cov2d[:, 2]
    lam = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)   # (K,2,2)
    g_lam = np.stack([np.stack([g_invcov[:, 0], g_invcov[:, 1] / 2], -1),
                      np.stack([g_invcov[:, 1] / 2, g_invcov[:, 2]], -1)], -2)
    g_cov2d = -np.einsum("kij,kjl,klm->kim", lam, g_lam, lam)

    # cov2d = B Sigma B^T + blur, B = J R_wc
    from .projection import projection_jacobian
    J = projection_jacobian(proj.t_cam, camera)        # (K,2,3)
    B = J @ camera.rotation
    g_sigma = np.einsum("kji,kjl,klm->kim", B, g_cov2d, B)
    g_B = 2.0 * np.einsum("kij,kjl,klm->kim", g_cov2d, B, _sigma_of(cloud, src))
    g_J = g_B @ camera.rotation.T

    # J entries -> camera-space point
    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    g_t = np.zeros((K, 3))
    g_t[:, 0] = -g_J[:, 0, 2] * fx / z ** 2
    g_t[:, 1] = -g_J[:, 1, 2] * fy / z ** 2
    g_t[:, 2] = (-g_J[:, 0, 0] * fx / z ** 2 - g_J[:, 1, 1] * fy / z ** 2
                 + g_J[:, 0, 2] * 2 * fx * x / z ** 3
                 + g_J[:, 1, 2] * 2 * fy * y / z ** 3)
    # pinhole mean: d(mean2d)/dt equals J itself
    g_t += np.einsum("kji,kj->ki", J, g_mean2d)
    g_t[:, 2] += g_depthval
    g_mu = g_t @ camera.rotation

    # color path: clamp, SH coefficients, view direction
    active = (proj.color_raw > 0.0).astype(np.float64)
    g_raw = g_color * active                            # (K,3)
    deg = cloud.sh_degree
    Bsh = sh.basis(proj.view_dir, deg)                  # (K,nb)
    grads["sh_coeffs"][src] = g_raw[:, :, None] * Bsh[:, None, :]
    if deg > 0:
        dB = sh.basis_grad(proj.view_dir, deg)          # (K,nb,3)
        g_dir = np.einsum("kc,kcb,kbd->kd", g_raw, cloud.sh_coeffs[src], dB)
        dot = np.sum(proj.view_dir * g_dir, axis=-1, keepdims=True)
        g_mu += (g_dir - proj.view_dir * dot) / proj.view_dist[:, None]

    # Sigma = (R s)(R s)^T -> log scales and rotation quaternion
    qn = normalize_quaternions(cloud.rotations[src])
    from .gaussians import quat_to_rot
    R = quat_to_rot(qn)
    s = np.exp(cloud.log_scales[src])
    Mq = R * s[:, None, :]
    g_Mq = 2.0 * np.einsum("kij,kjl->kil", g_sigma, Mq)
    g_s = np.einsum("kaj,kaj->kj", g_Mq, R)
    grads["log_scales"][src] = g_s * s
    g_R = g_Mq * s[:, None, :]
    dR = quat_rot_grad(qn)                              # (K,4,3,3)
    g_qn = np.einsum("kij,kqij->kq", g_R, dR)
    qnorm = np.linalg.norm(cloud.rotations[src], axis=-1, keepdims=True)
    grads["rotations"][src] = (g_qn - qn * np.sum(qn * g_qn, -1, keepdims=True)) / qnorm

    o = proj.opacity
    grads["opacity_logits"][src] = g_opacity * o * (1.0 - o)
    grads["means"][src] = g_mu
    grads["mean2d"][src] = g_mean2d
    grads["visible"][src] = True
    return grads


def _sigma_of(cloud: GaussianCloud, src: np.ndarray) -> np.ndarray:
    from .gaussians import covariance3d
    q = normalize_quaternions(cloud.rotations[src])
    return covariance3d(cloud.log_scales[src], q)


def gradient_map(record: BlendRecord, magnitudes: np.ndarray) -> np.ndarray:
    """Splat per-primitive gradient magnitudes with the blend weights and
    normalize to [0,1] by the image maximum."""
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    if magnitudes.shape != (record.n_source,):
        raise RenderError("magnitudes length mismatch")
    if np.any(magnitudes < 0):
        raise RenderError("magnitudes must be non-negative")
    per_contrib = record.weights * magnitudes[record.proj.source_index[record.slot]]
    n_pix = record.height * record.width
    pix_ids = np.repeat(np.arange(n_pix), np.diff(record.pixel_offsets))
    sums = np.bincount(pix_ids, weights=per_contrib, minlength=n_pix)
    img = sums.reshape(record.height, record.width)
    peak = img.max()
    return img / peak if peak > 0 else img
