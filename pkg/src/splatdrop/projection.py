"""Screen-space projection of 3D Gaussians (EWA-style) and tile binning.

A projected Gaussian contributes to a pixel only when the pixel center
lies inside its extent disk AND its alpha clears the rasterizer skip
threshold; binning places a Gaussian in every 16x16 tile whose pixel-
center rectangle intersects the extent disk.
"""

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .gaussians import GaussianCloud, covariance3d, normalize_quaternions

TILE = 16
BLUR_FLOOR = 0.3          # px^2 added to both cov2d eigenvalues
EXTENT_SIGMAS = 3.0


class ProjectionError(ValueError):
    pass


def project_mean(mu, camera: Camera):
    """Pinhole projection of world point(s). Returns (mean2d, depth);
    points with camera-space z <= near get depth = -1 as a culled sentinel."""
    mu = np.asarray(mu, dtype=np.float64)
    single = mu.ndim == 1
    t = np.atleast_2d(mu) @ camera.rotation.T + camera.translation
    z = t[:, 2]
    ok = z > camera.near
    zsafe = np.where(ok, z, 1.0)
    m2d = np.stack([camera.fx * t[:, 0] / zsafe + camera.cx,
                    camera.fy * t[:, 1] / zsafe + camera.cy], axis=-1)
    depth = np.where(ok, z, -1.0)
    m2d[~ok] = np.nan
    if single:
        return m2d[0], float(depth[0])
    return m2d, depth


def projection_jacobian(t_cam, camera: Camera) -> np.ndarray:
    """Jacobian of the pinhole map at camera-space point(s). (...,3) -> (...,2,3)."""
    t = np.asarray(t_cam, dtype=np.float64)
    single = t.ndim == 1
    t = np.atleast_2d(t)
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / z ** 2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / z ** 2
    return J[0] if single else J


def project_cov(cov3d, rotation_wc, J) -> np.ndarray:
    """2x2 screen covariance J R Sigma R^T J^T plus the blur floor."""
    cov3d = np.asarray(cov3d, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    B = J @ rotation_wc
    out = B @ cov3d @ np.swapaxes(B, -1, -2)
    out = out + BLUR_FLOOR * np.eye(2)
    return out


def cov2d_eigenvalues(cov2d: np.ndarray):
    """Closed-form eigenvalues of 2x2 symmetric matrices (...,2,2)."""
    a = cov2d[..., 0, 0]
    b = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return mid + disc, mid - disc


def compute_extent(cov2d) -> int | np.ndarray:
    """Conservative pixel radius: ceil(3 * sqrt(lambda_max))."""
    lam_max, _ = cov2d_eigenvalues(np.asarray(cov2d, dtype=np.float64))
    r = np.ceil(EXTENT_SIGMAS * np.sqrt(lam_max))
    return int(r) if np.isscalar(lam_max) or lam_max.ndim == 0 else r.astype(np.int64)


@dataclass
class ProjectedCloud:
    """Screen-space view of the (possibly masked) cloud, culled, as arrays
    indexed by projected slot; source_index maps back into the cloud."""
    mean2d: np.ndarray        # (K,2)
    depth: np.ndarray         # (K,)
    cov2d: np.ndarray         # (K,2,2)
    inv_cov2d: np.ndarray     # (K,3) packed (a, b, c) of [[a,b],[b,c]]
    radius: np.ndarray        # (K,) int
    color: np.ndarray         # (K,3) decoded + clamped rgb
    color_raw: np.ndarray     # (K,3) pre-clamp rgb (for backward)
    opacity: np.ndarray       # (K,) activated
    t_cam: np.ndarray         # (K,3) camera-space positions
    view_dir: np.ndarray      # (K,3) unit directions camera->mean
    view_dist: np.ndarray     # (K,)
    source_index: np.ndarray  # (K,) int
    width: int
    height: int


def project_cloud(cloud: GaussianCloud, camera: Camera,
                  keep: np.ndarray | None = None) -> ProjectedCloud:
    """Project all (kept) primitives, culling by near plane and screen bounds."""
    from . import sh as shmod
    idx = np.arange(cloud.count) if keep is None else np.flatnonzero(keep)
    means = cloud.means[idx].astype(np.float64)
    if means.size and not np.isfinite(means).all():
        bad = idx[~np.isfinite(means).all(axis=1)][0]
        raise ProjectionError(f"non-finite mean at primitive {bad}")
    t = means @ camera.rotation.T + camera.translation
    near_ok = t[:, 2] > camera.near

    idx, means, t = idx[near_ok], means[near_ok], t[near_ok]
    z = t[:, 2]
    mean2d = np.stack([camera.fx * t[:, 0] / z + camera.cx,
                       camera.fy * t[:, 1] / z + camera.cy], axis=-1)
    J = projection_jacobian(t, camera)
    q = normalize_quaternions(cloud.rotations[idx]) if len(idx) else cloud.rotations[idx]
    cov3d = covariance3d(cloud.log_scales[idx], q) if len(idx) else np.zeros((0, 3, 3))
    cov2d = project_cov(cov3d, camera.rotation, J)
    radius = np.ceil(EXTENT_SIGMAS * np.sqrt(cov2d_eigenvalues(cov2d)[0])).astype(np.int64)

    # screen cull: extent disk must reach the pixel-center rectangle
    on = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= camera.width - 1)
          & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= camera.height - 1))
    idx, means, t, mean2d, cov2d, radius = (a[on] for a in (idx, means, t, mean2d, cov2d, radius))
    z = t[:, 2]

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    inv = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det,
                    cov2d[:, 0, 0] / det], axis=-1)

    diff = means - camera.center
    dist = np.linalg.norm(diff, axis=-1)
    view_dir = diff / np.maximum(dist, 1e-12)[:, None]
    color_raw = (shmod.eval_color(cloud.sh_coeffs[idx], view_dir)
                 if len(idx) else np.zeros((0, 3)))
    color = np.maximum(color_raw, 0.0)
    opac = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[idx]))
    if len(idx) and not np.isfinite(cov2d).all():
        bad = idx[~np.isfinite(cov2d.reshape(len(idx), -1)).all(axis=1)][0]
        raise ProjectionError(f"non-finite projected covariance at primitive {bad}")
    return ProjectedCloud(mean2d=mean2d, depth=z, cov2d=cov2d, inv_cov2d=inv,
                          radius=radius, color=color, color_raw=color_raw,
                          opacity=opac, t_cam=t, view_dir=view_dir, view_dist=dist,
                          source_index=idx, width=camera.width, height=camera.height)


def depth_order(proj: ProjectedCloud) -> np.ndarray:
    """Front-to-back order, ties broken by source index (stable)."""
    return np.lexsort((proj.source_index, proj.depth))


@dataclass
class TileGrid:
    """CSR tile lists over a width x height image; entries within a tile are
    sorted by (depth, source_index)."""
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray   # (tiles_x*tiles_y + 1,)
    entries: np.ndarray   # projected-slot indices, concatenated per tile

    def tile_entries(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.entries[self.offsets[t]:self.offsets[t + 1]]


def disk_intersects_rect(cx, cy, r, x0, x1, y0, y1):
    """True when the disk reaches the rectangle [x0,x1] x [y0,y1]."""
    dx = np.maximum(0.0, np.maximum(x0 - cx, cx - x1))
    dy = np.maximum(0.0, np.maximum(y0 - cy, cy - y1))
    return dx * dx + dy * dy <= np.asarray(r, dtype=np.float64) ** 2


def bin_and_sort(proj: ProjectedCloud) -> TileGrid:
    """Assign projected Gaussians to every tile their extent disk touches."""
    tiles_x = (proj.width + TILE - 1) // TILE
    tiles_y = (proj.height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    order = depth_order(proj)
    if len(order) == 0:
        offsets = np.zeros(n_tiles + 1, dtype=np.int64)
        return TileGrid(tiles_x, tiles_y, offsets, np.zeros((0,), dtype=np.int64))

    cx = proj.mean2d[order, 0]
    cy = proj.mean2d[order, 1]
    r = proj.radius[order].astype(np.float64)
    tx0 = np.clip(np.floor((cx - r) / TILE).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((cx + r) / TILE).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((cy - r) / TILE).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((cy + r) / TILE).astype(np.int64), 0, tiles_y - 1)
    ntx = tx1 - tx0 + 1
    cand = ntx * (ty1 - ty0 + 1)
    total = int(cand.sum())

    rep = np.repeat(np.arange(len(order)), cand)       # rank in depth order
    start = np.concatenate([[0], np.cumsum(cand)[:-1]])
    within = np.arange(total) - np.repeat(start, cand)
    tx = tx0[rep] + within % ntx[rep]
    ty = ty0[rep] + within // ntx[rep]

    x0 = tx * TILE
    x1 = np.minimum(x0 + TILE - 1, proj.width - 1)
    y0 = ty * TILE
    y1 = np.minimum(y0 + TILE - 1, proj.height - 1)
    hit = disk_intersects_rect(cx[rep], cy[rep], r[rep], x0, x1, y0, y1)

    rep, tx, ty = rep[hit], tx[hit], ty[hit]
    tid = ty * tiles_x + tx
    order2 = np.lexsort((rep, tid))                    # per tile, keep depth order
    tid = tid[order2]
    slot = order[rep[order2]]
    counts = np.bincount(tid, minlength=n_tiles)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return TileGrid(tiles_x=tiles_x, tiles_y=tiles_y, offsets=offsets, entries=slot)
