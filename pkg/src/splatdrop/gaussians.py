"""Gaussian primitive parameterization and structural edits.

Parameters are stored unconstrained: scales in log space, opacity as a
logit, rotations as quaternions that are renormalized after optimizer
steps.  Activated values therefore always satisfy the model invariants
(positive scales, opacity in (0,1), unit rotation).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import sh

SPLIT_SCALE_FACTOR = 1.6   # children shrink by this per axis
SPLIT_CHILDREN = 2


class InvalidParameterError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w,x,y,z) -> rotation matrix/matrices."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty(q.shape[:1] + (3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_rot_grad(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions. (N,4) -> (N,4,3,3)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dRdw = np.stack([o, -z, y, z, o, -x, -y, x, o], axis=-1)
    dRdx = np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1)
    dRdy = np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], axis=-1)
    dRdz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], axis=-1)
    out = 2.0 * np.stack([dRdw, dRdx, dRdy, dRdz], axis=1)
    return out.reshape(q.shape[0], 4, 3, 3)


def covariance3d(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """3D covariance R s^2 R^T from log-scales and unit quaternion(s)."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.isfinite(log_scale).all() and np.isfinite(rotation).all()):
        raise InvalidParameterError("non-finite covariance parameters")
    R = quat_to_rot(rotation)
    s2 = np.exp(2.0 * log_scale)
    M = R * np.expand_dims(s2, -2)          # R @ diag(s^2)
    return M @ np.swapaxes(R, -1, -2)


@dataclass
class GaussianCloud:
    """Struct-of-arrays container for N Gaussian primitives."""

    means: np.ndarray           # (N,3)
    log_scales: np.ndarray      # (N,3)
    rotations: np.ndarray       # (N,4), unit (w,x,y,z)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray       # (N,3,nb)
    scene_extent: float = 1.0

    def __post_init__(self):
        n = len(self.means)
        shapes = {
            "means": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "opacity_logits": (n,),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, want {shape}")
        if self.sh_coeffs.shape[:2] != (n, 3):
            raise InvalidParameterError("sh_coeffs must have shape (N,3,nb)")
        sh.degree_for(self.sh_coeffs.shape[2])
        if not self.scene_extent > 0:
            raise InvalidParameterError("scene_extent must be positive")

    @property
    def count(self) -> int:
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return sh.degree_for(self.sh_coeffs.shape[2])

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.means.copy(), self.log_scales.copy(),
                             self.rotations.copy(), self.opacity_logits.copy(),
                             self.sh_coeffs.copy(), self.scene_extent)

    def param_dict(self) -> dict:
        return {"means": self.means, "log_scales": self.log_scales,
                "rotations": self.rotations, "opacity_logits": self.opacity_logits,
                "sh_coeffs": self.sh_coeffs}


def empty_cloud(sh_degree: int = 0, scene_extent: float = 1.0) -> GaussianCloud:
    nb = sh.num_coeffs(sh_degree)
    return GaussianCloud(np.zeros((0, 3)), np.zeros((0, 3)),
                         np.zeros((0, 4)), np.zeros((0,)),
                         np.zeros((0, 3, nb)), scene_extent)


def _mean_nn_distance(points: np.ndarray) -> float:
    """Mean nearest-neighbor distance over all points (init-time only)."""
    if len(points) < 2:
        return 0.1
    from scipy.spatial import cKDTree
    dist, _ = cKDTree(points).query(points, k=2)
    return float(np.mean(dist[:, 1]))


def init_random_cloud(bbox, n: int, rng: np.random.Generator,
                      sh_degree: int = 0, scene_extent: float | None = None) -> GaussianCloud:
    """Uniform random cloud in an axis-aligned box.

    Opacity starts at 0.1, scales isotropic at the mean nearest-neighbor
    distance, colors random via the DC band, higher bands zero.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    if n > 0 and not np.all(hi > lo):
        raise InvalidParameterError("degenerate bounding box")
    nb = sh.num_coeffs(sh_degree)
    if n == 0:
        ext = scene_extent if scene_extent is not None else 1.0
        return empty_cloud(sh_degree, ext)
    means = rng.uniform(lo, hi, size=(n, 3))
    dist = max(_mean_nn_distance(means), 1e-7)
    log_scales = np.full((n, 3), np.log(dist))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity_logits = np.full((n,), inverse_sigmoid(0.1))
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    sh_coeffs = np.zeros((n, 3, nb))
    sh_coeffs[:, :, 0] = (colors - 0.5) / sh.C0
    if scene_extent is None:
        scene_extent = float(np.linalg.norm(hi - lo) / 2.0)
    return GaussianCloud(means, log_scales, rotations, opacity_logits,
                         sh_coeffs, scene_extent)


def split_primitives(cloud: GaussianCloud, mask: np.ndarray,
                     rng: np.random.Generator) -> GaussianCloud:
    """Replace each masked primitive with two children sampled from its own
    density, scales divided by SPLIT_SCALE_FACTOR.  Unmasked primitives are
    carried over bit-exactly, in order, followed by the children."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (cloud.count,):
        raise InvalidParameterError("mask length mismatch")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return cloud.copy()
    rep = np.repeat(idx, SPLIT_CHILDREN)
    R = quat_to_rot(normalize_quaternions(cloud.rotations[rep]))
    scales = np.exp(cloud.log_scales[rep])
    # sample from N(mu, Sigma) via x = mu + R @ (s * eps)
    eps = rng.standard_normal((len(rep), 3))
    offsets = np.einsum("nij,nj->ni", R, scales * eps)
    child_means = cloud.means[rep] + offsets
    child_log_scales = cloud.log_scales[rep] - np.log(SPLIT_SCALE_FACTOR)

    keep = ~mask
    return GaussianCloud(
        np.concatenate([cloud.means[keep], child_means]),
        np.concatenate([cloud.log_scales[keep], child_log_scales]),
        np.concatenate([cloud.rotations[keep], cloud.rotations[rep]]),
        np.concatenate([cloud.opacity_logits[keep], cloud.opacity_logits[rep]]),
        np.concatenate([cloud.sh_coeffs[keep], cloud.sh_coeffs[rep]]),
        cloud.scene_extent,
    )


def clone_primitives(cloud: GaussianCloud, mask: np.ndarray) -> GaussianCloud:
    """Append an exact copy of each masked primitive."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (cloud.count,):
        raise InvalidParameterError("mask length mismatch")
    idx = np.flatnonzero(mask)
    return GaussianCloud(
        np.concatenate([cloud.means, cloud.means[idx]]),
        np.concatenate([cloud.log_scales, cloud.log_scales[idx]]),
        np.concatenate([cloud.rotations, cloud.rotations[idx]]),
        np.concatenate([cloud.opacity_logits, cloud.opacity_logits[idx]]),
        np.concatenate([cloud.sh_coeffs, cloud.sh_coeffs[idx]]),
        cloud.scene_extent,
    )


def prune(cloud: GaussianCloud, keep_mask: np.ndarray) -> GaussianCloud:
    """Keep only the masked primitives, preserving order and values."""
    keep_mask = np.asarray(keep_mask, dtype=bool)
    if keep_mask.shape != (cloud.count,):
        raise InvalidParameterError("keep mask length mismatch")
    return GaussianCloud(cloud.means[keep_mask].copy(),
                         cloud.log_scales[keep_mask].copy(),
                         cloud.rotations[keep_mask].copy(),
                         cloud.opacity_logits[keep_mask].copy(),
                         cloud.sh_coeffs[keep_mask].copy(),
                         cloud.scene_extent)
