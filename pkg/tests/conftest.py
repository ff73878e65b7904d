"""Shared fixtures: cameras, clouds, and finite-difference-safe micro-scenes."""

import numpy as np
import pytest

from splatdrop.camera import look_at
from splatdrop.gaussians import GaussianCloud, inverse_sigmoid
from splatdrop.projection import project_cloud
from splatdrop.rasterizer import ALPHA_MIN, ORACLE_SETTINGS
from splatdrop.sh import C0, num_coeffs
from splatdrop.streams import stream


def simple_camera(size=16, f=None, eye=(0.0, 0.0, 2.5)):
    f = f or 1.8 * size
    return look_at(np.asarray(eye, dtype=float), np.zeros(3), (0.0, 1.0, 0.0),
                   fx=f, fy=f, cx=size / 2.0, cy=size / 2.0,
                   width=size, height=size)


def random_cloud(rng, n, sh_degree=1, box=0.55, opacity=(0.2, 0.6)):
    nb = num_coeffs(sh_degree)
    sh = np.zeros((n, 3, nb))
    # DC colors bounded away from the clamp at zero
    sh[:, :, 0] = (rng.uniform(0.15, 0.9, size=(n, 3)) - 0.5) / C0
    if nb > 1:
        sh[:, :, 1:] = rng.uniform(-0.08, 0.08, size=(n, 3, nb - 1))
    return GaussianCloud(
        means=rng.uniform(-box, box, size=(n, 3)),
        log_scales=np.log(rng.uniform(0.08, 0.22, size=(n, 3))),
        rotations=rng.standard_normal((n, 4)),
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity, size=n)),
        sh_coeffs=sh,
        scene_extent=1.0,
    )


def _kink_margins_ok(cloud, camera, alpha_margin=5e-5, geo_margin=5e-4):
    """True when no (pixel, primitive) pair sits near a decision boundary.

    Finite differences assume local smoothness; the compositor has kinks at
    the acceptance threshold, the opacity cap, the integer extent radius,
    and the extent-disk boundary.  Scenes near any of them are rejected.
    """
    proj = project_cloud(cloud, camera)
    if len(proj.depth) != cloud.count:
        return False                      # culling boundaries are kinks too
    if np.any(proj.depth < camera.near + 0.05):
        return False
    # extent radius must not sit near an integer (ceil jumps under FD)
    from splatdrop.projection import EXTENT_SIGMAS, cov2d_eigenvalues
    lam_max = cov2d_eigenvalues(proj.cov2d)[0]
    r_real = EXTENT_SIGMAS * np.sqrt(lam_max)
    if np.any(np.abs(r_real - np.round(r_real)) < geo_margin):
        return False
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    for i in range(cloud.count):
        dx = xs - proj.mean2d[i, 0]
        dy = ys - proj.mean2d[i, 1]
        d2 = dx * dx + dy * dy
        # pixel centers near the disk boundary flip membership under FD
        if np.any(np.abs(np.sqrt(d2) - proj.radius[i]) < geo_margin):
            return False
        a, b, c = proj.inv_cov2d[i]
        q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
        alpha = proj.opacity[i] * np.exp(-0.5 * q)
        if np.any(np.abs(alpha - ALPHA_MIN) < alpha_margin):
            return False
        if np.any(alpha > 0.9):           # stay clear of the opacity cap
            return False
    if np.any(np.abs(proj.color_raw) < 0.02):  # SH clamp boundary
        return False
    return True


def micro_scene(seed, n=4, size=16, sh_degree=1, max_tries=60):
    """Deterministic FD-safe scene: returns (cloud, camera)."""
    camera = simple_camera(size)
    for attempt in range(max_tries):
        rng = stream(seed, "scene", attempt)
        cloud = random_cloud(rng, n, sh_degree=sh_degree)
        if _kink_margins_ok(cloud, camera):
            return cloud, camera
    raise RuntimeError(f"no FD-safe scene found for seed {seed}")


def fd_gradient(loss, arr, idx, h=1e-5):
    old = arr[idx]
    arr[idx] = old + h
    lp = loss()
    arr[idx] = old - h
    lm = loss()
    arr[idx] = old
    return (lp - lm) / (2.0 * h)


@pytest.fixture(scope="session")
def toy_dataset():
    from splatdrop.scene_io import SyntheticSceneSpec, generate_synthetic_scene
    spec = SyntheticSceneSpec(n_primitives=40, train_views=3, test_views=4,
                              resolution=32, seed=1)
    dataset, gt_cloud = generate_synthetic_scene(spec)
    return dataset, gt_cloud


ORACLE = ORACLE_SETTINGS
