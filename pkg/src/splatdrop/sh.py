"""Real spherical harmonics up to degree 3 for view-dependent color.

Basis ordering and constants follow the common splatting convention:
band 0 is the DC term, band l occupies indices l^2 .. (l+1)^2 - 1.
Colors decode as 0.5 + sum_b B_b(dir) * f_b per channel.
"""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_for(nb: int) -> int:
    deg = int(round(np.sqrt(nb))) - 1
    if num_coeffs(deg) != nb or not 0 <= deg <= 3:
        raise ValueError(f"invalid SH coefficient count {nb}")
    return deg


def basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the SH basis at unit directions. dirs (K,3) -> (K, nb)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, C0)]
    if degree >= 1:
        cols += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy),
                 C2[3] * x * z, C2[4] * (xx - yy)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [C3[0] * y * (3 * xx - yy), C3[1] * x * y * z,
                 C3[2] * y * (4 * zz - xx - yy),
                 C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                 C3[4] * x * (4 * zz - xx - yy), C3[5] * z * (xx - yy),
                 C3[6] * x * (xx - 3 * yy)]
    return np.stack(cols, axis=-1)


def basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partials of each basis function w.r.t. the (unnormalized within S2)
    direction components. dirs (K,3) -> (K, nb, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    g = [np.stack([zero, zero, zero], -1)]
    if degree >= 1:
        g += [np.stack([zero, np.full_like(x, -C1), zero], -1),
              np.stack([zero, zero, np.full_like(x, C1)], -1),
              np.stack([np.full_like(x, -C1), zero, zero], -1)]
    if degree >= 2:
        g += [np.stack([C2[0] * y, C2[0] * x, zero], -1),
              np.stack([zero, C2[1] * z, C2[1] * y], -1),
              np.stack([-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z], -1),
              np.stack([C2[3] * z, zero, C2[3] * x], -1),
              np.stack([2 * C2[4] * x, -2 * C2[4] * y, zero], -1)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g += [np.stack([6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), zero], -1),
              np.stack([C3[1] * y * z, C3[1] * x * z, C3[1] * x * y], -1),
              np.stack([-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy),
                        8 * C3[2] * y * z], -1),
              np.stack([-6 * C3[3] * x * z, -6 * C3[3] * y * z,
                        C3[3] * (6 * zz - 3 * xx - 3 * yy)], -1),
              np.stack([C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y,
                        8 * C3[4] * x * z], -1),
              np.stack([2 * C3[5] * x * z, -2 * C3[5] * y * z,
                        C3[5] * (xx - yy)], -1),
              np.stack([C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero], -1)]
    return np.stack(g, axis=1)


def eval_color(sh_coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Decode rgb from SH coefficients at unit view directions.

    sh_coeffs: (..., 3, nb); direction: (..., 3) normalized.
    Returns unclamped rgb (clamping to >= 0 happens at render time).
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    nb = sh_coeffs.shape[-1]
    deg = degree_for(nb)
    single = sh_coeffs.ndim == 2
    sh = sh_coeffs.reshape(-1, 3, nb)
    d = np.asarray(direction, dtype=np.float64).reshape(-1, 3)
    if d.shape[0] == 1 and sh.shape[0] > 1:
        d = np.broadcast_to(d, (sh.shape[0], 3))
    B = basis(d, deg)                               # (K, nb)
    rgb = 0.5 + np.einsum("kcb,kb->kc", sh, B)
    return rgb[0] if single else rgb.reshape(sh_coeffs.shape[:-2] + (3,))
