"""Real spherical harmonics for view-dependent primitive colors.

Coefficients are stored per primitive as an array of shape (K, 3) with
K = (degree + 1)**2 basis functions and 3 color channels, coefficient-major
(DC first).  The displayed color is ``clamp(0.5 + basis . coeffs, 0, 1)``;
the 0.5 offset and clamp follow the convention of existing splatting assets.
"""

from __future__ import annotations

import numpy as np

MAX_DEGREE = 3

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


class UnsupportedDegreeError(ValueError):
    pass


def num_coeffs(degree: int) -> int:
    if not 0 <= degree <= MAX_DEGREE:
        raise UnsupportedDegreeError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    dirs: (..., 3) unit vectors.  Returns (..., K).
    """
    K = num_coeffs(degree)
    dirs = np.asarray(dirs)
    out = np.empty(dirs.shape[:-1] + (K,), dtype=dirs.dtype)
    out[..., 0] = C0
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = C2[0] * xy
        out[..., 5] = C2[1] * yz
        out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = C2[3] * xz
        out[..., 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = C3[1] * xy * z
        out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Jacobian of the SH basis w.r.t. the (unnormalized-free) direction.

    Returns (..., K, 3) with entry [..., k, j] = d basis_k / d dir_j, for unit
    ``dirs``.  Normalization of the direction is chained separately.
    """
    K = num_coeffs(degree)
    dirs = np.asarray(dirs)
    g = np.zeros(dirs.shape[:-1] + (K, 3), dtype=dirs.dtype)
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        g[..., 1, 1] = -C1
        g[..., 2, 2] = C1
        g[..., 3, 0] = -C1
    if degree >= 2:
        g[..., 4, 0] = C2[0] * y
        g[..., 4, 1] = C2[0] * x
        g[..., 5, 1] = C2[1] * z
        g[..., 5, 2] = C2[1] * y
        g[..., 6, 0] = C2[2] * (-2.0 * x)
        g[..., 6, 1] = C2[2] * (-2.0 * y)
        g[..., 6, 2] = C2[2] * (4.0 * z)
        g[..., 7, 0] = C2[3] * z
        g[..., 7, 2] = C2[3] * x
        g[..., 8, 0] = C2[4] * (2.0 * x)
        g[..., 8, 1] = C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = C3[0] * 6.0 * x * y
        g[..., 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = C3[1] * y * z
        g[..., 10, 1] = C3[1] * x * z
        g[..., 10, 2] = C3[1] * x * y
        g[..., 11, 0] = C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = C3[2] * (8.0 * y * z)
        g[..., 12, 0] = C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = C3[4] * (8.0 * x * z)
        g[..., 14, 0] = C3[5] * (2.0 * x * z)
        g[..., 14, 1] = C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = C3[5] * (xx - yy)
        g[..., 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = C3[6] * (-6.0 * x * y)
    return g


def sh_eval_linear(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Basis-times-coefficients part of the color, no offset, no clamp.

    sh: (..., K, 3), dirs: (..., 3) unit.  Returns (..., 3).  Linear in sh.
    """
    sh = np.asarray(sh)
    K = sh.shape[-2]
    degree = int(np.sqrt(K)) - 1
    if (degree + 1) ** 2 != K:
        raise ValueError(f"coefficient count {K} is not a square")
    basis = sh_basis(degree, dirs)
    return np.einsum("...k,...kc->...c", basis, sh)


def sh_eval(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """View-dependent color: clamp(0.5 + sh_eval_linear, 0, 1)."""
    return np.clip(0.5 + sh_eval_linear(sh, dirs), 0.0, 1.0)
