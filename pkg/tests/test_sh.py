"""Spherical harmonics basis: values, convention, linearity."""

import numpy as np
import pytest
from scipy.special import sph_harm_y

from ges.sh import (UnsupportedDegreeError, num_coeffs, sh_basis, sh_basis_grad,
                    sh_eval, sh_eval_linear)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def scipy_real_sh(l, m, d):
    """Real spherical harmonics from scipy's complex ones (orthonormal)."""
    theta = np.arccos(np.clip(d[2], -1, 1))
    phi = np.arctan2(d[1], d[0])
    if m == 0:
        return float(np.real(sph_harm_y(l, 0, theta, phi)))
    y = sph_harm_y(l, abs(m), theta, phi)
    if m > 0:
        return float(np.sqrt(2.0) * (-1) ** m * np.real(y))
    return float(np.sqrt(2.0) * (-1) ** m * np.imag(y))


# The graphics basis indexes (l, m) in scan order and carries fixed signs
# relative to the orthonormal real SH above.
LM_SIGNS = {
    0: (0, 0, 1.0),
    1: (1, -1, -1.0), 2: (1, 0, 1.0), 3: (1, 1, -1.0),
    4: (2, -2, 1.0), 5: (2, -1, -1.0), 6: (2, 0, 1.0), 7: (2, 1, -1.0), 8: (2, 2, 1.0),
    9: (3, -3, -1.0), 10: (3, -2, 1.0), 11: (3, -1, -1.0), 12: (3, 0, 1.0),
    13: (3, 1, -1.0), 14: (3, 2, 1.0), 15: (3, 3, -1.0),
}


def test_dc_only_gives_offset():
    sh = np.zeros((1, 3))
    assert np.allclose(sh_eval(sh, unit([0.3, -0.2, 0.9])), 0.5)


def test_dc_is_direction_independent(rng):
    c = rng.uniform(-0.3, 0.3, (1, 3))
    d1, d2 = unit(rng.standard_normal(3)), unit(rng.standard_normal(3))
    assert np.array_equal(sh_eval(c, d1), sh_eval(c, d2))


def test_basis_matches_orthonormal_real_sh(rng):
    """Each basis function equals the scipy real SH up to the fixed sign."""
    for _ in range(20):
        d = unit(rng.standard_normal(3))
        basis = sh_basis(3, d)
        for k, (l, m, sign) in LM_SIGNS.items():
            ref = sign * scipy_real_sh(l, m, d)
            assert basis[k] == pytest.approx(ref, abs=1e-12), (k, l, m)


def test_degree2_eval_matches_polynomial_oracle(rng):
    """Direct termwise polynomial evaluation of the documented basis."""
    x, y, z = d = unit(rng.standard_normal(3))
    poly = [0.28209479177387814,
            -0.4886025119029199 * y, 0.4886025119029199 * z, -0.4886025119029199 * x,
            1.0925484305920792 * x * y, -1.0925484305920792 * y * z,
            0.31539156525252005 * (2 * z * z - x * x - y * y),
            -1.0925484305920792 * x * z, 0.5462742152960396 * (x * x - y * y)]
    sh = rng.uniform(-0.5, 0.5, (9, 3))
    expect = np.clip(0.5 + np.array(poly) @ sh, 0, 1)
    assert np.allclose(sh_eval(sh, d), expect, atol=1e-12)


def test_orthonormality_under_quadrature(rng):
    """Monte Carlo integral of basis_i * basis_j over the sphere is delta_ij."""
    n = 200_000
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    B = sh_basis(3, d)
    gram = 4 * np.pi * (B.T @ B) / n
    assert np.allclose(gram, np.eye(16), atol=0.05)


def test_linearity_before_clamp(rng):
    a, b = 0.7, -1.3
    A = rng.standard_normal((16, 3))
    B = rng.standard_normal((16, 3))
    d = unit(rng.standard_normal(3))
    lhs = sh_eval_linear(a * A + b * B, d)
    rhs = a * sh_eval_linear(A, d) + b * sh_eval_linear(B, d)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_unsupported_degree_rejected():
    with pytest.raises(UnsupportedDegreeError):
        num_coeffs(4)
    with pytest.raises(UnsupportedDegreeError):
        sh_basis(5, np.array([0.0, 0.0, 1.0]))


def test_basis_gradient_matches_fd(rng):
    d = unit(rng.standard_normal(3))
    g = sh_basis_grad(3, d)
    h = 1e-6
    for j in range(3):
        dp = d.copy(); dp[j] += h
        dm = d.copy(); dm[j] -= h
        fd = (sh_basis(3, dp) - sh_basis(3, dm)) / (2 * h)
        assert np.allclose(g[:, j], fd, atol=1e-6)


def test_batched_eval_shape(rng):
    sh = rng.standard_normal((5, 4, 3))
    d = rng.standard_normal((5, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    out = sh_eval(sh, d)
    assert out.shape == (5, 3)
    for i in range(5):
        assert np.allclose(out[i], sh_eval(sh[i], d[i]))
