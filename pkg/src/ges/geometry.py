"""Rotations, primitive-to-screen projection and ray-splat intersection.

All functions are batched over a leading primitive axis and are pure.  The
gradient helpers return partial derivatives in the same layout as their
forward counterparts; they are exercised against finite differences in the
test suite.
"""

from __future__ import annotations

import numpy as np

from .cameras import Camera, NEAR_PLANE

PARALLEL_EPS = 1e-8


def normalize_quats(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions (w, x, y, z) scaled to unit norm."""
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions to (N, 3, 3) rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """d R[i, j] / d q[k] for unit quaternions: returns (N, 4, 3, 3).

    Valid for q on the unit sphere; the chain through renormalization of a
    stored quaternion is the tangent projection applied by
    :func:`project_quat_grad`.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    J = np.empty(q.shape[:-1] + (4, 3, 3), dtype=q.dtype)
    zero = np.zeros_like(w)
    # dR/dw
    J[..., 0, 0, 0] = zero; J[..., 0, 0, 1] = -2 * z; J[..., 0, 0, 2] = 2 * y
    J[..., 0, 1, 0] = 2 * z; J[..., 0, 1, 1] = zero; J[..., 0, 1, 2] = -2 * x
    J[..., 0, 2, 0] = -2 * y; J[..., 0, 2, 1] = 2 * x; J[..., 0, 2, 2] = zero
    # dR/dx
    J[..., 1, 0, 0] = zero; J[..., 1, 0, 1] = 2 * y; J[..., 1, 0, 2] = 2 * z
    J[..., 1, 1, 0] = 2 * y; J[..., 1, 1, 1] = -4 * x; J[..., 1, 1, 2] = -2 * w
    J[..., 1, 2, 0] = 2 * z; J[..., 1, 2, 1] = 2 * w; J[..., 1, 2, 2] = -4 * x
    # dR/dy
    J[..., 2, 0, 0] = -4 * y; J[..., 2, 0, 1] = 2 * x; J[..., 2, 0, 2] = 2 * w
    J[..., 2, 1, 0] = 2 * x; J[..., 2, 1, 1] = zero; J[..., 2, 1, 2] = 2 * z
    J[..., 2, 2, 0] = -2 * w; J[..., 2, 2, 1] = 2 * z; J[..., 2, 2, 2] = -4 * y
    # dR/dz
    J[..., 3, 0, 0] = -4 * z; J[..., 3, 0, 1] = -2 * w; J[..., 3, 0, 2] = 2 * x
    J[..., 3, 1, 0] = 2 * w; J[..., 3, 1, 1] = -4 * z; J[..., 3, 1, 2] = 2 * y
    J[..., 3, 2, 0] = 2 * x; J[..., 3, 2, 1] = 2 * y; J[..., 3, 2, 2] = zero
    return J


def project_quat_grad(q_unit: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Project a gradient w.r.t. a unit quaternion onto the tangent of the
    stored (renormalized) parameter: (I - q q^T) grad."""
    dot = np.sum(q_unit * grad, axis=-1, keepdims=True)
    return grad - dot * q_unit


def surfel_to_world(position, quat, scale) -> np.ndarray:
    """(N, 3, 4) affine transforms [s1*r1 | s2*r2 | r3 | p] mapping local
    disc coordinates (x, y, 0, 1) to world space."""
    R = quat_to_rotmat(normalize_quats(np.atleast_2d(quat)))
    p = np.atleast_2d(position)
    s = np.atleast_2d(scale)
    M = np.empty((R.shape[0], 3, 4), dtype=R.dtype)
    M[:, :, 0] = R[:, :, 0] * s[:, 0:1]
    M[:, :, 1] = R[:, :, 1] * s[:, 1:2]
    M[:, :, 2] = R[:, :, 2]
    M[:, :, 3] = p
    return M


# ---------------------------------------------------------------------------
# EWA projection of 3D Gaussians
# ---------------------------------------------------------------------------

def perspective_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of (x,y,z) -> (fx*x/z + cx, fy*y/z + cy) at camera points t.

    t: (N, 3).  Returns (N, 2, 3).
    """
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    inv_z = 1.0 / z
    J = np.zeros((t.shape[0], 2, 3), dtype=t.dtype)
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * x * inv_z * inv_z
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * y * inv_z * inv_z
    return J


def world_covariance(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """R diag(s^2) R^T for (N, 4) unit quats and (N, 3) scales -> (N, 3, 3)."""
    R = quat_to_rotmat(quat)
    return np.einsum("nij,nj,nkj->nik", R, scale**2, R)


def project_gaussian(position, quat, scale, cam: Camera, *, near: float = NEAR_PLANE):
    """EWA affine projection of 3D Gaussians.

    Returns (mean2d (N,2), cov2d (N,2,2), depth (N,), valid (N,) bool).
    ``valid`` is False where the center lies behind the near plane; those
    primitives are culled, all other outputs are unspecified there.
    """
    position = np.atleast_2d(position)
    t = cam.to_camera(position)
    depth = t[:, 2]
    valid = depth > near
    ts = np.where(valid[:, None], t, np.array([0.0, 0.0, 1.0]))
    J = perspective_jacobian(ts, cam.fx, cam.fy)
    W = cam.rotation.astype(ts.dtype)
    Vw = world_covariance(normalize_quats(np.atleast_2d(quat)), np.atleast_2d(scale))
    M = np.einsum("ij,njk,lk->nil", W, Vw, W)  # camera-space covariance
    cov2d = np.einsum("nij,njk,nlk->nil", J, M, J)
    mean2d = cam.project(ts)
    return mean2d, cov2d, depth, valid


def project_gaussian_backward(position, quat, scale, cam: Camera,
                              g_mean2d, g_cov2d, g_depth):
    """Accumulate gradients of the EWA projection back to world parameters.

    Inputs are per-Gaussian cotangents (same shapes as the forward outputs);
    ``g_cov2d`` must be symmetric.  Returns (g_pos, g_quat_unit, g_scale); the
    quaternion gradient is w.r.t. the unit quaternion (project afterwards).
    """
    position = np.atleast_2d(position)
    qn = normalize_quats(np.atleast_2d(quat))
    scale = np.atleast_2d(scale)
    t = cam.to_camera(position)
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    J = perspective_jacobian(t, fx, fy)
    W = cam.rotation.astype(t.dtype)
    R = quat_to_rotmat(qn)
    Vw = np.einsum("nij,nj,nkj->nik", R, scale**2, R)
    M = np.einsum("ij,njk,lk->nil", W, Vw, W)

    # cov2d = J M J^T
    g_M = np.einsum("nji,njk,nkl->nil", J, g_cov2d, J)
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, J, M)  # g_cov2d symmetric

    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    inv_z3 = inv_z2 * inv_z
    # nonzero entries of dJ/dt
    g_t = np.empty_like(t)
    g_t[:, 0] = g_J[:, 0, 2] * (-fx * inv_z2)
    g_t[:, 1] = g_J[:, 1, 2] * (-fy * inv_z2)
    g_t[:, 2] = (g_J[:, 0, 0] * (-fx * inv_z2)
                 + g_J[:, 0, 2] * (2.0 * fx * x * inv_z3)
                 + g_J[:, 1, 1] * (-fy * inv_z2)
                 + g_J[:, 1, 2] * (2.0 * fy * y * inv_z3))
    # mean2d = (fx x/z + cx, fy y/z + cy)
    g_t[:, 0] += g_mean2d[:, 0] * fx * inv_z
    g_t[:, 1] += g_mean2d[:, 1] * fy * inv_z
    g_t[:, 2] += (-fx * x * inv_z2) * g_mean2d[:, 0] + (-fy * y * inv_z2) * g_mean2d[:, 1]
    g_t[:, 2] += g_depth

    g_pos = g_t @ W  # t = W p + b  =>  g_p = W^T g_t
    g_Vw = np.einsum("ji,njk,kl->nil", W, g_M, W)
    g_Vw = 0.5 * (g_Vw + np.swapaxes(g_Vw, 1, 2))

    # Vw = sum_k s_k^2 r_k r_k^T
    GR = 2.0 * np.einsum("nij,njk->nik", g_Vw, R)  # (N,3,3); column k: 2 gVw r_k
    g_scale = scale * np.einsum("nik,nik->nk", GR, R)  # 2 s_k r_k^T gVw r_k
    g_R = GR * (scale**2)[:, None, :]
    dRdq = rotmat_quat_jacobian(qn)
    g_quat = np.einsum("nqij,nij->nq", dRdq, g_R)
    return g_pos, g_quat, g_scale


# ---------------------------------------------------------------------------
# Ray-plane intersection for surfels and 2D Gaussians
# ---------------------------------------------------------------------------

def splat_frames(position, quat, cam: Camera):
    """Camera-space center and local frame of planar primitives.

    Returns (q (N,3), a1 (N,3), a2 (N,3), n (N,3)): center plus the two
    in-plane unit axes and the unit normal, all in camera coordinates.
    """
    R = quat_to_rotmat(normalize_quats(np.atleast_2d(quat)))
    W = cam.rotation.astype(R.dtype)
    q = cam.to_camera(np.atleast_2d(position))
    a1 = R[:, :, 0] @ W.T
    a2 = R[:, :, 1] @ W.T
    n = R[:, :, 2] @ W.T
    return q, a1, a2, n


def ray_splat_intersect(q, a1, a2, n, scale, dirs, *, near: float = NEAR_PLANE):
    """Intersect pixel rays with planar primitives in local disc coordinates.

    q, a1, a2, n: camera-space frames, broadcast against dirs (..., 3) with
    z = 1.  Returns (u, v, t, valid); t is the camera depth of the hit.
    Near-parallel rays (|n.dir| below 1e-8 of the ray norm) and hits at or
    behind the near plane are invalid.
    """
    n_dot_d = np.sum(n * dirs, axis=-1)
    n_dot_q = np.sum(n * q, axis=-1)
    dnorm = np.linalg.norm(dirs, axis=-1)
    ok = np.abs(n_dot_d) > PARALLEL_EPS * dnorm
    with np.errstate(divide="ignore", invalid="ignore"):
        t = n_dot_q / n_dot_d
    h = t[..., None] * dirs - q
    u = np.sum(a1 * h, axis=-1) / scale[..., 0]
    v = np.sum(a2 * h, axis=-1) / scale[..., 1]
    valid = ok & (t > near)
    return u, v, t, valid


def ray_splat_backward(q, a1, a2, n, scale, dirs, u, v, t, gu, gv, gt):
    """Per-fragment gradients of (u, v, t) back to the camera-space frame.

    Returns (g_q, g_a1, g_a2, g_n, g_s1, g_s2) per fragment; callers reduce
    over fragments and chain to world parameters.
    """
    s1 = scale[..., 0]
    s2 = scale[..., 1]
    n_dot_d = np.sum(n * dirs, axis=-1)
    inv_dn = 1.0 / n_dot_d
    h = t[..., None] * dirs - q
    k1 = np.sum(a1 * dirs, axis=-1) / s1
    k2 = np.sum(a2 * dirs, axis=-1) / s2
    # du = (a1/s1).dh, dv = (a2/s2).dh with dh = dir*dt - dq;
    # dt = (n.dq - h.dn) / n_dot_d
    g_scalar_t = gu * k1 + gv * k2 + gt  # cotangent on t including u,v paths
    g_q = (g_scalar_t * inv_dn)[..., None] * n \
        - (gu / s1)[..., None] * a1 - (gv / s2)[..., None] * a2
    g_n = -(g_scalar_t * inv_dn)[..., None] * h
    g_a1 = (gu / s1)[..., None] * h
    g_a2 = (gv / s2)[..., None] * h
    g_s1 = -gu * u / s1
    g_s2 = -gv * v / s2
    return g_q, g_a1, g_a2, g_n, g_s1, g_s2


def frame_world_grads(quat_unit, cam: Camera, g_q, g_a1, g_a2, g_n):
    """Chain camera-space frame gradients to world position and quaternion.

    All g_* are per-primitive (N, 3) accumulations.  Returns (g_pos, g_quat)
    with g_quat w.r.t. the unit quaternion.
    """
    W = cam.rotation
    g_pos = g_q @ W
    g_cols = np.stack([g_a1 @ W, g_a2 @ W, g_n @ W], axis=-1)  # (N, 3, 3)
    dRdq = rotmat_quat_jacobian(np.atleast_2d(quat_unit))
    g_quat = np.einsum("nqij,nij->nq", dRdq, g_cols)
    return g_pos, g_quat


# ---------------------------------------------------------------------------
# Exact screen bounds of a projected disc
# ---------------------------------------------------------------------------

def disc_screen_bounds(q, a1, a2, scale, radius, cam: Camera):
    """Axis-aligned screen bounds of the projected disc of local ``radius``.

    The disc {(a,b): a^2+b^2 <= r^2} maps to screen through a projective
    transform; each bound solves the tangent-line condition, a quadratic in
    the screen coordinate.  Returns (xmin, xmax, ymin, ymax) per primitive
    (unclipped, in continuous pixel coordinates) plus a ``whole_screen``
    mask set where the disc approaches the focal plane and the conic is
    unbounded (callers should fall back to the full viewport there).
    """
    m1 = a1 * (scale[:, 0] * radius)[:, None]
    m2 = a2 * (scale[:, 1] * radius)[:, None]
    bounds = np.empty((q.shape[0], 4), dtype=q.dtype)
    whole = np.zeros(q.shape[0], dtype=bool)
    B = np.stack([m1[:, 2], m2[:, 2], q[:, 2]], axis=1)
    for axis, (f, c) in enumerate(((cam.fx, cam.cx), (cam.fy, cam.cy))):
        A = np.stack([f * m1[:, axis] + c * m1[:, 2],
                      f * m2[:, axis] + c * m2[:, 2],
                      f * q[:, axis] + c * q[:, 2]], axis=1)
        c2 = B[:, 2] ** 2 - (B[:, 0] ** 2 + B[:, 1] ** 2)
        c1 = -2.0 * (A[:, 2] * B[:, 2] - (A[:, 0] * B[:, 0] + A[:, 1] * B[:, 1]))
        c0 = A[:, 2] ** 2 - (A[:, 0] ** 2 + A[:, 1] ** 2)
        degenerate = c2 <= 0
        whole |= degenerate
        c2s = np.where(degenerate, 1.0, c2)
        disc = np.maximum(c1 * c1 - 4.0 * c2s * c0, 0.0)
        root = np.sqrt(disc)
        bounds[:, 2 * axis] = (-c1 - root) / (2.0 * c2s)
        bounds[:, 2 * axis + 1] = (-c1 + root) / (2.0 * c2s)
    return bounds, whole


def splat_screen_jacobian(q, a1, a2, scale, cam: Camera):
    """Affine Jacobian of local disc coords -> screen at the disc center.

    Returns (N, 2, 2); row i is d(screen_i)/d(local a, b) including the
    anisotropic scaling.  Used by the object-space anti-aliasing filter.
    """
    m1 = a1 * scale[:, 0:1]
    m2 = a2 * scale[:, 1:2]
    z = q[:, 2]
    J = np.empty((q.shape[0], 2, 2), dtype=q.dtype)
    for axis, f in enumerate((cam.fx, cam.fy)):
        # d/da [ f*(q+a m1+b m2)_axis / (q+a m1+b m2)_z ] at a=b=0
        J[:, axis, 0] = f * (m1[:, axis] * z - q[:, axis] * m1[:, 2]) / (z * z)
        J[:, axis, 1] = f * (m2[:, axis] * z - q[:, axis] * m2[:, 2]) / (z * z)
    return J
