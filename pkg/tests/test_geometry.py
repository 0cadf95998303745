"""Transforms, EWA projection, ray-splat intersection, screen bounds."""

import numpy as np
import pytest

from conftest import make_camera, random_quats
from ges.cameras import Camera, look_at
from ges.geometry import (disc_screen_bounds, normalize_quats, project_gaussian,
                          quat_to_rotmat, ray_splat_intersect, splat_frames,
                          splat_screen_jacobian, surfel_to_world)
from oracles import mc_projected_covariance


def test_quat_identity():
    assert np.allclose(quat_to_rotmat(np.array([[1.0, 0, 0, 0]])), np.eye(3))


def test_quat_rotation_is_orthonormal(rng):
    q = random_quats(rng, 20)
    R = quat_to_rotmat(q)
    eye = np.einsum("nij,nkj->nik", R, R)
    assert np.allclose(eye, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)


def test_surfel_to_world_identity_embedding():
    M = surfel_to_world(np.zeros(3), np.array([1.0, 0, 0, 0]), np.ones(2))[0]
    pts = np.array([[1.0, 0, 0, 1], [0, 1, 0, 1], [0.3, -0.2, 0, 1]])
    out = pts @ M.T
    assert np.allclose(out, pts[:, :3] * np.array([1, 1, 0]) + 0)


def test_surfel_to_world_scaled_translation():
    M = surfel_to_world(np.array([0.0, 0, 5]), np.array([1.0, 0, 0, 0]),
                        np.array([2.0, 1.0]))[0]
    out = M @ np.array([1.0, 1.0, 0.0, 1.0])
    assert np.allclose(out, [2.0, 1.0, 5.0])


def test_surfel_transform_composes_with_camera(rng):
    """Local -> world -> camera equals the composed affine map."""
    cam = make_camera()
    pos = rng.uniform(-1, 1, 3)
    quat = random_quats(rng, 1)[0]
    scale = rng.uniform(0.2, 2.0, 2)
    M = surfel_to_world(pos, quat, scale)[0]
    theta = rng.uniform(0, 2 * np.pi, 32)
    local = np.stack([np.cos(theta), np.sin(theta), np.zeros(32), np.ones(32)], axis=1)
    world = local @ M.T
    via_world = cam.to_camera(world)
    comp = cam.world_to_camera[:3, :3] @ M
    comp = np.concatenate([comp[:, :3], (cam.world_to_camera[:3, :3] @ M[:, 3]
                                         + cam.world_to_camera[:3, 3])[:, None]], axis=1)
    assert np.allclose(local @ comp.T, via_world, atol=1e-12)


def test_project_isotropic_on_axis():
    """Isotropic Gaussian on the optical axis: cov2d = (f sigma / z)^2 I."""
    cam = Camera(60.0, 60.0, 16, 16, 32, 32, np.eye(4))
    sigma, z = 0.2, 5.0
    mean2d, cov2d, depth, valid = project_gaussian(
        np.array([[0.0, 0, z]]), np.array([[1.0, 0, 0, 0]]),
        np.array([[sigma] * 3]), cam)
    assert valid[0] and depth[0] == z
    assert np.allclose(mean2d[0], [16, 16])
    assert np.allclose(cov2d[0], (60.0 * sigma / z) ** 2 * np.eye(2), rtol=1e-12)


def test_project_culls_behind_camera():
    cam = Camera(60.0, 60.0, 16, 16, 32, 32, np.eye(4))
    _, _, _, valid = project_gaussian(np.array([[0.0, 0, -1.0]]),
                                      np.array([[1.0, 0, 0, 0]]),
                                      np.array([[0.1] * 3]), cam)
    assert not valid[0]


def test_project_matches_monte_carlo(rng):
    """EWA covariance vs sampling through the exact nonlinear projection."""
    cam = make_camera(width=64, height=64, dist=6.0)
    for seed in range(5):
        r = np.random.default_rng(seed)
        pos = r.uniform(-0.5, 0.5, 3)
        quat = random_quats(r, 1)[0]
        scale = r.uniform(0.02, 0.08, 3)  # small angular extent
        mean2d, cov2d, depth, valid = project_gaussian(pos[None], quat[None], scale[None], cam)
        assert valid[0]
        emp = mc_projected_covariance(pos, quat, scale, cam, n=400_000, seed=seed)
        rel = np.linalg.norm(cov2d[0] - emp) / np.linalg.norm(emp)
        assert rel < 0.05


def test_cov2d_positive_semidefinite(rng):
    cam = make_camera()
    n = 50
    pos = rng.uniform(-1, 1, (n, 3))
    quat = random_quats(rng, n)
    scale = rng.uniform(0.01, 0.5, (n, 3))
    _, cov2d, _, valid = project_gaussian(pos, quat, scale, cam)
    ev = np.linalg.eigvalsh(cov2d[valid])
    assert np.all(ev >= -1e-9)


def test_intersect_fronto_parallel_center():
    cam = Camera(60.0, 60.0, 16, 16, 32, 32, np.eye(4))
    q, a1, a2, n = splat_frames(np.array([[0.0, 0, 3.0]]), np.array([[1.0, 0, 0, 0]]), cam)
    dirs = np.array([[0.0, 0.0, 1.0]])  # ray through the principal point
    u, v, t, valid = ray_splat_intersect(q, a1, a2, n, np.array([[1.0, 1.0]]), dirs)
    assert valid[0] and np.isclose(t[0], 3.0)
    assert np.allclose([u[0], v[0]], 0.0, atol=1e-12)


def test_intersect_tilted_depth_profile():
    """A surfel tilted about X makes hit depth vary linearly with pixel row."""
    cam = Camera(60.0, 60.0, 16, 16, 32, 32, np.eye(4))
    ang = np.deg2rad(60.0)
    quat = np.array([[np.cos(ang / 2), np.sin(ang / 2), 0.0, 0.0]])
    pos = np.array([[0.0, 0.0, 4.0]])
    scale = np.array([[2.0, 2.0]])
    q, a1, a2, n = splat_frames(pos, quat, cam)
    ys = np.linspace(-0.2, 0.2, 9)
    dirs = np.stack([np.zeros(9), ys, np.ones(9)], axis=1)
    u, v, t, valid = ray_splat_intersect(q, a1, a2, n, scale, dirs)
    assert np.all(valid)
    # closed-form ray-plane solution: t = (n.q) / (n.d)
    nv = n[0]
    expect = (nv @ q[0]) / (dirs @ nv)
    assert np.allclose(t, expect, atol=1e-12)
    slopes = np.diff(t) / np.diff(ys)
    assert np.ptp(t) > 1e-3 and not np.allclose(slopes, slopes[0])  # projective, monotone
    assert np.all(np.diff(t) > 0) or np.all(np.diff(t) < 0)


def test_intersect_ray_in_plane_rejected():
    cam = Camera(60.0, 60.0, 16, 16, 32, 32, np.eye(4))
    # plane containing the optical axis: normal perpendicular to the ray
    quat = np.array([[np.cos(np.pi / 4), np.sin(np.pi / 4), 0.0, 0.0]])
    q, a1, a2, n = splat_frames(np.array([[0.0, 0.0, 3.0]]), quat, cam)
    dirs = np.array([[0.0, 0.0, 1.0]])
    *_, valid = ray_splat_intersect(q, a1, a2, n, np.array([[1.0, 1.0]]), dirs)
    assert not valid[0]


def test_intersect_depth_invariant_to_inplane_rotation(rng):
    cam = make_camera()
    pos = rng.uniform(-0.5, 0.5, 3)
    scale = np.array([[0.8, 0.8]])
    base = random_quats(rng, 1)
    phi = rng.uniform(0, 2 * np.pi)
    spin = np.array([np.cos(phi / 2), 0, 0, np.sin(phi / 2)])  # about local z
    w1, x1, y1, z1 = base[0]
    w2, x2, y2, z2 = spin
    composed = np.array([[w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                          w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                          w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                          w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2]])
    dirs = rng.uniform(-0.3, 0.3, (16, 3))
    dirs[:, 2] = 1.0
    qa, a1a, a2a, na = splat_frames(pos[None], base, cam)
    qb, a1b, a2b, nb = splat_frames(pos[None], composed, cam)
    *_, ta, va = ray_splat_intersect(qa, a1a, a2a, na, scale, dirs)
    *_, tb, vb = ray_splat_intersect(qb, a1b, a2b, nb, scale, dirs)
    assert np.array_equal(va, vb)
    assert np.allclose(ta[va], tb[vb], atol=1e-10)


def test_disc_bounds_cover_projected_boundary(rng):
    """Every projected boundary point lies inside the reported bounds."""
    cam = make_camera(width=48, height=48)
    for seed in range(30):
        r = np.random.default_rng(seed)
        pos = r.uniform(-1.5, 1.5, 3)
        quat = random_quats(r, 1)
        scale = r.uniform(0.05, 1.0, (1, 2))
        q, a1, a2, n = splat_frames(pos[None], quat, cam)
        if q[0, 2] < 0.05:
            continue
        radius = 3.0
        bounds, whole = disc_screen_bounds(q, a1, a2, scale, radius, cam)
        theta = np.linspace(0, 2 * np.pi, 720)
        world = (pos[None] + radius * scale[0, 0] * np.cos(theta)[:, None]
                 * (quat_to_rotmat(quat)[0][:, 0])[None]
                 + radius * scale[0, 1] * np.sin(theta)[:, None]
                 * (quat_to_rotmat(quat)[0][:, 1])[None])
        camp = cam.to_camera(world)
        front = camp[:, 2] > 0.01
        if whole[0] or not np.all(front):
            continue
        px = cam.project(camp)
        assert px[:, 0].min() >= bounds[0, 0] - 1e-6
        assert px[:, 0].max() <= bounds[0, 1] + 1e-6
        assert px[:, 1].min() >= bounds[0, 2] - 1e-6
        assert px[:, 1].max() <= bounds[0, 3] + 1e-6
        # and reasonably tight
        assert px[:, 0].min() <= bounds[0, 0] + 0.2 + 0.02 * abs(bounds[0, 0])
        assert px[:, 0].max() >= bounds[0, 1] - 0.2 - 0.02 * abs(bounds[0, 1])


def test_screen_jacobian_matches_fd(rng):
    cam = make_camera()
    pos = rng.uniform(-0.5, 0.5, (1, 3))
    quat = random_quats(rng, 1)
    scale = rng.uniform(0.1, 0.5, (1, 2))
    q, a1, a2, n = splat_frames(pos, quat, cam)
    J = splat_screen_jacobian(q, a1, a2, scale, cam)[0]
    h = 1e-6
    M = surfel_to_world(pos[0], quat[0], scale[0])[0]

    def screen(ab):
        w = M @ np.array([ab[0], ab[1], 0.0, 1.0])
        c = cam.to_camera(w)
        return cam.project(c[None])[0]

    for j in range(2):
        e = np.zeros(2); e[j] = h
        fd = (screen(e) - screen(-e)) / (2 * h)
        assert np.allclose(J[:, j], fd, atol=1e-5)
