"""Deployment renderer: opaque surfel pass, order-independent Gaussian pass.

Pass 1 rasterizes surfels with a z-buffer (optionally on a 2x2 supersampled
grid, box-downsampled).  Pass 2 splats Gaussians at base resolution and
accumulates color/weight sums gated by a depth test against the surfel depth
map plus a per-Gaussian offset.  The final image is the weight-normalized
combination of both passes.  No primitive ordering affects the result; tiles
partition the screen and every tile reduces its primitives in a canonical
order so results are bitwise reproducible under input permutation.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import sh as shlib
from .cameras import Camera, NEAR_PLANE
from .filters import SCREEN_FILTER_VARIANCE, object_space_filter_2d, opaque_radius
from .geometry import PARALLEL_EPS, disc_screen_bounds, project_gaussian, splat_frames
from .primitives import GaussianKind, Scene

ALPHA_CUTOFF = 1.0 / 255.0
TILE = 16


def default_threads() -> int:
    if os.environ.get("GES_DETERMINISTIC") == "1":
        return 1
    return max(1, int(os.environ.get("GES_THREADS", "1")))


@dataclass
class RenderSettings:
    supersample: int = 1              # 1 or 4 subsamples per pixel
    background: tuple = (0.0, 0.0, 0.0)
    layers: str = "full"              # full | surfels_only | gaussians_only
    mip: bool = False                 # screen-space filter compensation on/off
    epsilon_mode: str = "adaptive"    # adaptive | constant
    epsilon_value: float = 0.0
    dtype: type = np.float32
    threads: int = field(default_factory=default_threads)
    with_geometry: bool = False       # also accumulate Gaussian depth/normal

    def __post_init__(self):
        if self.supersample not in (1, 4):
            raise ValueError("supersample must be 1 or 4")
        if self.layers not in ("full", "surfels_only", "gaussians_only"):
            raise ValueError(f"unknown layer mode {self.layers!r}")
        if self.epsilon_mode not in ("adaptive", "constant"):
            raise ValueError(f"unknown epsilon mode {self.epsilon_mode!r}")

    @property
    def grid(self) -> int:
        return 2 if self.supersample == 4 else 1


@dataclass
class SurfelBuffers:
    color: np.ndarray     # (H, W, 3) box-downsampled
    depth: np.ndarray     # (H, W) camera-z, +inf where uncovered
    normal: np.ndarray    # (H, W, 3) camera-space, zero where uncovered
    coverage: np.ndarray  # (H, W) bool
    winner: np.ndarray    # (H, W) int32 surfel index, -1 where uncovered


@dataclass
class GaussianBuffers:
    color: np.ndarray    # (H, W, 3) accumulated c*alpha
    weight: np.ndarray   # (H, W) accumulated alpha
    depth: np.ndarray = None    # accumulated d*alpha (with_geometry)
    normal: np.ndarray = None   # accumulated n*alpha (with_geometry)


@dataclass
class RenderResult:
    image: np.ndarray
    surfels: SurfelBuffers
    gaussians: GaussianBuffers


def _pixel_ranges(bounds, whole, width, height):
    """Continuous conic bounds to inclusive pixel-center index ranges."""
    pad = 0.5  # guards against fp error in the quadratic roots
    x0 = np.where(whole, 0.0, np.ceil(bounds[:, 0] - pad - 0.5))
    x1 = np.where(whole, width - 1.0, np.floor(bounds[:, 1] + pad - 0.5))
    y0 = np.where(whole, 0.0, np.ceil(bounds[:, 2] - pad - 0.5))
    y1 = np.where(whole, height - 1.0, np.floor(bounds[:, 3] + pad - 0.5))
    x0 = np.clip(x0, 0, width - 1).astype(np.int64)
    x1 = np.clip(x1, 0, width - 1).astype(np.int64)
    y0 = np.clip(y0, 0, height - 1).astype(np.int64)
    y1 = np.clip(y1, 0, height - 1).astype(np.int64)
    return x0, x1, y0, y1


def surfel_view_colors(scene: Scene, cam: Camera) -> np.ndarray:
    """Per-surfel color for this view, Eq.-style center-to-camera direction."""
    d = cam.position - scene.surfels.pos
    d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    return shlib.sh_eval(scene.surfels.sh, d)


def gaussian_view_colors(scene: Scene, cam: Camera) -> np.ndarray:
    d = cam.position - scene.gaussians.pos
    d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    return shlib.sh_eval(scene.gaussians.sh, d)


def _tile_iter(height, width, tile=TILE):
    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            yield y0, min(y0 + tile, height), x0, min(x0 + tile, width)


def _run_tiles(fn, tiles, threads):
    if threads <= 1:
        for t in tiles:
            fn(t)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fn, tiles))


def rasterize_surfels(scene: Scene, cam: Camera, settings: RenderSettings) -> SurfelBuffers:
    """Opaque z-buffer pass over all surfels.

    Per (sub)pixel the surfel with the minimum ray-plane hit depth whose hit
    lies inside the local opaque radius wins; its per-view SH color, hit
    depth and camera-facing plane normal are written.
    """
    dt = settings.dtype
    grid = settings.grid
    rcam = cam.scaled(grid) if grid > 1 else cam
    H, W = rcam.height, rcam.width
    bg = np.asarray(settings.background, dtype=dt)

    color = np.empty((H, W, 3), dtype=dt)
    color[:] = bg
    depth = np.full((H, W), np.inf, dtype=dt)
    normal = np.zeros((H, W, 3), dtype=dt)
    winner = np.full((H, W), -1, dtype=np.int32)

    n_surf = scene.surfels.count
    if n_surf:
        q, a1, a2, n = splat_frames(scene.surfels.pos, scene.surfels.quat, rcam)
        scale = scene.surfels.scale
        cols = surfel_view_colors(scene, rcam).astype(dt)
        # plane normal oriented toward the camera
        n_vis = np.where(np.sum(n * q, axis=1, keepdims=True) < 0, n, -n).astype(dt)
        alive = q[:, 2] > NEAR_PLANE
        R = opaque_radius()
        bounds, whole = disc_screen_bounds(q, a1, a2, scale, R, rcam)
        x0, x1, y0, y1 = _pixel_ranges(bounds, whole, W, H)
        alive &= (x1 >= x0) & (y1 >= y0)
        idx_all = np.flatnonzero(alive)

        dirs = rcam.pixel_dirs(dtype=np.float64)
        q = q.astype(dt); a1 = a1.astype(dt); a2 = a2.astype(dt); n = n.astype(dt)
        s1 = scale[:, 0].astype(dt); s2 = scale[:, 1].astype(dt)
        dirs = dirs.astype(dt)
        dnorm = np.linalg.norm(dirs, axis=-1)

        def do_tile(t):
            ty0, ty1, tx0, tx1 = t
            sel = idx_all[(x0[idx_all] <= tx1 - 1) & (x1[idx_all] >= tx0)
                          & (y0[idx_all] <= ty1 - 1) & (y1[idx_all] >= ty0)]
            if sel.size == 0:
                return
            d = dirs[ty0:ty1, tx0:tx1].reshape(-1, 3)
            npx = d.shape[0]
            with np.errstate(divide="ignore", invalid="ignore"):
                nd = n[sel] @ d.T                             # (M, npx)
                nq = np.sum(n[sel] * q[sel], axis=1)[:, None]
                thit = nq / nd
                a1d = a1[sel] @ d.T
                a1q = np.sum(a1[sel] * q[sel], axis=1)[:, None]
                u = (thit * a1d - a1q) / s1[sel][:, None]
                a2d = a2[sel] @ d.T
                a2q = np.sum(a2[sel] * q[sel], axis=1)[:, None]
                v = (thit * a2d - a2q) / s2[sel][:, None]
                ok = (np.abs(nd) > PARALLEL_EPS * dnorm[ty0:ty1, tx0:tx1].reshape(1, -1)) \
                    & (thit > NEAR_PLANE) & (u * u + v * v <= R * R)
            dmat = np.where(ok, thit, np.inf).astype(dt)
            win = np.argmin(dmat, axis=0)
            dmin = dmat[win, np.arange(npx)]
            cov = np.isfinite(dmin)
            wg = np.where(cov, sel[win], -1).astype(np.int32)
            sh_ = (ty1 - ty0, tx1 - tx0)
            depth[ty0:ty1, tx0:tx1] = dmin.reshape(sh_)
            winner[ty0:ty1, tx0:tx1] = wg.reshape(sh_)
            color[ty0:ty1, tx0:tx1] = np.where(
                cov[:, None], cols[sel[win]], bg).reshape(sh_ + (3,))
            normal[ty0:ty1, tx0:tx1] = np.where(
                cov[:, None], n_vis[sel[win]], 0.0).reshape(sh_ + (3,))

        _run_tiles(do_tile, list(_tile_iter(H, W)), settings.threads)

    if grid > 1:
        h, w = cam.height, cam.width
        color = color.reshape(h, grid, w, grid, 3).mean(axis=(1, 3), dtype=dt)
        # depth/normal/coverage resolve to one representative subsample
        depth = depth[0::grid, 0::grid]
        normal = normal[0::grid, 0::grid]
        winner = winner[0::grid, 0::grid]
    return SurfelBuffers(color=color, depth=depth, normal=normal,
                         coverage=np.isfinite(depth), winner=winner)


def _gaussian_epsilon(scene: Scene, settings: RenderSettings) -> np.ndarray:
    if settings.epsilon_mode == "constant":
        return np.full(scene.gaussians.count, settings.epsilon_value)
    return scene.gaussians.epsilon()


def accumulate_gaussians(scene: Scene, cam: Camera, surfel_depth: np.ndarray,
                         settings: RenderSettings) -> GaussianBuffers:
    """Order-independent accumulation of Gaussian color and weight.

    alpha is the projected Gaussian falloff times opacity, cut to zero below
    1/255; a contribution counts only where the primitive depth passes
    d < surfel_depth + epsilon.  3D Gaussians use the EWA screen covariance
    (plus the fixed screen low-pass) and their center depth; 2D Gaussians use
    exact ray-disc intersection and the planar hit depth.
    """
    dt = settings.dtype
    H, W = cam.height, cam.width
    gb = GaussianBuffers(color=np.zeros((H, W, 3), dtype=dt),
                         weight=np.zeros((H, W), dtype=dt))
    if settings.with_geometry:
        gb.depth = np.zeros((H, W), dtype=dt)
        gb.normal = np.zeros((H, W, 3), dtype=dt)
    g = scene.gaussians
    if g.count == 0:
        return gb
    ds = np.asarray(surfel_depth, dtype=dt)
    eps = _gaussian_epsilon(scene, settings).astype(dt)
    cols = gaussian_view_colors(scene, cam).astype(dt)
    if g.kind is GaussianKind.THREE_D:
        _accumulate_3d(scene, cam, ds, eps, cols, settings, gb)
    else:
        _accumulate_2d(scene, cam, ds, eps, cols, settings, gb)
    return gb


def _accumulate_3d(scene, cam, ds, eps, cols, settings, gb):
    dt = settings.dtype
    H, W = cam.height, cam.width
    g = scene.gaussians
    mean2d, cov2d, depth, valid = project_gaussian(g.pos, g.quat, g.eff_scale(), cam)
    sigma = g.eff_opacity()
    raw_det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    cov2d = cov2d.copy()
    cov2d[:, 0, 0] += SCREEN_FILTER_VARIANCE
    cov2d[:, 1, 1] += SCREEN_FILTER_VARIANCE
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    if settings.mip:
        sigma = sigma * np.sqrt(np.maximum(raw_det, 0.0) / det)
    valid &= det > 0
    # conic (inverse covariance) coefficients
    la = cov2d[:, 1, 1] / det
    lb = -cov2d[:, 0, 1] / det
    lc = cov2d[:, 0, 0] / det
    # alpha >= 1/255 requires Mahalanobis^2 <= 2 ln(255 sigma)
    m2max = 2.0 * np.log(np.maximum(255.0 * sigma, 1e-12))
    valid &= m2max > 0
    rx = np.sqrt(np.maximum(m2max * cov2d[:, 0, 0], 0.0))
    ry = np.sqrt(np.maximum(m2max * cov2d[:, 1, 1], 0.0))
    bounds = np.stack([mean2d[:, 0] - rx, mean2d[:, 0] + rx,
                       mean2d[:, 1] - ry, mean2d[:, 1] + ry], axis=1)
    x0, x1, y0, y1 = _pixel_ranges(bounds, np.zeros(g.count, bool), W, H)
    valid &= (x1 >= x0) & (y1 >= y0)
    idx_all = np.flatnonzero(valid)

    normals = None
    if settings.with_geometry:
        from .geometry import quat_to_rotmat
        Rm = quat_to_rotmat(g.quat)
        k = np.argmin(g.eff_scale(), axis=1)
        nrm = Rm[np.arange(g.count), :, k] @ cam.rotation.T
        tcam = cam.to_camera(g.pos)
        normals = np.where(np.sum(nrm * tcam, axis=1, keepdims=True) < 0, nrm, -nrm).astype(dt)

    mx = mean2d[:, 0].astype(dt); my = mean2d[:, 1].astype(dt)
    la = la.astype(dt); lb = lb.astype(dt); lc = lc.astype(dt)
    sig = sigma.astype(dt); dep = depth.astype(dt)
    xs = (np.arange(W) + 0.5).astype(dt)
    ys = (np.arange(H) + 0.5).astype(dt)

    def do_tile(t):
        ty0, ty1, tx0, tx1 = t
        sel = idx_all[(x0[idx_all] <= tx1 - 1) & (x1[idx_all] >= tx0)
                      & (y0[idx_all] <= ty1 - 1) & (y1[idx_all] >= ty0)]
        if sel.size == 0:
            return
        # canonical reduction order: invariant to input permutation
        order = np.lexsort((sig[sel], my[sel], mx[sel], dep[sel]))
        sel = sel[order]
        px = xs[tx0:tx1][None, None, :]                     # (1,1,tw)
        py = ys[ty0:ty1][None, :, None]                     # (1,th,1)
        dx = px - mx[sel][:, None, None]
        dy = py - my[sel][:, None, None]
        power = -0.5 * (la[sel][:, None, None] * dx * dx
                        + lc[sel][:, None, None] * dy * dy) \
            - lb[sel][:, None, None] * dx * dy
        alpha = sig[sel][:, None, None] * np.exp(power)
        alpha = np.where(alpha >= ALPHA_CUTOFF, alpha, 0.0)
        gate = dep[sel][:, None, None] < ds[ty0:ty1, tx0:tx1][None] + eps[sel][:, None, None]
        alpha = np.where(gate, alpha, 0.0)
        M = sel.size
        th, tw = ty1 - ty0, tx1 - tx0
        am = alpha.reshape(M, -1)
        gb.weight[ty0:ty1, tx0:tx1] += am.sum(axis=0).reshape(th, tw)
        gb.color[ty0:ty1, tx0:tx1] += (am.T @ cols[sel]).reshape(th, tw, 3)
        if settings.with_geometry:
            gb.depth[ty0:ty1, tx0:tx1] += (am * dep[sel][:, None]).sum(axis=0).reshape(th, tw)
            gb.normal[ty0:ty1, tx0:tx1] += (am.T @ normals[sel]).reshape(th, tw, 3)

    _run_tiles(do_tile, list(_tile_iter(H, W)), settings.threads)


def _accumulate_2d(scene, cam, ds, eps, cols, settings, gb):
    dt = settings.dtype
    H, W = cam.height, cam.width
    g = scene.gaussians
    q, a1, a2, n = splat_frames(g.pos, g.quat, cam)
    scale = g.eff_scale()
    sigma = g.eff_opacity()
    if settings.mip:
        smul, omul, fvalid = object_space_filter_2d(g, cam)
        scale = scale * smul
        sigma = sigma * omul
    else:
        fvalid = np.ones(g.count, bool)
    n_vis = np.where(np.sum(n * q, axis=1, keepdims=True) < 0, n, -n).astype(dt)
    m2max = 2.0 * np.log(np.maximum(255.0 * sigma, 1e-12))
    valid = fvalid & (q[:, 2] > NEAR_PLANE) & (m2max > 0)
    rmax = np.sqrt(np.maximum(m2max, 0.0))
    bounds, whole = disc_screen_bounds(q, a1, a2, scale * rmax[:, None], 1.0, cam)
    x0, x1, y0, y1 = _pixel_ranges(bounds, whole, W, H)
    valid &= (x1 >= x0) & (y1 >= y0)
    idx_all = np.flatnonzero(valid)

    dirs = cam.pixel_dirs(dtype=np.float64).astype(dt)
    dnorm = np.linalg.norm(dirs, axis=-1)
    q = q.astype(dt); a1 = a1.astype(dt); a2 = a2.astype(dt); n = n.astype(dt)
    s1 = scale[:, 0].astype(dt); s2 = scale[:, 1].astype(dt)
    sig = sigma.astype(dt)
    depc = cam.to_camera(g.pos)[:, 2].astype(dt)

    def do_tile(t):
        ty0, ty1, tx0, tx1 = t
        sel = idx_all[(x0[idx_all] <= tx1 - 1) & (x1[idx_all] >= tx0)
                      & (y0[idx_all] <= ty1 - 1) & (y1[idx_all] >= ty0)]
        if sel.size == 0:
            return
        order = np.lexsort((sig[sel], q[sel, 1], q[sel, 0], depc[sel]))
        sel = sel[order]
        d = dirs[ty0:ty1, tx0:tx1].reshape(-1, 3)
        with np.errstate(divide="ignore", invalid="ignore"):
            nd = n[sel] @ d.T
            nq = np.sum(n[sel] * q[sel], axis=1)[:, None]
            thit = nq / nd
            u = (thit * (a1[sel] @ d.T) - np.sum(a1[sel] * q[sel], axis=1)[:, None]) / s1[sel][:, None]
            v = (thit * (a2[sel] @ d.T) - np.sum(a2[sel] * q[sel], axis=1)[:, None]) / s2[sel][:, None]
            ok = (np.abs(nd) > PARALLEL_EPS * dnorm[ty0:ty1, tx0:tx1].reshape(1, -1)) \
                & (thit > NEAR_PLANE)
            alpha = sig[sel][:, None] * np.exp(np.where(ok, -0.5 * (u * u + v * v), -np.inf))
            alpha = np.where(alpha >= ALPHA_CUTOFF, alpha, 0.0)
            gate = thit < ds[ty0:ty1, tx0:tx1].reshape(1, -1) + eps[sel][:, None]
            alpha = np.where(gate, alpha, 0.0)
        th, tw = ty1 - ty0, tx1 - tx0
        gb.weight[ty0:ty1, tx0:tx1] += alpha.sum(axis=0).reshape(th, tw)
        gb.color[ty0:ty1, tx0:tx1] += (alpha.T @ cols[sel]).reshape(th, tw, 3)
        if settings.with_geometry:
            gb.depth[ty0:ty1, tx0:tx1] += np.where(alpha > 0, alpha * np.where(ok, thit, 0.0), 0.0).sum(axis=0).reshape(th, tw)
            gb.normal[ty0:ty1, tx0:tx1] += (alpha.T @ n_vis[sel]).reshape(th, tw, 3)

    _run_tiles(do_tile, list(_tile_iter(H, W)), settings.threads)


def composite(surfel_color: np.ndarray, gaussian: GaussianBuffers,
              surfel_weight: float = 1.0) -> np.ndarray:
    """Final image (C_s * W_s + C_G) / (W_s + W_G), W_s fixed at 1."""
    denom = surfel_weight + gaussian.weight
    return (surfel_color * surfel_weight + gaussian.color) / denom[..., None]


def smooth_geometry(surfel_buffers: SurfelBuffers, gaussian: GaussianBuffers):
    """Weight-normalized blend of surfel and Gaussian depth/normal maps."""
    if gaussian.depth is None:
        raise ValueError("gaussian buffers were rendered without geometry accumulation")
    denom = 1.0 + gaussian.weight
    d_smooth = (surfel_buffers.depth + gaussian.depth) / denom
    n_smooth = (surfel_buffers.normal + gaussian.normal) / denom[..., None]
    norm = np.linalg.norm(n_smooth, axis=-1, keepdims=True)
    n_smooth = np.where(norm > 1e-12, n_smooth / np.maximum(norm, 1e-12), 0.0)
    return d_smooth, n_smooth


def render(scene: Scene, cam: Camera, settings: RenderSettings | None = None) -> RenderResult:
    """Full two-pass render honoring the layer selection in ``settings``."""
    settings = settings or RenderSettings()
    sb = rasterize_surfels(scene, cam, settings)
    if settings.layers == "surfels_only":
        empty = GaussianBuffers(color=np.zeros_like(sb.color),
                                weight=np.zeros_like(sb.depth))
        return RenderResult(image=sb.color.copy(), surfels=sb, gaussians=empty)
    gb = accumulate_gaussians(scene, cam, sb.depth, settings)
    if settings.layers == "gaussians_only":
        bg = np.asarray(settings.background, dtype=settings.dtype)
        img = np.where(gb.weight[..., None] > 0,
                       gb.color / np.maximum(gb.weight, 1e-12)[..., None], bg)
        return RenderResult(image=img, surfels=sb, gaussians=gb)
    return RenderResult(image=composite(sb.color, gb), surfels=sb, gaussians=gb)
