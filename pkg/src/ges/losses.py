"""Image and geometry losses with hand-derived gradients.

The RGB objective is (1-lambda) L1 + lambda (1-SSIM)/2 with lambda = 0.2 and
the universal SSIM constants (11x11 Gaussian window, sigma 1.5, k1 = 0.01,
k2 = 0.03 on unit range).  Geometry terms supervise blended depth/normal
maps in the planar-Gaussian mode.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

LAMBDA_DSSIM = 0.2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


_W = _window()


def _blur(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _W, axis=0, mode="constant")
    return correlate1d(out, _W, axis=1, mode="constant")


def ssim(a: np.ndarray, b: np.ndarray, *, with_grad: bool = False):
    """Mean SSIM over pixels and channels; optionally also d(ssim)/da.

    Zero-padded windows as in the splatting baselines.  Images are (H, W, 3)
    or (H, W) in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    mu_a = _blur(a)
    mu_b = _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    value = float(S.mean())
    if not with_grad:
        return value
    # dS/d(mu_a), dS/d(var_a), dS/d(cov); adjoint of the blur is the blur
    w = 1.0 / S.size
    dmu = (2 * mu_b * A2) / (B1 * B2) - S * (2 * mu_a) / B1
    dvar = -S / B2
    dcov = 2 * A1 / (B1 * B2)
    g = _blur(w * (dmu - 2 * mu_a * dvar - mu_b * dcov))
    g += 2 * a * _blur(w * dvar)
    g += b * _blur(w * dcov)
    return value, g


def l1(a: np.ndarray, b: np.ndarray, *, with_grad: bool = False):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    value = float(np.abs(diff).mean())
    if not with_grad:
        return value
    return value, np.sign(diff) / diff.size


def loss_rgb(img: np.ndarray, gt: np.ndarray, *, lam: float = LAMBDA_DSSIM,
             with_grad: bool = False):
    """(1-lam) L1 + lam (1-SSIM)/2, optionally with d(loss)/d(img)."""
    if with_grad:
        lv, lg = l1(img, gt, with_grad=True)
        sv, sg = ssim(img, gt, with_grad=True)
        value = (1 - lam) * lv + lam * 0.5 * (1 - sv)
        return value, (1 - lam) * lg - lam * 0.5 * sg
    lv = l1(img, gt)
    sv = ssim(img, gt)
    return (1 - lam) * lv + lam * 0.5 * (1 - sv)


# ---------------------------------------------------------------------------
# Depth-to-normal operator
# ---------------------------------------------------------------------------

def depth_to_normal(depth: np.ndarray, cam, *, with_tape: bool = False):
    """Camera-facing unit normals from central differences of a depth map.

    Border pixels and pixels whose stencil touches a non-finite depth get a
    zero normal.  Returns (H, W, 3) in camera space.
    """
    H, W = depth.shape
    dirs = cam.pixel_dirs()
    P = depth[..., None] * dirs
    tx = np.zeros_like(P)
    ty = np.zeros_like(P)
    tx[:, 1:-1] = P[:, 2:] - P[:, :-2]
    ty[1:-1, :] = P[2:, :] - P[:-2, :]
    raw = np.cross(tx, ty)
    ok = np.zeros((H, W), dtype=bool)
    fin = np.isfinite(depth)
    ok[1:-1, 1:-1] = (fin[1:-1, 1:-1] & fin[1:-1, :-2] & fin[1:-1, 2:]
                      & fin[:-2, 1:-1] & fin[2:, 1:-1])
    norm = np.linalg.norm(raw, axis=-1)
    ok &= norm > 1e-12
    nrm = np.where(ok[..., None], raw / np.maximum(norm, 1e-12)[..., None], 0.0)
    # orient toward the camera
    flip = np.sum(nrm * P, axis=-1) > 0
    sign = np.where(flip, -1.0, 1.0)
    nrm = nrm * sign[..., None]
    if not with_tape:
        return nrm
    return nrm, {"P": P, "tx": tx, "ty": ty, "raw": raw, "norm": norm,
                 "ok": ok, "sign": sign, "dirs": dirs}


def depth_to_normal_vjp(tape, g_normal: np.ndarray) -> np.ndarray:
    """d(loss)/d(depth) given d(loss)/d(normal) from :func:`depth_to_normal`."""
    raw, norm, ok, sign = tape["raw"], tape["norm"], tape["ok"], tape["sign"]
    safe = np.maximum(norm, 1e-12)[..., None]
    n_unit = raw / safe
    g = g_normal * sign[..., None]
    g_raw = (g - np.sum(g * n_unit, axis=-1, keepdims=True) * n_unit) / safe
    g_raw = np.where(ok[..., None], g_raw, 0.0)
    tx, ty = tape["tx"], tape["ty"]
    g_tx = np.cross(ty, g_raw)
    g_ty = np.cross(g_raw, tx)
    g_P = np.zeros_like(tape["P"])
    g_P[:, 2:] += g_tx[:, 1:-1]
    g_P[:, :-2] -= g_tx[:, 1:-1]
    g_P[2:, :] += g_ty[1:-1, :]
    g_P[:-2, :] -= g_ty[1:-1, :]
    return np.sum(g_P * tape["dirs"], axis=-1)


# ---------------------------------------------------------------------------
# Geometry losses (planar-Gaussian mode)
# ---------------------------------------------------------------------------

def loss_gaussian_depth(gauss_depth, gauss_weight, surfel_depth, *, with_grad=False):
    """MAE(D_G / W_G - D_s) over pixels with weight; surfel depth is fixed."""
    mask = (gauss_weight > 1e-8) & np.isfinite(surfel_depth)
    n = int(mask.sum())
    if n == 0:
        return (0.0, np.zeros_like(gauss_depth), np.zeros_like(gauss_weight)) \
            if with_grad else 0.0
    avg = np.where(mask, gauss_depth / np.maximum(gauss_weight, 1e-8), 0.0)
    r = np.where(mask, avg - surfel_depth, 0.0)
    value = float(np.abs(r).sum() / n)
    if not with_grad:
        return value
    s = np.sign(r) / n
    g_d = np.where(mask, s / np.maximum(gauss_weight, 1e-8), 0.0)
    g_w = np.where(mask, -s * avg / np.maximum(gauss_weight, 1e-8), 0.0)
    return value, g_d, g_w


def loss_supervised_normal(normal, supervision, *, with_grad=False):
    """Mean (1 - n_supv . n) over pixels where both normals exist."""
    mask = (np.linalg.norm(normal, axis=-1) > 1e-8) \
        & (np.linalg.norm(supervision, axis=-1) > 1e-8)
    n = int(mask.sum())
    if n == 0:
        return (0.0, np.zeros_like(normal)) if with_grad else 0.0
    dots = np.sum(normal * supervision, axis=-1)
    value = float(np.where(mask, 1.0 - dots, 0.0).sum() / n)
    if not with_grad:
        return value
    g = np.where(mask[..., None], -supervision / n, 0.0)
    return value, g


def loss_supervised_depth_normal(depth, supervision, cam, *, with_grad=False):
    """Mean (1 - n_supv . normal(depth)) using the depth-to-normal operator."""
    nrm, tape = depth_to_normal(depth, cam, with_tape=True)
    mask = tape["ok"] & (np.linalg.norm(supervision, axis=-1) > 1e-8)
    n = int(mask.sum())
    if n == 0:
        return (0.0, np.zeros_like(depth)) if with_grad else 0.0
    dots = np.sum(nrm * supervision, axis=-1)
    value = float(np.where(mask, 1.0 - dots, 0.0).sum() / n)
    if not with_grad:
        return value
    g_n = np.where(mask[..., None], -supervision / n, 0.0)
    return value, depth_to_normal_vjp(tape, g_n)


def loss_normal_consistency(normal, depth, cam, *, with_grad=False):
    """Mean (1 - n . normal(depth)): aligns a normal map with its depth map."""
    nrm, tape = depth_to_normal(depth, cam, with_tape=True)
    mask = tape["ok"] & (np.linalg.norm(normal, axis=-1) > 1e-8)
    n = int(mask.sum())
    if n == 0:
        return (0.0, np.zeros_like(normal), np.zeros_like(depth)) if with_grad else 0.0
    dots = np.sum(normal * nrm, axis=-1)
    value = float(np.where(mask, 1.0 - dots, 0.0).sum() / n)
    if not with_grad:
        return value
    g_normal = np.where(mask[..., None], -nrm / n, 0.0)
    g_from_n = np.where(mask[..., None], -normal / n, 0.0)
    return value, g_normal, depth_to_normal_vjp(tape, g_from_n)


GEOMETRY_WEIGHTS = {"normal_consistency": 0.05, "gaussian_depth": 0.1,
                    "supervised_normal": 0.05, "supervised_depth": 0.05}
