"""Quantitative evaluation: PSNR, SSIM, view-consistency probing."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .cameras import Camera, look_at
from .datasets import Dataset
from .forward import RenderSettings, render
from .losses import ssim as _ssim
from .primitives import Scene

PSNR_INF = float("inf")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for unit-range images; +inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return _ssim(a, b)


@dataclass
class EvalReport:
    per_view_psnr: list = field(default_factory=list)
    per_view_ssim: list = field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    n_surfels: int = 0
    n_gaussians: int = 0
    ms_per_frame: float = 0.0
    consistency: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["per_view_psnr"] = [("inf" if np.isinf(v) else v) for v in self.per_view_psnr]
        return json.dumps(d, indent=1)


def evaluate(scene: Scene, dataset: Dataset, views=None,
             settings: RenderSettings | None = None) -> EvalReport:
    """Render the given views (default: the test split) and score them."""
    settings = settings or RenderSettings(supersample=4)
    views = dataset.test_idx if views is None else views
    rep = EvalReport(n_surfels=scene.surfels.count,
                     n_gaussians=scene.gaussians.count)
    times = []
    for vi in views:
        t0 = time.perf_counter()
        out = render(scene, dataset.cameras[vi], settings)
        times.append(time.perf_counter() - t0)
        rep.per_view_psnr.append(psnr(out.image, dataset.images[vi]))
        rep.per_view_ssim.append(ssim(out.image, dataset.images[vi]))
    finite = [v for v in rep.per_view_psnr if np.isfinite(v)]
    rep.mean_psnr = float(np.mean(finite)) if finite else PSNR_INF
    rep.mean_ssim = float(np.mean(rep.per_view_ssim)) if rep.per_view_ssim else 0.0
    rep.ms_per_frame = float(np.mean(times) * 1000.0) if times else 0.0
    return rep


# ---------------------------------------------------------------------------
# View-consistency probing
# ---------------------------------------------------------------------------

def camera_path(base: Camera, target, *, frames: int, angle: float = 0.02,
                radius_scale: float = 1.0) -> list[Camera]:
    """Small-orbit path around the base camera's viewpoint."""
    target = np.asarray(target, dtype=np.float64)
    eye0 = base.position
    rel = eye0 - target
    r = np.linalg.norm(rel[:2])
    a0 = np.arctan2(rel[1], rel[0])
    cams = []
    for k in range(frames):
        a = a0 + angle * k
        eye = target + np.array([r * radius_scale * np.cos(a),
                                 r * radius_scale * np.sin(a), rel[2]])
        cams.append(Camera(base.fx, base.fy, base.cx, base.cy,
                           base.width, base.height, look_at(eye, target)))
    return cams


def motion_bound(prev_img: np.ndarray, flow_px: float,
                 quantum: float = 1.0 / 255.0) -> float:
    """Bound on the per-pixel change a small camera step can cause.

    Lipschitz part: max finite-difference image gradient times the max pixel
    displacement.  ``quantum`` adds the renderer's inherent clamp floor (the
    1/255 alpha cutoff lets footprint-edge pixels step by that much under any
    motion)."""
    gy, gx = np.gradient(prev_img, axis=(0, 1))
    gmax = float(np.maximum(np.abs(gx), np.abs(gy)).max())
    return gmax * flow_px + quantum


def max_flow_px(cam_a: Camera, cam_b: Camera, points: np.ndarray) -> float:
    """Largest screen displacement of the given anchor points between views."""
    pa = cam_a.project(cam_a.to_camera(points))
    pb = cam_b.project(cam_b.to_camera(points))
    return float(np.linalg.norm(pa - pb, axis=1).max())


def consistency_probe(render_fn, cams: list[Camera],
                      anchor_points: np.ndarray | None = None,
                      images: list | None = None) -> dict:
    """Per-frame-pair maximum and mean absolute pixel change along a path.

    ``render_fn(cam) -> image`` (ignored when ``images`` are supplied).  When
    anchor points are given, each pair also gets the camera-motion bound
    (max image gradient times max flow plus the clamp quantum).
    """
    if not cams:
        raise ValueError("empty camera path")
    if images is None:
        images = [render_fn(c) for c in cams]
    imgs = [np.asarray(im, dtype=np.float64) for im in images]
    max_change, mean_change, bounds = [], [], []
    for a, b in zip(imgs, imgs[1:]):
        d = np.abs(a - b)
        max_change.append(float(d.max()))
        mean_change.append(float(d.mean()))
    if anchor_points is not None and len(cams) > 1:
        for (ca, cb), img in zip(zip(cams, cams[1:]), imgs):
            flow = max_flow_px(ca, cb, anchor_points)
            bounds.append(motion_bound(img, flow))
    return {"max_change": max_change, "mean_change": mean_change,
            "bounds": bounds}
