"""Anti-aliasing filters and related per-primitive constants.

The world-space filter widens each 3D Gaussian by the footprint of one pixel
at its closest observed depth and rescales opacity to keep the integral; the
screen-space box filter does the analogous correction in 2D at render time.
For 2D Gaussians the screen filter is back-projected into the local disc
frame and folded into the scaling directly.
"""

from __future__ import annotations

import math

import numpy as np

from .cameras import Camera, NEAR_PLANE
from .geometry import splat_frames, splat_screen_jacobian
from .primitives import GaussianSet, logit, sigmoid

# Variance of the fixed screen-space low-pass applied to splats (px^2).
SCREEN_FILTER_VARIANCE = 0.3
# Sub-pixel coefficient of the world-space filter variance.
WORLD_FILTER_COEF = 0.2
# Frustum margin when deciding which cameras observe a primitive.
_OBSERVE_MARGIN = 0.15


def opaque_radius() -> float:
    """Local radius where the unit Gaussian falls to 1/255: sqrt(2 ln 255)."""
    return math.sqrt(2.0 * math.log(255.0))


def compute_epsilon(scale: np.ndarray) -> np.ndarray:
    """Adaptive depth-test offset (5/D) * sum_j s_j for (N, D) scales."""
    scale = np.atleast_2d(scale)
    return (5.0 / scale.shape[1]) * np.sum(scale, axis=1)


def min_sampling_interval(positions: np.ndarray, cams: list[Camera]) -> np.ndarray:
    """World-space size of one pixel at each point, minimized over the
    cameras that observe it.  Unobserved points get +inf."""
    best = np.full(positions.shape[0], np.inf)
    for cam in cams:
        t = cam.to_camera(positions)
        z = t[:, 2]
        px = cam.project(np.where((z > NEAR_PLANE)[:, None], t, np.array([0.0, 0.0, 1.0])))
        mx, my = _OBSERVE_MARGIN * cam.width, _OBSERVE_MARGIN * cam.height
        seen = ((z > NEAR_PLANE)
                & (px[:, 0] > -mx) & (px[:, 0] < cam.width + mx)
                & (px[:, 1] > -my) & (px[:, 1] < cam.height + my))
        interval = z / max(cam.fx, cam.fy)
        best = np.where(seen, np.minimum(best, interval), best)
    return best


def mip_world_filter(gaussians: GaussianSet, cams: list[Camera]) -> GaussianSet:
    """Attach the world-space low-pass variance to each 3D Gaussian.

    The variance is WORLD_FILTER_COEF * interval^2 with ``interval`` the
    smallest per-pixel world footprint over the observing cameras.  The
    scale/opacity exposed by the set fold the filter in lazily (see
    ``GaussianSet.eff_scale`` / ``eff_opacity``), which preserves
    sigma * prod(scale) exactly.  Unobserved Gaussians are left unfiltered.
    """
    out = gaussians.copy()
    interval = min_sampling_interval(gaussians.pos, cams)
    var = WORLD_FILTER_COEF * interval**2
    out.filter3d = np.where(np.isfinite(var), var, 0.0)
    return out


def bake_world_filter(gaussians: GaussianSet) -> GaussianSet:
    """Fold the pending world-filter variance into the stored parameters."""
    if not np.any(gaussians.filter3d):
        return gaussians.copy()
    out = gaussians.copy()
    sig = gaussians.eff_opacity()
    out.log_scale = np.log(gaussians.eff_scale())
    out.raw_opacity = logit(np.clip(sig, 1e-7, 1.0 - 1e-7))
    out.filter3d = np.zeros(out.count)
    return out


def object_space_filter_2d(gaussians: GaussianSet, cam: Camera,
                           r: float = SCREEN_FILTER_VARIANCE):
    """Back-project the screen low-pass into each 2D Gaussian's disc frame.

    The filtered local covariance I + r * J^-1 J^-T is approximated by the
    diagonal S = diag(s1, s2); returns (scale_mul (N, 2), opacity_mul (N,),
    valid (N,)) where valid is False for edge-on (singular J) primitives.
    The multiplicative form preserves sigma * s1 * s2 exactly.
    """
    q, a1, a2, _ = splat_frames(gaussians.pos, gaussians.quat, cam)
    J = splat_screen_jacobian(q, a1, a2, gaussians.eff_scale(), cam)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    valid = (np.abs(det) > 1e-12) & (q[:, 2] > NEAR_PLANE)
    if r == 0.0:
        return np.ones((gaussians.count, 2)), np.ones(gaussians.count), valid
    dets = np.where(valid, det, 1.0)
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1] / dets
    inv[:, 0, 1] = -J[:, 0, 1] / dets
    inv[:, 1, 0] = -J[:, 1, 0] / dets
    inv[:, 1, 1] = J[:, 0, 0] / dets
    m00 = inv[:, 0, 0] ** 2 + inv[:, 0, 1] ** 2
    m11 = inv[:, 1, 0] ** 2 + inv[:, 1, 1] ** 2
    scale_mul = np.sqrt(np.stack([1.0 + r * m00, 1.0 + r * m11], axis=1))
    opacity_mul = 1.0 / (scale_mul[:, 0] * scale_mul[:, 1])
    return scale_mul, opacity_mul, valid
