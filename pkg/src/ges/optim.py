"""Coarse-to-fine optimization: surfel stage, then joint Gaussian-surfel.

The surfel stage grows and prunes translucent surfels, walks the opacity
modulation schedule (discard / floor-30 / covering prune / floors 60, 90 /
opaque freeze), then the joint stage seeds Gaussians from the discarded
surfel positions, densifies them from image-error sampling and prunes them
by contribution score while optimizing Gaussian parameters and surfel SH.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import sh as shlib
from .cameras import Camera
from .datasets import Dataset
from .forward import RenderSettings, rasterize_surfels, render
from .losses import (GEOMETRY_WEIGHTS, loss_gaussian_depth, loss_normal_consistency,
                     loss_rgb, loss_supervised_depth_normal, loss_supervised_normal,
                     l1 as l1_loss, ssim as ssim_metric)
from .primitives import (GaussianKind, GaussianSet, GradientSet, Scene, Stage,
                         SurfelSet, W_OPAQUE, logit, sigmoid)
from .training import TrainSettings, backward, render_training


@dataclass
class Schedule:
    """Milestones as fractions of the surfel stage, with w floor values."""
    surfel_iters: int = 2000
    joint_iters: int = 1000
    discard_frac: float = 0.5
    prune_cover_frac: float = 0.75
    w60_frac: float = 0.90
    w90_frac: float = 0.95
    w_floors: tuple = (30.0, 60.0, 90.0, 255.0)
    densify_from: int = 100
    densify_interval: int = 100
    gauss_interval: int = 1000

    def __post_init__(self):
        fr = (self.discard_frac, self.prune_cover_frac, self.w60_frac, self.w90_frac)
        if not all(a < b for a, b in zip(fr, fr[1:])) or fr[-1] >= 1.0 or fr[0] <= 0:
            raise ValueError("milestone fractions must increase within (0, 1)")
        if not all(a < b for a, b in zip(self.w_floors, self.w_floors[1:])):
            raise ValueError("w floors must increase")

    @property
    def discard_iter(self):
        return int(self.discard_frac * self.surfel_iters)

    @property
    def prune_cover_iter(self):
        return int(self.prune_cover_frac * self.surfel_iters)

    @property
    def w60_iter(self):
        return int(self.w60_frac * self.surfel_iters)

    @property
    def w90_iter(self):
        return int(self.w90_frac * self.surfel_iters)


@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    sh_degree: int = 2
    mode: str = "3d"                   # 3d | 2d
    rgb_surfels: bool = False
    mip: bool = False
    epsilon_mode: str = "adaptive"     # adaptive | constant
    epsilon_value: float = 0.0
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    dtype: str = "float32"
    # learning rates (position lr is multiplied by the scene extent and
    # decays exponentially to 1/100 of the initial value over each stage)
    lr_position: float = 1.6e-4
    lr_quat: float = 1e-3
    lr_scale: float = 5e-3
    lr_w: float = 0.05
    lr_opacity: float = 0.05
    lr_sh: float = 2.5e-3
    lr_sh_rest_div: float = 20.0
    # densification / pruning
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_w_threshold: float = 0.005
    max_surfels: int = 4000            # densification stops above this count
    covering_threshold: int = 4        # 16 for real captures, 4 synthetic
    discard_w: float = 0.8
    error_sample_fraction: float = 0.001
    contribution_threshold: float = 0.02
    prune_aggressiveness: float = 1.0
    # ablations
    surfels_enabled: bool = True
    gaussians_enabled: bool = True
    # bookkeeping
    checkpoint_interval: int = 0       # 0 = only final
    out_dir: str | None = None

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# ---------------------------------------------------------------------------
# Adam with exposed-value chaining and primitive-count surgery
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr_scale: float = 1.0):
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return param - self.lr * lr_scale * mh / (np.sqrt(vh) + self.eps)

    def select(self, mask):
        if self.m is not None:
            self.m = self.m[mask]
            self.v = self.v[mask]

    def append(self, n_new):
        if self.m is not None and n_new:
            pad = [(0, n_new)] + [(0, 0)] * (self.m.ndim - 1)
            self.m = np.pad(self.m, pad)
            self.v = np.pad(self.v, pad)


# ---------------------------------------------------------------------------
# Initialization and structural edits
# ---------------------------------------------------------------------------

def nearest_neighbor_distance(points: np.ndarray, fallback: float) -> np.ndarray:
    if points.shape[0] < 2:
        return np.full(points.shape[0], fallback)
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    dist = d[:, 1]
    dist[~np.isfinite(dist) | (dist <= 0)] = fallback
    return dist


def init_surfels(points: np.ndarray, colors: np.ndarray, sh_degree: int, rng,
                 scene_extent: float = 1.0) -> SurfelSet:
    """Surfels from sparse points: isotropic nearest-neighbor scale, random
    rotation, DC color from the point color, w = 0.1."""
    n = points.shape[0]
    if n == 0:
        raise ValueError("cannot initialize surfels from an empty point set")
    K = shlib.num_coeffs(sh_degree)
    dist = nearest_neighbor_distance(points, 0.01 * scene_extent)
    quat = rng.standard_normal((n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    sh = np.zeros((n, K, 3))
    sh[:, 0, :] = (np.clip(colors, 0.0, 1.0) - 0.5) / shlib.C0
    return SurfelSet(pos=points.astype(np.float64).copy(), quat=quat,
                     log_scale=np.log(np.stack([dist, dist], axis=1)),
                     sh=sh, w=np.full(n, 0.1))


def init_gaussians(points: np.ndarray, colors: np.ndarray, sh_degree: int,
                   kind: GaussianKind, scene_extent: float,
                   existing: np.ndarray | None = None,
                   min_scale: np.ndarray | float = 0.0) -> GaussianSet:
    """Splatting-baseline initialization: NN-distance scale, opacity 0.1.

    ``min_scale`` floors the scale (error-driven samples cluster, which would
    otherwise give sub-pixel footprints that never accumulate).
    """
    n = points.shape[0]
    K = shlib.num_coeffs(sh_degree)
    D = 3 if kind is GaussianKind.THREE_D else 2
    ref = points if existing is None or existing.shape[0] == 0 \
        else np.concatenate([points, existing])
    if ref.shape[0] >= 2 and n:
        tree = cKDTree(ref)
        d, _ = tree.query(points, k=2)
        dist = np.maximum(d[:, 1], 1e-7)
    else:
        dist = np.full(n, 0.01 * scene_extent)
    dist = np.maximum(dist, min_scale)
    sh = np.zeros((n, K, 3))
    sh[:, 0, :] = (np.clip(colors, 0.0, 1.0) - 0.5) / shlib.C0
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    return GaussianSet(pos=points.astype(np.float64).copy(),
                       raw_opacity=np.full(n, logit(0.1)),
                       quat=quat,
                       log_scale=np.log(np.tile(dist[:, None], (1, D))),
                       sh=sh, kind=kind)


def scene_extent_of(cameras: list[Camera]) -> float:
    centers = np.stack([c.position for c in cameras])
    center = centers.mean(axis=0)
    return float(np.linalg.norm(centers - center, axis=1).max() * 1.1) or 1.0


def covering_counts(scene: Scene, cams: list[Camera], dtype=np.float32) -> np.ndarray:
    """n_i = max over views of the number of pixels where surfel i is the
    frontmost cover (exact per-pixel hit depths, opaque footprints)."""
    n = scene.surfels.count
    best = np.zeros(n, dtype=np.int64)
    fs = RenderSettings(supersample=1, dtype=dtype, threads=1)
    for cam in cams:
        sb = rasterize_surfels(scene, cam, fs)
        w = sb.winner.reshape(-1)
        counts = np.bincount(w[w >= 0], minlength=n)
        best = np.maximum(best, counts)
    return best


def covering_prune(scene: Scene, cams: list[Camera], n_thr: int,
                   dtype=np.float32) -> np.ndarray:
    """Keep mask for surfels whose max per-view frontmost-pixel count meets
    the threshold."""
    return covering_counts(scene, cams, dtype) >= n_thr


def split_surfels(surfels: SurfelSet, mask, rng, n_children: int = 2) -> SurfelSet:
    """Replace masked surfels by children sampled on their own discs with
    scales shrunk by 1.6 (splatting-baseline rule)."""
    idx = np.flatnonzero(mask)
    reps = np.repeat(idx, n_children)
    from .geometry import quat_to_rotmat
    R = quat_to_rotmat(surfels.quat[reps])
    local = rng.standard_normal((reps.size, 2)) * surfels.scale[reps]
    offset = R[:, :, 0] * local[:, 0:1] + R[:, :, 1] * local[:, 1:2]
    children = SurfelSet(pos=surfels.pos[reps] + offset,
                         quat=surfels.quat[reps].copy(),
                         log_scale=surfels.log_scale[reps] - np.log(1.6),
                         sh=surfels.sh[reps].copy(),
                         w=surfels.w[reps].copy())
    return children


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

SURFEL_PARAMS = ("pos", "quat", "log_scale", "sh", "w")
GAUSS_PARAMS = ("pos", "raw_opacity", "quat", "log_scale", "sh")


class Trainer:
    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.data = dataset
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        self.extent = scene_extent_of(dataset.cameras)
        self.log_rows = []
        self.discarded_positions = np.zeros((0, 3))
        self.discarded_colors = np.zeros((0, 3))
        self.supervision_normals = None
        kind = GaussianKind.THREE_D if config.mode == "3d" else GaussianKind.TWO_D
        self.kind = kind
        if config.surfels_enabled:
            surfels = init_surfels(dataset.points, dataset.point_colors,
                                   config.sh_degree, self.rng, self.extent)
        else:
            surfels = SurfelSet.empty(config.sh_degree)
        gaussians = GaussianSet.empty(config.sh_degree, kind)
        if not config.surfels_enabled:
            gaussians = init_gaussians(dataset.points, dataset.point_colors,
                                       config.sh_degree, kind, self.extent)
        self.scene = Scene(surfels, gaussians, config.sh_degree, Stage.SURFEL_ONLY)
        self.s_opt = {k: Adam(self._lr_surfel(k)) for k in SURFEL_PARAMS}
        self.g_opt = {k: Adam(self._lr_gauss(k)) for k in GAUSS_PARAMS}
        self.grad_accum = np.zeros(surfels.count)
        self.grad_count = np.zeros(surfels.count)
        self.learn_w = True
        self.geometry_frozen = False
        self._frozen_cache = {}
        self.train_views = list(dataset.train_idx)
        self._view_queue = []

    # -- learning rates ----------------------------------------------------

    def _lr_surfel(self, name):
        c = self.cfg
        return {"pos": c.lr_position * self.extent, "quat": c.lr_quat,
                "log_scale": c.lr_scale, "sh": c.lr_sh, "w": c.lr_w}[name]

    def _lr_gauss(self, name):
        c = self.cfg
        return {"pos": c.lr_position * self.extent, "quat": c.lr_quat,
                "log_scale": c.lr_scale, "sh": c.lr_sh,
                "raw_opacity": c.lr_opacity}[name]

    def _pos_decay(self, frac: float) -> float:
        return 0.01 ** min(max(frac, 0.0), 1.0)

    # -- data feed -----------------------------------------------------------

    def _next_view(self) -> int:
        if not self._view_queue:
            self._view_queue = list(self.rng.permutation(self.train_views))
        return int(self._view_queue.pop())

    def _train_settings(self, with_geometry=False) -> TrainSettings:
        c = self.cfg
        return TrainSettings(background=c.background, epsilon_mode=c.epsilon_mode,
                             epsilon_value=c.epsilon_value, mip=c.mip,
                             with_geometry=with_geometry,
                             gaussians_enabled=c.gaussians_enabled
                             and self.scene.gaussians.count > 0,
                             surfels_enabled=c.surfels_enabled
                             and self.scene.surfels.count > 0,
                             dtype=c.np_dtype(),
                             frozen_cache=self._frozen_cache
                             if self.geometry_frozen else None,
                             gaussian_only_norm=not c.surfels_enabled)

    # -- parameter updates ---------------------------------------------------

    def _apply_surfel_grads(self, grads: GradientSet, pos_lr_scale: float):
        s = self.scene.surfels
        if s.count == 0:
            return
        c = self.cfg
        exposed_scale = s.scale
        chain = {
            "pos": grads.surfel_pos,
            "quat": grads.surfel_quat,
            "log_scale": grads.surfel_scale * exposed_scale,
            "sh": grads.surfel_sh,
            "w": grads.surfel_w,
        }
        if c.rgb_surfels:
            chain["sh"] = chain["sh"].copy()
            chain["sh"][:, 1:, :] = 0.0
        if not self.learn_w:
            chain["w"] = None
        if self.geometry_frozen:
            for k in ("pos", "quat", "log_scale", "w"):
                chain[k] = None
        for name, grad in chain.items():
            if grad is None:
                continue
            lr_scale = pos_lr_scale if name == "pos" else 1.0
            cur = getattr(s, name)
            if name == "sh":
                g = grad.copy()
                g[:, 1:, :] /= c.lr_sh_rest_div
                new = self.s_opt[name].step(cur, g, lr_scale)
            else:
                new = self.s_opt[name].step(cur, grad, lr_scale)
            setattr(s, name, new)
        s.quat = s.quat / np.linalg.norm(s.quat, axis=1, keepdims=True)
        s.w = np.clip(s.w, 1e-4, W_OPAQUE)

    def _apply_gauss_grads(self, grads: GradientSet, pos_lr_scale: float):
        g = self.scene.gaussians
        if g.count == 0:
            return
        c = self.cfg
        sig = g.opacity
        chain = {
            "pos": grads.gaussian_pos,
            "quat": grads.gaussian_quat,
            "log_scale": grads.gaussian_scale * g.scale,
            "sh": grads.gaussian_sh,
            "raw_opacity": grads.gaussian_opacity * sig * (1 - sig),
        }
        for name, grad in chain.items():
            lr_scale = pos_lr_scale if name == "pos" else 1.0
            cur = getattr(g, name)
            if name == "sh":
                gg = grad.copy()
                gg[:, 1:, :] /= c.lr_sh_rest_div
                new = self.g_opt[name].step(cur, gg, lr_scale)
            else:
                new = self.g_opt[name].step(cur, grad, lr_scale)
            setattr(g, name, new)
        g.quat = g.quat / np.linalg.norm(g.quat, axis=1, keepdims=True)

    # -- structural edits ----------------------------------------------------

    def _select_surfels(self, mask):
        self.scene.surfels = self.scene.surfels.select(mask)
        for opt in self.s_opt.values():
            opt.select(mask)
        self.grad_accum = self.grad_accum[mask]
        self.grad_count = self.grad_count[mask]

    def _append_surfels(self, extra: SurfelSet):
        if extra.count == 0:
            return
        self.scene.surfels = SurfelSet.concatenate(self.scene.surfels, extra)
        for opt in self.s_opt.values():
            opt.append(extra.count)
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(extra.count)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(extra.count)])

    def _select_gaussians(self, mask):
        self.scene.gaussians = self.scene.gaussians.select(mask)
        for opt in self.g_opt.values():
            opt.select(mask)

    def _append_gaussians(self, extra: GaussianSet):
        if extra.count == 0:
            return
        self.scene.gaussians = GaussianSet.concatenate(self.scene.gaussians, extra)
        for opt in self.g_opt.values():
            opt.append(extra.count)

    def densify_prune_surfels(self):
        """Clone small / split large surfels with high image-space positional
        gradients; prune decayed w (baseline strategy and thresholds)."""
        s = self.scene.surfels
        if s.count == 0:
            return
        c = self.cfg
        avg = np.where(self.grad_count > 0, self.grad_accum / np.maximum(self.grad_count, 1), 0.0)
        hot = avg > c.densify_grad_threshold
        if s.count >= c.max_surfels:
            hot[:] = False
        elif int(hot.sum()) + s.count > c.max_surfels:
            # keep only the hottest candidates under the cap
            order = np.argsort(avg)[::-1]
            allow = np.zeros_like(hot)
            allow[order[:c.max_surfels - s.count]] = True
            hot &= allow
        big = s.scale.max(axis=1) > c.percent_dense * self.extent
        clone_mask = hot & ~big
        split_mask = hot & big
        clones = s.select(clone_mask)
        children = split_surfels(s, split_mask, self.rng)
        keep = ~split_mask & (s.w > c.prune_w_threshold)
        self._select_surfels(keep)
        self._append_surfels(clones)
        self._append_surfels(children)
        self.grad_accum[:] = 0.0
        self.grad_count[:] = 0.0

    def discard_low_w(self):
        """Record and remove w < 0.8 surfels, floor the rest at 30, freeze w."""
        s = self.scene.surfels
        c = self.cfg
        low = s.w < c.discard_w
        self.discarded_positions = s.pos[low].copy()
        self.discarded_colors = np.clip(0.5 + shlib.C0 * s.sh[low, 0, :], 0.0, 1.0)
        self._select_surfels(~low)
        self.scene.surfels.w = np.maximum(self.scene.surfels.w, self.cfg.schedule.w_floors[0])
        self.learn_w = False

    def seed_gaussians_initial(self):
        pos, col = self.discarded_positions, self.discarded_colors
        if pos.shape[0] == 0:
            return
        from .filters import min_sampling_interval
        floor = 0.7 * min_sampling_interval(pos, self.data.train_cameras)
        floor = np.where(np.isfinite(floor), floor, 0.01 * self.extent)
        extra = init_gaussians(pos, col, self.cfg.sh_degree, self.kind, self.extent,
                               min_scale=floor)
        self._append_gaussians(extra)

    def error_densify_gaussians(self):
        """Sample new Gaussian centers from normalized squared-error maps."""
        c = self.cfg
        settings = self._train_settings()
        new_pts, new_cols = [], []
        for vi in self.train_views:
            cam = self.data.cameras[vi]
            gt = self.data.images[vi]
            frame = render_training(self.scene, cam, settings, cache_key=vi)
            err = np.sum((frame.image - gt) ** 2, axis=-1).reshape(-1)
            total = err.sum()
            if total <= 0:
                continue
            budget = max(1, int(round(c.error_sample_fraction * err.size)))
            probs = err / total
            picks = self.rng.choice(err.size, size=budget, replace=True, p=probs)
            depth = frame.surfel_depth.reshape(-1)[picks]
            ok = np.isfinite(depth)
            if not np.any(ok):
                continue
            picks, depth = picks[ok], depth[ok]
            dirs = cam.pixel_dirs().reshape(-1, 3)[picks]
            pcam = depth[:, None] * dirs
            world = (pcam - cam.translation) @ cam.rotation
            new_pts.append(world)
            new_cols.append(gt.reshape(-1, 3)[picks])
        if not new_pts:
            return
        pts = np.concatenate(new_pts)
        cols = np.concatenate(new_cols)
        from .filters import min_sampling_interval
        floor = 0.7 * min_sampling_interval(pts, self.data.train_cameras)
        floor = np.where(np.isfinite(floor), floor, 0.01 * self.extent)
        extra = init_gaussians(pts, cols, c.sh_degree, self.kind, self.extent,
                               existing=self.scene.gaussians.pos, min_scale=floor)
        self._append_gaussians(extra)

    def contribution_scores(self) -> np.ndarray:
        """max over views and pixels of c_max * alpha / (W_s + W_G)."""
        g = self.scene.gaussians
        scores = np.zeros(g.count)
        if g.count == 0:
            return scores
        settings = self._train_settings()
        for vi in self.train_views:
            cam = self.data.cameras[vi]
            frame = render_training(self.scene, cam, settings, cache_key=vi)
            gt = frame.tape["gauss"]
            if not gt.get("count"):
                continue
            denom = (1.0 + frame.gauss_weight).reshape(-1)
            cmax = gt["colors"].max(axis=1)
            contrib = cmax[gt["gid"]] * gt["alpha"] / denom[gt["pix"]]
            view_scores = np.zeros(g.count)
            np.maximum.at(view_scores, gt["gid"], contrib)
            scores = np.maximum(scores, view_scores)
        return scores

    def prune_gaussians_contribution(self):
        thr = self.cfg.contribution_threshold * self.cfg.prune_aggressiveness
        scores = self.contribution_scores()
        keep = scores >= thr
        if not np.all(keep):
            self._select_gaussians(keep)

    # -- supervision for the planar mode --------------------------------------

    def _render_supervision_normals(self):
        settings = self._train_settings(with_geometry=True)
        sup = {}
        for vi in self.train_views:
            cam = self.data.cameras[vi]
            frame = render_training(self.scene, cam, settings)
            sup[vi] = frame.blend_normal.copy()
        self.supervision_normals = sup

    # -- logging / checkpoints -------------------------------------------------

    def _log(self, iteration, img, gt):
        lv = l1_loss(img, gt)
        sv = ssim_metric(img, gt)
        self.log_rows.append({"iter": iteration, "l1": lv,
                              "dssim": 0.5 * (1.0 - sv),
                              "n_surfels": self.scene.surfels.count,
                              "n_gaussians": self.scene.gaussians.count})

    def write_log(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=["iter", "l1", "dssim",
                                               "n_surfels", "n_gaussians"])
            wr.writeheader()
            wr.writerows(self.log_rows)

    def save_checkpoint(self, path):
        path = Path(path)
        s, g = self.scene.surfels, self.scene.gaussians
        tmp = path.parent / (path.name + ".tmp")
        with open(tmp, "wb") as f:
            np.savez(f, s_pos=s.pos, s_quat=s.quat, s_log_scale=s.log_scale,
                     s_sh=s.sh, s_w=s.w, g_pos=g.pos, g_raw_opacity=g.raw_opacity,
                     g_quat=g.quat, g_log_scale=g.log_scale, g_sh=g.sh,
                     g_filter3d=g.filter3d,
                     meta=json.dumps({"sh_degree": self.scene.sh_degree,
                                      "stage": self.scene.stage.value,
                                      "kind": self.kind.value}))
        os.replace(tmp, path)

    # -- stages -----------------------------------------------------------------

    def _surfel_losses(self, frame, gt, iteration):
        """RGB loss plus the planar-mode geometry terms for this phase."""
        c = self.cfg
        cam = self.data.cameras[self._current_view]
        value, g_img = loss_rgb(frame.image, gt, with_grad=True)
        extras = {}
        if c.mode != "2d" or frame.blend_depth is None:
            return value, g_img, extras
        mid = self.cfg.schedule.discard_iter
        if iteration < mid:
            ln, g_n, g_d = loss_normal_consistency(frame.blend_normal,
                                                   frame.blend_depth, cam,
                                                   with_grad=True)
            lam = GEOMETRY_WEIGHTS["normal_consistency"]
            value += lam * ln
            extras["g_blend_normal"] = lam * g_n
            extras["g_blend_depth"] = lam * g_d
        elif self.supervision_normals is not None:
            sup = self.supervision_normals[self._current_view]
            lsn, g_n = loss_supervised_normal(frame.blend_normal, sup, with_grad=True)
            lsd, g_d = loss_supervised_depth_normal(frame.blend_depth, sup, cam,
                                                    with_grad=True)
            value += GEOMETRY_WEIGHTS["supervised_normal"] * lsn \
                + GEOMETRY_WEIGHTS["supervised_depth"] * lsd
            extras["g_blend_normal"] = GEOMETRY_WEIGHTS["supervised_normal"] * g_n
            extras["g_blend_depth"] = GEOMETRY_WEIGHTS["supervised_depth"] * g_d
        return value, g_img, extras

    def _joint_losses(self, frame, gt):
        c = self.cfg
        value, g_img = loss_rgb(frame.image, gt, with_grad=True)
        extras = {}
        if c.mode != "2d" or frame.gauss_depth is None:
            return value, g_img, extras
        cam = self.data.cameras[self._current_view]
        lam_gd = GEOMETRY_WEIGHTS["gaussian_depth"]
        lgd, g_dg, g_wg = loss_gaussian_depth(frame.gauss_depth, frame.gauss_weight,
                                              frame.surfel_depth, with_grad=True)
        value += lam_gd * lgd
        extras["g_gauss_depth"] = lam_gd * g_dg
        extras["g_gauss_weight"] = lam_gd * g_wg
        # normal consistency on the smoothed maps; surfel buffers are frozen
        denom = (1.0 + frame.gauss_weight)
        ns = self._frozen_normal_map(cam)
        n_smooth = (ns + frame.gauss_normal) / denom[..., None]
        fin = np.isfinite(frame.surfel_depth)
        d_smooth = np.where(fin, (np.where(fin, frame.surfel_depth, 0.0)
                                  + frame.gauss_depth) / denom, np.inf)
        lam_n = GEOMETRY_WEIGHTS["normal_consistency"]
        ln, g_nsm, g_dsm = loss_normal_consistency(n_smooth, d_smooth, cam,
                                                   with_grad=True)
        value += lam_n * ln
        g_gn = lam_n * g_nsm / denom[..., None]
        g_gd2 = lam_n * g_dsm / denom
        g_wg2 = -lam_n * (np.sum(g_nsm * n_smooth, axis=-1) + g_dsm * d_smooth) / denom
        extras["g_gauss_normal"] = g_gn
        extras["g_gauss_depth"] = extras["g_gauss_depth"] + g_gd2
        extras["g_gauss_weight"] = extras["g_gauss_weight"] + g_wg2
        return value, g_img, extras

    def _frozen_normal_map(self, cam):
        key = ("normal", id(cam))
        if key not in self._frozen_cache:
            sb = rasterize_surfels(self.scene, cam,
                                   RenderSettings(dtype=self.cfg.np_dtype(), threads=1))
            self._frozen_cache[key] = sb.normal.astype(np.float64)
        return self._frozen_cache[key]

    def train(self, progress=None):
        c = self.cfg
        sch = c.schedule
        t0 = time.time()
        if c.surfels_enabled:
            self._run_surfel_stage(progress)
        else:
            self.geometry_frozen = True
        self._run_joint_stage(progress)
        self.scene = Scene(self.scene.surfels, self.scene.gaussians,
                           c.sh_degree, Stage.FROZEN)
        self.scene.surfels.w[:] = W_OPAQUE
        self.elapsed = time.time() - t0
        return self.scene

    def _run_surfel_stage(self, progress):
        c = self.cfg
        sch = c.schedule
        for it in range(sch.surfel_iters):
            if c.mode == "2d" and it == sch.discard_iter:
                # supervision maps at the optimization midpoint, pre-discard
                self._render_supervision_normals()
            if it == sch.discard_iter:
                self.discard_low_w()
            if it == sch.prune_cover_iter and self.scene.surfels.count:
                keep = covering_prune(self.scene, self.data.train_cameras,
                                      c.covering_threshold, dtype=c.np_dtype())
                self._select_surfels(keep)
            if it == sch.w60_iter:
                self.scene.surfels.w = np.maximum(self.scene.surfels.w, sch.w_floors[1])
            if it == sch.w90_iter:
                self.scene.surfels.w = np.maximum(self.scene.surfels.w, sch.w_floors[2])

            vi = self._next_view()
            self._current_view = vi
            cam = self.data.cameras[vi]
            gt = self.data.images[vi]
            settings = self._train_settings(with_geometry=c.mode == "2d")
            settings.gaussians_enabled = False
            frame = render_training(self.scene, cam, settings)
            value, g_img, extras = self._surfel_losses(frame, gt, it)
            grads = backward(frame, g_img, **extras)
            frac = it / max(sch.surfel_iters - 1, 1)
            self._apply_surfel_grads(grads, self._pos_decay(frac))
            if it < sch.discard_iter:
                vis = grads.surfel_screen_grad > 0
                self.grad_accum[vis] += grads.surfel_screen_grad[vis]
                self.grad_count[vis] += 1
                if it >= sch.densify_from and (it + 1) % sch.densify_interval == 0:
                    self.densify_prune_surfels()
            self._log(it, frame.image, gt)
            if progress:
                progress("surfel", it, sch.surfel_iters, value)
        # final milestone: fully opaque, geometry frozen
        self.scene.surfels.w[:] = W_OPAQUE
        self.geometry_frozen = True
        self._frozen_cache.clear()

    def _run_joint_stage(self, progress):
        c = self.cfg
        sch = c.schedule
        if c.gaussians_enabled and c.surfels_enabled:
            self.seed_gaussians_initial()
        for it in range(sch.joint_iters):
            vi = self._next_view()
            self._current_view = vi
            cam = self.data.cameras[vi]
            gt = self.data.images[vi]
            settings = self._train_settings(with_geometry=c.mode == "2d"
                                            and c.gaussians_enabled)
            frame = render_training(self.scene, cam, settings, cache_key=vi)
            value, g_img, extras = self._joint_losses(frame, gt)
            grads = backward(frame, g_img, **extras)
            frac = it / max(sch.joint_iters - 1, 1)
            self._apply_surfel_grads(grads, 0.0)
            self._apply_gauss_grads(grads, self._pos_decay(frac))
            if c.gaussians_enabled and (it + 1) % sch.gauss_interval == 0 \
                    and it + 1 < sch.joint_iters:
                self.error_densify_gaussians()
                self.prune_gaussians_contribution()
            self._log(sch.surfel_iters + it, frame.image, gt)
            if progress:
                progress("joint", it, sch.joint_iters, value)


def train(dataset: Dataset, config: TrainConfig, progress=None) -> tuple[Scene, Trainer]:
    trainer = Trainer(dataset, config)
    scene = trainer.train(progress)
    return scene, trainer
