"""Bi-scale surfel + Gaussian radiance fields with sorting-free rendering."""

from .cameras import Camera, look_at, orbit_cameras
from .datasets import Dataset, load_dataset, make_toy_scene, save_dataset
from .filters import compute_epsilon, mip_world_filter, object_space_filter_2d, opaque_radius
from .forward import (GaussianBuffers, RenderSettings, SurfelBuffers,
                      accumulate_gaussians, composite, rasterize_surfels, render,
                      smooth_geometry)
from .gesfile import export_ges, load_ges
from .losses import loss_rgb, ssim
from .metrics import EvalReport, consistency_probe, evaluate, psnr
from .optim import Schedule, TrainConfig, Trainer, init_surfels, train
from .primitives import (GaussianKind, GaussianSet, GradientSet, Scene, Stage,
                         SurfelSet)
from .sh import sh_basis, sh_eval, sh_eval_linear
from .training import TrainFrame, TrainSettings, backward, render_training

__version__ = "0.1.0"

__all__ = [
    "Camera", "look_at", "orbit_cameras",
    "Dataset", "load_dataset", "make_toy_scene", "save_dataset",
    "compute_epsilon", "mip_world_filter", "object_space_filter_2d", "opaque_radius",
    "GaussianBuffers", "RenderSettings", "SurfelBuffers", "accumulate_gaussians",
    "composite", "rasterize_surfels", "render", "smooth_geometry",
    "export_ges", "load_ges",
    "loss_rgb", "ssim",
    "EvalReport", "consistency_probe", "evaluate", "psnr",
    "Schedule", "TrainConfig", "Trainer", "init_surfels", "train",
    "GaussianKind", "GaussianSet", "GradientSet", "Scene", "Stage", "SurfelSet",
    "sh_basis", "sh_eval", "sh_eval_linear",
    "TrainFrame", "TrainSettings", "backward", "render_training",
]
