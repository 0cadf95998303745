import numpy as np
import pytest

from ges.cameras import Camera, look_at
from ges.primitives import GaussianKind, GaussianSet, Scene, Stage, SurfelSet, logit
from ges.sh import num_coeffs


def make_camera(width=32, height=32, dist=4.0, azim=0.3, elev=0.25, fov=50.0):
    eye = dist * np.array([np.cos(azim) * np.cos(elev),
                           np.sin(azim) * np.cos(elev), np.sin(elev)])
    f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov))
    return Camera(f, f, width / 2, height / 2, width, height, look_at(eye, (0, 0, 0)))


def random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_surfels(rng, n, degree=1, w=255.0, scale_range=(0.15, 0.6),
                   sh_amplitude=0.25, extent=1.2):
    K = num_coeffs(degree)
    sh = rng.uniform(-sh_amplitude, sh_amplitude, (n, K, 3))
    ws = np.full(n, w) if np.isscalar(w) else np.asarray(w)
    return SurfelSet(
        pos=rng.uniform(-extent, extent, (n, 3)),
        quat=random_quats(rng, n),
        log_scale=np.log(rng.uniform(*scale_range, (n, 2))),
        sh=sh,
        w=ws,
    )


def random_gaussians(rng, n, degree=1, kind=GaussianKind.THREE_D,
                     scale_range=(0.05, 0.35), opacity_range=(0.15, 0.9),
                     sh_amplitude=0.25, extent=1.4):
    K = num_coeffs(degree)
    D = 3 if kind is GaussianKind.THREE_D else 2
    return GaussianSet(
        pos=rng.uniform(-extent, extent, (n, 3)),
        raw_opacity=logit(rng.uniform(*opacity_range, n)),
        quat=random_quats(rng, n),
        log_scale=np.log(rng.uniform(*scale_range, (n, D))),
        sh=rng.uniform(-sh_amplitude, sh_amplitude, (n, K, 3)),
        kind=kind,
    )


def random_scene(rng, n_surfels=8, n_gaussians=12, degree=1,
                 kind=GaussianKind.THREE_D, w=255.0, stage=Stage.FROZEN):
    return Scene(
        surfels=random_surfels(rng, n_surfels, degree, w=w),
        gaussians=random_gaussians(rng, n_gaussians, degree, kind=kind),
        sh_degree=degree,
        stage=stage,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
