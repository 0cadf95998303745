"""Scene containers: surfels, Gaussians and their parameterizations.

Arrays are struct-of-arrays along the primitive axis.  Stored parameters are
unconstrained where the exposed quantity is bounded: scales are kept as logs,
Gaussian opacity as a logit; the opacity-modulation value ``w`` is stored
directly in [0, 255] and clamped after optimizer steps.  Quaternions are
stored (w, x, y, z) and renormalized after every step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import sh as shlib
from .geometry import normalize_quats

W_OPAQUE = 255.0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


class Stage(enum.Enum):
    SURFEL_ONLY = "surfel_only"
    JOINT = "joint"
    FROZEN = "frozen"


class GaussianKind(enum.Enum):
    THREE_D = "3d"
    TWO_D = "2d"


@dataclass
class SurfelSet:
    pos: np.ndarray        # (N, 3)
    quat: np.ndarray       # (N, 4) unit
    log_scale: np.ndarray  # (N, 2)
    sh: np.ndarray         # (N, K, 3)
    w: np.ndarray          # (N,) in [0, 255]

    @property
    def count(self) -> int:
        return self.pos.shape[0]

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def normalized(self) -> "SurfelSet":
        return replace(self, quat=normalize_quats(self.quat))

    def select(self, mask) -> "SurfelSet":
        return SurfelSet(self.pos[mask], self.quat[mask], self.log_scale[mask],
                         self.sh[mask], self.w[mask])

    def copy(self) -> "SurfelSet":
        return SurfelSet(self.pos.copy(), self.quat.copy(), self.log_scale.copy(),
                         self.sh.copy(), self.w.copy())

    @staticmethod
    def empty(sh_degree: int) -> "SurfelSet":
        K = shlib.num_coeffs(sh_degree)
        return SurfelSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)),
                         np.zeros((0, K, 3)), np.zeros((0,)))

    @staticmethod
    def concatenate(a: "SurfelSet", b: "SurfelSet") -> "SurfelSet":
        return SurfelSet(*(np.concatenate([x, y]) for x, y in
                           zip((a.pos, a.quat, a.log_scale, a.sh, a.w),
                               (b.pos, b.quat, b.log_scale, b.sh, b.w))))


@dataclass
class GaussianSet:
    pos: np.ndarray          # (N, 3)
    raw_opacity: np.ndarray  # (N,) logit of sigma
    quat: np.ndarray         # (N, 4) unit
    log_scale: np.ndarray    # (N, D), D = 3 or 2
    sh: np.ndarray           # (N, K, 3)
    kind: GaussianKind = GaussianKind.THREE_D
    # Per-primitive world-filter variance (mip); zero disables the filter.
    filter3d: np.ndarray = None

    def __post_init__(self):
        if self.filter3d is None:
            self.filter3d = np.zeros(self.pos.shape[0])

    @property
    def count(self) -> int:
        return self.pos.shape[0]

    @property
    def dim(self) -> int:
        return self.log_scale.shape[1]

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.raw_opacity)

    def eff_scale(self) -> np.ndarray:
        """Scale with the world-space anti-aliasing variance folded in."""
        s = self.scale
        if not np.any(self.filter3d):
            return s
        return np.sqrt(s * s + self.filter3d[:, None])

    def eff_opacity(self) -> np.ndarray:
        """Opacity rescaled so the filtered Gaussian keeps its integral."""
        sig = self.opacity
        if not np.any(self.filter3d):
            return sig
        s = self.scale
        return sig * np.prod(s / np.sqrt(s * s + self.filter3d[:, None]), axis=1)

    def epsilon(self) -> np.ndarray:
        """Adaptive per-primitive depth-test offset: (5/D) * sum of scales."""
        s = self.eff_scale()
        return (5.0 / s.shape[1]) * np.sum(s, axis=1)

    def normalized(self) -> "GaussianSet":
        return replace(self, quat=normalize_quats(self.quat))

    def select(self, mask) -> "GaussianSet":
        return GaussianSet(self.pos[mask], self.raw_opacity[mask], self.quat[mask],
                           self.log_scale[mask], self.sh[mask], self.kind,
                           self.filter3d[mask])

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.pos.copy(), self.raw_opacity.copy(), self.quat.copy(),
                           self.log_scale.copy(), self.sh.copy(), self.kind,
                           self.filter3d.copy())

    @staticmethod
    def empty(sh_degree: int, kind: GaussianKind = GaussianKind.THREE_D) -> "GaussianSet":
        K = shlib.num_coeffs(sh_degree)
        D = 3 if kind is GaussianKind.THREE_D else 2
        return GaussianSet(np.zeros((0, 3)), np.zeros((0,)), np.zeros((0, 4)),
                           np.zeros((0, D)), np.zeros((0, K, 3)), kind)

    @staticmethod
    def concatenate(a: "GaussianSet", b: "GaussianSet") -> "GaussianSet":
        if a.kind is not b.kind:
            raise ValueError("cannot mix 2D and 3D Gaussian sets")
        return GaussianSet(np.concatenate([a.pos, b.pos]),
                           np.concatenate([a.raw_opacity, b.raw_opacity]),
                           np.concatenate([a.quat, b.quat]),
                           np.concatenate([a.log_scale, b.log_scale]),
                           np.concatenate([a.sh, b.sh]),
                           a.kind,
                           np.concatenate([a.filter3d, b.filter3d]))


@dataclass
class Scene:
    surfels: SurfelSet
    gaussians: GaussianSet
    sh_degree: int
    stage: Stage = Stage.SURFEL_ONLY

    def validate(self):
        K = shlib.num_coeffs(self.sh_degree)
        if self.surfels.sh.shape[1:] != (K, 3) or self.gaussians.sh.shape[1:] != (K, 3):
            raise ValueError("SH block shape does not match scene degree")
        for q in (self.surfels.quat, self.gaussians.quat):
            if q.shape[0] and not np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-6):
                raise ValueError("quaternions are not unit length")
        if np.any(self.surfels.w < 0) or np.any(self.surfels.w > W_OPAQUE):
            raise ValueError("w outside [0, 255]")
        if self.stage is Stage.FROZEN and not np.all(self.surfels.w == W_OPAQUE):
            raise ValueError("frozen scene requires w = 255 everywhere")

    def frozen(self) -> "Scene":
        s = self.surfels.copy()
        s.w[:] = W_OPAQUE
        return Scene(s, self.gaussians.copy(), self.sh_degree, Stage.FROZEN)

    def copy(self) -> "Scene":
        return Scene(self.surfels.copy(), self.gaussians.copy(), self.sh_degree, self.stage)


@dataclass
class GradientSet:
    """Gradients w.r.t. exposed parameter values (not raw storage)."""
    surfel_pos: np.ndarray
    surfel_quat: np.ndarray   # tangent-projected, w.r.t. unit quaternion
    surfel_scale: np.ndarray
    surfel_sh: np.ndarray
    surfel_w: np.ndarray
    gaussian_pos: np.ndarray
    gaussian_opacity: np.ndarray
    gaussian_quat: np.ndarray
    gaussian_scale: np.ndarray
    gaussian_sh: np.ndarray
    # Screen-space positional gradient norms (NDC units), for densification.
    surfel_screen_grad: np.ndarray = None
    gaussian_screen_grad: np.ndarray = None

    def check_finite(self):
        for name, arr in self.__dict__.items():
            if arr is not None and arr.size and not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient in {name}")
