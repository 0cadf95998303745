"""Binary model format shared with the web viewer.

Layout (little-endian):
  magic "GES1" (4 bytes) | version u32 = 1 | sh_degree u32 | flags u32 |
  surfel_count u64 | gaussian_count u64 |
  surfel records  [pos f32*3, quat f32*4 (w,x,y,z), scale f32*2,
                   color f32*3*(deg+1)^2  (or f32*3 with the RGB flag)] |
  gaussian records [pos f32*3, sigma f32, quat f32*4, scale f32*(3|2),
                    epsilon f32, color f32*3*(deg+1)^2]

flags bit 0: Gaussians are planar (2D); bit 1: surfels carry plain RGB
instead of SH.  SH blocks are coefficient-major (DC first), RGB interleaved
per coefficient.  Epsilon is baked at export from the final scales.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import sh as shlib
from .primitives import (GaussianKind, GaussianSet, Scene, Stage, SurfelSet,
                         W_OPAQUE, logit, sigmoid)

MAGIC = b"GES1"
VERSION = 1
FLAG_GAUSSIANS_2D = 1
FLAG_RGB_SURFELS = 2
_HEADER = struct.Struct("<4sIII QQ".replace(" ", ""))


class GesFileError(RuntimeError):
    pass


def _color_block_size(sh_degree: int, rgb_surfels: bool) -> int:
    return 3 if rgb_surfels else 3 * shlib.num_coeffs(sh_degree)


def export_ges(scene: Scene, path, *, rgb_surfels: bool = False):
    """Write a frozen scene; per-Gaussian epsilon is baked from the scales."""
    if scene.stage is not Stage.FROZEN:
        raise GesFileError("only frozen scenes can be exported")
    if not np.all(scene.surfels.w == W_OPAQUE):
        raise GesFileError("export requires w = 255 on every surfel")
    deg = scene.sh_degree
    K = shlib.num_coeffs(deg)
    s, g = scene.surfels, scene.gaussians
    flags = 0
    if g.kind is GaussianKind.TWO_D:
        flags |= FLAG_GAUSSIANS_2D
    if rgb_surfels:
        flags |= FLAG_RGB_SURFELS

    if rgb_surfels:
        scol = np.clip(0.5 + shlib.C0 * s.sh[:, 0, :], 0.0, 1.0)
    else:
        scol = s.sh.reshape(s.count, 3 * K)
    srec = np.concatenate([s.pos, s.quat, s.scale, scol], axis=1).astype("<f4")

    eps = g.epsilon()[:, None]
    grec = np.concatenate([g.pos, g.eff_opacity()[:, None], g.quat,
                           g.eff_scale(), eps, g.sh.reshape(g.count, 3 * K)],
                          axis=1).astype("<f4")
    if srec.size and not np.all(np.isfinite(srec)):
        raise GesFileError("non-finite surfel values")
    if grec.size and not np.all(np.isfinite(grec)):
        raise GesFileError("non-finite gaussian values")

    blob = _HEADER.pack(MAGIC, VERSION, deg, flags, s.count, g.count)
    with open(path, "wb") as f:
        f.write(blob)
        f.write(srec.tobytes())
        f.write(grec.tobytes())


def load_ges(path) -> tuple[Scene, dict]:
    """Read a model file; returns (scene, info) with info carrying the baked
    epsilons and flags."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GesFileError(f"{path}: truncated header")
    magic, version, deg, flags, ns, ng = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise GesFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise GesFileError(f"{path}: unsupported version {version}")
    if deg > shlib.MAX_DEGREE:
        raise GesFileError(f"{path}: unsupported SH degree {deg}")
    K = shlib.num_coeffs(deg)
    rgb_surfels = bool(flags & FLAG_RGB_SURFELS)
    kind = GaussianKind.TWO_D if flags & FLAG_GAUSSIANS_2D else GaussianKind.THREE_D
    D = 2 if kind is GaussianKind.TWO_D else 3
    scols = _color_block_size(deg, rgb_surfels) // 3
    s_floats = 3 + 4 + 2 + 3 * scols
    g_floats = 3 + 1 + 4 + D + 1 + 3 * K
    expect = _HEADER.size + 4 * (ns * s_floats + ng * g_floats)
    if len(raw) != expect:
        raise GesFileError(f"{path}: size {len(raw)} != expected {expect}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    srec = body[:ns * s_floats].reshape(ns, s_floats).astype(np.float64)
    grec = body[ns * s_floats:].reshape(ng, g_floats).astype(np.float64)
    if (srec.size and not np.all(np.isfinite(srec))) or \
       (grec.size and not np.all(np.isfinite(grec))):
        raise GesFileError(f"{path}: non-finite values")

    if rgb_surfels:
        sh_s = np.zeros((ns, K, 3))
        sh_s[:, 0, :] = (srec[:, 9:12] - 0.5) / shlib.C0
    else:
        sh_s = srec[:, 9:9 + 3 * K].reshape(ns, K, 3)
    surfels = SurfelSet(pos=srec[:, 0:3], quat=srec[:, 3:7],
                        log_scale=np.log(np.maximum(srec[:, 7:9], 1e-12)),
                        sh=sh_s, w=np.full(ns, W_OPAQUE))
    sig = np.clip(grec[:, 3], 1e-7, 1 - 1e-7) if ng else grec[:, 3]
    gauss = GaussianSet(pos=grec[:, 0:3], raw_opacity=logit(sig) if ng else grec[:, 3],
                        quat=grec[:, 4:8],
                        log_scale=np.log(np.maximum(grec[:, 8:8 + D], 1e-12)),
                        sh=grec[:, 9 + D:9 + D + 3 * K].reshape(ng, K, 3),
                        kind=kind)
    scene = Scene(surfels, gauss, deg, Stage.FROZEN)
    info = {"flags": flags, "rgb_surfels": rgb_surfels,
            "epsilon": grec[:, 8 + D].copy()}
    return scene, info
