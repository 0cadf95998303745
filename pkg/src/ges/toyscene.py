"""Synthetic desk-scale datasets rendered by an independent mesh rasterizer.

Ground truth comes from brute-force ray-triangle intersection over textured
triangles (flat or checkerboard albedo, no shading), deliberately sharing no
rasterization machinery with the splat renderers it is used to evaluate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import Camera, orbit_cameras


@dataclass
class Material:
    kind: str = "flat"              # flat | checker
    color: tuple = (0.8, 0.8, 0.8)
    color2: tuple = (0.2, 0.2, 0.2)
    checker_scale: float = 0.25     # world units per checker cell


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (T, 3, 3)
    uvs: np.ndarray        # (T, 3, 2) face-local texture coordinates
    materials: list        # per-triangle Material

    @property
    def count(self):
        return self.vertices.shape[0]

    @staticmethod
    def merge(meshes):
        meshes = list(meshes)
        if not meshes:
            return TriangleMesh(np.zeros((0, 3, 3)), np.zeros((0, 3, 2)), [])
        return TriangleMesh(
            vertices=np.concatenate([m.vertices for m in meshes]),
            uvs=np.concatenate([m.uvs for m in meshes]),
            materials=sum((m.materials for m in meshes), []))


def _quad(corners, material):
    """Two triangles for the quad (a, b, c, d) with unit-square UVs."""
    a, b, c, d = [np.asarray(p, dtype=np.float64) for p in corners]
    verts = np.array([[a, b, c], [a, c, d]])
    uvs = np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]],
                   dtype=np.float64)
    return TriangleMesh(verts, uvs, [material, material])


def plane(center, axis_u, axis_v, size_u, size_v, material: Material):
    """Rectangle spanned by two (not necessarily unit) axes."""
    c = np.asarray(center, dtype=np.float64)
    u = np.asarray(axis_u, dtype=np.float64) * (size_u / 2)
    v = np.asarray(axis_v, dtype=np.float64) * (size_v / 2)
    mesh = _quad([c - u - v, c + u - v, c + u + v, c - u + v], material)
    mesh.uvs = mesh.uvs * np.array([size_u, size_v])
    return mesh


def box(center, size, material: Material):
    c = np.asarray(center, dtype=np.float64)
    sx, sy, sz = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,))
    meshes = []
    for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)):
        n = np.zeros(3); n[axis] = sign
        u = np.zeros(3); u[(axis + 1) % 3] = 1.0
        v = np.cross(n, u)
        half = np.array([sx, sy, sz]) / 2
        meshes.append(plane(c + n * half[axis], u, v,
                            2 * half[(axis + 1) % 3], 2 * half[(axis + 2) % 3],
                            material))
    return TriangleMesh.merge(meshes)


def sphere(center, radius, material: Material, n_lat=8, n_lon=12):
    c = np.asarray(center, dtype=np.float64)
    lat = np.linspace(0, np.pi, n_lat + 1)
    lon = np.linspace(0, 2 * np.pi, n_lon + 1)
    verts, uvs = [], []
    for i in range(n_lat):
        for j in range(n_lon):
            p = []
            for (la, lo) in ((lat[i], lon[j]), (lat[i + 1], lon[j]),
                             (lat[i + 1], lon[j + 1]), (lat[i], lon[j + 1])):
                p.append(c + radius * np.array([np.sin(la) * np.cos(lo),
                                                np.sin(la) * np.sin(lo),
                                                np.cos(la)]))
            uv = [(lat[i], lon[j]), (lat[i + 1], lon[j]),
                  (lat[i + 1], lon[j + 1]), (lat[i], lon[j + 1])]
            verts.append([p[0], p[1], p[2]]); uvs.append([uv[0], uv[1], uv[2]])
            verts.append([p[0], p[2], p[3]]); uvs.append([uv[0], uv[2], uv[3]])
    return TriangleMesh(np.array(verts), np.array(uvs),
                        [material] * (2 * n_lat * n_lon))


def _material_colors(mesh: TriangleMesh, tri_idx, uv):
    out = np.empty((tri_idx.size, 3))
    kinds = np.array([0 if m.kind == "flat" else 1 for m in mesh.materials])
    c1 = np.array([m.color for m in mesh.materials])
    c2 = np.array([m.color2 for m in mesh.materials])
    sc = np.array([m.checker_scale for m in mesh.materials])
    k = kinds[tri_idx]
    out[:] = c1[tri_idx]
    checker = k == 1
    if np.any(checker):
        cell = np.floor(uv[checker] / sc[tri_idx][checker, None]).astype(np.int64)
        odd = (cell.sum(axis=1) % 2).astype(bool)
        sub = out[checker]
        sub[odd] = c2[tri_idx][checker][odd]
        out[checker] = sub
    return out


def render_mesh(mesh: TriangleMesh, cam: Camera, *, background=(0.0, 0.0, 0.0),
                supersample: int = 4):
    """Brute-force nearest-hit rasterization of all triangles.

    Each triangle is intersected against every (super)pixel ray; the minimum
    positive depth wins.  Colors are albedo lookups, no shading.
    """
    rc = cam.scaled(supersample) if supersample > 1 else cam
    H, W = rc.height, rc.width
    dirs = rc.pixel_dirs().reshape(-1, 3)
    best_t = np.full(H * W, np.inf)
    best_tri = np.full(H * W, -1, dtype=np.int64)
    best_uv = np.zeros((H * W, 2))
    Wc = rc.rotation
    tc = rc.translation
    v_cam = mesh.vertices @ Wc.T + tc  # (T, 3, 3)
    for i in range(mesh.count):
        a, b, c = v_cam[i]
        e1, e2 = b - a, c - a
        pvec = np.cross(dirs, e2)
        det = pvec @ e1
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -a  # ray origin is the camera origin
        bu = (pvec @ tvec) * inv
        qvec = np.cross(tvec, e1)
        bv = (dirs @ qvec) * inv
        t = (e2 @ qvec) * inv
        hit = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > 1e-4) & (t < best_t)
        best_t = np.where(hit, t, best_t)
        best_tri = np.where(hit, i, best_tri)
        uv_a, uv_b, uv_c = mesh.uvs[i]
        uv_hit = uv_a + np.outer(bu, uv_b - uv_a) + np.outer(bv, uv_c - uv_a)
        best_uv = np.where(hit[:, None], uv_hit, best_uv)
    img = np.tile(np.asarray(background, dtype=np.float64), (H * W, 1))
    covered = best_tri >= 0
    if np.any(covered):
        img[covered] = _material_colors(mesh, best_tri[covered], best_uv[covered])
    img = img.reshape(H, W, 3)
    if supersample > 1:
        img = img.reshape(cam.height, supersample, cam.width, supersample, 3).mean(axis=(1, 3))
    return img


def sample_surface_points(mesh: TriangleMesh, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples with albedo colors."""
    e1 = mesh.vertices[:, 1] - mesh.vertices[:, 0]
    e2 = mesh.vertices[:, 2] - mesh.vertices[:, 0]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    probs = areas / areas.sum()
    tri = rng.choice(mesh.count, size=n, p=probs)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    bu = 1 - r1
    bv = r1 * (1 - r2)
    pts = (mesh.vertices[tri, 0] * bu[:, None] + mesh.vertices[tri, 1] * bv[:, None]
           + mesh.vertices[tri, 2] * (1 - bu - bv)[:, None])
    uv = (mesh.uvs[tri, 0] * bu[:, None] + mesh.uvs[tri, 1] * bv[:, None]
          + mesh.uvs[tri, 2] * (1 - bu - bv)[:, None])
    cols = _material_colors(mesh, tri, uv)
    return pts, cols


@dataclass
class ToySceneSpec:
    """Declarative description of a synthetic scene + capture rig."""
    objects: list = field(default_factory=list)     # TriangleMesh parts
    n_cameras: int = 20
    orbit_radius: float = 3.5
    orbit_height: float = 1.6
    look_at: tuple = (0.0, 0.0, 0.3)
    fov_deg: float = 55.0
    resolution: int = 128
    n_points: int = 1500
    background: tuple = (0.0, 0.0, 0.0)
    supersample: int = 4

    def mesh(self) -> TriangleMesh:
        return TriangleMesh.merge(self.objects)

    def cameras(self) -> list[Camera]:
        return orbit_cameras(self.look_at, self.orbit_radius, self.n_cameras,
                             height=self.orbit_height, fov_deg=self.fov_deg,
                             width=self.resolution, height_px=self.resolution)


def three_plane_spec(resolution=128, n_cameras=20) -> ToySceneSpec:
    """Checkered ground, back wall and a floating occluder plate."""
    ground = plane((0, 0, 0), (1, 0, 0), (0, 1, 0), 4.2, 4.2,
                   Material("checker", (0.92, 0.92, 0.88), (0.22, 0.25, 0.3), 0.5))
    wall = plane((-1.1, 0.4, 0.8), (0, 1, 0), (0, 0, 1), 2.6, 1.7,
                 Material("checker", (0.85, 0.35, 0.3), (0.95, 0.85, 0.75), 0.35))
    plate = plane((0.35, -0.25, 0.55), (0.94, 0.342, 0), (0, 0, 1), 1.1, 0.75,
                  Material("checker", (0.25, 0.5, 0.85), (0.9, 0.9, 0.4), 0.22))
    return ToySceneSpec(objects=[ground, wall, plate], resolution=resolution,
                        n_cameras=n_cameras)


def occluder_spec(resolution=96, n_cameras=16) -> ToySceneSpec:
    """A thin foreground slat in front of a finely textured backdrop."""
    back = plane((-0.9, 0, 0.7), (0, 1, 0), (0, 0, 1), 3.2, 1.9,
                 Material("checker", (0.9, 0.6, 0.25), (0.2, 0.35, 0.7), 0.16))
    ground = plane((0, 0, -0.05), (1, 0, 0), (0, 1, 0), 4.0, 4.0,
                   Material("checker", (0.85, 0.85, 0.85), (0.3, 0.3, 0.3), 0.5))
    slat = box((0.45, 0.0, 0.7), (0.06, 1.6, 0.5),
               Material("flat", (0.12, 0.7, 0.35)))
    return ToySceneSpec(objects=[back, ground, slat], resolution=resolution,
                        n_cameras=n_cameras, orbit_radius=3.2, orbit_height=1.0,
                        look_at=(-0.1, 0.0, 0.55))
