"""Dataset ingestion and on-disk layout.

A dataset directory contains ``cameras.json`` (list of pinhole entries with a
row-major 4x4 world-to-camera matrix and a relative image path), ``images/``
with 8-bit PNGs, and ``points.ply`` with the sparse initialization points.
Images are converted to float RGB in [0, 1] by dividing by 255.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Camera
from .toyscene import ToySceneSpec, render_mesh, sample_surface_points

TEST_EVERY_DEFAULT = 8


class DatasetError(RuntimeError):
    pass


@dataclass
class Dataset:
    cameras: list[Camera]
    images: list[np.ndarray]          # (H, W, 3) float in [0, 1]
    points: np.ndarray                # (P, 3)
    point_colors: np.ndarray          # (P, 3) in [0, 1]
    train_idx: list[int] = field(default_factory=list)
    test_idx: list[int] = field(default_factory=list)

    @property
    def train_cameras(self):
        return [self.cameras[i] for i in self.train_idx]

    def split(self, test_every: int):
        n = len(self.cameras)
        self.test_idx = [i for i in range(n) if test_every > 0 and i % test_every == 0]
        self.train_idx = [i for i in range(n) if i not in set(self.test_idx)]


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path: Path, img: np.ndarray):
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# PLY (positions + uchar colors), ascii and binary little-endian
# ---------------------------------------------------------------------------

def write_ply(path: Path, points: np.ndarray, colors: np.ndarray):
    n = points.shape[0]
    header = (b"ply\nformat binary_little_endian 1.0\n"
              + f"element vertex {n}\n".encode()
              + b"property float x\nproperty float y\nproperty float z\n"
              + b"property uchar red\nproperty uchar green\nproperty uchar blue\n"
              + b"end_header\n")
    rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = points.astype(np.float32)
    rec["rgb"] = np.clip(colors * 255.0 + 0.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def read_ply(path: Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read point cloud {path}: {e}") from e
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise DatasetError(f"{path} is not a PLY file")
    header = raw[:end].decode("ascii", "replace").splitlines()
    fmt = next((l.split()[1] for l in header if l.startswith("format")), None)
    n = next((int(l.split()[2]) for l in header if l.startswith("element vertex")), None)
    props = [l.split()[2] for l in header if l.startswith("property")]
    if n is None or fmt is None:
        raise DatasetError(f"{path}: malformed PLY header")
    needed = ("x", "y", "z")
    if not all(p in props for p in needed):
        raise DatasetError(f"{path}: PLY lacks x/y/z properties")
    has_rgb = all(p in props for p in ("red", "green", "blue"))
    body = raw[end + len(b"end_header\n"):]
    if fmt == "ascii":
        rows = np.loadtxt([l for l in body.decode().splitlines() if l.strip()][:n],
                          ndmin=2)
        cols = {p: i for i, p in enumerate(props)}
        pts = rows[:, [cols["x"], cols["y"], cols["z"]]]
        rgb = (rows[:, [cols["red"], cols["green"], cols["blue"]]] / 255.0
               if has_rgb else np.full((n, 3), 0.5))
        return pts, rgb
    if fmt != "binary_little_endian":
        raise DatasetError(f"{path}: unsupported PLY format {fmt}")
    typemap = {"float": "<f4", "double": "<f8", "uchar": "u1", "uint8": "u1",
               "int": "<i4", "float32": "<f4", "float64": "<f8"}
    types = [l.split()[1] for l in header if l.startswith("property")]
    dtype = np.dtype([(p, typemap[t]) for p, t in zip(props, types)])
    rec = np.frombuffer(body, dtype=dtype, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    if has_rgb:
        rgb = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    else:
        rgb = np.full((n, 3), 0.5)
    return pts, rgb


# ---------------------------------------------------------------------------
# cameras.json
# ---------------------------------------------------------------------------

def camera_to_entry(cam: Camera, image_rel: str | None = None) -> dict:
    entry = {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
             "width": cam.width, "height": cam.height,
             "w2c": [float(x) for x in cam.world_to_camera.reshape(-1)]}
    if image_rel is not None:
        entry["image"] = image_rel
    return entry


def camera_from_entry(entry: dict) -> Camera:
    w2c = np.array(entry["w2c"], dtype=np.float64).reshape(4, 4)
    return Camera(entry["fx"], entry["fy"], entry["cx"], entry["cy"],
                  int(entry["width"]), int(entry["height"]), w2c)


def save_dataset(dataset: Dataset, root: Path):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        rel = f"images/{i:04d}.png"
        save_image(root / rel, img)
        entries.append(camera_to_entry(cam, rel))
    (root / "cameras.json").write_text(json.dumps(entries, indent=1))
    write_ply(root / "points.ply", dataset.points, dataset.point_colors)


def load_dataset(root: Path, *, test_every: int = TEST_EVERY_DEFAULT) -> Dataset:
    root = Path(root)
    cam_path = root / "cameras.json"
    if not cam_path.is_file():
        raise DatasetError(f"missing camera file {cam_path}")
    try:
        entries = json.loads(cam_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt camera file {cam_path}: {e}") from e
    cameras, images = [], []
    for entry in entries:
        cam = camera_from_entry(entry)
        img_path = root / entry["image"]
        if not img_path.is_file():
            raise DatasetError(f"camera references missing image {img_path}")
        img = load_image(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"image size {img.shape[:2]} does not match "
                               f"camera {cam.width}x{cam.height}: {img_path}")
        cameras.append(cam)
        images.append(img)
    points, colors = read_ply(root / "points.ply")
    ds = Dataset(cameras, images, points, colors)
    ds.split(test_every)
    return ds


def make_toy_scene(spec: ToySceneSpec, rng, *, test_every: int = TEST_EVERY_DEFAULT) -> Dataset:
    """Render a synthetic dataset from a declarative scene description."""
    mesh = spec.mesh()
    cams = spec.cameras()
    if not cams:
        raise DatasetError("toy scene spec produced no cameras")
    if mesh.count:
        images = [render_mesh(mesh, c, background=spec.background,
                              supersample=spec.supersample) for c in cams]
        pts, cols = sample_surface_points(mesh, spec.n_points, rng)
    else:
        images = [np.tile(np.asarray(spec.background), (c.height, c.width, 1))
                  for c in cams]
        pts = np.zeros((0, 3)); cols = np.zeros((0, 3))
    # quantize exactly like the on-disk roundtrip so in-memory training
    # matches a reloaded dataset
    images = [np.clip(np.floor(i * 255.0 + 0.5), 0, 255) / 255.0 for i in images]
    ds = Dataset(cams, images, pts, cols)
    ds.split(test_every)
    return ds
