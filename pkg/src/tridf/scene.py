"""Posed multi-view scenes, point clouds and a closed-form synthetic scene.

On-disk layout of a scene directory::

    cameras.json      {"cameras": [{image, width, height, fx, fy, cx, cy,
                                     world_to_camera: [12 floats]}, ...],
                       "bbox": {"min": [3], "max": [3]}, "background": [3]}
    split.json        {"train": [...], "test": [...]}
    images/           8-bit RGB PNGs
    points.csv        optional, ``x,y,z,r,g,b`` with r, g, b in [0, 255]
    depths/           optional ground-truth camera-depth maps (.npy)

A bare JSON array of camera objects is also accepted for ``cameras.json``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, Extrinsics, Intrinsics, look_at, pixel_rays

__all__ = [
    "SceneIOError", "SceneDataset", "PointCloud", "Box", "SyntheticScene",
    "load_scene", "save_scene", "load_point_cloud", "save_point_cloud",
    "synth_scene", "oracle_render", "camera_to_json", "camera_from_json",
    "DEFAULT_BACKGROUND",
]

DEFAULT_BACKGROUND = (0.7, 0.7, 0.7)


class SceneIOError(RuntimeError):
    """A scene file is missing, unreadable or violates a dataset invariant."""


@dataclass(eq=False)
class SceneDataset:
    cameras: list[Camera]
    images: list[np.ndarray]
    train_ids: list[int]
    test_ids: list[int]
    bbox: np.ndarray  # (2, 3): min row, max row
    background: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_BACKGROUND))

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if len(self.cameras) != len(self.images):
            raise SceneIOError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape != (cam.height, cam.width, 3):
                raise SceneIOError(
                    f"image {i} has shape {img.shape}, camera expects "
                    f"({cam.height}, {cam.width}, 3)")
        if set(self.train_ids) & set(self.test_ids):
            raise SceneIOError("train and test views overlap")
        if len(self.train_ids) < 2:
            raise SceneIOError("at least two training views are required")
        n = len(self.cameras)
        if any(not 0 <= i < n for i in [*self.train_ids, *self.test_ids]):
            raise SceneIOError("split refers to a view index that does not exist")
        if not np.all(self.bbox[0] < self.bbox[1]):
            raise SceneIOError("bbox min must be below bbox max componentwise")

    @property
    def extent(self) -> float:
        return float(np.linalg.norm(self.bbox[1] - self.bbox[0]))

    def __eq__(self, other):
        if not isinstance(other, SceneDataset):
            return NotImplemented
        return (self.cameras == other.cameras
                and len(self.images) == len(other.images)
                and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
                and self.train_ids == other.train_ids and self.test_ids == other.test_ids
                and np.array_equal(self.bbox, other.bbox)
                and np.array_equal(self.background, other.background))


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise SceneIOError("point cloud is empty")
        if len(self.points) != len(self.colors):
            raise SceneIOError("points and colors differ in length")
        if not np.isfinite(self.points).all():
            raise SceneIOError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


# -- json helpers ---------------------------------------------------------


def camera_to_json(cam: Camera, image: str | None = None) -> dict:
    entry = {
        "width": cam.width, "height": cam.height,
        "fx": cam.K.fx, "fy": cam.K.fy, "cx": cam.K.cx, "cy": cam.K.cy,
        "world_to_camera": [float(x) for x in cam.E.matrix.reshape(-1)],
    }
    if image is not None:
        entry = {"image": image, **entry}
    return entry


def camera_from_json(entry: dict) -> Camera:
    try:
        K = Intrinsics(float(entry["fx"]), float(entry["fy"]), float(entry["cx"]),
                       float(entry["cy"]), int(entry["width"]), int(entry["height"]))
        m = entry["world_to_camera"]
        if len(m) != 12:
            raise ValueError("world_to_camera must hold 12 numbers")
        return Camera(K, Extrinsics.from_matrix(m))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed camera entry: {exc!r}") from None


def _read_json(path: Path):
    if not path.is_file():
        raise SceneIOError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneIOError(f"cannot parse {path}: {exc}") from None


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise SceneIOError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise SceneIOError(f"cannot decode image {path}: {exc}") from None
    return arr / 255.0


def write_png(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# -- loading / saving -----------------------------------------------------


def load_scene(directory) -> SceneDataset:
    d = Path(directory)
    meta = _read_json(d / "cameras.json")
    split = _read_json(d / "split.json")
    entries = meta if isinstance(meta, list) else meta.get("cameras") if isinstance(meta, dict) else None
    if not isinstance(entries, list) or not entries:
        raise SceneIOError(f"{d / 'cameras.json'}: expected a non-empty list of cameras")
    cameras, images = [], []
    for i, entry in enumerate(entries):
        try:
            cameras.append(camera_from_json(entry))
        except ValueError as exc:
            raise SceneIOError(f"{d / 'cameras.json'}: camera {i}: {exc}") from None
        if "image" not in entry:
            raise SceneIOError(f"{d / 'cameras.json'}: camera {i} has no image path")
        images.append(_read_png(d / entry["image"]))
    try:
        train, test = [int(i) for i in split["train"]], [int(i) for i in split["test"]]
    except (KeyError, TypeError, ValueError):
        raise SceneIOError(f"{d / 'split.json'}: expected {{train: [...], test: [...]}}") from None
    bbox = None
    background = DEFAULT_BACKGROUND
    if isinstance(meta, dict):
        if "bbox" in meta:
            bbox = np.array([meta["bbox"]["min"], meta["bbox"]["max"]], dtype=np.float64)
        background = meta.get("background", background)
    if bbox is None:
        cloud_path = d / "points.csv"
        if not cloud_path.is_file():
            raise SceneIOError(f"{d / 'cameras.json'} has no bbox and {cloud_path} is missing")
        cloud = load_point_cloud(cloud_path)
        lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
        pad = 0.1 * np.maximum(hi - lo, 1e-6)
        bbox = np.array([lo - pad, hi + pad])
    return SceneDataset(cameras, images, train, test, bbox, background)


def save_scene(dataset: SceneDataset, directory, cloud: PointCloud | None = None,
               depths: list[np.ndarray] | None = None) -> Path:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        name = f"images/view_{i:03d}.png"
        write_png(d / name, img)
        entries.append(camera_to_json(cam, name))
    meta = {
        "cameras": entries,
        "bbox": {"min": dataset.bbox[0].tolist(), "max": dataset.bbox[1].tolist()},
        "background": dataset.background.tolist(),
    }
    (d / "cameras.json").write_text(json.dumps(meta, indent=1))
    (d / "split.json").write_text(json.dumps({"train": dataset.train_ids, "test": dataset.test_ids}))
    if cloud is not None:
        save_point_cloud(cloud, d / "points.csv")
    if depths is not None:
        (d / "depths").mkdir(exist_ok=True)
        for i, dm in enumerate(depths):
            np.save(d / "depths" / f"view_{i:03d}.npy", dm)
    return d


def load_point_cloud(path) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise SceneIOError(f"missing file: {path}")
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != 6:
                    raise ValueError(f"expected 6 fields, got {len(row)}")
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise SceneIOError(f"{path}:{lineno}: malformed point line ({exc})") from None
            if not all(0.0 <= c <= 255.0 for c in vals[3:]):
                raise SceneIOError(f"{path}:{lineno}: color outside [0, 255]")
            rows.append(vals)
    if not rows:
        raise SceneIOError(f"{path}: point cloud is empty")
    arr = np.array(rows)
    return PointCloud(arr[:, :3], arr[:, 3:] / 255.0)


def save_point_cloud(cloud: PointCloud, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for p, c in zip(cloud.points, cloud.colors * 255.0):
            w.writerow([repr(float(x)) for x in (*p, *c)])


# -- synthetic ground truth ----------------------------------------------

_LIGHT = np.array([0.35, -0.25, 0.9]) / np.linalg.norm([0.35, -0.25, 0.9])
_GROUND_HALF = 1.0
_NEAR, _FAR = 0.05, 20.0


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    stripe: np.ndarray  # per-channel amplitude of a low-frequency stripe texture


@dataclass(eq=False)
class SyntheticScene:
    """Textured axis-aligned boxes standing on a textured square ground plane."""

    boxes: list[Box]
    ground_color: np.ndarray
    ground_waves: np.ndarray  # (3, 4): amplitude, freq_x, freq_y, phase per channel
    bbox: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_BACKGROUND))
    t_far: float = _FAR
    depths: list[np.ndarray] = field(default_factory=list)

    def albedo(self, points: np.ndarray, prim: np.ndarray) -> np.ndarray:
        """Surface color at hit points; ``prim`` is -1 for ground, else box index."""
        out = np.empty(points.shape)
        g = prim == -1
        if g.any():
            x, y = points[g, 0], points[g, 1]
            a, fx, fy, ph = self.ground_waves.T
            waves = a * np.sin(np.pi * (np.outer(x, fx) + np.outer(y, fy)) + ph)
            out[g] = self.ground_color + waves
        for i, box in enumerate(self.boxes):
            m = prim == i
            if m.any():
                h = (points[m, 2] - box.lo[2]) / (box.hi[2] - box.lo[2])
                out[m] = box.color + np.outer(np.cos(np.pi * h), box.stripe)
        return np.clip(out, 0.0, 1.0)


def _hit_scene(scene: SyntheticScene, origin, dirs):
    """Nearest intersection per ray: (t, primitive id, normal); t=inf on a miss."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    prim = np.full(n, -2)
    normal = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dirs[:, 2]
    p = origin + t[:, None] * dirs
    ok = (t > _NEAR) & (np.abs(p[:, 0]) <= _GROUND_HALF) & (np.abs(p[:, 1]) <= _GROUND_HALF)
    best_t[ok] = t[ok]
    prim[ok] = -1
    normal[ok] = (0.0, 0.0, 1.0)
    for i, box in enumerate(scene.boxes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (box.lo - origin) / dirs
            t1 = (box.hi - origin) / dirs
        tmin = np.minimum(t0, t1)
        t_in = tmin.max(axis=1)
        t_out = np.maximum(t0, t1).min(axis=1)
        hit = (t_in <= t_out) & (t_in > _NEAR) & (t_in < best_t)
        if not hit.any():
            continue
        axis = tmin[hit].argmax(axis=1)
        nrm = np.zeros((hit.sum(), 3))
        nrm[np.arange(len(axis)), axis] = -np.sign(dirs[hit][np.arange(len(axis)), axis])
        best_t[hit] = t_in[hit]
        prim[hit] = i
        normal[hit] = nrm
    return best_t, prim, normal


def _shade(scene: SyntheticScene, points, prim, normal):
    lambert = 0.55 + 0.45 * np.clip(normal @ _LIGHT, 0.0, 1.0)
    return np.clip(scene.albedo(points, prim) * lambert[:, None], 0.0, 1.0)


def oracle_render(scene: SyntheticScene, cam: Camera):
    """Exact image and camera-depth map of ``scene`` seen from ``cam``."""
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    origin, dirs, cos = pixel_rays(cam, u.reshape(-1), v.reshape(-1))
    t, prim, normal = _hit_scene(scene, origin, dirs)
    hit = np.isfinite(t)
    image = np.tile(scene.background, (len(t), 1))
    depth = np.full(len(t), float(scene.t_far))
    pts = origin + t[hit, None] * dirs[hit]
    image[hit] = _shade(scene, pts, prim[hit], normal[hit])
    depth[hit] = t[hit] * cos[hit]
    return image.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width)


def _place_boxes(rng, count):
    boxes: list[Box] = []
    tries = 0
    while len(boxes) < count and tries < 1000:
        tries += 1
        size = rng.uniform(0.25, 0.55, size=2)
        center = rng.uniform(-0.75 + size / 2, 0.75 - size / 2)
        lo2, hi2 = center - size / 2, center + size / 2
        if any(np.all(lo2 < b.hi[:2] + 0.05) and np.all(b.lo[:2] - 0.05 < hi2) for b in boxes):
            continue
        height = rng.uniform(0.12, 0.45)
        boxes.append(Box(np.array([*lo2, 0.0]), np.array([*hi2, height]),
                         rng.uniform(0.25, 0.9, size=3), rng.uniform(-0.1, 0.1, size=3)))
    return boxes


def synth_scene(seed: int = 0, n_views: int = 4, resolution: int = 64, *,
                n_points: int = 1000, noise_fraction: float = 0.2, noise_amplitude: float = 0.05):
    """Deterministic synthetic scene, its dataset and a surface point cloud.

    Cameras sit on an arc above the ground plane, sweeping from near-nadir to
    oblique. Three evenly spaced views form the training split; the rest are
    held out. The point cloud samples visible surface points from the
    training views; ``noise_fraction`` of them carry uniform color noise.
    """
    if not 16 <= resolution <= 512:
        raise ValueError(f"resolution must lie in [16, 512], got {resolution}")
    if n_views < 4:
        raise ValueError("need at least 4 views (3 train + 1 test)")
    rng = np.random.default_rng(seed)
    boxes = _place_boxes(rng, int(rng.integers(3, 9)))
    waves = np.column_stack([
        rng.uniform(0.05, 0.15, 3), rng.uniform(0.5, 1.5, 3),
        rng.uniform(0.5, 1.5, 3), rng.uniform(0, 2 * np.pi, 3)])
    scene = SyntheticScene(
        boxes=boxes, ground_color=rng.uniform(0.3, 0.6, size=3), ground_waves=waves,
        bbox=np.array([[-_GROUND_HALF, -_GROUND_HALF, -0.05],
                       [_GROUND_HALF, _GROUND_HALF, 0.6]]))

    f = 1.1 * resolution
    K = Intrinsics(f, f, resolution / 2, resolution / 2, resolution, resolution)
    cameras = []
    for i in range(n_views):
        s = i / (n_views - 1)
        azim = np.radians(-60.0 + 120.0 * s)
        elev = np.radians(80.0 - 25.0 * s)
        eye = 3.0 * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
        cameras.append(Camera(K, look_at(eye, (0.0, 0.0, 0.1))))

    images, depths = [], []
    for cam in cameras:
        img, dm = oracle_render(scene, cam)
        images.append(np.round(img * 255.0).astype(np.uint8) / 255.0)
        depths.append(dm)
    scene.depths = depths
    train_ids = sorted({int(round(x)) for x in np.linspace(0, n_views - 1, 3)})
    test_ids = [i for i in range(n_views) if i not in train_ids]
    dataset = SceneDataset(cameras, images, train_ids, test_ids, scene.bbox, scene.background)
    cloud = _sample_cloud(scene, [cameras[i] for i in train_ids], rng,
                          n_points, noise_fraction, noise_amplitude)
    return dataset, cloud, scene


def _sample_cloud(scene, cams, rng, n_points, noise_fraction, noise_amplitude):
    pts, cols = [], []
    for cam in cams:
        v, u = np.mgrid[0:cam.height, 0:cam.width]
        origin, dirs, _ = pixel_rays(cam, u.reshape(-1), v.reshape(-1))
        t, prim, normal = _hit_scene(scene, origin, dirs)
        hit = np.isfinite(t)
        p = origin + t[hit, None] * dirs[hit]
        pts.append(p)
        cols.append(_shade(scene, p, prim[hit], normal[hit]))
    pts, cols = np.concatenate(pts), np.concatenate(cols)
    pick = np.sort(rng.choice(len(pts), size=min(n_points, len(pts)), replace=False))
    pts, cols = pts[pick], cols[pick].copy()
    noisy = rng.random(len(pts)) < noise_fraction
    noise = rng.uniform(-noise_amplitude, noise_amplitude, size=cols.shape)
    cols[noisy] = np.clip(cols[noisy] + noise[noisy], 0.0, 1.0)
    # match what a CSV round trip yields
    cols = (cols * 255.0) / 255.0
    return PointCloud(pts, cols)
