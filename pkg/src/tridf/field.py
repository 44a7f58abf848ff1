"""Hybrid radiance field: triplane color branch plus an image-conditioned density MLP.

Color comes from three orthogonal feature planes decoded by small MLPs with a
spherical-harmonic view-direction input. Density comes from an MLP over
positionally encoded coordinates concatenated with features sampled from the
training images, so it depends on the training views only.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .camera import Camera, project_points
from .scene import SceneDataset, camera_from_json, camera_to_json

__all__ = [
    "FieldConfig", "TriDF", "triplane_sample", "positional_encode", "sh_encode",
    "extract_reference_features", "aggregate_reference", "density_field",
    "color_head", "normalize_points", "mlp", "bilinear_sample",
]

PLANE_AXES = {"xy": (0, 1), "yz": (1, 2), "zx": (2, 0)}
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass
class FieldConfig:
    plane_res: int = 64
    plane_channels: int = 8
    density_depth: int = 4
    density_width: int = 128
    base_depth: int = 2
    base_width: int = 128
    base_out: int = 16
    color_depth: int = 4
    color_width: int = 128
    fm_dim: int = 15
    pe_freqs: int = 6
    ref_channels: int = 64
    sigma_bias: float = -1.0
    plane_init_std: float = 0.1
    feature_seed: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown field config keys: {sorted(unknown)}")
        return cls(**d)


# -- triplane -------------------------------------------------------------


def triplane_sample(planes: dict[str, Tensor], x_norm: Tensor | np.ndarray) -> Tensor:
    """Bilinear triplane lookup, features concatenated in XY, YZ, ZX order.

    Each plane has shape (R, R, C); texel ``[i, j]`` sits at normalized
    coordinates ``(-1 + 2i/(R-1), -1 + 2j/(R-1))`` along the plane's two
    axes. Differentiable in both the plane values and ``x_norm``.
    """
    tape = next(iter(planes.values())).tape
    if not isinstance(x_norm, Tensor):
        x_norm = tape.const(np.atleast_2d(x_norm))
    xv = x_norm.value
    if xv.ndim != 2 or xv.shape[1] != 3:
        raise ad.ShapeError(f"x_norm must be (P, 3), got {xv.shape}")
    if np.any(np.abs(xv) > 1.0):
        raise ValueError("triplane_sample: coordinates outside [-1, 1]^3")
    n = xv.shape[0]
    out = []
    for key, (a, b) in PLANE_AXES.items():
        plane = planes[key]
        R, _, C = plane.shape
        table = ad.reshape(plane, (R * R, C))
        pos = (x_norm[:, [a, b]] + 1.0) * (0.5 * (R - 1))
        i0 = np.clip(np.floor(pos.value), 0, R - 2)
        frac = pos - i0
        fa, fb = frac[:, 0:1], frac[:, 1:2]
        ga, gb = 1.0 - fa, 1.0 - fb
        w = ad.concat([ga * gb, ga * fb, fa * gb, fa * fb], axis=0)  # (4P, 1)
        ia, ib = i0[:, 0].astype(np.intp), i0[:, 1].astype(np.intp)
        idx = np.concatenate([ia * R + ib, ia * R + ib + 1, (ia + 1) * R + ib, (ia + 1) * R + ib + 1])
        corners = ad.gather(table, idx) * w
        out.append(ad.sum(ad.reshape(corners, (4, n, C)), axis=0))
    return ad.concat(out, axis=1)


def normalize_points(x: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    """Affine map of the bounding box onto [-1, 1]^3."""
    lo, hi = bbox
    return 2.0 * (np.asarray(x) - lo) / (hi - lo) - 1.0


# -- encodings ------------------------------------------------------------


def positional_encode(x: np.ndarray, L: int = 6) -> np.ndarray:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(L):
        arg = (2.0 ** k) * np.pi * x
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def sh_encode(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of degrees 0-3 (16 values) for unit directions."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-9):
        raise ValueError("sh_encode expects unit-length directions")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
        SH_C2[3] * x * z, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
        SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3 * yy),
    ], axis=-1)


# -- reference features ---------------------------------------------------


def _luminance(img):
    return img @ np.array([0.299, 0.587, 0.114])


def _upsample(a: np.ndarray, H: int, W: int) -> np.ndarray:
    if a.shape[:2] == (H, W):
        return a
    zoom = (H / a.shape[0], W / a.shape[1]) + (1,) * (a.ndim - 2)
    return ndimage.zoom(a, zoom, order=1, mode="nearest", grid_mode=True)


def extract_reference_features(images, seed: int = 0, channels: int = 64,
                               levels: int = 3) -> np.ndarray:
    """Frozen pixel-aligned features, shape (M, H, W, channels).

    Per pixel: RGB at each Gaussian-pyramid level, |d/dx| and |d/dy| of
    luminance at each level (central differences), and luminance. Pyramid
    levels are upsampled back to full resolution. The raw channels are
    lifted to ``channels`` by a fixed seeded matrix with orthonormal columns.
    """
    raw_dim = 3 * levels + 2 * levels + 1
    G = np.random.default_rng(seed).standard_normal((channels, raw_dim))
    if channels >= raw_dim:
        lift = np.linalg.qr(G)[0].T  # orthonormal columns of the (channels, raw) map
    else:
        lift = np.linalg.qr(G.T)[0]  # orthonormal rows instead
    maps = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        H, W, _ = img.shape
        rgb, grads = [], []
        level = img
        for k in range(levels):
            if k:
                level = ndimage.gaussian_filter(level, sigma=(1.0, 1.0, 0.0), mode="nearest")[::2, ::2]
            lum = _luminance(level)
            gy, gx = (np.gradient(lum, axis=ax) if lum.shape[ax] > 1 else np.zeros_like(lum)
                      for ax in (0, 1))
            rgb.append(_upsample(level, H, W))
            grads.append(_upsample(np.stack([np.abs(gx), np.abs(gy)], -1), H, W))
        raw = np.concatenate(rgb + grads + [_luminance(img)[..., None]], axis=-1)
        maps.append(raw @ lift)
    return np.stack(maps)


def bilinear_sample(fmap: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) map at continuous image coordinates (pixel centers at +0.5)."""
    H, W, C = fmap.shape
    x = np.clip(uv[:, 0] - 0.5, 0.0, W - 1.0)
    y = np.clip(uv[:, 1] - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(H - 2, 0))
    dx = min(1, W - 1)
    dy = min(1, H - 1) * W
    fx, fy = x - x0, y - y0
    i00 = y0 * W + x0
    idx = np.stack([i00, i00 + dx, i00 + dy, i00 + dy + dx], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    corners = fmap.reshape(H * W, C).take(idx, axis=0)  # (P, 4, C)
    return np.einsum("pk,pkc->pc", w, corners)


def aggregate_reference(x: np.ndarray, maps: np.ndarray, cameras: list[Camera]) -> np.ndarray:
    """Concatenated per-view features at the projections of world points ``x``.

    Views where a point falls behind the camera or off the image contribute
    zeros. Output shape (P, M * C).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    M, _, _, C = maps.shape
    out = np.zeros((len(x), M * C))
    for k, cam in enumerate(cameras):
        uv, _, vis = project_points(cam, x)
        if vis.any():
            out[vis, k * C:(k + 1) * C] = bilinear_sample(maps[k], uv[vis])
    return out


# -- MLPs -----------------------------------------------------------------


def _mlp_shapes(n_in, width, depth, n_out):
    dims = [n_in] + [width] * (depth - 1) + [n_out]
    return list(zip(dims[:-1], dims[1:]))


def mlp(params: dict[str, Tensor], prefix: str, h: Tensor, depth: int) -> Tensor:
    """Linear layers with relu between them; the last layer is linear."""
    for i in range(depth):
        h = ad.linear(h, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        if i < depth - 1:
            h = ad.relu(h)
    return h


def density_field(params: dict[str, Tensor], x_norm: np.ndarray, f_ref: np.ndarray,
                  cfg: FieldConfig) -> tuple[Tensor, Tensor]:
    """Density ``softplus(raw + sigma_bias)`` and auxiliary features for each point."""
    tape = next(iter(params.values())).tape
    inp = tape.const(np.concatenate([positional_encode(x_norm, cfg.pe_freqs), f_ref], axis=-1))
    out = mlp(params, "density", inp, cfg.density_depth)
    sigma = ad.softplus(out[:, 0] + cfg.sigma_bias)
    return sigma, out[:, 1:]


def color_head(params: dict[str, Tensor], f_tri: Tensor, f_m: Tensor, sh: np.ndarray,
               cfg: FieldConfig) -> Tensor:
    f_base = mlp(params, "base", ad.concat([f_tri, f_m], axis=1), cfg.base_depth)
    h = ad.concat([f_base, f_base.tape.const(sh)], axis=1)
    return ad.sigmoid(mlp(params, "color", h, cfg.color_depth))


# -- model ----------------------------------------------------------------


def init_params(cfg: FieldConfig, n_ref_views: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    R, C = cfg.plane_res, cfg.plane_channels
    params = {f"plane.{k}": rng.normal(0.0, cfg.plane_init_std, (R, R, C)) for k in PLANE_AXES}
    n_pe = 3 + 6 * cfg.pe_freqs
    groups = {
        "density": _mlp_shapes(n_pe + n_ref_views * cfg.ref_channels, cfg.density_width,
                               cfg.density_depth, 1 + cfg.fm_dim),
        "base": _mlp_shapes(3 * C + cfg.fm_dim, cfg.base_width, cfg.base_depth, cfg.base_out),
        "color": _mlp_shapes(cfg.base_out + 16, cfg.color_width, cfg.color_depth, 3),
    }
    for prefix, shapes in groups.items():
        for i, (n_in, n_out) in enumerate(shapes):
            bound = np.sqrt(6.0 / n_in)
            params[f"{prefix}.{i}.W"] = rng.uniform(-bound, bound, (n_in, n_out))
            params[f"{prefix}.{i}.b"] = np.zeros(n_out)
    # the raw density output starts at exactly zero so sigma = softplus(sigma_bias)
    params[f"density.{cfg.density_depth - 1}.W"][:, 0] = 0.0
    return params


class TriDF:
    """Parameters plus the frozen reference-view data needed to evaluate the field."""

    def __init__(self, config: FieldConfig, params: dict[str, np.ndarray], ref_maps: np.ndarray,
                 ref_cameras: list[Camera], bbox: np.ndarray, background: np.ndarray):
        self.config = config
        self.params = params
        self.ref_maps = ref_maps
        self.ref_cameras = list(ref_cameras)
        self.bbox = np.asarray(bbox, dtype=np.float64)
        self.background = np.asarray(background, dtype=np.float64)

    @classmethod
    def initialize(cls, config: FieldConfig, dataset: SceneDataset) -> "TriDF":
        train_imgs = [dataset.images[i] for i in dataset.train_ids]
        maps = extract_reference_features(train_imgs, config.feature_seed, config.ref_channels)
        return cls(config, init_params(config, len(dataset.train_ids)), maps,
                   [dataset.cameras[i] for i in dataset.train_ids], dataset.bbox, dataset.background)

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.param(name, value) for name, value in self.params.items()}

    def planes(self, tensors: dict[str, Tensor]) -> dict[str, Tensor]:
        return {k: tensors[f"plane.{k}"] for k in PLANE_AXES}

    def density(self, tensors: dict[str, Tensor], x: np.ndarray):
        """Density and auxiliary features at world points inside the bbox."""
        x_norm = np.clip(normalize_points(x, self.bbox), -1.0, 1.0)
        f_ref = aggregate_reference(x, self.ref_maps, self.ref_cameras)
        return density_field(tensors, x_norm, f_ref, self.config)

    def color(self, tensors: dict[str, Tensor], x: np.ndarray, f_m: Tensor, sh: np.ndarray) -> Tensor:
        x_norm = np.clip(normalize_points(x, self.bbox), -1.0, 1.0)
        f_tri = triplane_sample(self.planes(tensors), x_norm)
        return color_head(tensors, f_tri, f_m, sh, self.config)

    def sigma_at(self, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Density only, without recording anything."""
        tape = Tape(record=False)
        tensors = self.bind(tape)
        return np.concatenate([self.density(tensors, x[i:i + chunk])[0].value
                               for i in range(0, len(x), chunk)]) if len(x) else np.zeros(0)

    def copy(self) -> "TriDF":
        return TriDF(FieldConfig(**asdict(self.config)),
                     {k: v.copy() for k, v in self.params.items()}, self.ref_maps,
                     self.ref_cameras, self.bbox, self.background)

    # -- checkpoints ------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        """Write a deterministic ``.npz`` (fixed zip timestamps, sorted entries)."""
        meta = {
            "config": asdict(self.config),
            "ref_cameras": [camera_to_json(c) for c in self.ref_cameras],
            "extra": extra or {},
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays["ref_maps"] = self.ref_maps
        arrays["bbox"] = self.bbox
        arrays["background"] = self.background
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())

    @classmethod
    def load(cls, path) -> "TriDF":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing checkpoint: {path}")
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
            model = cls(FieldConfig.from_dict(meta["config"]), params, z["ref_maps"],
                        [camera_from_json(c) for c in meta["ref_cameras"]],
                        z["bbox"], z["background"])
        model.meta_extra = meta.get("extra", {})
        return model

    def same_as(self, other: "TriDF") -> bool:
        return (asdict(self.config) == asdict(other.config)
                and self.params.keys() == other.params.keys()
                and all(np.array_equal(v, other.params[k]) for k, v in self.params.items())
                and np.array_equal(self.ref_maps, other.ref_maps)
                and self.ref_cameras == other.ref_cameras
                and np.array_equal(self.bbox, other.bbox)
                and np.array_equal(self.background, other.background))
