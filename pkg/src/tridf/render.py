"""Emission-absorption volume rendering of a :class:`~tridf.field.TriDF`.

Samples are stratified between the ray's entry and exit of the scene box.
Samples outside the box, or inside occupancy-grid cells marked empty, get
zero density and are never sent through the field networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .camera import Camera, Ray, ray_box_bounds, rays_through
from .field import TriDF, normalize_points, sh_encode

__all__ = [
    "RaySamples", "RenderOutput", "RenderSettings", "OccupancyGrid",
    "stratified_sample", "stratified_samples", "composite", "render_rays",
    "render_image", "render_patch", "patch_pixels", "occupancy_grid_update",
    "normalized_disparity",
]

DISPARITY_EPS = 1e-6


@dataclass
class RaySamples:
    t: np.ndarray       # (..., N) ascending
    x: np.ndarray       # (..., N, 3)
    deltas: np.ndarray  # (..., N)


@dataclass
class RenderOutput:
    color: Tensor     # (R, 3)
    depth: Tensor     # (R,) expected ray distance, no background term
    weights: Tensor   # (R, N)
    opacity: Tensor   # (R,)
    residual: Tensor  # (R,) transmittance left after the last sample
    n_evals: int = 0  # field evaluations spent on these rays
    t_exit: np.ndarray | None = None  # (R,) where each ray leaves the box (far bound on a miss)

    def depth_with_exit(self) -> Tensor:
        """Depth that counts leftover transmittance as reaching ``t_exit``.

        Unlike ``depth`` this does not collapse to zero on empty rays, so
        disparities built from it stay bounded.
        """
        return self.depth + self.residual * self.t_exit


@dataclass
class RenderSettings:
    n_samples: int = 64
    near: float = 0.05
    far: float = 100.0


def stratified_samples(t_near, t_far, n: int, jitter: bool = False, rng=None):
    """Per-ray sample positions and spacings for (R,) bounds; returns (t, deltas)."""
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if n < 2:
        raise ValueError("need at least two samples per ray")
    if np.any(t_far - t_near < 1e-9):
        raise ValueError("degenerate ray bounds")
    span = (t_far - t_near)[..., None]
    offs = rng.random(t_near.shape + (n,)) if jitter else np.full(t_near.shape + (n,), 0.5)
    t = t_near[..., None] + span * (np.arange(n) + offs) / n
    deltas = np.empty_like(t)
    deltas[..., :-1] = np.diff(t, axis=-1)
    deltas[..., -1] = t_far - t[..., -1]
    return t, deltas


def stratified_sample(ray: Ray, n: int, jitter: bool = False, seed: int | None = None) -> RaySamples:
    rng = np.random.default_rng(seed) if jitter else None
    t, deltas = stratified_samples(ray.t_near, ray.t_far, n, jitter, rng)
    return RaySamples(t, ray.at(t), deltas)


def composite(colors, sigmas, deltas, t, background=None) -> RenderOutput:
    """Alpha-composite per-sample colors and densities along rays.

    ``colors`` is (R, N, 3), ``sigmas`` (R, N); ``deltas`` and ``t`` are
    constant arrays. Densities must be non-negative. When ``background`` is
    given it is weighted by the residual transmittance. Depth is the
    weight-averaged ``t`` without any background contribution.
    """
    if not isinstance(sigmas, Tensor):
        tape = colors.tape if isinstance(colors, Tensor) else Tape(record=False)
        sigmas = tape.const(sigmas)
    tape = sigmas.tape
    if not isinstance(colors, Tensor):
        colors = tape.const(colors)
    deltas, t = np.asarray(deltas, dtype=np.float64), np.asarray(t, dtype=np.float64)
    if sigmas.shape != deltas.shape or sigmas.shape != t.shape or colors.shape[:-1] != sigmas.shape:
        raise ad.ShapeError("composite: colors, sigmas, deltas and t disagree in shape")
    if np.any(sigmas.value < 0):
        raise ValueError("composite: negative density")
    tau = sigmas * deltas
    cum = ad.cumsum(tau, axis=-1)
    trans = ad.exp(-(cum - tau))
    alpha = 1.0 - ad.exp(-tau)
    w = trans * alpha
    n = sigmas.shape[-1]
    residual = ad.exp(-cum[..., n - 1])
    color = ad.sum(ad.reshape(w, w.shape + (1,)) * colors, axis=-2)
    if background is not None:
        color = color + ad.reshape(residual, residual.shape + (1,)) * np.asarray(background)
    depth = ad.sum(w * t, axis=-1)
    return RenderOutput(color, depth, w, ad.sum(w, axis=-1), residual)


class OccupancyGrid:
    """Binary grid over the scene box; cells whose density is below ``threshold`` are empty."""

    def __init__(self, bbox, resolution: int = 32, threshold: float = 0.01, dilate: int = 1):
        self.bbox = np.asarray(bbox, dtype=np.float64)
        self.resolution = resolution
        self.threshold = threshold
        self.dilate = dilate
        self.occupied = np.ones((resolution,) * 3, dtype=bool)

    def cell_centers(self) -> np.ndarray:
        r = self.resolution
        c = (np.arange(r) + 0.5) / r
        g = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
        lo, hi = self.bbox
        return lo + g * (hi - lo)

    def update(self, model: TriDF) -> "OccupancyGrid":
        sigma = model.sigma_at(self.cell_centers())
        occ = (sigma >= self.threshold).reshape((self.resolution,) * 3)
        for _ in range(self.dilate):
            grown = occ.copy()
            for ax in range(3):
                for s in (-1, 1):
                    shifted = np.roll(occ, s, axis=ax)
                    edge = [slice(None)] * 3
                    edge[ax] = 0 if s == 1 else -1
                    shifted[tuple(edge)] = False
                    grown |= shifted
            occ = grown
        self.occupied = occ
        return self

    def query(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bbox
        idx = np.floor((x - lo) / (hi - lo) * self.resolution).astype(np.intp)
        idx = np.clip(idx, 0, self.resolution - 1)
        return self.occupied[idx[..., 0], idx[..., 1], idx[..., 2]]

    @property
    def empty_fraction(self) -> float:
        return 1.0 - float(self.occupied.mean())


def occupancy_grid_update(model: TriDF, grid_res: int = 32, threshold: float = 0.01,
                          dilate: int = 1) -> OccupancyGrid:
    return OccupancyGrid(model.bbox, grid_res, threshold, dilate).update(model)


def render_rays(model: TriDF, tensors: dict[str, Tensor], origins, dirs,
                settings: RenderSettings, jitter: bool = False, rng=None,
                grid: OccupancyGrid | None = None) -> RenderOutput:
    """Render rays with origins (R, 3) or (3,) and unit directions (R, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    R, N = len(dirs), settings.n_samples
    t_near, t_far, hit = ray_box_bounds(origins, dirs, *model.bbox, settings.near, settings.far)
    t_near = np.where(hit, t_near, settings.near)
    t_far = np.where(hit, t_far, settings.near + 1.0)
    t, deltas = stratified_samples(t_near, t_far, N, jitter, rng)
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    inside = np.all(np.abs(normalize_points(x, model.bbox)) <= 1.0 + 1e-9, axis=-1)
    active = inside & hit[:, None]
    if grid is not None:
        active &= grid.query(x)
    flat = np.flatnonzero(active.reshape(-1))
    xs = x.reshape(-1, 3)[flat]
    sigma_a, f_m = model.density(tensors, xs)
    sh = sh_encode(np.repeat(dirs, N, axis=0)[flat])
    rgb_a = model.color(tensors, xs, f_m, sh)
    sigma = ad.reshape(ad.scatter_rows(sigma_a, flat, R * N), (R, N))
    rgb = ad.reshape(ad.scatter_rows(rgb_a, flat, R * N), (R, N, 3))
    out = composite(rgb, sigma, deltas, t, model.background)
    out.n_evals = len(flat)
    out.t_exit = np.where(hit, t_far, settings.far)
    return out


def render_image(model: TriDF, cam: Camera, settings: RenderSettings, chunk: int = 2048,
                 grid: OccupancyGrid | None = None):
    """Deterministic full-frame render: (image, camera-depth, opacity, evals per ray)."""
    tape = Tape(record=False)
    tensors = model.bind(tape)
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    origin, dirs, cos = rays_through(cam, u.reshape(-1) + 0.5, v.reshape(-1) + 0.5)
    colors, depths, opac = [], [], []
    evals = 0
    for i in range(0, len(dirs), chunk):
        out = render_rays(model, tensors, origin, dirs[i:i + chunk], settings, grid=grid)
        colors.append(out.color.value)
        depths.append(out.depth.value * cos[i:i + chunk])
        opac.append(out.opacity.value)
        evals += out.n_evals
    shape = (cam.height, cam.width)
    return (np.concatenate(colors).reshape(shape + (3,)), np.concatenate(depths).reshape(shape),
            np.concatenate(opac).reshape(shape), evals / len(dirs))


def patch_pixels(cam: Camera, center, size: int = 16, stride: int = 4):
    """Integer pixel grid (v, u), each (size, size), of a strided patch around ``center``."""
    cu, cv = (int(c) for c in center)
    half = (size - 1) * stride // 2
    offs = np.arange(size) * stride - half
    u0, v0 = cu + offs[0], cv + offs[0]
    u1, v1 = cu + offs[-1], cv + offs[-1]
    if u0 < 0 or v0 < 0 or u1 >= cam.width or v1 >= cam.height:
        raise ValueError(f"patch footprint [{u0}, {u1}] x [{v0}, {v1}] leaves the image")
    v, u = np.meshgrid(cv + offs, cu + offs, indexing="ij")
    return v, u


def render_patch(model: TriDF, tensors: dict[str, Tensor], cam: Camera, center,
                 settings: RenderSettings, size: int = 16, stride: int = 4,
                 jitter: bool = False, rng=None, grid: OccupancyGrid | None = None):
    """Render a strided patch; returns (rgb (S, S, 3), normalized disparity (S, S), output)."""
    v, u = patch_pixels(cam, center, size, stride)
    origin, dirs, _ = rays_through(cam, u.reshape(-1) + 0.5, v.reshape(-1) + 0.5)
    out = render_rays(model, tensors, origin, dirs, settings, jitter, rng, grid)
    return ad.reshape(out.color, (size, size, 3)), normalized_disparity(out.depth_with_exit(), size), out


def normalized_disparity(depth: Tensor, size: int) -> Tensor:
    """``1 / (depth + eps)`` divided by its mean, reshaped to (size, size)."""
    disp = 1.0 / (depth + DISPARITY_EPS)
    return ad.reshape(disp / ad.mean(disp), (size, size))
