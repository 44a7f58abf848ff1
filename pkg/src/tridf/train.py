"""Two-stage optimisation: depth-anchored first, edge-aware smoothness after."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .camera import interpolate_cameras, rays_through
from .field import FieldConfig, TriDF
from .losses import (DEPTH_GUIDED, SMOOTH, Anchors, LossReport, build_anchors, color_loss,
                     depth_loss, smoothness_loss, total_loss)
from .metrics import psnr, ssim
from .render import (OccupancyGrid, RenderSettings, normalized_disparity, patch_pixels,
                     render_image, render_rays)
from .scene import PointCloud, SceneDataset

__all__ = ["TrainConfig", "Adam", "train_step", "train", "evaluate_views",
           "LOG_COLUMNS", "lambda_schedule"]

log = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "L_color", "L_depth", "L_smooth", "L_total", "psnr_test", "ssim_test",
               "elapsed_s"]


@dataclass
class TrainConfig:
    total_iters: int = 2000
    depth_stage_iters: int | None = None  # None -> total_iters // 3
    ray_batch: int = 1024
    n_samples: int = 64
    anchors_per_iter: int = 64
    patch_size: int = 16
    patch_stride: int = 4
    patch_novel_fraction: float = 0.5
    learning_rate: float = 1e-4
    plane_lr_scale: float = 1.0
    weight_decay: float = 0.01
    lambda_depth: float = 0.001
    lambda_smooth: float = 1.0
    near: float = 0.05
    far: float = 100.0
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    occupancy: bool = False
    occupancy_res: int = 32
    occupancy_threshold: float = 0.01
    occupancy_every: int = 100
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if isinstance(self.field, dict):
            self.field = FieldConfig.from_dict(self.field)
        if self.depth_stage_iters is None:
            self.depth_stage_iters = self.total_iters // 3
        if self.total_iters < 0 or not 0 <= self.depth_stage_iters <= max(self.total_iters, 0):
            raise ValueError("need 0 <= depth_stage_iters <= total_iters")
        for name in ("ray_batch", "n_samples", "anchors_per_iter", "patch_size", "patch_stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def render(self) -> RenderSettings:
        return RenderSettings(self.n_samples, self.near, self.far)


def lambda_schedule(it: int, config: TrainConfig) -> tuple[str, float, float]:
    """Stage name and (depth, smoothness) weights in effect at iteration ``it``."""
    if it < config.depth_stage_iters:
        return DEPTH_GUIDED, config.lambda_depth, 0.0
    return SMOOTH, 0.0, config.lambda_smooth


class Adam:
    """Adam with bias correction and decoupled weight decay on MLP weight matrices."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, lr_scale: dict[str, float] | None = None):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.lr_scale = lr_scale or {}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    @staticmethod
    def decays(name: str) -> bool:
        return name.endswith(".W")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name in sorted(grads):
            if not np.isfinite(grads[name]).all():
                raise ad.NonFiniteError(f"non-finite gradient for parameter group {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name in sorted(params):
            g = grads[name]
            p = params[name]
            lr = self.lr * self.lr_scale.get(name.split(".")[0], 1.0)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.wd and self.decays(name):
                p -= lr * self.wd * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    model: TriDF
    optimizer: Adam
    rng: np.random.Generator
    anchors: Anchors | None = None
    grid: OccupancyGrid | None = None


def _sample_pixel_rays(dataset: SceneDataset, n: int, rng):
    views = dataset.train_ids
    H, W = dataset.cameras[views[0]].height, dataset.cameras[views[0]].width
    flat = rng.integers(0, len(views) * H * W, size=n)
    k, rem = np.divmod(flat, H * W)
    v, u = np.divmod(rem, W)
    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    target = np.empty((n, 3))
    for j, vid in enumerate(views):
        m = k == j
        if m.any():
            cam = dataset.cameras[vid]
            o, d, _ = rays_through(cam, u[m] + 0.5, v[m] + 0.5)
            origins[m], dirs[m] = o, d
            target[m] = dataset.images[vid][v[m], u[m]]
    return origins, dirs, target


def _sample_anchor_rays(dataset: SceneDataset, anchors: Anchors, n: int, rng):
    idx = np.sort(rng.choice(len(anchors), size=min(n, len(anchors)), replace=False))
    sub = anchors.subset(idx)
    origins = np.empty((len(idx), 3))
    dirs = np.empty((len(idx), 3))
    cos = np.empty(len(idx))
    for vid in np.unique(sub.view_id):
        m = sub.view_id == vid
        o, d, c = rays_through(dataset.cameras[vid], sub.uv[m, 0], sub.uv[m, 1])
        origins[m], dirs[m], cos[m] = o, d, c
    return origins, dirs, cos, sub


def _sample_patch_rays(dataset: SceneDataset, config: TrainConfig, rng):
    views = dataset.train_ids
    cam = dataset.cameras[views[int(rng.integers(len(views)))]]
    if rng.random() < config.patch_novel_fraction:
        a, b = rng.choice(len(views), size=2, replace=False)
        cam = interpolate_cameras(dataset.cameras[views[a]], dataset.cameras[views[b]], rng.random())
    half = (config.patch_size - 1) * config.patch_stride // 2
    span = (config.patch_size - 1) * config.patch_stride
    if span >= min(cam.width, cam.height):
        raise ValueError("patch footprint does not fit in the image")
    cu = int(rng.integers(half, cam.width - (span - half)))
    cv = int(rng.integers(half, cam.height - (span - half)))
    v, u = patch_pixels(cam, (cu, cv), config.patch_size, config.patch_stride)
    o, d, _ = rays_through(cam, u.reshape(-1) + 0.5, v.reshape(-1) + 0.5)
    return np.broadcast_to(o, d.shape), d


def train_step(state: TrainState, dataset: SceneDataset, it: int, config: TrainConfig) -> LossReport:
    """One optimisation step; returns the loss report for ``it``."""
    model, rng = state.model, state.rng
    stage, lam1, lam2 = lambda_schedule(it, config)
    origins, dirs, target = _sample_pixel_rays(dataset, config.ray_batch, rng)
    parts = [(origins, dirs)]
    n_pix = len(dirs)
    anchor_rays = patch_rays = None
    if lam1:
        if state.anchors is None or len(state.anchors) == 0:
            raise RuntimeError("depth-guided stage requires point-cloud anchors")
        anchor_rays = _sample_anchor_rays(dataset, state.anchors, config.anchors_per_iter, rng)
        parts.append(anchor_rays[:2])
    if lam2:
        patch_rays = _sample_patch_rays(dataset, config, rng)
        parts.append(patch_rays)
    all_o = np.concatenate([np.broadcast_to(o, d.shape) for o, d in parts])
    all_d = np.concatenate([d for _, d in parts])

    tape = Tape()
    tensors = model.bind(tape)
    out = render_rays(model, tensors, all_o, all_d, config.render, jitter=True, rng=rng,
                      grid=state.grid)
    L_color = color_loss(out.color[:n_pix], target)
    L_depth = L_smooth = None
    start = n_pix
    if anchor_rays is not None:
        n_a = len(anchor_rays[1])
        z = out.depth[start:start + n_a] * anchor_rays[2]
        L_depth = depth_loss(z, anchor_rays[3].depth, anchor_rays[3].weight)
        start += n_a
    if patch_rays is not None:
        S = config.patch_size
        sl = slice(start, start + S * S)
        rgb = ad.reshape(out.color[sl], (S, S, 3))
        depth = out.depth[sl] + out.residual[sl] * out.t_exit[sl]
        L_smooth = smoothness_loss(normalized_disparity(depth, S), rgb)
    total, report = total_loss(L_color, L_depth, L_smooth, stage, weights=(lam1, lam2))
    grads = tape.backward(total)
    state.optimizer.step(model.params, grads)
    return report


def evaluate_views(model: TriDF, dataset: SceneDataset, ids, settings: RenderSettings,
                   grid: OccupancyGrid | None = None):
    """Per-view (psnr, ssim) of deterministic renders against the dataset images."""
    scores = []
    for i in ids:
        img = render_image(model, dataset.cameras[i], settings, grid=grid)[0]
        scores.append((psnr(dataset.images[i], img), ssim(dataset.images[i], img)))
    return scores


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _ckpt_extra(config: TrainConfig, iters: int) -> dict:
    return {"iters": iters, "render": {"n_samples": config.n_samples, "near": config.near,
                                       "far": config.far}}


def train(dataset: SceneDataset, config: TrainConfig, cloud: PointCloud | None = None,
          out_dir=None, model: TriDF | None = None):
    """Run ``config.total_iters`` steps; returns (model, log rows).

    With ``out_dir`` set, writes ``config.json``, ``metrics.csv`` and
    ``model.npz`` (also every ``checkpoint_every`` iterations).
    """
    model = model or TriDF.initialize(config.field, dataset)
    opt = Adam(model.params, config.learning_rate, config.weight_decay,
               lr_scale={"plane": config.plane_lr_scale})
    state = TrainState(model, opt, np.random.default_rng(config.seed))
    if cloud is not None and config.depth_stage_iters > 0 and config.lambda_depth:
        state.anchors = build_anchors(cloud, [dataset.cameras[i] for i in dataset.train_ids],
                                      [dataset.images[i] for i in dataset.train_ids],
                                      dataset.train_ids)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
        fh = (out / "metrics.csv").open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    rows = []
    t0 = time.perf_counter()
    try:
        for it in range(config.total_iters):
            if config.occupancy and it % config.occupancy_every == 0 and it > 0:
                state.grid = OccupancyGrid(model.bbox, config.occupancy_res,
                                           config.occupancy_threshold).update(model)
            rep = train_step(state, dataset, it, config)
            p = s = None
            last = it == config.total_iters - 1
            if dataset.test_ids and ((config.eval_every and (it + 1) % config.eval_every == 0) or last):
                scores = evaluate_views(model, dataset, dataset.test_ids, config.render)
                p = float(np.mean([a for a, _ in scores]))
                s = float(np.mean([b for _, b in scores]))
                log.info("iter %d  L_color %.5f  test psnr %.2f ssim %.3f", it, rep.L_color, p, s)
            row = {"iter": it, "L_color": rep.L_color, "L_depth": rep.L_depth,
                   "L_smooth": rep.L_smooth, "L_total": rep.L_total, "psnr_test": p,
                   "ssim_test": s, "elapsed_s": time.perf_counter() - t0,
                   "lambda_depth": rep.lambda_depth, "lambda_smooth": rep.lambda_smooth}
            rows.append(row)
            if writer is not None:
                writer.writerow([it] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])
                if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                    fh.flush()
                    model.save(out / "model.npz", _ckpt_extra(config, it + 1))
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        model.save(out / "model.npz", _ckpt_extra(config, config.total_iters))
    return model, rows
