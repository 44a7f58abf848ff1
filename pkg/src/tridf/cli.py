"""``tridf`` command line: synth, train, render, eval."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .field import TriDF
from .metrics import psnr, ssim
from .render import RenderSettings, render_image
from .scene import (SceneIOError, camera_from_json, load_point_cloud, load_scene, save_scene,
                    synth_scene, write_png)
from .train import TrainConfig, train

log = logging.getLogger("tridf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _threads(value: str | None) -> int:
    raw = value if value is not None else os.environ.get("TRIDF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def _load_model(model_dir) -> tuple[TriDF, RenderSettings]:
    path = Path(model_dir)
    if path.is_dir():
        path = path / "model.npz"
    try:
        model = TriDF.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise RuntimeError(f"cannot load checkpoint {path}: {exc}") from None
    settings = RenderSettings(**model.meta_extra.get("render", {}))
    return model, settings


def cmd_synth(args) -> int:
    if not 16 <= args.resolution <= 512:
        raise UsageError(f"--resolution must lie in [16, 512], got {args.resolution}")
    if args.views < 4:
        raise UsageError("--views must be at least 4")
    dataset, cloud, scene = synth_scene(args.seed, args.views, args.resolution)
    save_scene(dataset, args.out, cloud, scene.depths)
    print(f"wrote {len(dataset.images)} views and {len(cloud)} points to {args.out}")
    return EXIT_OK


def _read_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None


def cmd_train(args) -> int:
    config = _read_config(args.config) if args.config else TrainConfig()
    dataset = load_scene(args.scene)
    cloud_path = Path(args.scene) / "points.csv"
    cloud = load_point_cloud(cloud_path) if cloud_path.is_file() else None
    if cloud is None and config.depth_stage_iters and config.lambda_depth:
        raise SceneIOError(f"depth-guided stage needs {cloud_path}")
    _, rows = train(dataset, config, cloud, out_dir=args.out)
    final = next((r for r in reversed(rows) if r["psnr_test"] is not None), None)
    if final is not None:
        print(f"test PSNR {final['psnr_test']:.3f} dB  SSIM {final['ssim_test']:.4f}")
    print(f"checkpoint: {Path(args.out) / 'model.npz'}")
    return EXIT_OK


def _write_depth_png(path: Path, depth: np.ndarray) -> None:
    lo, hi = float(depth.min()), float(depth.max())
    scale = (depth - lo) / (hi - lo) if hi > lo else np.zeros_like(depth)
    Image.fromarray(np.round(scale * 65535.0).astype(np.uint16)).save(path)
    Path(str(path) + ".json").write_text(json.dumps({"min": lo, "max": hi}))


def cmd_render(args) -> int:
    model, settings = _load_model(args.model)
    try:
        entry = json.loads(Path(args.pose).read_text())
        if isinstance(entry, list) and len(entry) == 1:
            entry = entry[0]
        cam = camera_from_json(entry)
    except (OSError, json.JSONDecodeError, ValueError, AttributeError) as exc:
        raise RuntimeError(f"cannot read pose {args.pose}: {exc}") from None
    img, depth, _, _ = render_image(model, cam, settings)
    write_png(args.out, img)
    if args.depth:
        _write_depth_png(Path(args.depth), depth)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, settings = _load_model(args.model)
    dataset = load_scene(args.scene)
    ref = model.ref_cameras[0]
    for i in dataset.test_ids:
        cam = dataset.cameras[i]
        if (cam.width, cam.height) != (ref.width, ref.height):
            raise RuntimeError(f"view {i} is {cam.width}x{cam.height} but the model was "
                               f"trained on {ref.width}x{ref.height} images")
    rows = []
    for i in dataset.test_ids:
        img = render_image(model, dataset.cameras[i], settings)[0]
        rows.append((str(i), psnr(dataset.images[i], img), ssim(dataset.images[i], img)))
    if rows:
        rows.append(("mean", float(np.mean([r[1] for r in rows])),
                     float(np.mean([r[2] for r in rows]))))
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim"])
        for view, p, s in rows:
            w.writerow([view, repr(p), repr(s)])
    if rows:
        print(f"mean PSNR {rows[-1][1]:.3f} dB  SSIM {rows[-1][2]:.4f} over {len(rows) - 1} views")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tridf", description=__doc__)
    parser.add_argument("--threads", default=None,
                        help="BLAS threads (default: $TRIDF_THREADS or 1)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model to a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one pose from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score a checkpoint on a scene's test views")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        threads = _threads(args.threads)
        with threadpool_limits(threads):
            return args.func(args)
    except UsageError as exc:
        print(f"tridf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every module error becomes exit 1
        print(f"tridf {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
