# Fit the desk configuration on the synthetic scene, then look at the result.
# Takes several minutes on one core.
import json
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from tridf.camera import interpolate_cameras
from tridf.render import OccupancyGrid, render_image
from tridf.scene import synth_scene, write_png
from tridf.train import TrainConfig, evaluate_views, train

here = Path(__file__).parent
out = here / "out"
config = TrainConfig.from_dict(json.loads((here / "desk_config.json").read_text()))
ds, cloud, _ = synth_scene(0, 4, 64)

with threadpool_limits(1):
    t0 = time.perf_counter()
    model, rows = train(ds, config, cloud, out_dir=out)
    print(f"trained {config.total_iters} iterations in {time.perf_counter() - t0:.0f}s")

    # Depth-guided stage first, smoothness stage after.
    for r in rows[::200]:
        print(r["iter"], f"{r['L_color']:.5f}", r["L_depth"], r["L_smooth"])

    settings = config.render
    for name, ids in (("train", ds.train_ids), ("test", ds.test_ids)):
        scores = evaluate_views(model, ds, ids, settings)
        print(name, "PSNR", np.round([p for p, _ in scores], 2), "SSIM", np.round([s for _, s in scores], 3))

    # Empty-space skipping on the trained field.
    grid = OccupancyGrid(model.bbox, 32, 0.01).update(model)
    cam = ds.cameras[ds.test_ids[0]]
    full = render_image(model, cam, settings)
    fast = render_image(model, cam, settings, grid=grid)
    print(f"empty cells {grid.empty_fraction:.0%}, evals per ray {full[3]:.1f} -> {fast[3]:.1f}, "
          f"max color change {np.abs(full[0] - fast[0]).max():.4f}")

    # A pose halfway between two training views.
    mid = interpolate_cameras(ds.cameras[ds.train_ids[0]], ds.cameras[ds.train_ids[1]], 0.5)
    img, depth, _, _ = render_image(model, mid, settings)
    write_png(out / "midway.png", img)
    print("midway depth range:", depth.min().round(3), depth.max().round(3))
