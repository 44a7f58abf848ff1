# Synthetic scene, point cloud and the keypoint anchors built from it.
import numpy as np

from tridf.losses import build_anchors
from tridf.scene import synth_scene

ds, cloud, scene = synth_scene(seed=0, n_views=4, resolution=64)
print("views:", len(ds.cameras), "train:", ds.train_ids, "test:", ds.test_ids)
print("bbox:", ds.bbox.round(3).tolist(), "extent:", round(ds.extent, 3))
print("cloud points:", len(cloud))

# Roughly half of every image is background, the rays there miss all geometry.
for i, d in enumerate(scene.depths):
    print(f"view {i}: {np.mean(d >= 20.0):.0%} background pixels")

# Each cloud point projects into the train views it is seen from.
# Its weight measures how well the views agree on its color.
train_cams = [ds.cameras[i] for i in ds.train_ids]
train_imgs = [ds.images[i] for i in ds.train_ids]
anchors = build_anchors(cloud, train_cams, train_imgs, ds.train_ids)
print("anchors:", len(anchors), "from", len(np.unique(anchors.point_index)), "points")
print("weight quartiles:", np.quantile(anchors.weight, [0.25, 0.5, 0.75]).round(3))

# A wrong color drives a point's weight down.
cloud.colors[:] = 1.0 - cloud.colors
flipped = build_anchors(cloud, train_cams, train_imgs, ds.train_ids)
print("median weight, inverted colors:", np.median(flipped.weight).round(3))
