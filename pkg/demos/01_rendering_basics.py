# Rendering basics: cameras, compositing and gradients on a single ray.
import numpy as np

from tridf import autodiff as ad
from tridf.autodiff import Tape
from tridf.camera import Camera, Intrinsics, look_at, pixel_rays, project_points
from tridf.render import composite, stratified_samples

# A 64x64 camera three units up the z axis, looking at the origin.
cam = Camera(Intrinsics(70.0, 70.0, 32.0, 32.0, 64, 64), look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0]))
origin, dirs, cos = pixel_rays(cam, np.array([32, 10]), np.array([32, 50]))
print("ray through the center pixel:", dirs[0].round(4))

# Walking 2.5 units along a ray and projecting back lands on the pixel center.
uv, z, visible = project_points(cam, origin + 2.5 * dirs)
print("reprojected:", uv.round(9), "camera depth:", z.round(6), "visible:", visible)

# A slab of constant density 2 and color 0.5 on t in [0, 1].
# With samples at bin starts the quadrature is exact: 0.5 * (1 - e^-2).
n = 256
t = np.arange(n)[None] / n
out = composite(np.full((1, n, 3), 0.5), np.full((1, n), 2.0), np.full((1, n), 1 / n), t)
print("foreground color:", out.color.value[0, 0], "expected:", 0.5 * (1 - np.exp(-2)))
print("weights + residual:", out.weights.value.sum() + out.residual.value[0])

# The renderer itself uses bin midpoints, optionally jittered inside each bin.
t_mid, deltas = stratified_samples(np.array([2.0]), np.array([4.0]), 8)
print("midpoints:", t_mid.round(3))

# Gradients flow from a color loss back to the densities.
tape = Tape()
sigma = tape.param("sigma", np.full((1, 8), 0.5))
rgb = tape.const(np.tile(np.linspace(0, 1, 8)[None, :, None], (1, 1, 3)))
pixel = composite(rgb, sigma, deltas, t_mid, background=np.zeros(3)).color
loss = ad.mean(ad.square(pixel - 1.0))
print("d loss / d sigma:", tape.backward(loss)["sigma"].round(4))
