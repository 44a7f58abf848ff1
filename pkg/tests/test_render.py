import math

import numpy as np
import pytest

from tridf import autodiff as ad
from tridf.autodiff import Tape
from tridf.camera import Ray, ray_box_bounds, rays_through
from tridf.field import FieldConfig, TriDF
from tridf.render import (OccupancyGrid, RenderSettings, composite, normalized_disparity,
                          occupancy_grid_update, patch_pixels, render_image, render_patch, render_rays,
                          stratified_sample, stratified_samples)
from tridf.scene import synth_scene

SMALL = dict(plane_res=16, plane_channels=4, density_depth=2, density_width=16, base_depth=2,
             base_width=16, base_out=8, color_depth=2, color_width=16, fm_dim=7, pe_freqs=3,
             ref_channels=16)


@pytest.fixture(scope="module")
def scene():
    return synth_scene(2, 4, 24)


def model_with(scene, **kw):
    return TriDF.initialize(FieldConfig(**{**SMALL, **kw}), scene[0])


def const_ray(sigma, n, t0=0.0, t1=1.0, color=(0.5, 0.5, 0.5), bg=None):
    t, deltas = stratified_samples(np.array([t0]), np.array([t1]), n)
    sig = np.full((1, n), float(sigma))
    cols = np.tile(np.asarray(color, dtype=float), (1, n, 1))
    return composite(cols, sig, deltas, t, bg), t


def test_midpoints():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.0 + 1e-12, 1.0)
    s = stratified_sample(ray, 4)
    np.testing.assert_allclose(s.t, [0.125, 0.375, 0.625, 0.875], atol=1e-11)
    assert s.deltas[-1] == pytest.approx(1.0 - s.t[-1])


def test_jitter_stays_in_bins_and_is_seeded():
    rng = np.random.default_rng(0)
    t, _ = stratified_samples(np.zeros(10_000), np.ones(10_000), 8, jitter=True, rng=rng)
    bins = np.floor(t * 8)
    assert np.array_equal(bins, np.broadcast_to(np.arange(8), t.shape))
    assert np.all(np.diff(t, axis=1) > 0)
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.5, 3.0)
    assert np.array_equal(stratified_sample(ray, 16, True, 7).t, stratified_sample(ray, 16, True, 7).t)


def test_degenerate_bounds():
    with pytest.raises(ValueError):
        stratified_samples(np.array([1.0]), np.array([1.0]), 4)


def test_empty_space_gives_background():
    out, _ = const_ray(0.0, 16, bg=np.array([0.7, 0.7, 0.7]))
    np.testing.assert_array_equal(out.color.value, [[0.7, 0.7, 0.7]])
    assert out.depth.value[0] == 0.0 and out.opacity.value[0] == 0.0


def test_opaque_front_sample():
    t, deltas = stratified_samples(np.array([0.0]), np.array([1.0]), 8)
    sig = np.zeros((1, 8))
    sig[0, 0] = 50.0 / deltas[0, 0]
    cols = np.random.default_rng(0).random((1, 8, 3))
    out = composite(cols, sig, deltas, t)
    np.testing.assert_allclose(out.color.value[0], cols[0, 0] * (1 - math.exp(-50)), atol=1e-12)
    assert out.depth.value[0] == pytest.approx(t[0, 0], abs=1e-12)


@pytest.mark.parametrize("n", [2, 7, 64, 128])
def test_telescoping_closed_form(n):
    # samples at bin starts so the spacings tile [0, 1] exactly
    t = np.arange(n)[None] / n
    deltas = np.full((1, n), 1.0 / n)
    deltas[0, -1] = 1.0 - t[0, -1]
    out = composite(np.full((1, n, 3), 0.5), np.full((1, n), 2.0), deltas, t)
    expect = 0.5 * (1 - math.exp(-2.0))
    np.testing.assert_allclose(out.color.value[0], expect, rtol=0, atol=1e-12)
    assert expect == pytest.approx(0.4323324, abs=1e-7)


def test_weights_plus_residual_is_one():
    rng = np.random.default_rng(1)
    R, N = 10_000, 32
    t, deltas = stratified_samples(np.zeros(R), rng.uniform(0.5, 5, R), N, True, rng)
    sig = rng.exponential(2.0, size=(R, N)) * (rng.random((R, N)) < 0.7)
    out = composite(rng.random((R, N, 3)), sig, deltas, t)
    total = out.weights.value.sum(axis=1) + out.residual.value
    assert np.max(np.abs(total - 1.0)) <= 1e-12
    assert np.all(out.weights.value >= 0)
    assert np.all(out.depth.value <= out.opacity.value * t[:, -1] + deltas[:, -1] + 1e-12)


def test_order_matters():
    t, deltas = stratified_samples(np.array([0.0]), np.array([1.0]), 4)
    sig = np.array([[0.1, 3.0, 0.5, 8.0]])
    cols = np.random.default_rng(2).random((1, 4, 3))
    a = composite(cols, sig, deltas, t).color.value
    b = composite(cols[:, ::-1], sig[:, ::-1], deltas, t).color.value
    assert not np.allclose(a, b)


def test_negative_density_rejected():
    t, deltas = stratified_samples(np.array([0.0]), np.array([1.0]), 3)
    with pytest.raises(ValueError):
        composite(np.zeros((1, 3, 3)), np.array([[0.1, -0.1, 0.0]]), deltas, t)


def test_composite_gradients():
    rng = np.random.default_rng(3)
    t, deltas = stratified_samples(np.zeros(3), np.full(3, 2.0), 5)
    params = {"sigma": rng.uniform(0.1, 2.0, size=(3, 5)), "rgb": rng.random((3, 5, 3))}

    def fn(tape, p):
        out = composite(p["rgb"], p["sigma"], deltas, t, np.array([0.2, 0.3, 0.4]))
        return ad.sum(ad.square(out.color)) + ad.sum(out.depth)

    assert ad.grad_check(fn, params) <= 1e-6


def test_transparent_model_near_background(scene):
    ds = scene[0]
    s = RenderSettings(16, 0.05, 100.0)
    opac = []
    for bias in (-1.0, -3.0, -6.0):
        _, _, op, _ = render_image(model_with(scene, sigma_bias=bias), ds.cameras[0], s)
        opac.append(op.mean())
        assert np.all(op < 1)
    assert opac[0] > opac[1] > opac[2]
    img, _, _, _ = render_image(model_with(scene, sigma_bias=-9.0), ds.cameras[0], s)
    assert np.max(np.abs(img - ds.background)) < 0.01


def test_quadrature_converges(scene):
    model = model_with(scene)
    cam = scene[0].cameras[1]
    o, d, _ = rays_through(cam, np.array([12.5, 6.5]), np.array([12.5, 15.5]))
    tensors = model.bind(Tape(record=False))
    c1 = render_rays(model, tensors, o, d, RenderSettings(256)).color.value
    c2 = render_rays(model, tensors, o, d, RenderSettings(512)).color.value
    assert np.max(np.abs(c1 - c2)) < 1e-3


def test_eval_render_is_bit_identical(scene):
    model = model_with(scene)
    a = render_image(model, scene[0].cameras[1], RenderSettings(16))
    b = render_image(model, scene[0].cameras[1], RenderSettings(16))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_patch_geometry(scene):
    cam = scene[0].cameras[0]
    big = synth_scene(2, 4, 64)[0].cameras[0]
    v, u = patch_pixels(big, (32, 32), 16, 4)
    assert u.max() - u.min() + 1 == 61 and v.max() - v.min() + 1 == 61
    with pytest.raises(ValueError):
        patch_pixels(cam, (12, 12), 16, 4)


def test_render_patch_outputs(scene):
    model = model_with(scene)
    cam = scene[0].cameras[0]
    tensors = model.bind(Tape(record=False))
    rgb, disp, _ = render_patch(model, tensors, cam, (12, 12), RenderSettings(16), size=4, stride=2)
    assert rgb.shape == (4, 4, 3) and disp.shape == (4, 4)
    assert np.all((rgb.value > 0) & (rgb.value < 1))
    assert disp.value.mean() == pytest.approx(1.0, abs=1e-12)


def test_constant_depth_patch_disparity_is_one():
    t = Tape()
    disp = normalized_disparity(t.const(np.full(16, 2.7)), 4)
    np.testing.assert_allclose(disp.value, 1.0, atol=1e-15)


def test_empty_rays_read_as_far_in_patch_disparity(scene):
    # with no density, every ray exits at the box boundary or the far bound
    model = model_with(scene, sigma_bias=-40.0)
    tensors = model.bind(Tape(record=False))
    _, disp, out = render_patch(model, tensors, scene[0].cameras[0], (12, 12),
                                RenderSettings(8), size=4, stride=2)
    np.testing.assert_allclose(out.depth_with_exit().value, out.t_exit, rtol=1e-12)
    assert np.all(np.isfinite(disp.value)) and disp.value.max() < 10


def test_zero_threshold_grid_is_a_no_op(scene):
    model = model_with(scene)
    grid = occupancy_grid_update(model, 8, 0.0)
    assert grid.empty_fraction == 0.0
    s = RenderSettings(16)
    a = render_image(model, scene[0].cameras[0], s)
    b = render_image(model, scene[0].cameras[0], s, grid=grid)
    assert a[0].tobytes() == b[0].tobytes()


def test_transparent_model_grid_skips_everything(scene):
    model = model_with(scene, sigma_bias=-6.0)
    grid = OccupancyGrid(model.bbox, 8, 0.01).update(model)
    assert grid.empty_fraction == 1.0
    _, _, _, evals = render_image(model, scene[0].cameras[0], RenderSettings(32), grid=grid)
    assert evals == 0.0


def test_partial_grid_respects_opacity_bound(scene):
    model = model_with(scene, sigma_bias=-4.0)
    rng = np.random.default_rng(0)
    for k, v in model.params.items():
        if k.startswith(("plane", "density")):
            v += 0.3 * rng.standard_normal(v.shape)  # smooth on the scale of a 16^3 grid cell
    sigma = model.sigma_at(OccupancyGrid(model.bbox, 16).cell_centers())
    thr = float(np.quantile(sigma, 0.7))
    grid = OccupancyGrid(model.bbox, 16, thr).update(model)
    assert 0.2 < grid.empty_fraction < 0.8
    settings, cam = RenderSettings(64), scene[0].cameras[0]
    full = render_image(model, cam, settings)
    fast = render_image(model, cam, settings, grid=grid)
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    o, d, _ = rays_through(cam, u.reshape(-1) + 0.5, v.reshape(-1) + 0.5)
    tn, tf, hit = ray_box_bounds(o, d, *model.bbox, settings.near, settings.far)
    bound = 2 * thr * np.where(hit, tf - tn, 0.0).reshape(full[2].shape)
    assert np.all(np.abs(fast[2] - full[2]) <= bound)
    assert np.all(np.abs(fast[0] - full[0]).max(-1) <= bound)
    assert fast[3] <= 0.7 * full[3]


def test_grid_dilation_keeps_neighbours():
    grid = OccupancyGrid(np.array([[0, 0, 0], [1, 1, 1.0]]), 5, 0.5, dilate=1)

    class Fake:
        def sigma_at(self, x):
            return np.where(np.all(np.abs(x - 0.5) < 0.1, axis=1), 1.0, 0.0)

    grid.update(Fake())
    assert grid.occupied.sum() == 7
    assert grid.query(np.array([[0.5, 0.5, 0.5], [0.5, 0.3, 0.5], [0.1, 0.1, 0.1]])).tolist() == [
        True, True, False]
