import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from tridf.camera import (BEHIND, OUTSIDE, Camera, Extrinsics, Intrinsics, Ray, camera_to_world,
                          generate_ray, interpolate_cameras, look_at, pixel_rays, project,
                          project_points, project_to_reference, ray_box_bounds, world_to_camera)

I3 = np.eye(3)


def cam(R=I3, T=(0.0, 0.0, 0.0), f=50.0, w=64, h=48):
    return Camera(Intrinsics(f, f, w / 2, h / 2, w, h), Extrinsics(np.asarray(R), np.asarray(T)))


def random_camera(rng):
    R = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    return cam(R, rng.normal(size=3), f=rng.uniform(30, 120))


def test_world_to_camera_examples():
    E = Extrinsics(I3, np.zeros(3))
    assert np.array_equal(world_to_camera(E, [1, 2, 3]), [1, 2, 3])
    assert np.array_equal(world_to_camera(Extrinsics(I3, np.array([0, 0, -5.0])), [0, 0, 5]), [0, 0, 0])
    rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(world_to_camera(Extrinsics(rz, np.zeros(3)), [1, 0, 0]), [0, 1, 0],
                               atol=1e-12)


def test_world_camera_inverse():
    rng = np.random.default_rng(3)
    for _ in range(20):
        E = random_camera(rng).E
        p = rng.normal(size=(5, 3))
        np.testing.assert_allclose(camera_to_world(E, world_to_camera(E, p)), p, atol=1e-12)


def test_project_examples():
    assert project(Intrinsics(1, 1, 0, 0, 1, 1), (0, 0, 1)) == (0.0, 0.0, 1.0)
    assert project(Intrinsics(100, 100, 256, 256, 512, 512), (1, 1, 2)) == (306.0, 306.0, 2.0)
    assert project(Intrinsics(1, 1, 0, 0, 1, 1), (0, 0, -1)) is BEHIND


def test_intrinsics_and_extrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(-1, 1, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 4, 0, 4, 4)
    with pytest.raises(ValueError):
        Extrinsics(np.diag([1.0, 1.0, 1.1]), np.zeros(3))
    with pytest.raises(ValueError):
        Extrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_ray_invariants():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 2.0]), 0.1, 1.0)
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 1.0]), 1.0, 0.5)


def test_center_pixel_looks_down_axis():
    c = cam(w=64, h=48)
    r = generate_ray(c, 31, 23, (0.1, 10.0))
    # pixel 31 center sits at 31.5, half a pixel left of cx = 32
    np.testing.assert_allclose(r.direction / r.direction[2], [-0.5 / 50, -0.5 / 50, 1.0], atol=1e-15)
    c2 = Camera(Intrinsics(50, 50, 31.5, 23.5, 64, 48), c.E)
    np.testing.assert_allclose(generate_ray(c2, 31, 23, (0.1, 10.0)).direction, [0, 0, 1], atol=1e-15)


def test_adjacent_pixels_differ():
    c = cam()
    a = generate_ray(c, 10, 10, (0.1, 5)).direction
    b = generate_ray(c, 11, 10, (0.1, 5)).direction
    assert np.arccos(np.clip(a @ b, -1, 1)) > 0


def test_generate_ray_out_of_range():
    with pytest.raises(ValueError):
        generate_ray(cam(), 64, 0, (0.1, 5))
    with pytest.raises(ValueError):
        generate_ray(cam(), 0, -1, (0.1, 5))


def test_round_trip_thousand_cases():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        c = random_camera(rng)
        u, v = int(rng.integers(c.width)), int(rng.integers(c.height))
        r = generate_ray(c, u, v, (0.1, 50.0))
        t = rng.uniform(0.1, 50.0)
        pu, pv, _ = project(c.K, world_to_camera(c.E, r.at(t)))
        worst = max(worst, abs(pu - (u + 0.5)), abs(pv - (v + 0.5)))
    assert worst <= 1e-9


def test_project_to_reference():
    c = cam()
    r = generate_ray(c, 5, 9, (0.1, 5))
    np.testing.assert_allclose(project_to_reference(c, r.at(2.3)), (5.5, 9.5), atol=1e-9)
    assert project_to_reference(c, (0, 0, -1)) is OUTSIDE
    off = camera_to_world(c.E, np.array([(64 + 10 - 32) / 50.0, 0.0, 1.0]))
    assert project_to_reference(c, off) is OUTSIDE


def test_project_points_vectorised_matches_scalar():
    rng = np.random.default_rng(4)
    c = random_camera(rng)
    pts = rng.normal(size=(50, 3)) * 3
    uv, z, vis = project_points(c, pts)
    for p, q, d, ok in zip(pts, uv, z, vis):
        res = project_to_reference(c, p)
        if ok:
            np.testing.assert_allclose(res, q, atol=1e-12)
            assert d == pytest.approx(world_to_camera(c.E, p)[2], abs=1e-12)
        else:
            assert res is OUTSIDE


def test_ray_box_bounds():
    o = np.array([[0.0, 0, -5], [0, 0, -5], [3, 3, -5]])
    d = np.array([[0.0, 0, 1], [0, 0, -1], [0, 0, 1]])
    tn, tf, hit = ray_box_bounds(o, d, -np.ones(3), np.ones(3), 0.05, 100.0)
    assert hit.tolist() == [True, False, False]
    assert tn[0] == pytest.approx(4.0) and tf[0] == pytest.approx(6.0)
    tn, tf, hit = ray_box_bounds(np.zeros((1, 3)), d[:1], -np.ones(3), np.ones(3), 0.05, 100.0)
    assert hit[0] and tn[0] == 0.05 and tf[0] == pytest.approx(1.0)


def test_look_at_faces_target():
    E = look_at([3.0, 1.0, 2.0], [0.0, 0.0, 0.1])
    p = world_to_camera(E, [0.0, 0.0, 0.1])
    assert p[0] == pytest.approx(0, abs=1e-12) and p[1] == pytest.approx(0, abs=1e-12) and p[2] > 0
    np.testing.assert_allclose(E.center, [3, 1, 2], atol=1e-12)


def test_interpolate_cameras_endpoints():
    rng = np.random.default_rng(5)
    a, b = random_camera(rng), random_camera(rng)
    b = Camera(a.K, b.E)
    for s, ref in ((0.0, a), (1.0, b)):
        m = interpolate_cameras(a, b, s)
        np.testing.assert_allclose(m.E.R, ref.E.R, atol=1e-12)
        np.testing.assert_allclose(m.E.center, ref.E.center, atol=1e-12)
    mid = interpolate_cameras(a, b, 0.5)
    np.testing.assert_allclose(mid.E.center, (a.E.center + b.E.center) / 2, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 63), st.integers(0, 47), st.floats(0.2, 40.0))
def test_pixel_rays_round_trip(u, v, t):
    c = cam(Rotation.from_euler("xyz", [0.3, -0.2, 0.9]).as_matrix(), (0.5, -1.0, 2.0))
    o, d, cos = pixel_rays(c, np.array([u]), np.array([v]))
    assert abs(np.linalg.norm(d[0]) - 1) < 1e-12
    uv, z, vis = project_points(c, o + t * d)
    assert vis[0]
    np.testing.assert_allclose(uv[0], (u + 0.5, v + 0.5), atol=1e-9)
    assert z[0] == pytest.approx(t * cos[0], rel=1e-12)
