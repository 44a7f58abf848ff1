"""Pinhole cameras: world-to-camera transforms, projection and ray generation.

Pixel ``(u, v)`` covers the square ``[u, u+1) x [v, v+1)``; its center is at
image coordinates ``(u + 0.5, v + 0.5)``. Projection returns continuous image
coordinates in the same frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Intrinsics", "Extrinsics", "Camera", "Ray", "BEHIND", "OUTSIDE",
    "world_to_camera", "camera_to_world", "project", "generate_ray",
    "project_to_reference", "pixel_rays", "rays_through", "project_points",
    "ray_box_bounds", "interpolate_cameras", "look_at",
]

BEHIND = "behind"
OUTSIDE = "outside"
_MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point lies outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """World-to-camera rigid transform ``p_cam = R @ p + T``."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), rtol=0.0, atol=1e-9):
            raise ValueError("rotation is not orthonormal (R^T R != I within 1e-9)")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    def __eq__(self, other):
        return (isinstance(other, Extrinsics) and np.array_equal(self.R, other.R)
                and np.array_equal(self.T, other.T))

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.R, self.T[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    @classmethod
    def from_matrix(cls, m) -> "Extrinsics":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


@dataclass(frozen=True)
class Camera:
    K: Intrinsics
    E: Extrinsics

    @property
    def width(self) -> int:
        return self.K.width

    @property
    def height(self) -> int:
        return self.K.height


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        if not (0 < self.t_near < self.t_far):
            raise ValueError(f"invalid ray bounds ({self.t_near}, {self.t_far})")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def world_to_camera(E: Extrinsics, p: np.ndarray) -> np.ndarray:
    """``R p + T`` for a 3-vector or an (N, 3) array."""
    return np.asarray(p, dtype=np.float64) @ E.R.T + E.T


def camera_to_world(E: Extrinsics, p_cam: np.ndarray) -> np.ndarray:
    return (np.asarray(p_cam, dtype=np.float64) - E.T) @ E.R


def project(K: Intrinsics, p_cam):
    """Perspective projection of one camera-frame point to ``(u, v, Z_c)`` or BEHIND."""
    X, Y, Z = (float(c) for c in p_cam)
    if Z <= _MIN_DEPTH:
        return BEHIND
    return K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy, Z


def project_points(cam: Camera, points: np.ndarray):
    """Vectorised projection of world points.

    Returns ``(uv, depth, visible)`` where ``visible`` marks points in front
    of the camera whose projection falls inside the image rectangle.
    """
    pc = world_to_camera(cam.E, points)
    z = pc[..., 2]
    front = z > _MIN_DEPTH
    safe_z = np.where(front, z, 1.0)
    u = cam.K.fx * pc[..., 0] / safe_z + cam.K.cx
    v = cam.K.fy * pc[..., 1] / safe_z + cam.K.cy
    visible = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=-1), z, visible


def project_to_reference(cam: Camera, x):
    """Image coordinates of world point ``x`` in ``cam`` or OUTSIDE."""
    res = project(cam.K, world_to_camera(cam.E, x))
    if res is BEHIND:
        return OUTSIDE
    u, v, _ = res
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        return OUTSIDE
    return u, v


def rays_through(cam: Camera, u, v):
    """Unit world directions through continuous image coordinates ``(u, v)``.

    Returns ``(origin, directions, cos)``; ``cos`` is the cosine between each
    ray and the optical axis, so camera depth equals ``t * cos``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - cam.K.cx) / cam.K.fx, (v - cam.K.cy) / cam.K.fy, np.ones_like(u)], -1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = d_cam @ cam.E.R
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return cam.E.center, dirs, d_cam[..., 2]


def pixel_rays(cam: Camera, u, v):
    """Rays through the centers of integer pixels ``(u, v)``."""
    u = np.asarray(u)
    v = np.asarray(v)
    if np.any((u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)):
        raise ValueError("pixel outside the image")
    return rays_through(cam, u + 0.5, v + 0.5)


def generate_ray(cam: Camera, u: int, v: int, bounds: tuple[float, float]) -> Ray:
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    origin, d, _ = pixel_rays(cam, u, v)
    return Ray(origin.copy(), d, float(bounds[0]), float(bounds[1]))


def ray_box_bounds(origins, dirs, box_min, box_max, near: float, far: float):
    """Slab-test entry/exit distances clamped to ``[near, far]``.

    Returns ``(t_near, t_far, hit)``; rays with ``hit == False`` miss the box
    or its clamped interval is shorter than 1e-9.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (np.asarray(box_min) - origins) * inv
        t1 = (np.asarray(box_max) - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(lo.max(axis=-1), near)
    t_far = np.minimum(hi.min(axis=-1), far)
    hit = t_far - t_near > 1e-9
    return t_near, t_far, hit


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Extrinsics:
    """World-to-camera transform for a camera at ``eye`` facing ``target``.

    Camera axes follow the usual vision convention: +z forward, +x right,
    +y down in the image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Extrinsics(R, -R @ eye)


def interpolate_cameras(a: Camera, b: Camera, s: float) -> Camera:
    """Blend two poses: linear in camera center, spherical in orientation."""
    from scipy.spatial.transform import Rotation, Slerp

    rots = Rotation.from_matrix(np.stack([a.E.R, b.E.R]))
    R = Slerp([0.0, 1.0], rots)([s]).as_matrix()[0]
    # re-orthonormalise so the Extrinsics tolerance holds exactly
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    center = (1.0 - s) * a.E.center + s * b.E.center
    return Camera(a.K, Extrinsics(R, -R @ center))
