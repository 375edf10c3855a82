"""Cameras, rays, axis-aligned boxes and the sampling-sphere arithmetic.

Everything here is immutable after construction and free of hidden state,
so all operations are safe to call from parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, RayMissesScene

Vec3 = np.ndarray


def _as_vec3(v) -> Vec3:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, used both for scene bounds and octree cubes."""

    min_corner: Vec3
    max_corner: Vec3

    def __post_init__(self):
        object.__setattr__(self, "min_corner", _as_vec3(self.min_corner))
        object.__setattr__(self, "max_corner", _as_vec3(self.max_corner))
        if not np.all(self.min_corner < self.max_corner):
            raise ValueError("Aabb requires min_corner < max_corner componentwise")

    @property
    def edges(self) -> Vec3:
        return self.max_corner - self.min_corner

    @property
    def edge(self) -> float:
        """Edge length, valid for cubic boxes (octree nodes)."""
        e = self.edges
        return float(e[0])

    @property
    def center(self) -> Vec3:
        return 0.5 * (self.min_corner + self.max_corner)

    def require_cube(self, rel_tol: float = 1e-9) -> "Aabb":
        e = self.edges
        if not (math.isclose(e[0], e[1], rel_tol=rel_tol)
                and math.isclose(e[0], e[2], rel_tol=rel_tol)):
            raise ValueError(f"box is not a cube, edges {e}")
        return self

    def contains(self, p, *, atol: float = 0.0) -> bool | np.ndarray:
        """Inclusive containment test; ``p`` may be (3,) or (N, 3)."""
        p = np.asarray(p, dtype=np.float64)
        ok = np.logical_and(
            np.all(p >= self.min_corner - atol, axis=-1),
            np.all(p <= self.max_corner + atol, axis=-1),
        )
        return bool(ok) if p.ndim == 1 else ok

    def octant(self, i: int) -> "Aabb":
        """Child cube ``i`` with bit 0 -> x, bit 1 -> y, bit 2 -> z."""
        half = 0.5 * self.edges
        off = np.array([(i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1], dtype=np.float64)
        lo = self.min_corner + off * half
        return Aabb(lo, lo + half)

    def intersect_ray(self, origin: Vec3, direction: Vec3) -> tuple[float, float] | None:
        """Slab test; returns the (t_enter, t_exit) overlap with t >= 0, or None."""
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / direction
            t0 = (self.min_corner - origin) * inv
            t1 = (self.max_corner - origin) * inv
        # axes with zero direction: inside the slab -> (-inf, inf), else empty
        lo = np.minimum(t0, t1)
        hi = np.maximum(t0, t1)
        par = direction == 0.0
        if np.any(par):
            inside = (origin >= self.min_corner) & (origin <= self.max_corner)
            if np.any(par & ~inside):
                return None
            lo = np.where(par, -np.inf, lo)
            hi = np.where(par, np.inf, hi)
        t_enter = float(np.max(lo))
        t_exit = float(np.min(hi))
        t_enter = max(t_enter, 0.0)
        if t_exit <= t_enter:
            return None
        return t_enter, t_exit


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, normalised first."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(rot: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion of a rotation matrix, w >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a world-to-camera rigid transform.

    ``rotation`` and ``translation`` map world points into the camera
    frame (x right, y down, z forward): ``x_cam = R @ x_world + t``.
    ``pixel_width`` is the footprint of one pixel in ray units at unit
    depth relative to the focal length; downsampling an image by two
    halves the focal length and therefore doubles the effective pixel
    footprint at any depth.
    """

    rotation: np.ndarray
    translation: Vec3
    focal_length: float
    principal_point: np.ndarray
    resolution: tuple[int, int]
    pixel_width: float = 1.0
    appearance_id: int = 0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        object.__setattr__(self, "principal_point",
                           np.asarray(self.principal_point, dtype=np.float64))
        object.__setattr__(self, "resolution",
                           (int(self.resolution[0]), int(self.resolution[1])))
        if self.focal_length <= 0:
            raise ValueError("focal_length must be positive")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise ValueError("resolution components must be >= 1")

    @property
    def center(self) -> Vec3:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns (pixels (N,2), depths (N,)).

        Points behind the camera get a negative depth; the caller decides
        whether to drop them.
        """
        cam = np.atleast_2d(self.world_to_camera(points))
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.focal_length * cam[:, :2] / z[:, None] + self.principal_point
        return px, z

    def ray_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit world-space directions through continuous pixel coordinates."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        d_cam = np.empty((pixels.shape[0], 3))
        d_cam[:, :2] = (pixels - self.principal_point) / self.focal_length
        d_cam[:, 2] = 1.0
        d_world = d_cam @ self.rotation  # R.T applied row-wise
        return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)

    def scaled(self, factor: float) -> "CameraModel":
        """Same pose at ``factor`` times the resolution (e.g. 0.5 per pyramid level)."""
        w = max(1, int(round(self.resolution[0] * factor)))
        h = max(1, int(round(self.resolution[1] * factor)))
        return CameraModel(
            rotation=self.rotation,
            translation=self.translation,
            focal_length=self.focal_length * factor,
            principal_point=self.principal_point * factor,
            resolution=(w, h),
            pixel_width=self.pixel_width,
            appearance_id=self.appearance_id,
        )


def look_at_camera(position, target, up=(0.0, 0.0, 1.0), *, focal_length: float,
                   resolution: tuple[int, int], appearance_id: int = 0) -> CameraModel:
    """Camera at ``position`` with +z (viewing axis) towards ``target``."""
    position = _as_vec3(position)
    forward = _as_vec3(target) - position
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("camera position and target coincide")
    forward = forward / n
    up = _as_vec3(up)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-12:  # looking straight along up
        up = np.array([0.0, 1.0, 0.0]) if abs(forward[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: camera axes in world coords
    return CameraModel(
        rotation=rot,
        translation=-rot @ position,
        focal_length=focal_length,
        principal_point=np.array([resolution[0] / 2.0, resolution[1] / 2.0]),
        resolution=resolution,
        appearance_id=appearance_id,
    )


@dataclass(frozen=True)
class Ray:
    origin: Vec3
    direction: Vec3
    t_near: float
    t_far: float

    def __post_init__(self):
        d = _as_vec3(self.direction)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        object.__setattr__(self, "direction", d)
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class SamplingSphere:
    """One volumetric sample on a ray: position plus a pixel-footprint radius."""

    center: Vec3
    depth: float
    radius: float
    perturbed_radius: float
    direction: Vec3


def sphere_radius(depth, camera: CameraModel):
    """Pixel-footprint radius at ``depth`` along a ray of ``camera``.

    The radius is half the pixel's world-space extent at that depth:
    depth * pixel_width / (2 * focal_length).  Scalar or array depths.
    """
    depth_arr = np.asarray(depth, dtype=np.float64)
    if np.any(depth_arr <= 0):
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    r = depth_arr * (camera.pixel_width / (2.0 * camera.focal_length))
    return float(r) if np.isscalar(depth) or depth_arr.ndim == 0 else r


def perturb_radius(radius, rng: np.random.Generator):
    """Scale the radius by 2**p with p uniform on [-0.5, 0.5].

    Blurs the boundary between adjacent detail levels so that level
    transitions dither instead of popping.  Deterministic for a given
    generator state; scalar or array radii.
    """
    radius_arr = np.asarray(radius, dtype=np.float64)
    p = rng.uniform(-0.5, 0.5, size=radius_arr.shape)
    out = radius_arr * np.exp2(p)
    return float(out) if radius_arr.ndim == 0 else out


def pixel_ray(camera: CameraModel, pixel, scene_aabb: Aabb) -> Ray:
    """Ray through a continuous pixel coordinate, clipped to the scene box.

    ``pixel`` is in pixel units with (0, 0) at the image corner; pass
    pixel centers (ix + 0.5, iy + 0.5) when iterating an image grid.

    Raises
    ------
    RayMissesScene
        If the ray never enters ``scene_aabb``.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    if np.any(pixel < 0) or pixel[0] > camera.resolution[0] or pixel[1] > camera.resolution[1]:
        raise ValueError(f"pixel {pixel} outside resolution {camera.resolution}")
    direction = camera.ray_directions(pixel)[0]
    origin = camera.center
    hit = scene_aabb.intersect_ray(origin, direction)
    if hit is None:
        raise RayMissesScene(f"ray from pixel {pixel} misses the scene box")
    t_near, t_far = hit
    return Ray(origin, direction, t_near, t_far)


def frustum_intersects(camera: CameraModel, box: Aabb) -> bool:
    """Conservative frustum-vs-box test.

    Never returns False for a visible box; may return True for boxes that
    narrowly miss (plane-by-plane rejection only).  The frustum is open
    ended: there is no far plane.
    """
    corners = np.array([
        [x, y, z]
        for x in (box.min_corner[0], box.max_corner[0])
        for y in (box.min_corner[1], box.max_corner[1])
        for z in (box.min_corner[2], box.max_corner[2])
    ])
    cam = camera.world_to_camera(corners)
    w, h = camera.resolution
    cx, cy = camera.principal_point
    f = camera.focal_length
    # half-space tests: in front of the camera plus the four side planes
    lo_x, hi_x = -cx / f, (w - cx) / f
    lo_y, hi_y = -cy / f, (h - cy) / f
    planes = [
        cam[:, 2],                        # z >= 0
        cam[:, 0] - lo_x * cam[:, 2],     # x/z >= lo_x
        hi_x * cam[:, 2] - cam[:, 0],     # x/z <= hi_x
        cam[:, 1] - lo_y * cam[:, 2],     # y/z >= lo_y
        hi_y * cam[:, 2] - cam[:, 1],     # y/z <= hi_y
    ]
    for vals in planes:
        if np.all(vals < 0):
            return False
    return True
