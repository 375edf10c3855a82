"""Synthetic scenes with analytic fields and an independent reference renderer.

These scenes are the test substrate: their density and color are closed
form, so ground-truth images come from direct numerical integration of the
volume-rendering integral (midpoint rule on the transmittance integral),
not from any code path shared with the tree renderer.  Sparse observations
mimicking a structure-from-motion output are sampled from the dense parts
of each field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np

from ..errors import UnknownSceneSpec
from ..field import AnalyticField
from ..geometry import Aabb, CameraModel, look_at_camera
from ..octree import LodTree, SparseObservation
from .. import rng as _rng
from .colmap import SparsePointCloud, SparsePoint, observations_from_cloud

SCENE_NAMES = ("textured-plane", "colored-voxel-clusters", "nested-shells")


@dataclass
class SyntheticScene:
    """An analytic scene plus everything needed to train and evaluate on it."""

    name: str
    seed: int
    aabb: Aabb
    grid_size: int
    max_depth: int
    sigma_fn: Callable[[np.ndarray], np.ndarray]
    color_fn: Callable[[np.ndarray], np.ndarray]
    cameras: list[CameraModel]
    sparse_points: np.ndarray
    empty_region: Optional[Aabb] = None
    background: tuple = (1.0, 1.0, 1.0)
    images: list = dataclass_field(default_factory=list)  # oracle renders, per camera

    def observations(self) -> list[SparseObservation]:
        cloud = _cloud_from_points(self.sparse_points, self.cameras)
        obs, _skipped = observations_from_cloud(cloud, self.cameras)
        return obs

    def oracle_render(self, camera: CameraModel, n_steps: int = 768,
                      supersample: int = 2) -> np.ndarray:
        return oracle_render(self, camera, n_steps=n_steps, supersample=supersample)

    def render_images(self, n_steps: int = 768, supersample: int = 2) -> list[np.ndarray]:
        if not self.images:
            self.images = [self.oracle_render(c, n_steps, supersample) for c in self.cameras]
        return self.images

    def zoom_out(self, n_frames: int, d_start: float, d_end: float,
                 resolution=None, focal: float | None = None) -> list[CameraModel]:
        """Dolly from close to far along a fixed direction, looking at the center."""
        base = self.cameras[0]
        resolution = tuple(resolution or base.resolution)
        focal = focal if focal is not None else base.focal_length
        direction = _unit([1.0, 0.6, 0.75])
        center = self.aabb.center
        dists = np.geomspace(d_start, d_end, n_frames)
        return [look_at_camera(center + d * direction, center, focal_length=focal,
                               resolution=resolution, appearance_id=-1)
                for d in dists]

    def dolly(self, n_frames: int, d_start: float, d_end: float,
              resolution=None, focal: float | None = None) -> list[CameraModel]:
        """Linear dolly, used for the level-transition popup measurements."""
        base = self.cameras[0]
        resolution = tuple(resolution or base.resolution)
        focal = focal if focal is not None else base.focal_length
        direction = _unit([1.0, 0.6, 0.75])
        center = self.aabb.center
        dists = np.linspace(d_start, d_end, n_frames)
        return [look_at_camera(center + d * direction, center, focal_length=focal,
                               resolution=resolution, appearance_id=-1)
                for d in dists]


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _cloud_from_points(points: np.ndarray, cameras: list[CameraModel]) -> SparsePointCloud:
    """Fake SfM cloud: every camera that sees a point contributes a track entry."""
    pts = []
    for i, p in enumerate(points):
        track = []
        for ci, cam in enumerate(cameras):
            px, z = cam.project(p)
            if z[0] <= 0:
                continue
            x, y = px[0]
            if 0 <= x < cam.resolution[0] and 0 <= y < cam.resolution[1]:
                track.append((ci, 0))
        if track:
            pts.append(SparsePoint(point_id=i, xyz=np.asarray(p, dtype=np.float64),
                                   track=tuple(track)))
    return SparsePointCloud(points=pts)


def orbit_cameras(center, distance: float, height: float, n: int, *,
                  focal: float, resolution, phase: float = 0.0,
                  ring_scales=(1.0,)) -> list[CameraModel]:
    """Cameras on one or more rings around ``center``.

    ``ring_scales`` multiplies distance and height per camera in a cycle;
    mixing near and far rings gives the pyramid genuinely coarse views, so
    every tree level down to the root sees matching-scale supervision.
    """
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(n):
        a = phase + 2 * math.pi * i / n
        s = ring_scales[i % len(ring_scales)]
        pos = center + np.array([s * distance * math.cos(a),
                                 s * distance * math.sin(a), s * height])
        cams.append(look_at_camera(pos, center, focal_length=focal,
                                   resolution=tuple(resolution), appearance_id=i))
    return cams


def _smooth_ramp(x, lo, hi, w):
    """0 outside [lo, hi], 1 inside, linear ramps of width w at the edges."""
    up = np.clip((x - lo) / w, 0.0, 1.0)
    down = np.clip((hi - x) / w, 0.0, 1.0)
    return up * down


def make_synthetic_scene(spec) -> SyntheticScene:
    """Build one of the named deterministic scenes.

    ``spec`` is a name or a dict ``{"name": ..., "seed": ..., "resolution":
    [w, h], "n_cameras": ..., "focal": ..., "orbit_distance": ...,
    "grid_size": ..., "max_depth": ...}``; everything but the name has a
    default.  The same spec always builds an identical scene.

    Raises
    ------
    UnknownSceneSpec
        For a scene name not in ``SCENE_NAMES``.
    """
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name")
    if name not in SCENE_NAMES:
        raise UnknownSceneSpec(f"unknown scene {name!r}, expected one of {SCENE_NAMES}")
    seed = int(spec.get("seed", 0))
    resolution = tuple(spec.get("resolution", (128, 96)))
    n_cameras = int(spec.get("n_cameras", 10))
    focal = float(spec.get("focal", 1.4 * resolution[0]))
    # default grain matches the default per-node field resolution, so a node
    # genuinely resolves what the level selector routes to it
    grid_size = int(spec.get("grid_size", 16))
    max_depth = int(spec.get("max_depth", 3))
    n_sparse = int(spec.get("n_sparse_points", 400))

    aabb = Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    gen = _rng.stream(seed, "scene", name)

    if name == "nested-shells":
        radii = np.array([0.32, 0.55, 0.8])
        amps = np.array([2.5, 2.0, 1.4])
        width = 0.07

        def sigma_fn(p):
            p = np.atleast_2d(p)
            r = np.linalg.norm(p, axis=-1)
            return np.sum(amps * np.exp(-((r[:, None] - radii) ** 2) / (2 * width ** 2)), axis=-1)

        def color_fn(p):
            p = np.atleast_2d(p)
            r = np.linalg.norm(p, axis=-1)
            c = np.empty((p.shape[0], 3))
            c[:, 0] = 0.5 + 0.45 * np.sin(3.0 * r * math.pi)
            c[:, 1] = 0.5 + 0.45 * np.cos(2.0 * math.pi * p[:, 2])
            c[:, 2] = 0.5 + 0.45 * np.sin(2.0 * math.pi * p[:, 0])
            return np.clip(c, 0.0, 1.0)

        orbit_d, orbit_h = 1.7, 0.55
        empty_region = None

    elif name == "textured-plane":
        z_lo, z_hi, ramp = -0.25, 0.05, 0.05
        # texture frequency in cycles per world unit: many leaf voxels per
        # period (fittable), but under two quarter-res pixels per period at
        # the far end of a zoom-out (aliasing-prone when point-sampled)
        fx, fy = 6.25, 5.25

        def sigma_fn(p):
            p = np.atleast_2d(p)
            return 25.0 * _smooth_ramp(p[:, 2], z_lo, z_hi, ramp)

        def color_fn(p):
            p = np.atleast_2d(p)
            t = np.sin(2 * math.pi * fx * p[:, 0]) * np.sin(2 * math.pi * fy * p[:, 1])
            c = np.empty((p.shape[0], 3))
            c[:, 0] = 0.5 + 0.45 * t
            c[:, 1] = 0.5 - 0.35 * t
            c[:, 2] = 0.55 + 0.3 * np.sin(2 * math.pi * fx * p[:, 0])
            return np.clip(c, 0.0, 1.0)

        orbit_d, orbit_h = 1.5, 1.1
        empty_region = Aabb([-0.5, -0.5, 0.55], [0.5, 0.5, 0.95])

    else:  # colored-voxel-clusters
        cell = 0.3
        ramp = 0.035
        ngrid = 4
        lo = -0.6
        # a wide opaque ground slab shadows everything beneath it; colored
        # cells sit on top in the central grid
        floor_z = (-0.62, -0.40)
        floor_xy = 0.88
        floor_color = np.array([0.55, 0.5, 0.4])
        occupancy = np.zeros((ngrid, ngrid, ngrid))
        cluster_colors = np.zeros((ngrid, ngrid, ngrid, 3))
        for ix in range(ngrid):
            for iy in range(ngrid):
                for iz in range(1, ngrid):
                    if iz == 1 or gen.uniform() < 0.30:
                        occupancy[ix, iy, iz] = 1.0
                        cluster_colors[ix, iy, iz] = gen.uniform(0.1, 0.9, size=3)
        edges = lo + cell * np.arange(ngrid)
        weighted_colors = cluster_colors * occupancy[..., None]
        occ_cells = np.argwhere(occupancy > 0)
        bbox_lo = lo + cell * occ_cells.min(axis=0) - ramp
        bbox_hi = lo + cell * (occ_cells.max(axis=0) + 1) + ramp

        def _floor_weight(p):
            p = np.atleast_2d(p)
            return (_smooth_ramp(p[:, 2], floor_z[0], floor_z[1], ramp)
                    * _smooth_ramp(p[:, 0], -floor_xy, floor_xy, ramp)
                    * _smooth_ramp(p[:, 1], -floor_xy, floor_xy, ramp))

        def _membership_sum(p, tensor, out_shape):
            """Ramp-weighted sum over cells; each point touches <= 2 slots per axis."""
            p = np.atleast_2d(p)
            near = np.all((p >= bbox_lo) & (p <= bbox_hi), axis=-1)
            out = np.zeros((p.shape[0],) + out_shape)
            if not np.any(near):
                return out
            q = p[near]
            slots = []
            weights = []
            for ax in range(3):
                x = q[:, ax]
                jlo = np.clip(np.floor((x - lo - ramp) / cell).astype(np.int64), 0, ngrid - 1)
                jhi = np.clip(np.floor((x - lo + ramp) / cell).astype(np.int64), 0, ngrid - 1)
                wlo = _smooth_ramp(x, edges[jlo], edges[jlo] + cell, ramp)
                whi = _smooth_ramp(x, edges[jhi], edges[jhi] + cell, ramp)
                whi = np.where(jhi == jlo, 0.0, whi)  # avoid double-counting one slot
                slots.append((jlo, jhi))
                weights.append((wlo, whi))
            acc = np.zeros((q.shape[0],) + out_shape)
            for a in range(2):
                wa = weights[0][a]
                ia = slots[0][a]
                for b in range(2):
                    wb = wa * weights[1][b]
                    ib = slots[1][b]
                    for c in range(2):
                        w = wb * weights[2][c]
                        vals = tensor[ia, ib, slots[2][c]]
                        acc += vals * w[:, None] if out_shape else vals * w
            out[near] = acc
            return out

        def sigma_fn(p):
            m = _membership_sum(p, occupancy, ()) + _floor_weight(p)
            return 25.0 * np.clip(m, 0.0, 1.0)

        def color_fn(p):
            fw = _floor_weight(p)
            tot = _membership_sum(p, occupancy, ()) + fw
            num = _membership_sum(p, weighted_colors, (3,)) + fw[:, None] * floor_color
            c = num / np.maximum(tot, 1e-12)[:, None]
            return np.where(tot[:, None] > 1e-12, c, 0.5)

        orbit_d, orbit_h = 1.7, 1.15
        # probe box for the transparency checks: shadowed by the ground slab
        # and several field voxels clear of its density ramp
        empty_region = Aabb([-0.45, -0.45, -0.95], [0.45, 0.45, -0.75])

    ring_scales = tuple(spec.get("ring_scales", (0.8, 1.0, 1.6, 2.6)))
    cameras = orbit_cameras(aabb.center, orbit_d, orbit_h, n_cameras,
                            focal=focal, resolution=resolution,
                            ring_scales=ring_scales)
    points = _sample_sparse_points(sigma_fn, aabb, n_sparse, gen)
    return SyntheticScene(name=name, seed=seed, aabb=aabb, grid_size=grid_size,
                          max_depth=max_depth, sigma_fn=sigma_fn, color_fn=color_fn,
                          cameras=cameras, sparse_points=points,
                          empty_region=empty_region)


def _sample_sparse_points(sigma_fn, aabb: Aabb, n: int, gen: np.random.Generator) -> np.ndarray:
    """Rejection-sample points where the field is dense, like SfM features."""
    out = []
    lo, hi = aabb.min_corner, aabb.max_corner
    threshold = None
    for _ in range(200):
        cand = gen.uniform(lo, hi, size=(4096, 3))
        s = sigma_fn(cand)
        if threshold is None:
            threshold = 0.4 * max(float(s.max()), 1e-6)
        keep = cand[s >= threshold]
        out.append(keep)
        if sum(len(o) for o in out) >= n:
            break
    pts = np.concatenate(out, axis=0)
    if len(pts) < n:
        raise RuntimeError(f"could not sample {n} sparse points (got {len(pts)})")
    return pts[:n]


def oracle_render(scene: SyntheticScene, camera: CameraModel, *,
                  n_steps: int = 768, supersample: int = 2,
                  chunk: int = 2048) -> np.ndarray:
    """Reference image by direct quadrature of the rendering integral.

    Midpoint rule on the optical depth: contribution of step k is
    exp(-(tau_<k + tau_k/2)) * sigma_k * c_k * dt, with the remaining
    transmittance times the background added at the end.  Supersampling
    averages ``supersample**2`` rays per pixel so the reference is
    anti-aliased independently of any tree machinery.
    """
    w, h = camera.resolution
    ss = max(1, supersample)
    sub = (np.arange(ss) + 0.5) / ss
    ox, oy = np.meshgrid(sub, sub)
    offsets = np.stack([ox.ravel(), oy.ravel()], axis=-1)  # (ss*ss, 2)

    gx, gy = np.meshgrid(np.arange(w), np.arange(h))
    base = np.stack([gx.ravel(), gy.ravel()], axis=-1).astype(np.float64)  # (P, 2)
    image = np.zeros((w * h, 3))
    origin = camera.center
    bg = np.asarray(scene.background, dtype=np.float64)

    for off in offsets:
        pixels = base + off
        dirs = camera.ray_directions(pixels)
        for start in range(0, dirs.shape[0], chunk):
            d = dirs[start:start + chunk]
            image[start:start + chunk] += _integrate_rays(
                scene, origin, d, n_steps, bg)
    image /= len(offsets)
    return image.reshape(h, w, 3)


def _integrate_rays(scene: SyntheticScene, origin, dirs, n_steps: int, bg) -> np.ndarray:
    from ..render import _intersect_box_batch  # shared slab test, no tree involved

    t0, t1 = _intersect_box_batch(origin, dirs, scene.aabb)
    n = dirs.shape[0]
    rgb = np.tile(bg, (n, 1))
    hit = t1 > t0
    if not np.any(hit):
        return rgb
    t0h, t1h = t0[hit], t1[hit]
    dh = dirs[hit]
    dt = (t1h - t0h) / n_steps
    mids = t0h[:, None] + (np.arange(n_steps) + 0.5) * dt[:, None]
    pts = origin + dh[:, None, :] * mids[..., None]
    flat = pts.reshape(-1, 3)
    sig = scene.sigma_fn(flat).reshape(-1, n_steps)
    tau = sig * dt[:, None]
    cum = np.cumsum(tau, axis=-1)
    weight = np.exp(-(cum - 0.5 * tau)) * tau
    # color only matters where something is emitted
    mask = weight.reshape(-1) > 1e-14
    col = np.zeros((flat.shape[0], 3))
    if np.any(mask):
        col[mask] = scene.color_fn(flat[mask])
    col = col.reshape(-1, n_steps, 3)
    emitted = np.einsum("ns,nsc->nc", weight, col)
    rgb[hit] = emitted + np.exp(-cum[:, -1:]) * bg
    return rgb


def analytic_tree(scene: SyntheticScene) -> LodTree:
    """Single-node tree whose root answers straight from the analytic field.

    Lets the tree renderer run on exact field values, isolating the
    sampling and compositing machinery from any trained parameters.
    """
    tree = LodTree(scene.aabb, scene.grid_size, 0, [])
    tree.root.field = AnalyticField(sigma_fn=scene.sigma_fn, color_fn=scene.color_fn)
    return tree
