"""Anti-aliased volume rendering over the pruned tree.

Every ray is sampled as a sequence of spheres whose radii match the pixel
footprint at their depth (optionally perturbed by a random power of two to
dither level transitions).  Each sphere is routed to the tree node whose
granularity matches its radius, densities and colors are composited with
standard transmittance weighting, and the set of answering nodes is
recorded per frame: that set, not the whole model, is what a renderer
needs resident, and it stays logarithmic in the model size.

Sampling randomness is counter-based and keyed on (seed, pixel, sample),
never on evaluation order, so frames are bit-reproducible and a static
camera renders identically frame after frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import RayMissesScene
from .field import query as field_query
from .geometry import Aabb, CameraModel, Ray, SamplingSphere, sphere_radius
from .octree import LodTree, NodeId
from .rng import counter_uniform


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 32
    jitter: bool = True
    perturb: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    leaf_only: bool = False
    seed: int = 0
    stride: int = 1
    t_near: Optional[float] = None
    t_far: Optional[float] = None
    threads: int = 1
    # when True, sampling is additionally keyed on the frame id; static
    # cameras then flicker, so it stays off unless explicitly requested
    frame_keyed_sampling: bool = False


@dataclass(frozen=True)
class PixelStream:
    """Counter-based random stream of one pixel (see module docstring)."""

    seed: int
    pixel_key: int

    def jitter_uniforms(self, n: int) -> np.ndarray:
        return counter_uniform(self.seed, np.uint64(self.pixel_key), 2 * np.arange(n))

    def perturb_uniforms(self, n: int) -> np.ndarray:
        return counter_uniform(self.seed, np.uint64(self.pixel_key), 2 * np.arange(n) + 1)


@dataclass
class RaySampleSet:
    """Ordered sampling spheres of one ray plus their depth intervals."""

    spheres: list[SamplingSphere]
    interval_bounds: list[tuple[float, float]]


@dataclass
class WorkingSetReport:
    """Which nodes one frame touched, in counts and parameter bytes.

    ``touched_nodes`` are the nodes that answered at least one sampling
    sphere: their parameters are what rendering actually read.
    ``traversal_nodes`` additionally includes every ancestor walked through
    on the way down, which costs topology reads but no parameter traffic.
    """

    frame_id: int
    touched_nodes: set
    traversal_nodes: set
    touched_bytes: int
    total_bytes: int

    @property
    def fraction(self) -> float:
        return self.touched_bytes / self.total_bytes if self.total_bytes else 0.0

    @property
    def touched_node_count(self) -> int:
        return len(self.touched_nodes)

    @staticmethod
    def csv_header() -> str:
        return "frame_id,touched_node_count,touched_bytes,total_bytes,fraction"

    def csv_row(self) -> str:
        return (f"{self.frame_id},{self.touched_node_count},{self.touched_bytes},"
                f"{self.total_bytes},{self.fraction:.9g}")


def _stratified_depths(t0, t1, n_samples: int, u: np.ndarray) -> np.ndarray:
    """Depths of jittered stratified samples; u in [0,1) per (ray, sample)."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    h = (t1 - t0) / n_samples
    k = np.arange(n_samples, dtype=np.float64)
    return t0[..., None] + (k + u) * h[..., None]


def sample_ray(ray: Ray, camera: CameraModel, n_samples: int,
               stream: PixelStream, *, jitter: bool = True,
               perturb: bool = True) -> RaySampleSet:
    """Stratified sampling spheres along one ray.

    With ``jitter`` off, samples sit at interval midpoints.  Radii follow
    the pixel footprint at each depth; ``perturb`` applies the power-of-two
    radius dithering.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    u = stream.jitter_uniforms(n_samples) if jitter else np.full(n_samples, 0.5)
    depths = _stratified_depths(ray.t_near, ray.t_far, n_samples, u)
    radii = sphere_radius(depths, camera)
    if perturb:
        p = stream.perturb_uniforms(n_samples) - 0.5
        perturbed = radii * np.exp2(p)
    else:
        perturbed = radii.copy()
    centers = ray.at(depths)
    h = (ray.t_far - ray.t_near) / n_samples
    bounds = [(ray.t_near + k * h, ray.t_near + (k + 1) * h) for k in range(n_samples)]
    spheres = [
        SamplingSphere(center=centers[k], depth=float(depths[k]),
                       radius=float(radii[k]), perturbed_radius=float(perturbed[k]),
                       direction=ray.direction)
        for k in range(n_samples)
    ]
    return RaySampleSet(spheres=spheres, interval_bounds=bounds)


# -- transmittance compositing ------------------------------------------------

def composite_forward(sigma: np.ndarray, delta: np.ndarray):
    """Per-sample weights and final transmittance from densities.

    sigma, delta: (N, S).  Returns (weights (N, S), t_final (N,)).
    sigma*delta is clamped at 30 (alpha saturates at 1 - 1e-13) to keep
    the backward pass finite.
    """
    sd = np.clip(sigma * delta, 0.0, 30.0)
    accum = np.cumsum(sd, axis=-1)
    trans = np.exp(-(accum - sd))          # exclusive prefix: T_k
    alpha = -np.expm1(-sd)
    weights = trans * alpha
    t_final = np.exp(-accum[..., -1])
    return weights, t_final


def composite_backward(sigma, delta, weights, t_final,
                       d_weights, d_t_final):
    """Cotangent of sigma given cotangents of the weights and T_final.

    Treats delta as constant.  Where the forward pass clamped
    sigma * delta the gradient is zero (saturated opacity).
    """
    sd = sigma * delta
    clamped = sd >= 30.0
    sd = np.clip(sd, 0.0, 30.0)
    one_minus_alpha = np.exp(-sd)
    trans = np.exp(-(np.cumsum(sd, axis=-1) - sd))
    # suffix sum over j > k of d_weights_j * w_j, plus the T_final path
    dw_w = d_weights * weights
    suffix = np.cumsum(dw_w[..., ::-1], axis=-1)[..., ::-1] - dw_w
    suffix = suffix + (d_t_final * t_final)[..., None]
    d_alpha = d_weights * trans - suffix / one_minus_alpha
    d_sd = d_alpha * one_minus_alpha
    d_sigma = np.where(clamped, 0.0, d_sd * delta)
    return d_sigma


def sample_deltas(depths: np.ndarray, t_far) -> np.ndarray:
    """Compositing step sizes: distance to the next sample, then to t_far."""
    delta = np.empty_like(depths)
    delta[..., :-1] = np.diff(depths, axis=-1)
    delta[..., -1] = np.asarray(t_far, dtype=np.float64) - depths[..., -1]
    return delta


# -- batched ray rendering ----------------------------------------------------

@dataclass
class RayBatchResult:
    rgb: np.ndarray                  # (N, 3)
    weights: np.ndarray              # (N, S)
    t_final: np.ndarray              # (N,)
    depths: np.ndarray               # (N, S)
    deltas: np.ndarray               # (N, S)
    t_bounds: np.ndarray             # (N, 2) clipped near/far per ray
    nodes: list                      # distinct answering NodeIds
    assignment: np.ndarray           # (N*S,) index into nodes
    records: list                    # per-node QueryRecord (when requested)
    node_sample_idx: list            # per-node flat sample indices (when requested)
    sigma: np.ndarray                # (N, S)
    color: np.ndarray                # (N, S, 3)


def render_ray_batch(tree: LodTree, origins, directions, t0, t1,
                     camera: CameraModel, config: RenderConfig,
                     pixel_keys, appearance_ids=None,
                     keep_records: bool = False) -> RayBatchResult:
    """Render many rays that share a camera; the core forward pass.

    ``origins``/``directions`` are (N, 3); ``t0``/``t1`` the per-ray clip
    range against the scene box; ``pixel_keys`` the per-ray sampling keys.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    pixel_keys = np.asarray(pixel_keys, dtype=np.uint64)
    n = origins.shape[0]
    s = config.n_samples

    draw = 2 * np.arange(s, dtype=np.uint64)
    u = (counter_uniform(config.seed, pixel_keys[:, None], draw[None, :])
         if config.jitter else np.full((n, s), 0.5))
    depths = _stratified_depths(t0, t1, s, u)
    radii = sphere_radius(depths, camera)
    if config.perturb:
        p = counter_uniform(config.seed, pixel_keys[:, None], draw[None, :] + np.uint64(1)) - 0.5
        route_radii = radii * np.exp2(p)
    else:
        route_radii = radii

    pts = origins[:, None, :] + directions[:, None, :] * depths[..., None]
    box = tree.root_aabb
    pts = np.clip(pts, box.min_corner, box.max_corner)  # shave float noise at faces

    flat_pts = pts.reshape(-1, 3)
    flat_r = route_radii.reshape(-1)
    assignment, nodes = tree.route(
        flat_pts, flat_r,
        force_level=tree.max_depth if config.leaf_only else None)

    sigma = np.empty(n * s)
    color = np.empty((n * s, 3))
    flat_dirs = np.broadcast_to(directions[:, None, :], (n, s, 3)).reshape(-1, 3)
    if appearance_ids is None:
        flat_app = None
    else:
        flat_app = np.broadcast_to(
            np.asarray(appearance_ids, dtype=np.int64)[:, None], (n, s)).reshape(-1)
    records = []
    node_sample_idx = []
    for i, nid in enumerate(nodes):
        node = tree.nodes[nid]
        idx = np.nonzero(assignment == i)[0]
        app = None if flat_app is None else flat_app[idx]
        if hasattr(node.field, "evaluate_world"):
            smp = node.field.evaluate_world(flat_pts[idx], flat_dirs[idx], app)
        else:
            local = (flat_pts[idx] - node.aabb.min_corner) / node.aabb.edge
            local = np.clip(local, 0.0, 1.0)
            if keep_records:
                smp, rec = field_query(node.field, local, flat_dirs[idx], app,
                                       with_record=True)
                records.append(rec)
                node_sample_idx.append(idx)
            else:
                smp = field_query(node.field, local, flat_dirs[idx], app)
        sigma[idx] = smp.density
        color[idx] = smp.color

    sigma = sigma.reshape(n, s)
    color = color.reshape(n, s, 3)
    deltas = sample_deltas(depths, t1)
    weights, t_final = composite_forward(sigma, deltas)
    bg = np.asarray(config.background, dtype=np.float64)
    rgb = np.einsum("ns,nsc->nc", weights, color) + t_final[:, None] * bg

    return RayBatchResult(rgb=rgb, weights=weights, t_final=t_final, depths=depths,
                          deltas=deltas, t_bounds=np.stack([t0, t1], axis=-1),
                          nodes=nodes, assignment=assignment,
                          records=records, node_sample_idx=node_sample_idx,
                          sigma=sigma, color=color)


def render_ray(tree: LodTree, ray: Ray, camera: CameraModel, config: RenderConfig,
               pixel_key: int = 0, appearance_id: Optional[int] = None):
    """Render a single ray.

    Returns (rgb (3,), weights (S,), resolved_nodes set).  Weights are the
    per-sample contributions T_k * alpha_k used by the training losses.

    Raises
    ------
    RayMissesScene
        If the ray (after any config clip overrides) misses the scene box.
    """
    hit = tree.root_aabb.intersect_ray(ray.origin, ray.direction)
    if hit is None:
        raise RayMissesScene("ray does not intersect the scene box")
    t0 = max(hit[0], ray.t_near, config.t_near if config.t_near is not None else 0.0)
    t1 = min(hit[1], ray.t_far, config.t_far if config.t_far is not None else np.inf)
    if t1 <= t0:
        raise RayMissesScene("empty clip range for ray")
    app = None if appearance_id is None else np.array([appearance_id])
    res = render_ray_batch(tree, ray.origin[None], ray.direction[None],
                           np.array([t0]), np.array([t1]), camera, config,
                           np.array([pixel_key], dtype=np.uint64), app)
    return res.rgb[0], res.weights[0], set(res.nodes)


# -- frames and trajectories --------------------------------------------------

def _with_ancestors(nids) -> set:
    out = set()
    for nid in nids:
        cur = NodeId(*nid)
        while True:
            out.add(cur)
            if cur.level == 0:
                break
            cur = cur.parent()
    return out


def camera_rays(camera: CameraModel, stride: int = 1):
    """Pixel-center rays of a full frame; returns (pixels_xy, keys, dirs)."""
    w, h = camera.resolution
    xs = np.arange(0, w, stride)
    ys = np.arange(0, h, stride)
    gx, gy = np.meshgrid(xs, ys)
    gx = gx.reshape(-1)
    gy = gy.reshape(-1)
    pixels = np.stack([gx + 0.5, gy + 0.5], axis=-1)
    keys = (gy.astype(np.uint64) * np.uint64(w) + gx.astype(np.uint64))
    dirs = camera.ray_directions(pixels)
    return pixels, keys, dirs


def _intersect_box_batch(origin, dirs, box: Aabb):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        tt0 = (box.min_corner - origin) * inv
        tt1 = (box.max_corner - origin) * inv
    lo = np.where(np.isnan(tt0), -np.inf, np.minimum(tt0, tt1))
    hi = np.where(np.isnan(tt1), np.inf, np.maximum(tt0, tt1))
    par = dirs == 0.0
    if np.any(par):
        inside = (origin >= box.min_corner) & (origin <= box.max_corner)
        bad = par & ~inside
        lo = np.where(par, -np.inf, lo)
        hi = np.where(par, np.inf, hi)
        hi = np.where(bad, -np.inf, hi)
    t_enter = np.maximum(lo.max(axis=-1), 0.0)
    t_exit = hi.min(axis=-1)
    return t_enter, t_exit


def render_frame(tree: LodTree, camera: CameraModel, config: RenderConfig,
                 frame_id: int = 0):
    """Render a full frame and account for the parameters it touched.

    Returns (image (H, W, 3) float64 in [0, 1], WorkingSetReport).  Rays
    that miss the scene box show the background color and touch nothing.
    """
    w, h = camera.resolution
    stride = max(1, config.stride)
    cfg = config if not config.frame_keyed_sampling else replace(
        config, seed=int(counter_uniform(config.seed, np.uint64(frame_id), 0) * 2**53))

    pixels, keys, dirs = camera_rays(camera, stride)
    origin = camera.center
    t0, t1 = _intersect_box_batch(origin, dirs, tree.root_aabb)
    if cfg.t_near is not None:
        t0 = np.maximum(t0, cfg.t_near)
    if cfg.t_far is not None:
        t1 = np.minimum(t1, cfg.t_far)
    valid = t1 > t0

    n_rays = dirs.shape[0]
    rgb = np.empty((n_rays, 3))
    bg = np.asarray(cfg.background, dtype=np.float64)
    rgb[~valid] = bg
    touched: set = set()

    idx = np.nonzero(valid)[0]
    app_ids = np.full(idx.shape, camera.appearance_id, dtype=np.int64)
    if idx.size:
        origins = np.broadcast_to(origin, (idx.size, 3))
        if cfg.threads > 1 and idx.size > 4096:
            from concurrent.futures import ThreadPoolExecutor
            chunks = np.array_split(np.arange(idx.size), cfg.threads)
            results = [None] * len(chunks)

            def run(ci):
                c = chunks[ci]
                j = idx[c]
                return ci, render_ray_batch(tree, origins[c], dirs[j], t0[j], t1[j],
                                            camera, cfg, keys[j], app_ids[c])

            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                for ci, res in pool.map(run, range(len(chunks))):
                    results[ci] = res
            for ci, c in enumerate(chunks):
                rgb[idx[c]] = results[ci].rgb
                touched.update(results[ci].nodes)
        else:
            res = render_ray_batch(tree, origins, dirs[idx], t0[idx], t1[idx],
                                   camera, cfg, keys[idx], app_ids)
            rgb[idx] = res.rgb
            touched.update(res.nodes)

    out_w = len(range(0, w, stride))
    out_h = len(range(0, h, stride))
    image = rgb.reshape(out_h, out_w, 3)
    traversal = _with_ancestors(touched)
    touched_bytes = sum(tree.nodes[nid].param_bytes for nid in touched)
    report = WorkingSetReport(frame_id=frame_id, touched_nodes=touched,
                              traversal_nodes=traversal, touched_bytes=touched_bytes,
                              total_bytes=tree.total_param_bytes)
    return image, report


@dataclass
class TrajectoryResult:
    frames: list
    reports: list
    popup: list  # mean per-pixel |delta rgb| between consecutive frames

    @property
    def popup_mean(self) -> float:
        return float(np.mean(self.popup)) if self.popup else 0.0

    @property
    def popup_max(self) -> float:
        return float(np.max(self.popup)) if self.popup else 0.0


def render_trajectory(tree: LodTree, trajectory: Sequence[CameraModel],
                      config: RenderConfig) -> TrajectoryResult:
    """Render a camera path; also reports the frame-to-frame popup metric.

    The popup metric is the mean per-pixel absolute rgb change between
    consecutive frames; on a static-scene dolly it measures how visible
    the level transitions are.
    """
    if not trajectory:
        raise ValueError("trajectory must contain at least one camera")
    frames = []
    reports = []
    for i, cam in enumerate(trajectory):
        image, report = render_frame(tree, cam, config, frame_id=i)
        frames.append(image)
        reports.append(report)
    popup = [float(np.mean(np.abs(frames[i + 1] - frames[i])))
             for i in range(len(frames) - 1)]
    return TrajectoryResult(frames=frames, reports=reports, popup=popup)
