"""The jobs behind the service endpoints.

Paths in requests are interpreted on the service host: this is a
single-host workspace service, so the CLI and the service share a
filesystem and trees move by path, not by value.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import EmptyObservations, ParseError
from ..geometry import look_at_camera
from ..octree import allocate_fields, prune_tree
from ..render import RenderConfig, render_trajectory
from ..scene_io.colmap import (camera_from_json, load_colmap,
                               observations_from_cloud, root_aabb_from_points)
from ..scene_io.images import (read_png, write_line_plot_svg, write_pfm,
                               write_png, write_workingset_csv,
                               read_workingset_csv)
from ..scene_io.synthetic import make_synthetic_scene, orbit_cameras
from ..scene_io.tree_store import load_tree, save_tree
from ..train.loop import TrainConfig, fit
from ..train.pyramid import build_pyramid
from . import schemas as sc


def build_tree_job(req: sc.BuildRequest) -> sc.BuildResponse:
    skipped = 0
    if req.synthetic is not None:
        scene = make_synthetic_scene(req.synthetic.to_scene_spec())
        observations = scene.observations()
        aabb = scene.aabb
        grid_size = req.grid_size or scene.grid_size
        max_depth = req.max_depth if req.max_depth is not None else scene.max_depth
        n_images = len(scene.cameras)
    elif req.colmap_dir is not None:
        cloud, cameras = load_colmap(req.colmap_dir)
        observations, skipped = observations_from_cloud(cloud, cameras)
        if not observations:
            raise EmptyObservations("sparse model yields no usable observations")
        aabb = root_aabb_from_points(cloud.xyz_array(), expand=req.aabb_expand)
        grid_size = req.grid_size or 2048
        max_depth = req.max_depth if req.max_depth is not None else 4
        n_images = len(cameras)
    else:
        raise ParseError("<request>", None, "need either synthetic or colmap_dir")

    tree = prune_tree(aabb, grid_size, max_depth, observations)
    allocate_fields(tree, req.field_resolution, n_images, req.seed,
                    init_density=req.init_density)
    save_tree(req.out_path, tree)
    full = sum(8 ** l for l in range(max_depth + 1))
    return sc.BuildResponse(
        tree_path=req.out_path,
        node_count=len(tree.nodes),
        level_histogram=tree.level_histogram(),
        retained_fraction=len(tree.nodes) / full,
        total_param_bytes=tree.total_param_bytes,
        skipped_observations=skipped,
    )


def _dataset_for(req: sc.TrainRequest):
    if req.synthetic is not None:
        scene = make_synthetic_scene(req.synthetic.to_scene_spec())
        images = scene.render_images()
        cameras = scene.cameras
        obs = scene.observations()
    elif req.colmap_dir is not None:
        cloud, cameras = load_colmap(req.colmap_dir)
        obs, _ = observations_from_cloud(cloud, cameras)
        if not req.images_dir:
            raise ParseError("<request>", None, "colmap training needs images_dir")
        from ..scene_io.colmap import image_names
        names = image_names(req.colmap_dir)
        images = [read_png(Path(req.images_dir) / n) for n in names]
    else:
        raise ParseError("<request>", None, "need either synthetic or colmap_dir")
    dataset = build_pyramid(images, cameras, req.pyramid_levels)
    return dataset, obs, cameras


def train_job(req: sc.TrainRequest) -> sc.TrainResponse:
    tree = load_tree(req.tree_path)
    dataset, observations, cameras = _dataset_for(req)
    w1, w2, w3 = req.weights
    config = TrainConfig(
        n_iterations=req.iters, rays_per_batch=req.rays_per_batch,
        samples_per_ray=req.samples_per_ray, pyramid_levels=req.pyramid_levels,
        w1=w1, w2=w2, w3=w3, learning_rate=req.learning_rate,
        perturb=req.perturb, seed=req.seed, checkpoint_every=req.checkpoint_every,
    )
    if req.workers > 1:
        from ..distrib import plan, simulate_distributed_fit
        dplan = plan(tree, req.split_level, req.workers, observations, cameras)
        simulate_distributed_fit(tree, dataset, dplan, config,
                                 log_path=req.log_path)
        from ..train.loop import evaluate_heldout
        psnr_levels = evaluate_heldout(tree, dataset, config)
        final = {}
        psnr = float(np.mean(list(psnr_levels.values()))) if psnr_levels else 0.0
        steps = req.iters
    else:
        report = fit(tree, dataset, config, log_path=req.log_path,
                     checkpoint_dir=Path(req.out_path).parent if req.checkpoint_every else None)
        psnr_levels = report.psnr_per_level
        final = report.final_loss
        psnr = report.psnr
        steps = report.steps
    save_tree(req.out_path, tree)
    return sc.TrainResponse(
        checkpoint_path=req.out_path, log_path=req.log_path, steps=steps,
        final_loss={k: float(v) for k, v in final.items()},
        psnr_per_level={int(k): float(v) for k, v in psnr_levels.items()},
        psnr=psnr,
    )


def trajectory_cameras(spec: sc.TrajectorySpec):
    if spec.type == "explicit":
        if not spec.cameras:
            raise ParseError("<trajectory>", None, "explicit trajectory without cameras")
        return [camera_from_json(c) for c in spec.cameras]
    if spec.synthetic is not None:
        scene = make_synthetic_scene(spec.synthetic.to_scene_spec())
        center = scene.aabb.center
        base_focal = spec.focal or 1.4 * spec.resolution[0]
        if spec.type == "zoom_out":
            return scene.zoom_out(spec.frames, spec.d_start, spec.d_end,
                                  resolution=spec.resolution, focal=base_focal)
        if spec.type == "dolly":
            return scene.dolly(spec.frames, spec.d_start, spec.d_end,
                               resolution=spec.resolution, focal=base_focal)
        if spec.type == "orbit":
            return orbit_cameras(center, spec.d_start, spec.height, spec.frames,
                                 focal=base_focal, resolution=spec.resolution)
        raise ParseError("<trajectory>", None, f"unknown trajectory type {spec.type!r}")
    # parametric path around the origin without a scene anchor
    base_focal = spec.focal or 1.4 * spec.resolution[0]
    if spec.type in ("zoom_out", "dolly"):
        space = np.geomspace if spec.type == "zoom_out" else np.linspace
        direction = np.array([1.0, 0.6, 0.75])
        direction /= np.linalg.norm(direction)
        return [look_at_camera(direction * d, [0, 0, 0], focal_length=base_focal,
                               resolution=spec.resolution, appearance_id=-1)
                for d in space(spec.d_start, spec.d_end, spec.frames)]
    if spec.type == "orbit":
        return orbit_cameras([0, 0, 0], spec.d_start, spec.height, spec.frames,
                             focal=base_focal, resolution=spec.resolution)
    raise ParseError("<trajectory>", None, f"unknown trajectory type {spec.type!r}")


def render_job(req: sc.RenderRequest) -> sc.RenderResponse:
    tree = load_tree(req.tree_path)
    cameras = trajectory_cameras(req.trajectory)
    out_dir = Path(req.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = RenderConfig(n_samples=req.samples, perturb=req.perturb,
                          leaf_only=req.leaf_only, seed=req.seed,
                          threads=req.threads, background=req.background)
    result = render_trajectory(tree, cameras, config)
    frame_paths = []
    for i, frame in enumerate(result.frames):
        if req.image_format in ("png", "both"):
            p = out_dir / f"frame_{i:04d}.png"
            write_png(p, frame)
            frame_paths.append(str(p))
        if req.image_format in ("pfm", "both"):
            p = out_dir / f"frame_{i:04d}.pfm"
            write_pfm(p, frame)
            if req.image_format == "pfm":
                frame_paths.append(str(p))
    csv_path = out_dir / "workingset.csv"
    write_workingset_csv(csv_path, result.reports)
    fractions = [r.fraction for r in result.reports]
    return sc.RenderResponse(frames=frame_paths, workingset_csv=str(csv_path),
                             popup=result.popup,
                             max_fraction=float(max(fractions)))


def stats_job(req: sc.StatsRequest) -> sc.StatsResponse:
    try:
        rows = read_workingset_csv(req.workingset_csv)
    except (ValueError, OSError) as e:
        raise ParseError(req.workingset_csv, None, str(e)) from None
    if not rows:
        raise ParseError(req.workingset_csv, None, "no frames in working-set CSV")
    fractions = [r["fraction"] for r in rows]
    per_level = {}
    if req.tree_path:
        tree = load_tree(req.tree_path)
        for nid, node in tree.nodes.items():
            per_level[nid.level] = per_level.get(nid.level, 0) + node.param_bytes
    plot_path = None
    if req.plot_out:
        write_line_plot_svg(req.plot_out, fractions,
                            title="working-set fraction per frame",
                            ylabel="fraction of model bytes")
        plot_path = req.plot_out
    return sc.StatsResponse(
        n_frames=len(rows),
        max_fraction=float(max(fractions)),
        mean_fraction=float(sum(fractions) / len(rows)),
        max_touched_bytes=max(r["touched_bytes"] for r in rows),
        per_level_bytes=per_level,
        plot_path=plot_path,
    )
