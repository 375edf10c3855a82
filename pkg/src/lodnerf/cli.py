"""Command-line client for the job service.

Every subcommand builds a request, sends it to the service, and prints
the response.  By default the service runs in-process (no network);
``--server URL`` targets a running instance instead, e.g. one started
with ``lodnerf serve``.

Exit codes are stable contracts: 0 success, 2 malformed input (parse
errors, bad trajectories, unknown scenes), 3 empty observation set,
4 non-finite training loss.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

EXIT_CODES = {
    "ParseError": 2,
    "UnknownSceneSpec": 2,
    "UnsupportedCameraModel": 2,
    "VersionMismatch": 2,
    "ChecksumMismatch": 2,
    "EmptyObservations": 3,
    "NonFiniteLoss": 4,
}


def _request(server: str | None, path: str, payload: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=payload)

    async def run():
        from .service import create_app
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://lodnerf.local",
                                     timeout=None) as client:
            return await client.post(path, json=payload)

    import asyncio
    return asyncio.run(run())


def _post(args, path: str, payload: dict) -> dict:
    resp = _request(args.server, path, payload)
    if resp.status_code == 200:
        return resp.json()
    try:
        body = resp.json()
    except ValueError:
        print(f"error: service returned {resp.status_code}", file=sys.stderr)
        sys.exit(1)
    name = body.get("error", "")
    detail = body.get("detail", body)
    print(f"error: {name}: {detail}", file=sys.stderr)
    sys.exit(EXIT_CODES.get(name, 1))


def _load_config_file(path: str) -> dict:
    """key=value lines; '#' starts a comment; values parsed as JSON when possible."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            print(f"error: bad config line: {raw!r}", file=sys.stderr)
            sys.exit(2)
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(val)
        except ValueError:
            out[key] = val
    return out


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Config-file values fill in for flags the user left at their default."""
    if not getattr(args, "config", None):
        return
    defaults = _load_config_file(args.config)
    sub = parser._command_parsers.get(args.command, parser)
    for key, val in defaults.items():
        dest = key.replace("-", "_")
        if hasattr(args, dest) and sub.get_default(dest) == getattr(args, dest):
            setattr(args, dest, val)


def _synthetic_payload(args) -> dict | None:
    if not getattr(args, "synthetic", None):
        return None
    spec = {"name": args.synthetic}
    if getattr(args, "scene_seed", None) is not None:
        spec["seed"] = args.scene_seed
    if getattr(args, "grid_size", None):
        spec["grid_size"] = args.grid_size
    if getattr(args, "max_depth", None) is not None:
        spec["max_depth"] = args.max_depth
    return spec


def cmd_build(args, parser) -> None:
    if bool(args.colmap) == bool(args.synthetic):
        parser.error("exactly one of --colmap or --synthetic is required")
    if args.colmap and not Path(args.colmap).is_dir():
        print(f"error: ParseError: {args.colmap} is not a directory", file=sys.stderr)
        sys.exit(2)
    payload = {
        "out_path": args.out,
        "colmap_dir": args.colmap,
        "synthetic": _synthetic_payload(args),
        "grid_size": args.grid_size,
        "max_depth": args.max_depth,
        "field_resolution": args.field_resolution,
        "seed": args.seed,
    }
    res = _post(args, "/build", payload)
    print(f"tree written to {res['tree_path']}")
    print(f"nodes: {res['node_count']}  retained fraction: {res['retained_fraction']:.4f}")
    hist = res["level_histogram"]
    for lvl in sorted(hist, key=int):
        print(f"  level {lvl}: {hist[lvl]} nodes")
    print(f"total parameter bytes: {res['total_param_bytes']}")
    if res.get("skipped_observations"):
        print(f"skipped behind-camera observations: {res['skipped_observations']}")


def cmd_train(args, parser) -> None:
    try:
        w1, w2, w3 = (float(v) for v in args.weights.split(","))
    except ValueError:
        parser.error("--weights expects w1,w2,w3")
    payload = {
        "tree_path": args.tree,
        "out_path": args.out,
        "synthetic": _data_synthetic(args, parser),
        "colmap_dir": _data_colmap(args),
        "images_dir": args.images_dir,
        "iters": args.iters,
        "weights": (w1, w2, w3),
        "workers": args.workers,
        "split_level": args.split_level,
        "seed": args.seed,
        "rays_per_batch": args.rays_per_batch,
        "samples_per_ray": args.samples,
        "pyramid_levels": args.pyramid_levels,
        "learning_rate": args.learning_rate,
        "log_path": args.log,
    }
    res = _post(args, "/train", payload)
    print(f"checkpoint written to {res['checkpoint_path']} after {res['steps']} steps")
    if res["final_loss"]:
        parts = ", ".join(f"{k}={v:.5g}" for k, v in res["final_loss"].items())
        print(f"final loss: {parts}")
    for lvl, p in sorted(res["psnr_per_level"].items(), key=lambda kv: int(kv[0])):
        print(f"  heldout PSNR level {lvl}: {p:.2f} dB")
    print(f"mean heldout PSNR: {res['psnr']:.2f} dB")


def _data_synthetic(args, parser):
    """--data is a COLMAP directory, a scene json file, or a scene name."""
    data = args.data
    if Path(data).is_dir():
        return None
    if Path(data).is_file():
        try:
            obj = json.loads(Path(data).read_text(encoding="utf-8"))
        except ValueError as e:
            print(f"error: ParseError: bad scene json: {e}", file=sys.stderr)
            sys.exit(2)
        return obj.get("synthetic")
    return {"name": data, "seed": args.scene_seed or 0}


def _data_colmap(args):
    data = args.data
    if Path(data).is_dir():
        return data
    if Path(data).is_file():
        try:
            obj = json.loads(Path(data).read_text(encoding="utf-8"))
        except ValueError:
            return None
        return obj.get("colmap_dir")
    return None


def cmd_render(args, parser) -> None:
    traj_path = Path(args.trajectory)
    if not traj_path.is_file():
        print(f"error: ParseError: trajectory file {args.trajectory} not found",
              file=sys.stderr)
        sys.exit(2)
    try:
        trajectory = json.loads(traj_path.read_text(encoding="utf-8"))
    except ValueError as e:
        print(f"error: ParseError: bad trajectory json: {e}", file=sys.stderr)
        sys.exit(2)
    if args.resolution:
        try:
            w, h = (int(v) for v in args.resolution.split("x"))
        except ValueError:
            parser.error("--resolution expects WxH")
        trajectory["resolution"] = (w, h)
    payload = {
        "tree_path": args.tree,
        "out_dir": args.out_dir,
        "trajectory": trajectory,
        "samples": args.samples,
        "perturb": not args.no_perturb,
        "leaf_only": args.leaf_only,
        "seed": args.seed,
        "threads": args.threads,
        "image_format": args.image_format,
    }
    res = _post(args, "/render", payload)
    print(f"wrote {len(res['frames'])} frames to {args.out_dir}")
    print(f"working-set CSV: {res['workingset_csv']}")
    print(f"max working-set fraction: {res['max_fraction']:.4%}")
    if res["popup"]:
        print(f"popup metric: mean {sum(res['popup']) / len(res['popup']):.5f} "
              f"max {max(res['popup']):.5f}")


def cmd_stats(args, parser) -> None:
    payload = {
        "workingset_csv": args.workingset,
        "tree_path": args.tree,
        "plot_out": args.plot,
    }
    res = _post(args, "/stats", payload)
    print(f"frames: {res['n_frames']}")
    print(f"max fraction: {res['max_fraction']:.4%}  mean fraction: {res['mean_fraction']:.4%}")
    print(f"max touched bytes: {res['max_touched_bytes']}")
    if res["per_level_bytes"]:
        for lvl, b in sorted(res["per_level_bytes"].items(), key=lambda kv: int(kv[0])):
            print(f"  level {lvl}: {b} bytes")
    if res.get("plot_path"):
        print(f"plot: {res['plot_path']}")


def cmd_serve(args, parser) -> None:
    import uvicorn
    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lodnerf",
        description="Level-of-detail octree radiance fields: build, train, render, report.")
    parser.add_argument("--server", default=None,
                        help="URL of a running service; default runs in-process")
    parser.add_argument("--config", default=None,
                        help="key=value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build and prune a tree from SfM or a synthetic scene")
    b.add_argument("--colmap", default=None, help="COLMAP text model directory")
    b.add_argument("--synthetic", default=None,
                   help="synthetic scene name (textured-plane, colored-voxel-clusters, nested-shells)")
    b.add_argument("--scene-seed", type=int, default=None)
    b.add_argument("--max-depth", type=int, default=None)
    b.add_argument("--grid-size", type=int, default=None)
    b.add_argument("--field-resolution", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="output tree directory")
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", help="optimise node fields on posed images")
    t.add_argument("--tree", required=True)
    t.add_argument("--data", required=True,
                   help="synthetic scene name, scene json, or COLMAP directory")
    t.add_argument("--images-dir", default=None, help="image files for COLMAP data")
    t.add_argument("--scene-seed", type=int, default=None)
    t.add_argument("--iters", type=int, default=1000)
    t.add_argument("--weights", default="0.002,0.0005,0.01", help="w1,w2,w3")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--split-level", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--rays-per-batch", type=int, default=1024)
    t.add_argument("--samples", type=int, default=32)
    t.add_argument("--pyramid-levels", type=int, default=3)
    t.add_argument("--learning-rate", type=float, default=0.05)
    t.add_argument("--log", default=None, help="training log CSV path")
    t.add_argument("--out", required=True, help="output checkpoint directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a trajectory and its working-set CSV")
    r.add_argument("--tree", required=True)
    r.add_argument("--trajectory", required=True, help="trajectory JSON file")
    r.add_argument("--resolution", default=None, help="WxH override")
    r.add_argument("--samples", type=int, default=32)
    r.add_argument("--no-perturb", action="store_true",
                   help="disable sampling-sphere radius perturbation")
    r.add_argument("--leaf-only", action="store_true",
                   help="route every sample to the deepest retained node (ablation)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--image-format", choices=("png", "pfm", "both"), default="png")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("stats", help="summarise a working-set CSV")
    s.add_argument("--workingset", required=True, help="workingset.csv from render")
    s.add_argument("--tree", default=None, help="tree for per-level byte breakdown")
    s.add_argument("--plot", default=None, help="write fraction-vs-frame SVG here")
    s.set_defaults(func=cmd_stats)

    v = sub.add_parser("serve", help="run the HTTP service")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8321)
    v.set_defaults(func=cmd_serve)

    parser._command_parsers = {"build": b, "train": t, "render": r,
                               "stats": s, "serve": v}
    return parser


def main(argv=None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config(args, parser)
    args.func(args, parser)


if __name__ == "__main__":
    main()
