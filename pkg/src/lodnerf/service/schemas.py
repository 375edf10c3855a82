"""Request/response models of the job service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class SyntheticSpec(BaseModel):
    name: str
    seed: int = 0
    resolution: tuple[int, int] = (128, 96)
    n_cameras: int = 10
    focal: Optional[float] = None
    grid_size: int = 16
    max_depth: int = 3
    n_sparse_points: int = 400

    def to_scene_spec(self) -> dict:
        spec = self.model_dump()
        if spec["focal"] is None:
            spec.pop("focal")
        return spec


class BuildRequest(BaseModel):
    out_path: str
    colmap_dir: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    grid_size: Optional[int] = None
    max_depth: Optional[int] = None
    field_resolution: int = 16
    init_density: float = 0.02
    aabb_expand: float = 0.05
    seed: int = 0


class BuildResponse(BaseModel):
    tree_path: str
    node_count: int
    level_histogram: dict[int, int]
    retained_fraction: float
    total_param_bytes: int
    skipped_observations: int = 0


class TrainRequest(BaseModel):
    tree_path: str
    out_path: str
    synthetic: Optional[SyntheticSpec] = None
    colmap_dir: Optional[str] = None
    images_dir: Optional[str] = None
    iters: int = 1000
    weights: tuple[float, float, float] = (0.002, 0.0005, 0.01)
    workers: int = 1
    split_level: int = 1
    seed: int = 0
    rays_per_batch: int = 1024
    samples_per_ray: int = 32
    pyramid_levels: int = 3
    learning_rate: float = 0.05
    perturb: bool = True
    log_path: Optional[str] = None
    checkpoint_every: int = 0


class TrainResponse(BaseModel):
    checkpoint_path: str
    log_path: Optional[str]
    steps: int
    final_loss: dict[str, float]
    psnr_per_level: dict[int, float]
    psnr: float


class TrajectorySpec(BaseModel):
    """Either a parametric camera path or an explicit camera list."""

    type: str = "zoom_out"               # zoom_out | dolly | orbit | explicit
    frames: int = 12
    d_start: float = 0.6
    d_end: float = 4.0
    height: float = 0.55
    resolution: tuple[int, int] = (160, 120)
    focal: Optional[float] = None
    synthetic: Optional[SyntheticSpec] = None   # scene whose geometry anchors the path
    cameras: Optional[list[dict]] = None        # explicit: camera json objects


class RenderRequest(BaseModel):
    tree_path: str
    out_dir: str
    trajectory: TrajectorySpec
    samples: int = 32
    perturb: bool = True
    leaf_only: bool = False
    seed: int = 0
    threads: int = 1
    image_format: str = "png"            # png | pfm | both
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)


class RenderResponse(BaseModel):
    frames: list[str]
    workingset_csv: str
    popup: list[float]
    max_fraction: float


class StatsRequest(BaseModel):
    workingset_csv: str
    tree_path: Optional[str] = None
    plot_out: Optional[str] = None


class StatsResponse(BaseModel):
    n_frames: int
    max_fraction: float
    mean_fraction: float
    max_touched_bytes: int
    per_level_bytes: dict[int, int] = Field(default_factory=dict)
    plot_path: Optional[str] = None


class ErrorBody(BaseModel):
    error: str
    detail: str
