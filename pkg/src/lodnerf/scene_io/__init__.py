"""Scene ingestion, synthetic test scenes, and tree persistence."""

from .colmap import load_colmap, observations_from_cloud, root_aabb_from_points
from .synthetic import make_synthetic_scene, SyntheticScene
from .tree_store import save_tree, load_tree

__all__ = [
    "load_colmap",
    "observations_from_cloud",
    "root_aabb_from_points",
    "make_synthetic_scene",
    "SyntheticScene",
    "save_tree",
    "load_tree",
]
