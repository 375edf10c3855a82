import numpy as np
import pytest

from lodnerf.geometry import Aabb, look_at_camera
from lodnerf.octree import allocate_fields, build_perfect_tree, prune_tree
from lodnerf.scene_io.synthetic import make_synthetic_scene
from lodnerf.train.pyramid import build_pyramid


UNIT_BOX = Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])


@pytest.fixture(scope="session")
def shells_scene():
    return make_synthetic_scene({"name": "nested-shells", "resolution": [64, 48],
                                 "n_cameras": 6, "n_sparse_points": 300})


@pytest.fixture(scope="session")
def cluster_scene():
    return make_synthetic_scene({"name": "colored-voxel-clusters",
                                 "resolution": [64, 48], "n_cameras": 6,
                                 "n_sparse_points": 300})


@pytest.fixture(scope="session")
def plane_scene():
    return make_synthetic_scene({"name": "textured-plane", "resolution": [64, 48],
                                 "n_cameras": 6, "n_sparse_points": 300})


@pytest.fixture(scope="session")
def shells_tree(shells_scene):
    tree = prune_tree(shells_scene.aabb, shells_scene.grid_size,
                      shells_scene.max_depth, shells_scene.observations())
    allocate_fields(tree, resolution=8, n_images=len(shells_scene.cameras), seed=11)
    return tree


@pytest.fixture(scope="session")
def shells_dataset(shells_scene):
    images = shells_scene.render_images(n_steps=256, supersample=1)
    return build_pyramid(images, shells_scene.cameras, 2)


@pytest.fixture(scope="session")
def small_perfect_tree():
    tree = build_perfect_tree(UNIT_BOX, grid_size=64, max_depth=2)
    allocate_fields(tree, resolution=4, n_images=2, seed=5)
    return tree
