import copy

import numpy as np
import pytest

from lodnerf import rng as _rng
from lodnerf.errors import (ChecksumMismatch, EmptyObservations, ParseError,
                            UnknownSceneSpec, UnsupportedCameraModel,
                            VersionMismatch)
from lodnerf.geometry import Aabb, quat_to_rotation
from lodnerf.octree import allocate_fields, prune_tree
from lodnerf.scene_io.colmap import (load_colmap, image_names,
                                     load_cameras_json, observations_from_cloud,
                                     root_aabb_from_points, save_cameras_json)
from lodnerf.scene_io.images import (read_pfm, read_png, read_workingset_csv,
                                     write_line_plot_svg, write_pfm, write_png,
                                     write_workingset_csv)
from lodnerf.scene_io.synthetic import make_synthetic_scene
from lodnerf.scene_io.tree_store import load_tree, save_tree
from lodnerf.render import WorkingSetReport

CAMERAS_TXT = """\
# Camera list with one line of data per camera:
#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]
1 PINHOLE 640 480 500.0 500.0 320.0 240.0
2 SIMPLE_PINHOLE 320 240 250.0 160.0 120.0
"""

IMAGES_TXT = """\
# Image list with two lines of data per image:
#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME
#   POINTS2D[] as (X, Y, POINT3D_ID)
2 1.0 0.0 0.0 0.0 0.1 -0.2 2.5 2 right.png
100.0 110.0 7 200.0 210.0 9
1 0.9238795 0.0 0.3826834 0.0 0.0 0.0 2.0 1 left.png
50.0 60.0 7 80.0 90.0 8
"""

POINTS3D_TXT = """\
# 3D point list with one line of data per point:
#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)
7 0.5 0.1 0.3 200 10 10 0.75 1 0 2 0
8 -0.4 0.2 0.8 10 200 10 0.5 1 1
9 0.0 -0.3 0.5 10 10 200 0.9 2 1
"""


@pytest.fixture()
def colmap_dir(tmp_path):
    d = tmp_path / "model"
    d.mkdir()
    (d / "cameras.txt").write_text(CAMERAS_TXT)
    (d / "images.txt").write_text(IMAGES_TXT)
    (d / "points3D.txt").write_text(POINTS3D_TXT)
    return d


class TestColmapLoader:
    def test_fixture_field_by_field(self, colmap_dir):
        cloud, cameras = load_colmap(colmap_dir)
        assert len(cameras) == 2
        cam1, cam2 = cameras  # sorted by image id: 1 then 2
        assert cam1.focal_length == 500.0
        assert cam1.resolution == (640, 480)
        assert np.allclose(cam1.principal_point, [320.0, 240.0])
        assert np.allclose(cam1.translation, [0.0, 0.0, 2.0])
        assert np.allclose(cam1.rotation,
                           quat_to_rotation([0.9238795, 0.0, 0.3826834, 0.0]))
        assert cam2.focal_length == 250.0
        assert cam2.resolution == (320, 240)
        assert np.allclose(cam2.translation, [0.1, -0.2, 2.5])

        assert len(cloud) == 3
        p7 = cloud.points[0]
        assert p7.point_id == 7
        assert np.allclose(p7.xyz, [0.5, 0.1, 0.3])
        assert p7.track == ((0, 0), (1, 0))  # image ids 1, 2 -> camera indices
        assert cloud.points[1].track == ((0, 1),)
        assert cloud.total_observations == 4
        assert image_names(colmap_dir) == ["left.png", "right.png"]

    def test_unknown_image_in_track(self, colmap_dir):
        bad = POINTS3D_TXT + "10 0 0 0 1 2 3 0.1 9 0\n"
        (colmap_dir / "points3D.txt").write_text(bad)
        with pytest.raises(ParseError) as exc:
            load_colmap(colmap_dir)
        assert "unknown image 9" in str(exc.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_colmap(tmp_path)

    def test_malformed_camera_line(self, colmap_dir):
        (colmap_dir / "cameras.txt").write_text("1 PINHOLE 640 oops\n")
        with pytest.raises(ParseError) as exc:
            load_colmap(colmap_dir)
        assert "cameras.txt:1" in str(exc.value)

    def test_unsupported_model(self, colmap_dir):
        (colmap_dir / "cameras.txt").write_text(
            "1 OPENCV 640 480 500 500 320 240 0.1 0.1 0 0\n2 SIMPLE_PINHOLE 320 240 250 160 120\n")
        with pytest.raises(UnsupportedCameraModel):
            load_colmap(colmap_dir)

    def test_anisotropic_focal_rejected(self, colmap_dir):
        (colmap_dir / "cameras.txt").write_text(
            "1 PINHOLE 640 480 500.0 501.0 320.0 240.0\n2 SIMPLE_PINHOLE 320 240 250 160 120\n")
        with pytest.raises(UnsupportedCameraModel):
            load_colmap(colmap_dir)


class TestObservations:
    def test_expansion_counts(self, colmap_dir):
        cloud, cameras = load_colmap(colmap_dir)
        obs, skipped = observations_from_cloud(cloud, cameras)
        assert len(obs) + skipped == cloud.total_observations
        assert skipped == 0

    def test_nearer_camera_smaller_radius(self, colmap_dir):
        cloud, cameras = load_colmap(colmap_dir)
        obs, _ = observations_from_cloud(cloud, cameras)
        by_cam = {o.camera_index: o for o in obs if np.allclose(o.point, [0.5, 0.1, 0.3])}
        d0 = float(cameras[0].world_to_camera(np.array([0.5, 0.1, 0.3]))[2])
        d1 = float(cameras[1].world_to_camera(np.array([0.5, 0.1, 0.3]))[2])
        # same pixel_width; radius ratio follows depth/focal ratio
        expect = (d0 / (2 * 500.0), d1 / (2 * 250.0))
        assert by_cam[0].radius == pytest.approx(expect[0])
        assert by_cam[1].radius == pytest.approx(expect[1])

    def test_behind_camera_skipped(self, colmap_dir):
        (colmap_dir / "points3D.txt").write_text(
            "7 0.0 0.0 -50.0 1 2 3 0.1 1 0\n")
        cloud, cameras = load_colmap(colmap_dir)
        obs, skipped = observations_from_cloud(cloud, cameras)
        assert skipped == 1 and obs == []

    def test_empty_points_give_empty_observations(self, colmap_dir):
        (colmap_dir / "points3D.txt").write_text("# empty\n")
        cloud, cameras = load_colmap(colmap_dir)
        obs, _ = observations_from_cloud(cloud, cameras)
        assert obs == []
        with pytest.raises(EmptyObservations):
            prune_tree(Aabb([-1, -1, -1], [1, 1, 1]), 64, 3, obs)

    def test_radii_invariant_under_rigid_transform(self, colmap_dir):
        from lodnerf.geometry import CameraModel
        cloud, cameras = load_colmap(colmap_dir)
        obs, _ = observations_from_cloud(cloud, cameras)

        rot = quat_to_rotation([0.8, 0.1, -0.3, 0.5])
        shift = np.array([3.0, -2.0, 1.0])
        moved_cams = []
        for cam in cameras:
            # world' = rot @ world + shift  =>  R' = R rot^T, t' = t - R' shift
            r_new = cam.rotation @ rot.T
            t_new = cam.translation - r_new @ shift
            moved_cams.append(CameraModel(rotation=r_new, translation=t_new,
                                          focal_length=cam.focal_length,
                                          principal_point=cam.principal_point,
                                          resolution=cam.resolution,
                                          appearance_id=cam.appearance_id))
        moved_points = [copy.replace(p, xyz=rot @ p.xyz + shift) if hasattr(copy, "replace")
                        else p.__class__(p.point_id, rot @ p.xyz + shift, p.track)
                        for p in cloud.points]
        cloud2 = cloud.__class__(points=moved_points)
        obs2, _ = observations_from_cloud(cloud2, moved_cams)
        for a, b in zip(obs, obs2):
            assert a.radius == pytest.approx(b.radius, rel=1e-9)


class TestRootAabb:
    def test_tight_cube_with_margin(self):
        pts = np.array([[0, 0, 0], [4.0, 1.0, 2.0]])
        box = root_aabb_from_points(pts, expand=0.05)
        assert box.edge == pytest.approx(4.0 * 1.05)
        assert np.allclose(box.center, [2.0, 0.5, 1.0])
        assert np.all(box.contains(pts))


class TestCameraJson:
    def test_roundtrip(self, tmp_path, colmap_dir):
        _, cameras = load_colmap(colmap_dir)
        path = tmp_path / "cams.json"
        save_cameras_json(path, cameras)
        back = load_cameras_json(path)
        for a, b in zip(cameras, back):
            assert np.allclose(a.rotation, b.rotation, atol=1e-9)
            assert np.allclose(a.translation, b.translation)
            assert a.focal_length == b.focal_length
            assert a.resolution == b.resolution
            assert a.appearance_id == b.appearance_id


class TestSyntheticScenes:
    def test_unknown_scene(self):
        with pytest.raises(UnknownSceneSpec):
            make_synthetic_scene("gaussian-forest")

    def test_deterministic(self):
        a = make_synthetic_scene({"name": "nested-shells", "seed": 3,
                                  "n_sparse_points": 50})
        b = make_synthetic_scene({"name": "nested-shells", "seed": 3,
                                  "n_sparse_points": 50})
        assert np.array_equal(a.sparse_points, b.sparse_points)
        gen = _rng.stream(1, "det")
        pts = gen.uniform(-1, 1, (100, 3))
        assert np.array_equal(a.sigma_fn(pts), b.sigma_fn(pts))
        assert np.array_equal(a.color_fn(pts), b.color_fn(pts))

    def test_empty_scene_renders_background(self, shells_scene):
        scene = copy.copy(shells_scene)
        scene.sigma_fn = lambda p: np.zeros(len(np.atleast_2d(p)))
        img = scene.oracle_render(scene.cameras[0].scaled(0.25), n_steps=64,
                                  supersample=1)
        assert np.allclose(img, 1.0)

    def test_oracle_downsampling_consistency(self):
        scene = make_synthetic_scene({"name": "textured-plane",
                                      "resolution": [128, 96], "n_cameras": 1,
                                      "n_sparse_points": 50})
        cam = scene.cameras[0]
        full = scene.oracle_render(cam, n_steps=256, supersample=4)
        half = scene.oracle_render(cam.scaled(0.5), n_steps=256, supersample=4)
        from lodnerf.train.pyramid import box_downsample
        assert np.abs(box_downsample(full) - half).max() < 2e-2

    def test_sparse_points_are_dense_regions(self, cluster_scene):
        s = cluster_scene.sigma_fn(cluster_scene.sparse_points)
        assert np.all(s > 0.2 * 25.0)

    def test_empty_region_is_empty(self, cluster_scene):
        box = cluster_scene.empty_region
        gen = _rng.stream(2, "empty")
        pts = gen.uniform(box.min_corner, box.max_corner, (2000, 3))
        assert np.all(cluster_scene.sigma_fn(pts) == 0.0)


class TestTreeStore:
    def test_roundtrip_bitexact(self, tmp_path, shells_tree):
        path = tmp_path / "tree"
        save_tree(path, shells_tree)
        back = load_tree(path)
        assert set(back.nodes) == set(shells_tree.nodes)
        assert back.grid_size == shells_tree.grid_size
        assert back.max_depth == shells_tree.max_depth
        assert back.total_param_bytes == shells_tree.total_param_bytes
        for nid in shells_tree.nodes:
            a = shells_tree.nodes[nid]
            b = back.nodes[nid]
            assert np.array_equal(a.field.flat_parameters(), b.field.flat_parameters())
            assert a.gsd == pytest.approx(b.gsd)
            assert np.allclose(a.aabb.min_corner, b.aabb.min_corner)

    def test_truncated_blob_fails_checksum(self, tmp_path, shells_tree):
        path = tmp_path / "tree"
        save_tree(path, shells_tree)
        blob = sorted(path.glob("L*.bin"))[0]
        data = blob.read_bytes()
        blob.write_bytes(data[:-8])
        with pytest.raises(ChecksumMismatch):
            load_tree(path)

    def test_version_mismatch(self, tmp_path, shells_tree):
        path = tmp_path / "tree"
        save_tree(path, shells_tree)
        manifest = path / "manifest.json"
        manifest.write_text(manifest.read_text().replace(
            '"format_version": 1', '"format_version": 99'))
        with pytest.raises(VersionMismatch):
            load_tree(path)

    def test_manifest_bytes_total(self, tmp_path, shells_tree):
        import json
        path = tmp_path / "tree"
        save_tree(path, shells_tree)
        manifest = json.loads((path / "manifest.json").read_text())
        assert manifest["total_param_bytes"] == sum(
            e["param_bytes"] for e in manifest["nodes"])
        assert manifest["total_param_bytes"] == shells_tree.total_param_bytes


class TestImagesAndReports:
    def test_png_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(12, 16, 3))
        p = tmp_path / "img.png"
        write_png(p, img)
        back = read_png(p)
        assert np.abs(back - img).max() <= (0.5 / 255) + 1e-9

    def test_pfm_roundtrip_exact(self, tmp_path):
        img = np.random.default_rng(1).uniform(size=(12, 16, 3)).astype(np.float32)
        p = tmp_path / "img.pfm"
        write_pfm(p, img)
        assert np.array_equal(read_pfm(p).astype(np.float32), img)

    def test_workingset_csv_roundtrip(self, tmp_path):
        reports = [WorkingSetReport(frame_id=i, touched_nodes=set(),
                                    traversal_nodes=set(), touched_bytes=100 * i,
                                    total_bytes=1000) for i in range(3)]
        p = tmp_path / "ws.csv"
        write_workingset_csv(p, reports)
        rows = read_workingset_csv(p)
        assert [r["frame_id"] for r in rows] == [0, 1, 2]
        assert rows[2]["fraction"] == pytest.approx(0.2)

    def test_workingset_csv_rejects_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            read_workingset_csv(p)

    def test_svg_plot(self, tmp_path):
        p = tmp_path / "plot.svg"
        write_line_plot_svg(p, [0.1, 0.5, 0.2], title="t", ylabel="y")
        text = p.read_text()
        assert text.startswith("<svg") and "polyline" in text
