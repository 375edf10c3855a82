import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from lodnerf.service import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


SCENE = {"name": "nested-shells", "resolution": [48, 36], "n_cameras": 4,
         "n_sparse_points": 150}


@pytest.fixture(scope="module")
def built_tree(client, tmp_path_factory):
    out = tmp_path_factory.mktemp("svc") / "tree"
    resp = client.post("/build", json={
        "out_path": str(out),
        "synthetic": SCENE,
        "field_resolution": 6,
        "seed": 3,
    })
    assert resp.status_code == 200, resp.text
    return out, resp.json()


class TestHealth:
    def test_healthz(self, client):
        resp = client.get("/healthz")
        assert resp.status_code == 200
        assert resp.json()["status"] == "ok"


class TestBuildEndpoint:
    def test_build_synthetic(self, built_tree):
        out, body = built_tree
        assert (out / "manifest.json").is_file()
        assert body["node_count"] >= 1
        assert 0 < body["retained_fraction"] <= 1
        assert body["total_param_bytes"] > 0
        assert body["level_histogram"]["0"] == 1

    def test_build_unknown_scene_maps_to_error(self, client, tmp_path):
        resp = client.post("/build", json={
            "out_path": str(tmp_path / "t"),
            "synthetic": {**SCENE, "name": "no-such-scene"},
        })
        assert resp.status_code == 422
        assert resp.json()["error"] == "UnknownSceneSpec"

    def test_build_missing_colmap_dir(self, client, tmp_path):
        resp = client.post("/build", json={
            "out_path": str(tmp_path / "t"),
            "colmap_dir": str(tmp_path / "nothing"),
        })
        assert resp.status_code == 422
        assert resp.json()["error"] == "ParseError"

    def test_build_requires_an_input(self, client, tmp_path):
        resp = client.post("/build", json={"out_path": str(tmp_path / "t")})
        assert resp.status_code == 422

    def test_build_empty_observations(self, client, tmp_path):
        d = tmp_path / "model"
        d.mkdir()
        (d / "cameras.txt").write_text("1 SIMPLE_PINHOLE 32 24 30 16 12\n")
        (d / "images.txt").write_text("1 1 0 0 0 0 0 2 1 a.png\n\n")
        (d / "points3D.txt").write_text("# none\n")
        resp = client.post("/build", json={
            "out_path": str(tmp_path / "t"), "colmap_dir": str(d)})
        assert resp.status_code == 422
        assert resp.json()["error"] == "EmptyObservations"


class TestTrainEndpoint:
    def test_train_and_render_roundtrip(self, client, built_tree, tmp_path_factory):
        src, _ = built_tree
        work = tmp_path_factory.mktemp("train")
        ckpt = work / "trained"
        log = work / "log.csv"
        resp = client.post("/train", json={
            "tree_path": str(src),
            "out_path": str(ckpt),
            "synthetic": SCENE,
            "iters": 3,
            "rays_per_batch": 64,
            "samples_per_ray": 8,
            "pyramid_levels": 2,
            "seed": 5,
            "log_path": str(log),
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["steps"] == 3
        assert (ckpt / "manifest.json").is_file()
        assert log.read_text().startswith("step,L_RGB,L_distort,L_reg,L_trans,PSNR")
        assert body["psnr"] == pytest.approx(
            float(np.mean(list(body["psnr_per_level"].values()))))

        out_dir = work / "frames"
        resp = client.post("/render", json={
            "tree_path": str(ckpt),
            "out_dir": str(out_dir),
            "trajectory": {"type": "zoom_out", "frames": 2, "d_start": 1.0,
                           "d_end": 3.0, "resolution": [32, 24],
                           "synthetic": SCENE},
            "samples": 8,
            "seed": 2,
        })
        assert resp.status_code == 200, resp.text
        rbody = resp.json()
        assert len(rbody["frames"]) == 2
        assert all((work / "frames" / f"frame_{i:04d}.png").is_file() for i in range(2))

        resp = client.post("/stats", json={
            "workingset_csv": rbody["workingset_csv"],
            "tree_path": str(ckpt),
            "plot_out": str(work / "plot.svg"),
        })
        assert resp.status_code == 200, resp.text
        sbody = resp.json()
        assert sbody["n_frames"] == 2
        assert 0 < sbody["max_fraction"] <= 1
        assert (work / "plot.svg").read_text().startswith("<svg")

    def test_train_missing_tree(self, client, tmp_path):
        resp = client.post("/train", json={
            "tree_path": str(tmp_path / "nope"),
            "out_path": str(tmp_path / "out"),
            "synthetic": SCENE,
            "iters": 1,
        })
        assert resp.status_code == 422

    def test_distributed_train_through_service(self, client, built_tree, tmp_path):
        src, _ = built_tree
        resp = client.post("/train", json={
            "tree_path": str(src),
            "out_path": str(tmp_path / "dist"),
            "synthetic": SCENE,
            "iters": 2,
            "workers": 2,
            "split_level": 1,
            "rays_per_batch": 48,
            "samples_per_ray": 8,
            "pyramid_levels": 2,
            "log_path": str(tmp_path / "dist.csv"),
        })
        assert resp.status_code == 200, resp.text
        assert (tmp_path / "dist" / "manifest.json").is_file()
        header = (tmp_path / "dist.csv").read_text().splitlines()[0]
        assert header.startswith("step,loss_w0,loss_w1,comm_bytes")


class TestRenderEndpoint:
    def test_bad_trajectory_type(self, client, built_tree, tmp_path):
        src, _ = built_tree
        resp = client.post("/render", json={
            "tree_path": str(src),
            "out_dir": str(tmp_path / "o"),
            "trajectory": {"type": "spiral-of-doom", "synthetic": SCENE},
        })
        assert resp.status_code == 422
        assert resp.json()["error"] == "ParseError"

    def test_explicit_cameras(self, client, built_tree, tmp_path):
        from lodnerf.scene_io.colmap import camera_to_json
        from lodnerf.geometry import look_at_camera
        src, _ = built_tree
        cam = look_at_camera([0, 0, -2.5], [0, 0, 0], focal_length=40,
                             resolution=(32, 24), appearance_id=-1)
        resp = client.post("/render", json={
            "tree_path": str(src),
            "out_dir": str(tmp_path / "o"),
            "trajectory": {"type": "explicit", "cameras": [camera_to_json(cam)]},
            "samples": 4,
        })
        assert resp.status_code == 200, resp.text
        assert len(resp.json()["frames"]) == 1

    def test_pfm_output(self, client, built_tree, tmp_path):
        src, _ = built_tree
        resp = client.post("/render", json={
            "tree_path": str(src),
            "out_dir": str(tmp_path / "o"),
            "trajectory": {"type": "orbit", "frames": 1, "d_start": 2.0,
                           "resolution": [16, 12], "synthetic": SCENE},
            "samples": 4,
            "image_format": "pfm",
        })
        assert resp.status_code == 200, resp.text
        from lodnerf.scene_io.images import read_pfm
        img = read_pfm(resp.json()["frames"][0])
        assert img.shape == (12, 16, 3)


class TestStatsEndpoint:
    def test_malformed_csv(self, client, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("frame,stuff\n0,1\n")
        resp = client.post("/stats", json={"workingset_csv": str(bad)})
        assert resp.status_code == 422
        assert resp.json()["error"] == "ParseError"

    def test_single_frame_max_equals_mean(self, client, tmp_path):
        p = tmp_path / "ws.csv"
        p.write_text("frame_id,touched_node_count,touched_bytes,total_bytes,fraction\n"
                     "0,3,300,1000,0.3\n")
        resp = client.post("/stats", json={"workingset_csv": str(p)})
        body = resp.json()
        assert body["max_fraction"] == body["mean_fraction"] == pytest.approx(0.3)
