import json
import subprocess
import sys

import numpy as np
import pytest

from lodnerf.cli import main

SCENE = {"name": "nested-shells", "resolution": [48, 36], "n_cameras": 4,
         "n_sparse_points": 150}


def run_cli(args):
    """Run the CLI in-process, returning (exit_code, stdout)."""
    import io
    from contextlib import redirect_stdout
    buf = io.StringIO()
    try:
        with redirect_stdout(buf):
            main(args)
        return 0, buf.getvalue()
    except SystemExit as e:
        return int(e.code or 0), buf.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def built(workspace):
    out = workspace / "tree"
    code, text = run_cli(["build", "--synthetic", "nested-shells",
                          "--field-resolution", "6", "--out", str(out)])
    assert code == 0, text
    return out, text


class TestBuild:
    def test_build_prints_summary(self, built):
        out, text = built
        assert "nodes:" in text and "retained fraction" in text
        assert "level 0: 1 nodes" in text
        assert (out / "manifest.json").is_file()

    def test_missing_input_dir_exits_2(self, workspace):
        code, _ = run_cli(["build", "--colmap", str(workspace / "missing"),
                           "--out", str(workspace / "t2")])
        assert code == 2

    def test_unknown_scene_exits_2(self, workspace):
        code, _ = run_cli(["build", "--synthetic", "not-a-scene",
                           "--out", str(workspace / "t3")])
        assert code == 2

    def test_empty_observations_exits_3(self, workspace, tmp_path_factory):
        d = tmp_path_factory.mktemp("colmap")
        (d / "cameras.txt").write_text("1 SIMPLE_PINHOLE 32 24 30 16 12\n")
        (d / "images.txt").write_text("1 1 0 0 0 0 0 2 1 a.png\n\n")
        (d / "points3D.txt").write_text("# none\n")
        code, _ = run_cli(["build", "--colmap", str(d),
                           "--out", str(workspace / "t4")])
        assert code == 3

    def test_max_depth_zero_single_node(self, workspace):
        out = workspace / "t5"
        code, text = run_cli(["build", "--synthetic", "nested-shells",
                              "--max-depth", "0", "--field-resolution", "4",
                              "--out", str(out)])
        assert code == 0
        assert "nodes: 1 " in text or "nodes: 1\n" in text


class TestTrainRenderStats:
    def test_full_pipeline(self, built, workspace):
        tree, _ = built
        ckpt = workspace / "ckpt"
        scene_json = workspace / "scene.json"
        scene_json.write_text(json.dumps({"synthetic": SCENE}))
        code, text = run_cli([
            "train", "--tree", str(tree), "--data", str(scene_json),
            "--iters", "2", "--rays-per-batch", "48", "--samples", "8",
            "--pyramid-levels", "2", "--seed", "4",
            "--log", str(workspace / "log.csv"), "--out", str(ckpt)])
        assert code == 0, text
        assert "mean heldout PSNR" in text

        traj = workspace / "traj.json"
        traj.write_text(json.dumps({"type": "zoom_out", "frames": 2,
                                    "d_start": 1.2, "d_end": 3.0,
                                    "resolution": [24, 18],
                                    "synthetic": SCENE}))
        frames = workspace / "frames"
        code, text = run_cli(["render", "--tree", str(ckpt),
                              "--trajectory", str(traj), "--samples", "8",
                              "--seed", "3", "--out-dir", str(frames)])
        assert code == 0, text
        assert (frames / "workingset.csv").is_file()
        assert (frames / "frame_0001.png").is_file()

        code, text = run_cli(["stats", "--workingset", str(frames / "workingset.csv"),
                              "--tree", str(ckpt),
                              "--plot", str(workspace / "ws.svg")])
        assert code == 0, text
        assert "max fraction" in text
        assert (workspace / "ws.svg").is_file()

    def test_zero_iters_checkpoint_equals_input(self, built, workspace):
        tree, _ = built
        ckpt = workspace / "ckpt0"
        scene_json = workspace / "scene0.json"
        scene_json.write_text(json.dumps({"synthetic": SCENE}))
        code, _ = run_cli(["train", "--tree", str(tree), "--data", str(scene_json),
                           "--iters", "0", "--out", str(ckpt)])
        assert code == 0
        from lodnerf.scene_io.tree_store import load_tree
        a = load_tree(tree)
        b = load_tree(ckpt)
        for nid in a.nodes:
            assert np.array_equal(a.nodes[nid].field.flat_parameters(),
                                  b.nodes[nid].field.flat_parameters())

    def test_bad_trajectory_exits_2(self, built, workspace):
        tree, _ = built
        bad = workspace / "bad_traj.json"
        bad.write_text("{not valid json")
        code, _ = run_cli(["render", "--tree", str(tree), "--trajectory", str(bad),
                           "--out-dir", str(workspace / "x")])
        assert code == 2

    def test_missing_trajectory_exits_2(self, built, workspace):
        tree, _ = built
        code, _ = run_cli(["render", "--tree", str(tree),
                           "--trajectory", str(workspace / "none.json"),
                           "--out-dir", str(workspace / "x")])
        assert code == 2

    def test_malformed_csv_exits_2(self, workspace):
        bad = workspace / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        code, _ = run_cli(["stats", "--workingset", str(bad)])
        assert code == 2

    def test_nonfinite_loss_exits_4(self, built, workspace):
        tree, _ = built
        from lodnerf.scene_io.tree_store import load_tree, save_tree
        poisoned = workspace / "poisoned"
        t = load_tree(tree)
        t.root.field.density_raw[:] = np.float32(np.nan)
        save_tree(poisoned, t)
        scene_json = workspace / "scene_nan.json"
        scene_json.write_text(json.dumps({"synthetic": SCENE}))
        code, _ = run_cli(["train", "--tree", str(poisoned), "--data", str(scene_json),
                           "--iters", "1", "--rays-per-batch", "16", "--samples", "4",
                           "--out", str(workspace / "nan_out")])
        assert code == 4

    def test_render_deterministic_across_runs(self, built, workspace):
        tree, _ = built
        traj = workspace / "traj1.json"
        traj.write_text(json.dumps({"type": "orbit", "frames": 1, "d_start": 2.0,
                                    "resolution": [24, 18], "synthetic": SCENE}))
        out1 = workspace / "r1"
        out2 = workspace / "r2"
        for out in (out1, out2):
            code, _ = run_cli(["render", "--tree", str(tree),
                               "--trajectory", str(traj), "--samples", "6",
                               "--seed", "11", "--out-dir", str(out)])
            assert code == 0
        a = (out1 / "frame_0000.png").read_bytes()
        b = (out2 / "frame_0000.png").read_bytes()
        assert a == b


class TestConfigFile:
    def test_config_provides_defaults(self, built, workspace):
        tree, _ = built
        cfg = workspace / "cfg.ini"
        cfg.write_text("samples = 6\nseed = 11  # comment\n")
        traj = workspace / "traj2.json"
        traj.write_text(json.dumps({"type": "orbit", "frames": 1, "d_start": 2.0,
                                    "resolution": [24, 18], "synthetic": SCENE}))
        out = workspace / "rc"
        code, _ = run_cli(["--config", str(cfg), "render", "--tree", str(tree),
                           "--trajectory", str(traj), "--out-dir", str(out)])
        assert code == 0
        ref = workspace / "r1" / "frame_0000.png"
        if ref.is_file():
            assert (out / "frame_0000.png").read_bytes() == ref.read_bytes()


class TestHelp:
    @pytest.mark.parametrize("cmd", ["build", "train", "render", "stats"])
    def test_help_lists_flags(self, cmd):
        res = subprocess.run([sys.executable, "-m", "lodnerf.cli", cmd, "--help"],
                             capture_output=True, text=True)
        assert res.returncode == 0
        assert "--" in res.stdout
