import numpy as np
import pytest

from lodnerf import rng as _rng
from lodnerf.errors import RayMissesScene
from lodnerf.geometry import Aabb, Ray, look_at_camera, pixel_ray
from lodnerf.octree import NodeId, ROOT_ID, allocate_fields, build_perfect_tree
from lodnerf.render import (PixelStream, RenderConfig, composite_backward,
                            composite_forward, render_frame, render_ray,
                            render_trajectory, sample_deltas, sample_ray)
from lodnerf.scene_io.synthetic import analytic_tree, make_synthetic_scene, _integrate_rays

BOX = Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])


def basic_cam(w=64, h=48, pos=(0, 0, -3.0)):
    return look_at_camera(pos, [0, 0, 0], focal_length=1.2 * w, resolution=(w, h))


class TestSampleRay:
    def test_single_sample_in_range(self):
        cam = basic_cam()
        ray = pixel_ray(cam, [32.0, 24.0], BOX)
        ss = sample_ray(ray, cam, 1, PixelStream(0, 0))
        assert len(ss.spheres) == 1
        assert ray.t_near <= ss.spheres[0].depth <= ray.t_far

    def test_midpoints_without_jitter(self):
        cam = basic_cam()
        ray = pixel_ray(cam, [32.0, 24.0], BOX)
        ss = sample_ray(ray, cam, 4, PixelStream(0, 0), jitter=False)
        h = (ray.t_far - ray.t_near) / 4
        for k, sph in enumerate(ss.spheres):
            assert sph.depth == pytest.approx(ray.t_near + (k + 0.5) * h)

    def test_radii_increase_along_ray(self):
        cam = basic_cam()
        ray = pixel_ray(cam, [10.0, 40.0], BOX)
        ss = sample_ray(ray, cam, 16, PixelStream(3, 7))
        radii = [s.radius for s in ss.spheres]
        assert all(a < b for a, b in zip(radii, radii[1:]))

    def test_intervals_partition_range(self):
        cam = basic_cam()
        ray = pixel_ray(cam, [32.0, 24.0], BOX)
        ss = sample_ray(ray, cam, 8, PixelStream(1, 1))
        assert ss.interval_bounds[0][0] == pytest.approx(ray.t_near)
        assert ss.interval_bounds[-1][1] == pytest.approx(ray.t_far)
        for (a, b), (c, d) in zip(ss.interval_bounds, ss.interval_bounds[1:]):
            assert b == pytest.approx(c)
            assert ss.spheres[ss.interval_bounds.index((a, b))].depth <= b

    def test_perturbed_radius_within_factor_sqrt2(self):
        cam = basic_cam()
        ray = pixel_ray(cam, [32.0, 24.0], BOX)
        ss = sample_ray(ray, cam, 64, PixelStream(5, 11))
        for s in ss.spheres:
            assert s.radius / np.sqrt(2) - 1e-12 <= s.perturbed_radius <= s.radius * np.sqrt(2) + 1e-12


class TestCompositing:
    def test_zero_density_gives_background(self):
        sigma = np.zeros((3, 8))
        delta = np.full((3, 8), 0.1)
        w, t_final = composite_forward(sigma, delta)
        assert np.all(w == 0)
        assert np.allclose(t_final, 1.0)

    def test_opaque_sample_takes_all(self):
        sigma = np.array([[0.0, 1e9, 0.0]])
        delta = np.full((1, 3), 0.5)
        w, t_final = composite_forward(sigma, delta)
        assert w[0, 1] == pytest.approx(1.0, abs=1e-9)
        assert t_final[0] == pytest.approx(0.0, abs=1e-12)

    def test_weights_bounded_by_transmittance(self):
        gen = _rng.stream(3, "compo")
        sigma = gen.uniform(0, 5, (50, 32))
        delta = gen.uniform(0.01, 0.1, (50, 32))
        w, t_final = composite_forward(sigma, delta)
        assert np.all(w >= 0)
        assert np.all(w.sum(axis=1) <= 1 + 1e-12)
        assert np.allclose(w.sum(axis=1) + t_final, 1.0)

    def test_backward_matches_finite_differences(self):
        gen = _rng.stream(4, "compo-fd")
        n, s = 4, 12
        sigma = gen.uniform(0.1, 3.0, (n, s))
        delta = gen.uniform(0.02, 0.1, (n, s))
        d_w = gen.normal(size=(n, s))
        d_tf = gen.normal(size=n)

        def loss(sig):
            w, tf = composite_forward(sig, delta)
            return float(np.sum(w * d_w) + np.sum(tf * d_tf))

        w, tf = composite_forward(sigma, delta)
        g = composite_backward(sigma, delta, w, tf, d_w, d_tf)
        for _ in range(20):
            i, j = gen.integers(0, n), gen.integers(0, s)
            h = 1e-6
            sp = sigma.copy(); sp[i, j] += h
            sm = sigma.copy(); sm[i, j] -= h
            fd = (loss(sp) - loss(sm)) / (2 * h)
            assert abs(g[i, j] - fd) <= 1e-6 + 1e-5 * abs(fd)

    def test_deltas_last_reaches_tfar(self):
        depths = np.array([[1.0, 2.0, 3.0]])
        d = sample_deltas(depths, np.array([3.5]))
        assert np.allclose(d, [[1.0, 1.0, 0.5]])


class TestRenderRayOracle:
    def test_against_dense_quadrature(self, shells_scene):
        tree = analytic_tree(shells_scene)
        cfg = RenderConfig(n_samples=512, jitter=False, perturb=False, seed=3)
        cam = shells_scene.cameras[0]
        gen = _rng.stream(5, "oracle-rays")
        worst = 0.0
        for _ in range(25):
            px = gen.uniform([0, 0], list(cam.resolution))
            ray = pixel_ray(cam, px, shells_scene.aabb)
            rgb, w, nodes = render_ray(tree, ray, cam, cfg)
            oracle = _integrate_rays(shells_scene, cam.center, ray.direction[None],
                                     512 * 64, np.array(shells_scene.background))[0]
            worst = max(worst, float(np.abs(rgb - oracle).max()))
            assert np.all(w >= 0) and w.sum() <= 1 + 1e-12
        assert worst < 1e-3

    def test_miss_raises(self, shells_scene):
        tree = analytic_tree(shells_scene)
        cam = basic_cam(pos=(0, 0, -5.0))
        ray = Ray([0, 0, -5.0], [0, 0, -1.0], 0.1, 10.0)
        with pytest.raises(RayMissesScene):
            render_ray(tree, ray, cam, RenderConfig())


@pytest.fixture(scope="module")
def lit_tree():
    tree = build_perfect_tree(BOX, grid_size=64, max_depth=2)
    allocate_fields(tree, resolution=4, n_images=2, seed=5)
    return tree


class TestRenderFrame:

    def test_deterministic_given_seed(self, lit_tree):
        cam = basic_cam(pos=(0.3, -2.8, 0.4))
        cfg = RenderConfig(n_samples=16, seed=9)
        img1, rep1 = render_frame(lit_tree, cam, cfg)
        img2, rep2 = render_frame(lit_tree, cam, cfg)
        assert np.array_equal(img1, img2)
        assert rep1.touched_nodes == rep2.touched_nodes

    def test_threads_do_not_change_pixels(self, lit_tree):
        cam = basic_cam(w=96, h=64, pos=(0.3, -2.8, 0.4))
        a, _ = render_frame(lit_tree, cam, RenderConfig(n_samples=8, seed=2, threads=1))
        b, _ = render_frame(lit_tree, cam, RenderConfig(n_samples=8, seed=2, threads=3))
        assert np.array_equal(a, b)

    def test_far_view_touches_root_only(self, lit_tree):
        cam = basic_cam(pos=(12.0, 9.0, 10.0))
        img, rep = render_frame(lit_tree, cam, RenderConfig(n_samples=16, seed=1))
        assert rep.touched_nodes == {ROOT_ID}
        assert rep.fraction == pytest.approx(1 / 73)

    def test_miss_frame_is_background(self, lit_tree):
        cam = look_at_camera([0, 0, -5.0], [0, 0, -9.0], focal_length=100,
                             resolution=(16, 12))
        img, rep = render_frame(lit_tree, cam, RenderConfig(n_samples=4, seed=1,
                                                            background=(0.2, 0.4, 0.6)))
        assert np.allclose(img, [0.2, 0.4, 0.6])
        assert rep.touched_nodes == set()
        assert rep.touched_bytes == 0

    def test_monotone_refinement_without_perturbation(self, lit_tree):
        gen = _rng.stream(6, "refine")
        pts = gen.uniform(-0.9, 0.9, (100, 3))
        radii = gen.uniform(0.002, 0.1, 100)
        asg_a, nodes_a = lit_tree.route(pts, radii)
        asg_b, nodes_b = lit_tree.route(pts, radii / 2)
        for k in range(100):
            assert nodes_b[asg_b[k]].level >= nodes_a[asg_a[k]].level

    def test_leaf_only_touches_leaves(self, lit_tree):
        cam = basic_cam(pos=(0.0, -2.5, 0.0))
        _, rep = render_frame(lit_tree, cam,
                              RenderConfig(n_samples=8, seed=1, leaf_only=True))
        assert all(n.level == lit_tree.max_depth for n in rep.touched_nodes)

    def test_working_set_report_bytes(self, lit_tree):
        cam = basic_cam(pos=(0.0, -2.4, 0.2))
        _, rep = render_frame(lit_tree, cam, RenderConfig(n_samples=8, seed=1))
        expect = sum(lit_tree.nodes[n].param_bytes for n in rep.touched_nodes)
        assert rep.touched_bytes == expect
        assert rep.total_bytes == lit_tree.total_param_bytes
        assert rep.traversal_nodes >= rep.touched_nodes


class TestTrajectory:
    def test_static_camera_no_popup(self, shells_scene):
        tree = analytic_tree(shells_scene)
        cam = shells_scene.cameras[0].scaled(0.25)
        cfg = RenderConfig(n_samples=8, seed=4)
        res = render_trajectory(tree, [cam, cam, cam], cfg)
        assert res.popup == [0.0, 0.0]

    def test_reports_per_frame(self, shells_scene):
        tree = analytic_tree(shells_scene)
        cams = [shells_scene.cameras[0].scaled(0.25), shells_scene.cameras[1].scaled(0.25)]
        res = render_trajectory(tree, cams, RenderConfig(n_samples=4, seed=4))
        assert [r.frame_id for r in res.reports] == [0, 1]
