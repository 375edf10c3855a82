import numpy as np
import pytest

from lodnerf import rng as _rng
from lodnerf.errors import OutOfNodeBounds
from lodnerf.field import (APPEARANCE_DIM, COLOR_FEATURES, FieldGradients,
                           AnalyticField, VoxelField, backward, inverse_softplus,
                           make_field, query, query_gradients, softplus)


def small_field(seed=0, resolution=6, n_images=3):
    return make_field(resolution, n_images, seed=seed)


def rand_dirs(gen, n):
    d = gen.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class TestQuery:
    def test_saturated_negative_density_is_zero(self):
        f = small_field()
        f.density_raw[:] = -40.0
        s = query(f, np.array([0.3, 0.4, 0.5]), np.array([0, 0, 1.0]), 0)
        assert s.density < 1e-12

    def test_constant_features_give_constant_color(self):
        f = small_field()
        f.color_feat[:] = 0.0
        f.color_feat[..., 0] = 1.3   # dc component of the red channel
        f.appearance[:] = 0.0
        gen = _rng.stream(2, "const-color")
        pts = gen.uniform(0, 1, (50, 3))
        d = np.array([0.0, 0.0, 1.0])
        s = query(f, pts, d, 1)
        assert np.ptp(s.color[:, 0]) < 1e-12
        assert np.ptp(s.color[:, 1]) < 1e-12

    def test_vertex_query_hits_lattice_value(self):
        f = small_field()
        r = f.resolution
        ijk = (2, 3, 1)
        x = np.array(ijk, dtype=float) / (r - 1)
        s = query(f, x, np.array([0, 0, 1.0]), None)
        assert s.density == pytest.approx(softplus(np.float64(f.density_raw[ijk])), rel=1e-12)

    def test_out_of_bounds_raises(self):
        f = small_field()
        with pytest.raises(OutOfNodeBounds):
            query(f, np.array([1.2, 0.5, 0.5]), np.array([0, 0, 1.0]), 0)

    def test_density_ignores_direction_and_appearance(self):
        f = small_field(seed=3)
        gen = _rng.stream(5, "dir-invariance")
        pts = gen.uniform(0, 1, (20, 3))
        a = query(f, pts, rand_dirs(gen, 20), 0)
        b = query(f, pts, rand_dirs(gen, 20), 2)
        assert np.array_equal(a.density, b.density)
        assert not np.array_equal(a.color, b.color)

    def test_continuity_across_cell_boundaries(self):
        f = small_field(seed=9)
        r = f.resolution
        eps = 1e-7
        # Lipschitz bound: max |delta raw| between adjacent vertices / cell size
        lip = (np.abs(np.diff(f.density_raw, axis=0)).max()) * (r - 1) * 4
        boundary = 2 / (r - 1)
        d = np.array([0, 0, 1.0])
        lo = query(f, np.array([boundary - eps, 0.37, 0.61]), d, 0).density
        hi = query(f, np.array([boundary + eps, 0.37, 0.61]), d, 0).density
        assert abs(hi - lo) <= max(lip * 2 * eps, 1e-9)

    def test_mean_embedding_for_unknown_id(self):
        f = small_field(seed=4)
        gen = _rng.stream(6, "emb")
        f.appearance[:] = gen.normal(size=f.appearance.shape).astype(np.float32)
        pt = np.array([0.5, 0.5, 0.5])
        d = np.array([0, 0, 1.0])
        unknown = query(f, pt, d, None)
        by_sentinel = query(f, pt, d, -1)
        assert np.allclose(unknown.color, by_sentinel.color)


class TestGradients:
    def test_zero_upstream_gives_zero_gradients(self):
        f = small_field()
        g = query_gradients(f, np.array([0.3, 0.6, 0.2]), np.array([0, 0, 1.0]),
                            1, 0.0, np.zeros(3))
        assert g.max_abs() == 0.0

    def test_sparsity_limited_to_touched_cell(self):
        f = small_field(seed=8)
        x = np.array([0.31, 0.62, 0.18])
        g = query_gradients(f, x, np.array([0, 0, 1.0]), 1, 1.0, np.ones(3))
        r = f.resolution
        c = x * (r - 1)
        i0 = np.floor(c).astype(int)
        nz = np.argwhere(g.density_raw != 0)
        assert len(nz) <= 8
        for idx in nz:
            assert np.all(idx >= i0) and np.all(idx <= i0 + 1)
        nzc = np.argwhere(np.any(g.color_feat != 0, axis=-1))
        for idx in nzc:
            assert np.all(idx >= i0) and np.all(idx <= i0 + 1)

    def test_matches_finite_differences(self):
        f = small_field(seed=13)
        gen = _rng.stream(21, "fd")
        x = gen.uniform(0.05, 0.95, (5, 3))
        d = rand_dirs(gen, 5)
        app = np.array([0, 1, 2, 0, 1])
        up_d = gen.normal(size=5)
        up_c = gen.normal(size=(5, 3))

        grads = query_gradients(f, x, d, app, up_d, up_c)

        def loss():
            s = query(f, x, d, app)
            return float(np.sum(s.density * up_d) + np.sum(s.color * up_c))

        checked = 0
        for name, arr in f.array_items():
            garr = getattr(grads, name)
            nz = np.argwhere(np.abs(garr) > 1e-9)
            if not len(nz):
                continue
            for k in range(0, len(nz), max(1, len(nz) // 5)):
                idx = tuple(nz[k])
                orig = arr[idx]
                h = 1e-4
                arr[idx] = np.float32(orig + h)
                lp = loss()
                arr[idx] = np.float32(orig - h)
                lm = loss()
                realized = float(np.float32(orig + h)) - float(np.float32(orig - h))
                arr[idx] = orig
                fd = (lp - lm) / realized
                rel = abs(garr[idx] - fd) / (abs(garr[idx]) + 1e-8)
                assert rel < 1e-4, (name, idx, garr[idx], fd)
                checked += 1
        assert checked >= 10

    def test_mean_embedding_gradient_spreads(self):
        f = small_field(seed=2)
        g = query_gradients(f, np.array([0.5, 0.5, 0.5]), np.array([0, 0, 1.0]),
                            None, 0.0, np.ones(3))
        rows = np.abs(g.appearance).sum(axis=1)
        assert np.all(rows > 0)
        assert np.allclose(rows, rows[0])


class TestParamLayout:
    def test_flat_roundtrip(self):
        f = small_field(seed=6)
        flat = f.flat_parameters()
        assert flat.size == f.param_count
        g = VoxelField.from_flat(flat, f.resolution, f.n_images)
        for (_, a), (_, b) in zip(f.array_items(), g.array_items()):
            assert np.array_equal(a, b)

    def test_param_bytes(self):
        f = small_field(resolution=4, n_images=2)
        expect = 4 * (4 ** 3 + 4 ** 3 * COLOR_FEATURES + 2 * APPEARANCE_DIM)
        assert f.param_bytes == expect

    def test_inverse_softplus(self):
        for y in (0.01, 0.5, 3.0, 50.0):
            assert softplus(np.float64(inverse_softplus(y))) == pytest.approx(y, rel=1e-6)


class TestAnalyticField:
    def test_evaluates_callables(self):
        fld = AnalyticField(sigma_fn=lambda p: np.full(len(p), 2.0),
                            color_fn=lambda p: np.tile([0.1, 0.2, 0.3], (len(p), 1)))
        s = fld.evaluate_world(np.zeros((4, 3)), None, None)
        assert np.allclose(s.density, 2.0)
        assert np.allclose(s.color[2], [0.1, 0.2, 0.3])
        assert fld.param_bytes == 0
