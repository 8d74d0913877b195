import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geossl import geomprops as gp
from geossl.pointcloud import PointCloud, farthest_point_sample
from oracles import cubic_eigenvalues, sorted_knn


def grid_plane(n=10):
    xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    return np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)


def fps_sphere(n=512, seed=0):
    d = np.random.default_rng(seed).normal(size=(8 * n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d[farthest_point_sample(d, n)]


def random_sym(rng, scale=1.0):
    a = rng.normal(size=(3, 3)) * scale
    return a + a.T


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class TestKnn:
    def test_line(self):
        g = gp.knn(np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], float), 1)
        assert g.neighbors[:, 0].tolist() == [1, 0, 1]

    def test_tie_smaller_index(self):
        g = gp.knn(np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], float), 1)
        assert g.neighbors[0, 0] == 1

    def test_matches_sort_oracle(self):
        pts = np.random.default_rng(0).normal(size=(200, 3))
        np.testing.assert_array_equal(gp.knn(pts, 20).neighbors, sorted_knn(pts, 20))

    def test_ties_on_a_lattice(self):
        pts = np.stack(np.meshgrid(*[np.arange(5.0)] * 3), -1).reshape(-1, 3)
        np.testing.assert_array_equal(gp.knn(pts, 12).neighbors, sorted_knn(pts, 12))

    def test_include_self(self):
        pts = np.random.default_rng(1).normal(size=(30, 3))
        g = gp.knn(pts, 3, include_self=True)
        assert np.all(g.neighbors[:, 0] == np.arange(30))
        assert np.all(gp.knn(pts, 3).neighbors != np.arange(30)[:, None])

    @pytest.mark.parametrize("k", [0, 10])
    def test_k_range(self, k):
        with pytest.raises(ValueError):
            gp.knn(np.zeros((10, 3)), k)


class TestCovariance:
    def test_two_term(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], float)
        g = gp.KnnGraph(np.array([[1, 2], [0, 2], [0, 1]]), 2)
        np.testing.assert_array_equal(gp.covariance_at(pts, g, 0).matrix(), np.diag([2.0, 0, 0]))

    def test_coincident(self):
        pts = np.zeros((5, 3))
        g = gp.knn(pts, 4)
        assert np.all(gp.covariance_at(pts, g, 2).matrix() == 0)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(5, 3))
        g = gp.knn(pts, 4)
        want = sum(np.outer(pts[0] - pts[j], pts[0] - pts[j]) for j in g.neighbors[0])
        np.testing.assert_allclose(gp.covariance_at(pts, g, 0).matrix(), want, atol=1e-12)

    def test_batch_agrees(self):
        pts = np.random.default_rng(3).normal(size=(40, 3))
        g = gp.knn(pts, 6)
        all_c = gp.local_covariances(pts, g)
        for i in (0, 17, 39):
            np.testing.assert_allclose(all_c[i], gp.covariance_at(pts, g, i).matrix(), atol=1e-14)

    def test_centered_switch(self):
        pts = np.random.default_rng(4).normal(size=(20, 3))
        g = gp.knn(pts, 5)
        nb = pts[g.neighbors[3]]
        r = nb - nb.mean(axis=0)
        np.testing.assert_allclose(gp.covariance_at(pts, g, 3, centered=True).matrix(), r.T @ r,
                                   atol=1e-12)

    def test_index_range(self):
        with pytest.raises(IndexError):
            gp.covariance_at(np.zeros((3, 3)), gp.knn(np.eye(3), 1), 3)


class TestEigen:
    def test_identity(self):
        np.testing.assert_array_equal(gp.eig_sym3(np.eye(3)).values, [1, 1, 1])

    def test_diagonal(self):
        d = gp.eig_sym3(np.diag([5.0, 0.0, 2.0]))
        np.testing.assert_array_equal(d.values, [0, 2, 5])
        np.testing.assert_array_equal(np.abs(d.vectors), [[0, 1, 0], [0, 0, 1], [1, 0, 0]])

    def test_cubic_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            c = random_sym(rng)
            np.testing.assert_allclose(gp.eig_sym3(c).values, cubic_eigenvalues(c), atol=1e-8)

    def test_symmat_input(self):
        c = random_sym(np.random.default_rng(6))
        a = gp.eig_sym3(gp.SymMat3.from_matrix(c))
        np.testing.assert_array_equal(a.values, gp.eig_sym3(c).values)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            gp.eig_sym3(np.full((3, 3), np.nan))

    def test_batch_independence(self):
        rng = np.random.default_rng(7)
        mats = np.stack([random_sym(rng) for _ in range(20)] + [np.eye(3), np.zeros((3, 3))])
        vals, vecs = gp.eig_sym3_batch(mats)
        for i in (0, 5, 20, 21):
            v1, e1 = gp.eig_sym3_batch(mats[i:i + 1])
            np.testing.assert_array_equal(vals[i], v1[0])
            np.testing.assert_array_equal(vecs[i], e1[0])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([1e-6, 1.0, 1e6]),
           st.sampled_from(["random", "repeated", "rank1", "psd"]))
    def test_properties(self, seed, scale, kind):
        rng = np.random.default_rng(seed)
        if kind == "random":
            c = random_sym(rng, scale)
        else:
            q = random_rotation(rng)
            lam = {"repeated": [1.0, 1.0, 3.0], "rank1": [0, 0, 1.0],
                   "psd": rng.random(3)}[kind]
            c = (q * np.asarray(lam)) @ q.T * scale
        d = gp.eig_sym3(c)
        assert np.all(np.diff(d.values) >= 0)
        recon = (d.vectors.T * d.values) @ d.vectors
        assert np.abs(recon - c).max() <= 1e-9 * max(1.0, np.linalg.norm(c))
        assert np.abs(d.vectors @ d.vectors.T - np.eye(3)).max() <= 1e-8
        resid = c @ d.vectors.T - d.vectors.T * d.values
        assert np.abs(resid).max() <= 1e-8 * max(1.0, np.linalg.norm(c))
        for v in d.vectors:
            mag = np.abs(v)
            lead = v[np.argmax(mag)] if (mag == mag.max()).sum() == 1 else v[np.flatnonzero(v)[0]]
            assert lead > 0


class TestNormals:
    def test_plane(self):
        n, deg = gp.estimate_normals(grid_plane(), k=8)
        assert not deg.any()
        np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (100, 1)), atol=1e-12)

    def test_sphere_error(self):
        pts = fps_sphere()
        n, _ = gp.estimate_normals(pts, k=20)
        assert gp.angular_error_deg(n, pts).mean() < 5.0

    def test_identical_points_degenerate(self):
        n, deg = gp.estimate_normals(np.ones((10, 3)), k=4)
        assert deg.all()
        assert np.all(n == [0, 0, 1])

    def test_outward(self):
        pts = fps_sphere(256)
        n, _ = gp.estimate_normals(pts, k=10)
        assert np.all((n * pts).sum(axis=1) > 0)

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            gp.estimate_normals(fps_sphere(64), k=5, orientation="inward")

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(8)
        pts = fps_sphere(256) * [1.0, 0.7, 0.5]
        r = random_rotation(rng)
        a, _ = gp.estimate_normals(pts, k=12)
        b, _ = gp.estimate_normals(pts @ r.T, k=12)
        np.testing.assert_allclose(a @ r.T, b, atol=1e-6)


class TestCurvature:
    def test_plane_zero(self):
        pts = grid_plane()
        g = gp.knn(pts, 8)
        assert abs(gp.curvature_eigen(pts, g, 44)) <= 1e-9

    def test_isotropic_third(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0],
                        [0, 0, 1], [0, 0, -1]], float)
        g = gp.KnnGraph(np.array([[1, 2, 3, 4, 5, 6]] + [[0, 1, 2, 3, 4, 5]] * 6), 6)
        assert abs(gp.curvature_eigen(pts, g, 0) - 1 / 3) <= 1e-9

    def test_sphere_matches_eigen_oracle(self):
        pts = fps_sphere(256)
        g = gp.knn(pts, 20)
        for i in (0, 100, 255):
            lam = cubic_eigenvalues(gp.covariance_at(pts, g, i).matrix())
            assert abs(gp.curvature_eigen(pts, g, i) - lam[0] / lam.sum()) <= 1e-9

    def test_normal_dev_identical(self):
        n = np.tile([0, 0, 1.0], (10, 1))
        assert gp.curvature_normal_dev(n, gp.knn(np.random.default_rng(0).random((10, 3)), 3), 0) == 0

    def test_normal_dev_perpendicular(self):
        n = np.array([[0, 0, 1.0], [1, 0, 0], [0, 1, 0], [-1, 0, 0]])
        g = gp.KnnGraph(np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]), 3)
        assert abs(gp.curvature_normal_dev(n, g, 0) - np.sqrt(2)) <= 1e-12

    def test_normal_dev_resummation(self):
        pts = fps_sphere(128)
        g = gp.knn(pts, 10)
        n, _ = gp.estimate_normals(pts, k=10)
        for i in (0, 50):
            total = 0.0
            for j in g.neighbors[i]:
                m = n[j] if n[j] @ n[i] >= 0 else -n[j]
                total += np.linalg.norm(n[i] - m)
            assert abs(gp.curvature_normal_dev(n, g, i) - total / 10) <= 1e-12


class TestComputeProps:
    def test_plane(self):
        p = gp.compute_props(grid_plane(), k=8)
        assert np.all(p.curvature <= 1e-12)
        np.testing.assert_allclose(p.normals[:, 2], 1.0)

    def test_sphere_positive(self):
        p = gp.compute_props(fps_sphere(256), k=20)
        assert np.all(p.curvature[~p.degenerate] > 0)

    def test_deterministic(self):
        pts = fps_sphere(128)
        a, b = gp.compute_props(pts), gp.compute_props(pts)
        np.testing.assert_array_equal(a.as_array(), b.as_array())

    def test_normal_dev_range(self):
        p = gp.compute_props(fps_sphere(128), curvature_kind="normal_dev")
        assert np.all((p.curvature >= 0) & (p.curvature <= 2))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            gp.compute_props(fps_sphere(64), curvature_kind="gauss")

    def test_subset_matches_full(self):
        pts = np.random.default_rng(9).normal(size=(300, 3))
        rows = np.array([3, 10, 299, 0])
        a = gp.compute_props(pts, 12).take(rows)
        b = gp.compute_props_at(pts, rows, 12)
        np.testing.assert_array_equal(a.as_array(), b.as_array())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_range_and_invariances(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(60, 3)) * rng.uniform(0.2, 2, size=3)
        p = gp.compute_props(pts, 8)
        assert np.all((p.curvature >= 0) & (p.curvature <= 1 / 3))
        shifted = gp.compute_props(pts + rng.normal(size=3), 8)
        np.testing.assert_allclose(shifted.as_array(), p.as_array(), atol=1e-6)
        scaled = gp.compute_props(pts * 3.7, 8)
        np.testing.assert_allclose(scaled.curvature, p.curvature, atol=1e-9)

    def test_translation_exact_for_representable_shift(self):
        # displacements are exact when the shift does not change float spacing
        rng = np.random.default_rng(10)
        pts = rng.integers(-64, 64, size=(80, 3)) / 64.0
        p = gp.compute_props(pts, 8, orientation="none")
        q = gp.compute_props(pts + np.array([2.0, -4.0, 8.0]), 8, orientation="none")
        np.testing.assert_array_equal(p.as_array(), q.as_array())

    def test_json_roundtrip(self):
        p = gp.compute_props(fps_sphere(64), 8)
        q = gp.GeomProps.from_json(p.to_json())
        np.testing.assert_array_equal(p.as_array(), q.as_array())
        np.testing.assert_array_equal(p.degenerate, q.degenerate)

    def test_csv(self, tmp_path):
        p = gp.compute_props(fps_sphere(64), 8)
        gp.write_props_csv(p, tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "index,nx,ny,nz,u,degenerate" and len(lines) == 65


class TestTransfer:
    def test_coincident_copy(self):
        dense = np.random.default_rng(0).normal(size=(100, 3))
        props = gp.compute_props(dense, 8)
        out = gp.transfer_privileged(dense, props, dense[[5]])
        np.testing.assert_array_equal(out.as_array()[0], props.as_array()[5])

    def test_identity(self):
        dense = np.random.default_rng(1).normal(size=(50, 3))
        props = gp.compute_props(dense, 8)
        np.testing.assert_array_equal(gp.transfer_privileged(dense, props, dense).as_array(),
                                      props.as_array())

    def test_membership(self):
        rng = np.random.default_rng(2)
        dense = rng.normal(size=(200, 3))
        props = gp.compute_props(dense, 8)
        sparse = dense[rng.choice(200, 30, replace=False)] + 1e-4
        table = {tuple(r) for r in props.as_array()}
        assert all(tuple(r) in table for r in gp.transfer_privileged(dense, props, sparse).as_array())

    def test_empty_dense(self):
        with pytest.raises(ValueError):
            gp.transfer_privileged(np.zeros((0, 3)), gp.GeomProps(np.zeros((0, 3)), np.zeros(0),
                                                                  np.zeros(0, bool)), np.zeros((1, 3)))
