from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp
import shapely
from shapely.geometry import Polygon

from evppi.errors import ConfigError, ContainmentError, DomainError, GeometryError
from evppi.fem import (fem_matrices, matern_covariance, matern_marginal_variance, matern_range,
                       precision_matrix)
from evppi.mesh import INNER, Mesh, MeshConfig, build_mesh, projector
from evppi.sparse import SpdFactor

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def unit_triangle():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    z = np.zeros(3, dtype=np.int8)
    return Mesh(v, np.array([[0, 1, 2]]), v, v, z, z[:1])


@pytest.fixture(scope="module")
def cloud_mesh():
    pts = np.random.default_rng(0).normal(size=(300, 2))
    return pts, build_mesh(pts)


@pytest.fixture(scope="module")
def disc():
    ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    pts = np.column_stack([np.cos(ang), np.sin(ang)])
    return build_mesh(pts, MeshConfig(inner_max_edge=0.05, outer_max_edge=0.1, arc_segments=16))


def hand_stiffness(v):
    """Linear-element stiffness of one triangle in exact rationals."""
    p = [[Fraction(x) for x in row] for row in v]
    area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])
    e = [[p[(i + 2) % 3][k] - p[(i + 1) % 3][k] for k in range(2)] for i in range(3)]
    return [[(e[i][0] * e[j][0] + e[i][1] * e[j][1]) / (2 * area2) for j in range(3)] for i in range(3)], area2 / 2


class TestMesh:
    def test_square_corners(self):
        m = build_mesh(SQUARE)
        assert np.all(m.signed_areas() > 0)
        inner = Polygon(m.inner_boundary)
        assert np.all(shapely.contains_xy(inner, SQUARE[:, 0], SQUARE[:, 1]))
        assert m.n_inner_vertices >= 400

    def test_conforming(self, cloud_mesh):
        _, m = cloud_mesh
        t = m.triangles
        e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        # every edge is shared by at most two triangles, and the boundary is one closed loop
        assert counts.max() <= 2
        n_boundary = int(np.sum(counts == 1))
        n_edges = len(counts)
        assert m.n_vertices - n_edges + m.n_triangles == 1
        assert n_boundary >= 3

    def test_encases_points_and_min_angle(self, cloud_mesh):
        pts, m = cloud_mesh
        assert np.all(shapely.contains_xy(Polygon(m.inner_boundary), pts[:, 0], pts[:, 1]))
        p = m.vertices[m.triangles]
        angles = []
        for i in range(3):
            a, b = p[:, (i + 1) % 3] - p[:, i], p[:, (i + 2) % 3] - p[:, i]
            cos = np.sum(a * b, axis=1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
            angles.append(np.degrees(np.arccos(np.clip(cos, -1, 1))))
        assert np.min(angles) >= 21.0 - 1e-6

    def test_default_vertex_target(self, cloud_mesh):
        _, m = cloud_mesh
        assert m.n_inner_vertices >= MeshConfig().target_inner_vertices(300)

    def test_halving_edge(self):
        pts = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
        n1 = build_mesh(pts, MeshConfig(inner_max_edge=0.2)).n_inner_vertices
        n2 = build_mesh(pts, MeshConfig(inner_max_edge=0.1)).n_inner_vertices
        assert 3 < n2 / n1 < 5

    def test_deterministic(self, cloud_mesh):
        pts, m = cloud_mesh
        m2 = build_mesh(pts.copy())
        np.testing.assert_array_equal(m.vertices, m2.vertices)
        np.testing.assert_array_equal(m.triangles, m2.triangles)

    def test_collinear(self):
        with pytest.raises(GeometryError):
            build_mesh(np.column_stack([np.arange(5.0), 2 * np.arange(5.0)]))

    def test_vertex_cap(self):
        with pytest.raises(ConfigError):
            build_mesh(SQUARE, MeshConfig(inner_max_edge=0.005, vertex_cap=5000))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            MeshConfig(inner_dilation=0.6, outer_dilation=0.5)
        with pytest.raises(ConfigError):
            MeshConfig(min_angle=40)

    def test_text_round_trip(self, tmp_path, cloud_mesh):
        _, m = cloud_mesh
        m.save(tmp_path / "m.txt")
        back = Mesh.load(tmp_path / "m.txt")
        np.testing.assert_array_equal(back.vertices, m.vertices)
        np.testing.assert_array_equal(back.triangles, m.triangles)
        np.testing.assert_array_equal(back.vertex_zone, m.vertex_zone)
        np.testing.assert_array_equal(back.outer_boundary, m.outer_boundary)


class TestFem:
    def test_unit_right_triangle_exact(self):
        op = fem_matrices(unit_triangle())
        K, area = hand_stiffness([[0, 0], [1, 0], [0, 1]])
        assert [[float(x) for x in row] for row in K] == op.G.toarray().tolist()
        expected = np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]) / 2
        assert np.array_equal(op.G.toarray(), expected)
        assert np.array_equal(op.C.toarray(), np.eye(3) * float(area / 3))
        assert op.C.diagonal()[0] == 1 / 6

    def test_identities(self, cloud_mesh):
        _, m = cloud_mesh
        op = fem_matrices(m)
        G = op.G.toarray()
        np.testing.assert_allclose(G.sum(axis=1), 0, atol=1e-10)
        np.testing.assert_allclose(G, G.T, atol=1e-14)
        assert op.C.diagonal().sum() == pytest.approx(m.signed_areas().sum(), rel=1e-12)
        assert np.all(op.C.diagonal() > 0)
        # sparsity pattern of G is the vertex adjacency
        e = m.edges()
        adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=G.shape)
        adj = ((adj + adj.T + sp.identity(G.shape[0])) > 0).toarray()
        assert np.all((np.abs(G) > 0) <= adj)

    def test_stiffness_kernel(self):
        m = build_mesh(SQUARE, MeshConfig(inner_max_edge=0.3))
        w = np.linalg.eigvalsh(fem_matrices(m).G.toarray())
        assert abs(w[0]) < 1e-10 and w[1] > 1e-6

    def test_zero_area_triangle(self):
        v = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        z = np.zeros(3, dtype=np.int8)
        with pytest.raises(Exception):
            fem_matrices(Mesh(v, np.array([[0, 1, 2]]), v, v, z, z[:1]))


class TestPrecision:
    def test_marginal_variance_formula(self):
        assert matern_marginal_variance(1.0, 1.0) == pytest.approx(1 / (4 * np.pi))
        assert matern_marginal_variance(1.0, 1.0) == pytest.approx(0.0795775, abs=1e-7)
        assert matern_range(2.0) == pytest.approx(np.sqrt(8) / 2)

    def test_tau_scaling(self, cloud_mesh):
        op = fem_matrices(cloud_mesh[1])
        a = precision_matrix(op, 1.5, 0.7).Q
        b = precision_matrix(op, 1.5, 1.4).Q
        np.testing.assert_allclose(b.toarray(), 4 * a.toarray(), rtol=1e-14)

    def test_structure(self, cloud_mesh):
        op = fem_matrices(cloud_mesh[1])
        k, t = 2.0, 0.5
        Q = precision_matrix(op, k, t).Q.toarray()
        C, G = op.C.toarray(), op.G.toarray()
        ref = t ** 2 * (k ** 4 * C + 2 * k ** 2 * G + G @ np.linalg.inv(C) @ G)
        np.testing.assert_allclose(Q, ref, atol=1e-10 * np.abs(ref).max())
        np.testing.assert_allclose(Q, Q.T, atol=1e-12 * np.abs(ref).max())

    def test_nonzeros_within_two_hops(self, cloud_mesh):
        m = cloud_mesh[1]
        op = fem_matrices(m)
        Q = precision_matrix(op, 1.0, 1.0).Q
        A = (abs(op.G) + sp.identity(op.n)) > 0
        A2 = (A @ A) > 0
        assert ((Q != 0) > A2).nnz == 0

    def test_domain(self, cloud_mesh):
        with pytest.raises(DomainError):
            precision_matrix(fem_matrices(cloud_mesh[1]), -1.0, 1.0)

    def test_relabeling(self, cloud_mesh):
        m = cloud_mesh[1]
        perm = np.random.default_rng(2).permutation(m.n_vertices)
        inv = np.argsort(perm)
        m2 = Mesh(m.vertices[perm], inv[m.triangles], m.inner_boundary, m.outer_boundary,
                  m.vertex_zone[perm], m.triangle_zone)
        Q1 = precision_matrix(fem_matrices(m), 1.3, 0.8).Q.toarray()
        Q2 = precision_matrix(fem_matrices(m2), 1.3, 0.8).Q.toarray()
        np.testing.assert_allclose(Q2, Q1[np.ix_(perm, perm)], rtol=1e-12, atol=1e-12 * np.abs(Q1).max())

    def test_fill_in_growth(self):
        sizes, ratios = [], []
        for target in (200, 800, 2000, 5000):
            pts = np.random.default_rng(0).normal(size=(300, 2))
            m = build_mesh(pts, MeshConfig(min_inner_vertices=target, max_vertices=target))
            f = precision_matrix(fem_matrices(m), 1.0, 1.0).factor()
            sizes.append(m.n_vertices)
            ratios.append(f.factor_nnz / m.n_vertices)
        slope = np.polyfit(np.log(sizes), np.log(ratios), 1)[0]
        assert slope < 0.6

    def test_vertex_variance_on_disc(self, disc):
        kappa, tau = 5.0, 1.0
        X = precision_matrix(fem_matrices(disc), kappa, tau).factor().sample(2000, np.random.default_rng(1))
        central = np.hypot(*disc.vertices.T) < 0.5
        ratio = X[central].var(axis=1).mean() / matern_marginal_variance(kappa, tau)
        assert abs(ratio - 1) < 0.15


class TestProjector:
    def test_vertex_and_centroid(self, cloud_mesh):
        _, m = cloud_mesh
        tri = m.triangles[10]
        P = projector(m, np.vstack([m.vertices[tri[0]], m.vertices[tri].mean(axis=0)]))
        row0 = P.A[0].toarray().ravel()
        assert row0[tri[0]] == 1.0 and np.count_nonzero(row0) == 1
        row1 = P.A[1].toarray().ravel()
        np.testing.assert_allclose(row1[tri], 1 / 3, atol=1e-12)

    def test_partition_of_unity(self, cloud_mesh):
        pts, m = cloud_mesh
        P = projector(m, pts)
        A = P.A
        np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        assert A.min() >= 0
        assert np.all(np.diff(A.indptr) <= 3)
        np.testing.assert_allclose(P @ np.full(m.n_vertices, 2.5), 2.5, atol=1e-12)

    def test_reproduces_linear_functions(self, cloud_mesh):
        pts, m = cloud_mesh
        f = m.vertices @ np.array([0.3, -1.2]) + 0.7
        np.testing.assert_allclose(projector(m, pts) @ f, pts @ np.array([0.3, -1.2]) + 0.7, atol=1e-10)

    def test_outside(self, cloud_mesh):
        with pytest.raises(ContainmentError):
            projector(cloud_mesh[1], np.array([[100.0, 100.0]]))


class TestMatern:
    def test_half_order(self):
        assert matern_covariance(1.0, 1.0, 0.5, 1.0) == pytest.approx(np.exp(-1), rel=1e-12)
        assert matern_covariance(0.0, 3.0, 1.0, 2.5) == 2.5

    def test_monotone(self):
        d = np.linspace(0, 5, 50)
        c = matern_covariance(d, 2.0, 1.0, 1.0)
        assert np.all(np.diff(c) < 0)

    def test_domain(self):
        with pytest.raises(DomainError):
            matern_covariance(-1.0, 1.0, 1.0, 1.0)

    def test_gmrf_covariance_matches_matern(self, disc):
        kappa, tau = 5.0, 1.0
        X = precision_matrix(fem_matrices(disc), kappa, tau).factor().sample(2000, np.random.default_rng(1))
        s2 = matern_marginal_variance(kappa, tau)
        v = disc.vertices
        idx = np.flatnonzero(np.hypot(*v.T) < 0.5)[::3]
        D = np.linalg.norm(v[idx, None] - v[None, idx], axis=2)
        Xc = X[idx] - X[idx].mean(axis=1, keepdims=True)
        emp = Xc @ Xc.T / (X.shape[1] - 1)
        edges = np.linspace(0.5 / kappa, 2 / kappa, 6)
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = (D >= lo) & (D < hi)
            ratio = emp[sel].mean() / matern_covariance(D[sel], kappa, 1.0, s2).mean()
            assert abs(ratio - 1) < 0.15, (lo, hi, ratio)


class TestSparse:
    def _spd(self, n, seed):
        rng = np.random.default_rng(seed)
        A = sp.random(n, n, density=0.05, random_state=seed)
        return sp.csc_matrix(A @ A.T + n * 0.1 * sp.identity(n)), rng

    def test_logdet_and_solve(self):
        A, rng = self._spd(120, 0)
        f = SpdFactor(A)
        assert f.logdet == pytest.approx(np.linalg.slogdet(A.toarray())[1], rel=1e-10)
        b = rng.normal(size=120)
        np.testing.assert_allclose(A @ f.solve(b), b, atol=1e-9)
        Bm = sp.random(7, 120, density=0.1, random_state=1)
        np.testing.assert_allclose(f.quad_diag(Bm), np.diag(Bm @ np.linalg.inv(A.toarray()) @ Bm.T), rtol=1e-9)

    def test_sample_covariance(self):
        A, rng = self._spd(30, 3)
        X = SpdFactor(A).sample(200_000, rng)
        np.testing.assert_allclose(np.cov(X), np.linalg.inv(A.toarray()), atol=0.01)

    def test_indefinite(self):
        from evppi.errors import NumericError
        with pytest.raises(NumericError):
            SpdFactor(sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]])))
