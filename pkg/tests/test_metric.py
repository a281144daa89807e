import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from mmpme.mesh import INTERIOR, Rectangle, build_structured_mesh
from mmpme.metric import (RecoveredDerivatives, build_metric, eigh2, element_average,
                          element_averages, metric_arclength, metric_hessian, recompose,
                          recover_hessian, smooth_metric, sym)

UNIT = Rectangle.square(0.0, 1.0)


def derivs(grad=(0.0, 0.0), hess=((0.0, 0.0), (0.0, 0.0))):
    return RecoveredDerivatives(np.array([grad], dtype=float), np.array([hess], dtype=float))


def random_spd(rng, n):
    A = rng.standard_normal((n, 2, 2))
    return A @ np.swapaxes(A, 1, 2) + 0.1 * np.eye(2)


class TestRecovery:
    @pytest.mark.parametrize("pattern", ["right", "crisscross"])
    def test_quadratic_exact(self, pattern):
        rng = np.random.default_rng(0)
        m = build_structured_mesh(Rectangle(-1, 2, 0, 1.5), 9, pattern)
        v = m.vertices.copy()
        inner = m.boundary_tags == INTERIOR
        v[inner] += 0.02 * rng.uniform(-1, 1, (inner.sum(), 2))
        m = m.moved(v)
        x, y = m.vertices.T
        d = recover_hessian(m, 3 * x**2 - 2 * x * y + y**2)
        assert d.n_fallback == 0
        assert np.abs(d.hessian - [[6, -2], [-2, 2]]).max() < 1e-9 * 6
        grad = np.column_stack([6 * x - 2 * y, -2 * x + 2 * y])
        assert np.abs(d.gradient - grad).max() < 1e-9 * 10

    def test_constant(self):
        m = build_structured_mesh(UNIT, 6)
        d = recover_hessian(m, np.full(m.n_vertices, 4.0))
        assert np.abs(d.gradient).max() < 1e-12 and np.abs(d.hessian).max() < 1e-10

    def test_sin_matches_finite_differences(self):
        n = 64
        m = build_structured_mesh(UNIT, n)
        x = m.vertices[:, 0]
        d = recover_hessian(m, np.sin(x))
        h = 1.0 / n
        interior = np.flatnonzero(m.boundary_tags == INTERIOR)
        fd = (np.sin(x + h) - 2 * np.sin(x) + np.sin(x - h)) / h**2
        err_fd = np.abs(d.hessian[interior, 0, 0] - fd[interior]).max()
        err_exact = np.abs(d.hessian[interior, 0, 0] + np.sin(x[interior])).max()
        # O(h) max|u'''| bound against both the exact value and the FD oracle
        assert err_exact < 2 * h
        assert err_fd < 2 * h

    def test_symmetric(self):
        m = build_structured_mesh(UNIT, 5, "crisscross")
        u = np.random.default_rng(1).standard_normal(m.n_vertices)
        H = recover_hessian(m, u).hessian
        assert np.array_equal(H, np.swapaxes(H, 1, 2))

    def test_wrong_length(self):
        m = build_structured_mesh(UNIT, 3)
        with pytest.raises(ValueError):
            recover_hessian(m, np.zeros(3))


class TestArclength:
    def test_zero_gradient(self):
        assert np.array_equal(metric_arclength(derivs())[0], np.eye(2))

    def test_rank_one(self):
        M = metric_arclength(derivs((3, 4)))[0]
        w, V = np.linalg.eigh(M)
        assert w == pytest.approx([1.0, np.sqrt(26)], rel=1e-12)
        assert abs(abs(V[:, 1] @ np.array([0.6, 0.8])) - 1) < 1e-12

    def test_axis_aligned(self):
        a = 2.5
        M = metric_arclength(derivs((a, 0)))[0]
        assert np.allclose(M, np.diag([np.sqrt(1 + a * a), 1]), atol=1e-14)

    def test_against_matrix_square_root(self):
        rng = np.random.default_rng(4)
        g = rng.standard_normal((20, 2)) * 5
        M = metric_arclength(RecoveredDerivatives(g, np.zeros((20, 2, 2))))
        for gi, Mi in zip(g, M):
            ref = scipy.linalg.sqrtm(np.eye(2) + np.outer(gi, gi)).real
            assert np.allclose(Mi, ref, rtol=1e-12, atol=1e-12)


class TestHessianMetric:
    def test_zero(self):
        assert np.allclose(metric_hessian(derivs())[0], np.eye(2))

    def test_diag(self):
        M = metric_hessian(derivs(hess=((3, 0), (0, 0))))[0]
        # frozen values of 4^(-1/6) diag(4, 1)
        assert np.allclose(M, np.diag([3.1748021039363987, 0.7937005259840998]), rtol=1e-14)
        assert M[0, 0] == pytest.approx(3.17480, abs=1e-5) and M[1, 1] == pytest.approx(0.79370, abs=1e-5)

    def test_sign_invariance(self):
        a = metric_hessian(derivs(hess=((3, 0), (0, 0))))
        b = metric_hessian(derivs(hess=((-3, 0), (0, 0))))
        assert np.array_equal(a, b)

    def test_against_numpy_eigh(self):
        rng = np.random.default_rng(5)
        H = rng.standard_normal((30, 2, 2)) * 10
        H = H + np.swapaxes(H, 1, 2)
        M = metric_hessian(RecoveredDerivatives(np.zeros((30, 2)), H))
        for h, m in zip(H, M):
            w, V = np.linalg.eigh(h)
            A = np.eye(2) + V @ np.diag(np.abs(w)) @ V.T
            assert np.allclose(m, np.linalg.det(A) ** (-1 / 6) * A, rtol=1e-11, atol=1e-12)


class TestEigen:
    def test_degenerate_gives_identity(self):
        lam, Q = eigh2(np.array([2.0 * np.eye(2)]))
        assert np.array_equal(Q[0], np.eye(2)) and np.allclose(lam, 2)

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        A = rng.standard_normal((50, 2, 2))
        A = A + np.swapaxes(A, 1, 2)
        lam, Q = eigh2(A)
        assert np.all(lam[:, 0] >= lam[:, 1])
        assert np.allclose(recompose(lam, Q), A, atol=1e-12)


class TestAveraging:
    mesh = build_structured_mesh(UNIT, 4)

    def test_identity(self):
        M = np.broadcast_to(np.eye(2), (self.mesh.n_vertices, 2, 2)).copy()
        assert np.allclose(element_average(self.mesh, M, 3), np.eye(2))

    def test_componentwise(self):
        M = np.broadcast_to(np.eye(2), (self.mesh.n_vertices, 2, 2)).copy()
        a, b, c = self.mesh.elements[5]
        M[a], M[b], M[c] = np.diag([1, 1]), np.diag([4, 1]), np.diag([4, 4])
        assert np.allclose(element_average(self.mesh, M, 5), np.diag([3, 2]))

    def test_convexity(self):
        rng = np.random.default_rng(7)
        M = random_spd(rng, self.mesh.n_vertices)
        avg = element_averages(self.mesh, M)
        ev = np.linalg.eigvalsh(M)
        lo, hi = ev[:, 0][self.mesh.elements].min(axis=1), ev[:, 1][self.mesh.elements].max(axis=1)
        ea = np.linalg.eigvalsh(avg)
        assert np.all(ea[:, 0] >= lo * (1 - 1e-12)) and np.all(ea[:, 1] <= hi * (1 + 1e-12))

    def test_smoothing_identity_and_fixed_point(self):
        rng = np.random.default_rng(8)
        M = random_spd(rng, self.mesh.n_vertices)
        M = 0.5 * (M + np.swapaxes(M, 1, 2))
        assert np.array_equal(smooth_metric(self.mesh, M, 0), M)
        C = np.broadcast_to(sym(2.0, 0.3, 1.0), (self.mesh.n_vertices, 2, 2))
        assert np.allclose(smooth_metric(self.mesh, C, 3), C, rtol=1e-14)

    def test_spike_patch_average(self):
        m = build_structured_mesh(UNIT, 6)
        M = np.broadcast_to(np.eye(2), (m.n_vertices, 2, 2)).copy()
        j = 3 * 7 + 3
        M[j] = 100 * np.eye(2)
        out = smooth_metric(m, M, 1)
        nb = {int(v) for e in m.elements if j in e for v in e}
        expect = (100 + (len(nb) - 1)) / len(nb)
        assert np.allclose(out[j], expect * np.eye(2))

    def test_negative_passes(self):
        with pytest.raises(ValueError):
            smooth_metric(self.mesh, np.zeros((self.mesh.n_vertices, 2, 2)), -1)


def test_build_metric_rejects_unknown():
    m = build_structured_mesh(UNIT, 3)
    with pytest.raises(ValueError):
        build_metric(m, np.zeros(m.n_vertices), "curvature")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1e3))
def test_builders_spd_for_any_field(seed, amp):
    m = build_structured_mesh(UNIT, 5, "crisscross")
    u = amp * np.random.default_rng(seed).standard_normal(m.n_vertices)
    d = recover_hessian(m, u)
    Ma = metric_arclength(d)
    assert np.array_equal(Ma, np.swapaxes(Ma, 1, 2))
    ev = np.linalg.eigvalsh(Ma)
    # eigvalsh itself is only accurate to about eps * ||M||
    slack = 4 * np.finfo(float).eps * ev[:, 1]
    assert np.all(ev[:, 0] >= 1 - 1e-12 - slack)
    g = d.gradient
    big = np.linalg.norm(g, axis=1) > 1e-8
    w, V = np.linalg.eigh(Ma[big])
    cosang = np.abs(np.einsum("ni,ni->n", V[:, :, 1], g[big])) / np.linalg.norm(g[big], axis=1)
    assert np.all(np.abs(cosang - 1) < 1e-10)
    Mh = metric_hessian(d)
    lam, q = eigh2(d.hessian)
    A = recompose(np.abs(lam), q) + np.eye(2)
    floor = np.linalg.det(A) ** (-1 / 6)
    evh = np.linalg.eigvalsh(Mh)
    assert np.all(evh[:, 0] >= floor * (1 - 1e-12) - 4 * np.finfo(float).eps * evh[:, 1])
    neg = metric_hessian(RecoveredDerivatives(d.gradient, -d.hessian))
    assert np.allclose(neg, Mh, rtol=1e-13, atol=0)


def test_abs_sym_matches_eigen_route():
    from mmpme.metric import abs_sym
    rng = np.random.default_rng(9)
    H = rng.standard_normal((200, 2, 2))
    H = H + np.swapaxes(H, 1, 2)
    H[:5] = [[[2, 0], [0, 2]], [[-1, 0], [0, -1]], [[0, 0], [0, 0]], [[3, 0], [0, 0]], [[1, 2], [2, 4]]]
    lam, q = eigh2(H)
    assert np.allclose(abs_sym(H), recompose(np.abs(lam), q), atol=1e-12)
    assert np.array_equal(abs_sym(-H), abs_sym(H))
