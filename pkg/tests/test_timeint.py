import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmpme.fem import ProblemCoefficients, project_initial
from mmpme.mesh import Rectangle, build_structured_mesh
from mmpme.mmpde import MmpdeParams, move_mesh
from mmpme.problems import barenblatt, barenblatt_t0, get_problem
from mmpme.timeint import (RADAU_A, RADAU_C, ConstantMassSystem, ControllerHistory, MeshTrajectory,
                           RadauConfig, SolverSettings, SolverState, StepSizeUnderflow, advance_step,
                           min_stage_det, radau_step, step_controller)

TIGHT = RadauConfig(rtol=1e-12, atol=1e-14, newton_tol=1e-10, newton_max_iter=20)


def integrate_fixed(system, u0, t_end, dt, config=TIGHT):
    u, t = np.atleast_1d(np.asarray(u0, dtype=float)), 0.0
    for _ in range(int(round(t_end / dt))):
        res = radau_step(system, t, u, dt, config)
        assert res.converged
        u, t = res.u, t + dt
    return u


class TestTableau:
    def test_row_sums_are_abscissae(self):
        assert np.allclose(RADAU_A.sum(axis=1), RADAU_C, atol=1e-15)

    def test_stiffly_accurate(self):
        # last row equals the quadrature weights, which integrate t^k exactly up to k = 4
        b = RADAU_A[-1]
        for k in range(5):
            assert b @ RADAU_C**k == pytest.approx(1 / (k + 1), abs=1e-14)

    def test_stage_order_three(self):
        for k in range(3):
            assert np.allclose(RADAU_A @ RADAU_C**k, RADAU_C ** (k + 1) / (k + 1), atol=1e-14)


class TestRadauStep:
    decay = ConstantMassSystem(lambda t, u: -u, lambda t, u: -np.eye(1), 1)

    def test_order_five(self):
        errs = [abs(integrate_fixed(self.decay, 1.0, 1.0, dt)[0] - np.exp(-1.0)) for dt in (0.1, 0.05, 0.025)]
        ratios = [errs[0] / errs[1], errs[1] / errs[2]]
        assert all(24 <= r <= 40 for r in ratios), ratios

    def test_equilibrium(self):
        sys0 = ConstantMassSystem(lambda t, u: -u**3, lambda t, u: np.diag(-3 * u**2), 4)
        res = radau_step(sys0, 0.0, np.zeros(4), 0.1)
        assert res.converged and np.all(res.u == 0)

    def test_polynomial_exactness(self):
        p = np.polynomial.Polynomial([0.3, -1.0, 2.0, 0.5, -1.5])
        dp = p.deriv()
        system = ConstantMassSystem(lambda t, u: np.array([dp(t)]), lambda t, u: np.zeros((1, 1)), 1)
        t0, dt = 0.2, 0.7
        res = radau_step(system, t0, [p(t0)], dt, TIGHT)
        assert res.u[0] == pytest.approx(p(t0 + dt), abs=1e-12)

    def test_mass_matrix(self):
        # B u' = -u with B = 2I is u' = -u/2
        system = ConstantMassSystem(lambda t, u: -u, lambda t, u: -np.eye(2), 2, mass=2 * np.eye(2))
        u = integrate_fixed(system, [1.0, 3.0], 1.0, 0.1)
        assert np.allclose(u, np.array([1.0, 3.0]) * np.exp(-0.5), rtol=1e-8)

    def test_stiff_linear_system(self):
        # L-stability: a very stiff mode is damped in one step
        lam = np.array([-1.0, -1e8])
        system = ConstantMassSystem(lambda t, u: lam * u, lambda t, u: np.diag(lam), 2)
        res = radau_step(system, 0.0, np.ones(2), 0.1, TIGHT)
        assert res.u[0] == pytest.approx(np.exp(-0.1), rel=1e-9)
        # the stability function decays like 3/|z| as z -> -infinity
        assert abs(res.u[1]) == pytest.approx(3 / (1e8 * 0.1), rel=1e-3)

    def test_error_estimate_shrinks_with_step(self):
        system = ConstantMassSystem(lambda t, u: np.cos(t) * u, lambda t, u: np.cos(t) * np.eye(1), 1)
        e = [np.abs(radau_step(system, 0.0, [1.0], dt).error).max() for dt in (0.2, 0.1)]
        assert e[1] < e[0]


class TestController:
    cfg = RadauConfig()

    def test_boundary_norm(self):
        accept, dt = step_controller(1.0, 1e-4, None, self.cfg)
        assert accept and dt == pytest.approx(self.cfg.safety * 1e-4, rel=1e-14)

    def test_growth_clamp(self):
        accept, dt = step_controller(1e-10, 1e-4, None, self.cfg)
        assert accept and dt == pytest.approx(5e-4, rel=1e-14)
        accept, dt = step_controller(1e-10, 5e-4, None, self.cfg)
        assert accept and dt == self.cfg.dt_max

    def test_reject(self):
        accept, dt = step_controller(32.0, 1e-4, None, self.cfg)
        assert not accept
        assert dt == pytest.approx(1e-4 * max(0.2, self.cfg.safety * 32 ** (-0.2)), rel=1e-14)
        assert dt == pytest.approx(0.45e-4, rel=1e-12)

    def test_non_finite_rejects(self):
        accept, dt = step_controller(np.inf, 1e-4, None, self.cfg)
        assert not accept and dt == pytest.approx(2e-5)

    def test_predictive_factor_is_more_cautious(self):
        h = ControllerHistory(dt_prev=1e-4, err_prev=0.01)
        _, plain = step_controller(0.5, 1e-4, None, self.cfg)
        _, pred = step_controller(0.5, 1e-4, h, self.cfg)
        assert pred <= plain
        assert (h.dt_prev, h.err_prev) == (1e-4, 0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-12, 1e6), st.floats(1e-9, 1e-3))
    def test_bounds(self, err, dt):
        accept, dt_next = step_controller(err, dt, None, self.cfg)
        assert accept == (err <= 1.0)
        assert 0 < dt_next <= self.cfg.dt_max
        assert self.cfg.fac_min * dt * (1 - 1e-12) <= dt_next <= self.cfg.fac_max * dt * (1 + 1e-12)


class TestTrajectory:
    def test_blend_and_velocity(self):
        X0, X1 = np.zeros((3, 2)), np.ones((3, 2))
        tr = MeshTrajectory(X0, X1, 1.0, 3.0)
        assert np.allclose(tr.at(2.0), 0.5) and np.allclose(tr.velocity, 0.5)
        assert np.allclose(tr.rescaled(2.0).velocity, 1.0)

    def test_min_stage_det(self):
        m = build_structured_mesh(Rectangle.square(0, 1), 4)
        tr = MeshTrajectory(m.vertices, m.vertices, 0.0, 1.0)
        assert min_stage_det(m, tr) == pytest.approx(m.dets.min())


def heat_state(n=8):
    dom = Rectangle.square(0, np.pi)
    m = build_structured_mesh(dom, n)
    U = project_initial(m, lambda x, y: np.sin(x) * np.sin(y))
    return m, SolverState(m, U, 0.0, 1e-6, 1e-3)


class TestAdvanceStep:
    def test_uniform_metric_fixed_point(self):
        m, state = heat_state()
        settings = SolverSettings(metric="uniform")
        new, _ = advance_step(state, m, ProblemCoefficients(0.0), settings)
        assert np.array_equal(new.mesh.vertices, m.vertices)
        # an actual relaxation with the identity metric leaves the uniform mesh in place as well
        ident = np.broadcast_to(np.eye(2), (m.n_vertices, 2, 2))
        moved = move_mesh(m, ident, m, 1e-3, MmpdeParams())
        assert np.abs(moved.vertices - m.vertices).max() < 1e-8

    def test_rejected_steps_do_not_mutate_state(self):
        m, state = heat_state()
        state.dt = 1e-3  # too large for the tight tolerance below, forcing rejections
        settings = SolverSettings(metric="uniform", radau=RadauConfig(rtol=1e-12, atol=1e-14, dt_init=1e-6))
        before = copy.deepcopy(state)
        new, stats = advance_step(state, m, ProblemCoefficients(0.0), settings)
        assert stats.rejected > 0
        assert state.t == before.t and state.dt == before.dt and state.step == before.step
        assert np.array_equal(state.U, before.U)
        assert state.history.dt_prev == before.history.dt_prev
        assert new.t == pytest.approx(stats.dt) and new.step == 1

    def test_underflow(self):
        m, state = heat_state()
        settings = SolverSettings(metric="uniform", radau=RadauConfig(dt_min=1e-3, dt_init=1e-6))
        with pytest.raises(StepSizeUnderflow):
            advance_step(state, m, ProblemCoefficients(0.0), settings)

    def test_t_stop_clips(self):
        m, state = heat_state()
        state.dt = 1e-3
        new, stats = advance_step(state, m, ProblemCoefficients(0.0), SolverSettings(metric="uniform"),
                                  t_stop=2e-4)
        assert new.t == pytest.approx(2e-4, abs=1e-18)

    def test_barenblatt_m1_single_step(self):
        prob = get_problem("barenblatt-m1")
        ref = build_structured_mesh(prob.domain, 10, "crisscross")
        t0 = barenblatt_t0(1)
        U = project_initial(ref, prob.u0)
        state = SolverState(ref, U, t0, 1e-6, 1e-3)
        new, stats = advance_step(state, ref, prob.coefficients, SolverSettings(metric="hessian"))
        assert 0 < stats.dt <= 1e-3
        assert new.mesh.is_valid()
        assert new.U.max() < U.max()
        # the exact peak decays as well
        assert barenblatt(0.0, 0.0, new.t, 1) < barenblatt(0.0, 0.0, t0, 1)

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            SolverSettings(xi_interval="later")
        with pytest.raises(ValueError):
            RadauConfig(rtol=0.0)
        with pytest.raises(ValueError):
            RadauConfig(dt_init=1.0, dt_max=1e-3)
