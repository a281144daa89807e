"""Three-stage Radau IIA integration of ``B(t) U' = F(t, U)`` with step control.

:func:`radau_step` solves one step of a generic linearly implicit system; the
moving-mesh PDE supplies ``B`` and ``F`` through :class:`MovingMeshSystem`,
whose mesh moves linearly in time between two vertex sets.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import Assembler, ProblemCoefficients, assembler_for
from .mesh import Mesh
from .metric import build_metric
from .mmpde import MeshTanglingError, MmpdeParams, move_mesh

log = logging.getLogger(__name__)

_S6 = math.sqrt(6.0)
RADAU_C = np.array([(4 - _S6) / 10, (4 + _S6) / 10, 1.0])
RADAU_A = np.array([
    [(88 - 7 * _S6) / 360, (296 - 169 * _S6) / 1800, (-2 + 3 * _S6) / 225],
    [(296 + 169 * _S6) / 1800, (88 + 7 * _S6) / 360, (-2 - 3 * _S6) / 225],
    [(16 - _S6) / 36, (16 + _S6) / 36, 1.0 / 9.0],
])
RADAU_W = np.linalg.inv(RADAU_A)
# embedded error estimate weights on the stage increments
_DD = np.array([-(13 + 7 * _S6) / 3, (-13 + 7 * _S6) / 3, -1.0 / 3.0])


def _transform():
    ev, V = np.linalg.eig(RADAU_W)
    real = int(np.argmin(np.abs(ev.imag)))
    cplx = int(np.argmax(ev.imag))
    return ev[real].real, ev[cplx], V, np.linalg.inv(V), real, cplx


_GAMMA, _ALPHA_BETA, _V, _VINV, _IREAL, _ICPLX = _transform()


class StepSizeUnderflow(RuntimeError):
    """The controller asked for a step below the minimum allowed size."""


@dataclass
class RadauConfig:
    rtol: float = 1e-6
    atol: float = 1e-8
    dt_max: float = 1e-3
    dt_init: float = 1e-6
    dt_min: float = 1e-12
    newton_tol: float = 0.03
    newton_max_iter: int = 10
    safety: float = 0.9
    fac_min: float = 0.2
    fac_max: float = 5.0

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.dt_init <= self.dt_max:
            raise ValueError("need 0 < dt_init <= dt_max")


class LinearlyImplicitSystem:
    """Interface used by :func:`radau_step`: ``mass(t) U' = rhs(t, U)``."""

    def mass(self, t):
        raise NotImplementedError

    def rhs(self, t, U):
        raise NotImplementedError

    def jac(self, t, U):
        raise NotImplementedError


class ConstantMassSystem(LinearlyImplicitSystem):
    """Adapter for small test problems given as plain callables."""

    def __init__(self, f, jac, n, mass=None):
        self.f, self._jac = f, jac
        self.B = sp.identity(n, format="csr") if mass is None else sp.csr_matrix(mass)

    def mass(self, t):
        return self.B

    def rhs(self, t, U):
        return np.atleast_1d(np.asarray(self.f(t, U), dtype=float))

    def jac(self, t, U):
        return sp.csr_matrix(np.atleast_2d(self._jac(t, U)))


@dataclass
class RadauResult:
    u: np.ndarray
    error: np.ndarray
    converged: bool
    newton_iterations: int
    error_norm: float = float("nan")


def wrms(vec, scale) -> float:
    return float(np.sqrt(np.mean((vec / scale) ** 2))) if len(vec) else 0.0


def radau_step(system: LinearlyImplicitSystem, t: float, U, dt: float, config: RadauConfig = None,
               refine_error: bool = False) -> RadauResult:
    """One step of the 3-stage Radau IIA method from ``(t, U)`` to ``t + dt``.

    Stage equations are solved by simplified Newton iteration.  The 3n-by-3n
    Newton matrix is decoupled through the eigenvectors of the inverse Butcher
    matrix into one real and one complex n-by-n sparse system.  The mass matrix
    in the Newton matrix is frozen at ``t + dt``; residuals use the mass matrix
    at each stage time.
    """
    config = config or RadauConfig()
    U = np.asarray(U, dtype=float)
    n = len(U)
    scale = config.atol + config.rtol * np.abs(U)
    times = t + RADAU_C * dt
    Bs = [system.mass(tt) for tt in times]
    B_end = Bs[2]
    Jm = system.jac(times[2], U)
    # FEM matrices have a symmetric pattern: minimum degree on A^T + A keeps fill low
    lu_r = spla.splu((_GAMMA * B_end - dt * Jm).tocsc(), permc_spec="MMD_AT_PLUS_A")
    lu_c = spla.splu((_ALPHA_BETA * B_end - dt * Jm).astype(complex).tocsc(), permc_spec="MMD_AT_PLUS_A")

    Z = np.zeros((3, n))
    converged = False
    prev_norm = None
    eta = None
    it = 0
    for it in range(1, config.newton_max_iter + 1):
        F = np.stack([system.rhs(times[i], U + Z[i]) for i in range(3)])
        WZ = RADAU_W @ Z
        R = np.stack([Bs[i] @ WZ[i] for i in range(3)]) - dt * F
        G = -(_VINV @ R)
        Y = np.empty((3, n), dtype=complex)
        Y[_IREAL] = lu_r.solve(np.ascontiguousarray(G[_IREAL].real))
        Y[_ICPLX] = lu_c.solve(np.ascontiguousarray(G[_ICPLX]))
        other = 3 - _IREAL - _ICPLX
        Y[other] = np.conj(Y[_ICPLX])
        dZ = (_V @ Y).real
        if not np.all(np.isfinite(dZ)):
            break
        Z += dZ
        dnorm = wrms(dZ.ravel(), np.tile(scale, 3))
        if prev_norm is not None:
            theta = dnorm / prev_norm if prev_norm > 0 else 0.0
            if theta >= 0.99:
                break
            eta = theta / (1.0 - theta)
        elif dnorm == 0.0:
            converged = True
            break
        if eta is not None and eta * dnorm <= config.newton_tol:
            converged = True
            break
        if eta is None and dnorm <= 1e-3 * config.newton_tol:
            converged = True
            break
        prev_norm = dnorm
    U_new = U + Z[2]
    if not converged:
        return RadauResult(U_new, np.full(n, np.inf), False, it)

    # embedded estimate: (gamma/dt B - J)^-1 [F(t, U) + B (dd . Z)/dt]
    F2 = (_DD @ Z) / dt
    B0 = system.mass(t)
    f0 = system.rhs(t, U)
    # lu_r factors (gamma B - dt J)
    err = lu_r.solve(dt * (f0 + B0 @ F2))
    sc = config.atol + config.rtol * np.maximum(np.abs(U), np.abs(U_new))
    enorm = wrms(err, sc)
    if refine_error and enorm >= 1.0:
        f1 = system.rhs(t, U + err)
        err = lu_r.solve(dt * (f1 + B0 @ F2))
        enorm = wrms(err, sc)
    return RadauResult(U_new, err, True, it, max(enorm, 1e-10))


@dataclass
class ControllerHistory:
    dt_prev: float | None = None
    err_prev: float | None = None


def step_controller(err_norm: float, dt: float, history: ControllerHistory | None = None,
                    config: RadauConfig = None):
    """Accept/reject a step and propose the next step size.

    Returns ``(accept, dt_next)``.  After an accepted step with a previous
    accepted step on record, a predictive (two-step) factor is blended in by
    taking the more cautious of the two proposals.
    """
    config = config or RadauConfig()
    if not np.isfinite(err_norm):
        return False, dt * config.fac_min
    err_norm = max(err_norm, 1e-300)
    accept = err_norm <= 1.0
    fac = config.safety * err_norm ** (-1.0 / 5.0)
    if accept and history is not None and history.dt_prev and history.err_prev:
        pred = config.safety * (dt / history.dt_prev) * (history.err_prev / err_norm**2) ** (1.0 / 5.0)
        fac = min(fac, pred)
    fac = min(config.fac_max, max(config.fac_min, fac))
    dt_next = min(dt * fac, config.dt_max)
    if accept and history is not None:
        history.dt_prev, history.err_prev = dt, err_norm
    return accept, dt_next


@dataclass
class MeshTrajectory:
    """Vertex sets at both ends of a step; the mesh moves linearly in between."""

    X0: np.ndarray
    X1: np.ndarray
    t0: float
    t1: float

    @property
    def velocity(self) -> np.ndarray:
        return (self.X1 - self.X0) / (self.t1 - self.t0)

    def at(self, t) -> np.ndarray:
        s = (t - self.t0) / (self.t1 - self.t0)
        return (1.0 - s) * self.X0 + s * self.X1

    def rescaled(self, t1: float) -> "MeshTrajectory":
        return MeshTrajectory(self.X0, self.X1, self.t0, t1)


class MovingMeshSystem(LinearlyImplicitSystem):
    """FEM semi-discretisation on a mesh moving along ``trajectory``."""

    def __init__(self, assembler: Assembler, trajectory: MeshTrajectory, coeffs: ProblemCoefficients):
        self.asm = assembler
        self.traj = trajectory
        self.coeffs = coeffs
        self.Xdot = trajectory.velocity
        self._mass_cache = {}

    def mass(self, t):
        B = self._mass_cache.get(t)
        if B is None:
            B = self.asm.mass_matrix(self.traj.at(t))
            self._mass_cache[t] = B
        return B

    def rhs(self, t, U):
        return self.asm.rhs(U, self.traj.at(t), self.Xdot, self.coeffs, t)

    def jac(self, t, U):
        return self.asm.jacobian(U, self.traj.at(t), self.Xdot, self.coeffs, t)


def min_stage_det(mesh: Mesh, trajectory: MeshTrajectory) -> float:
    """Smallest element determinant over the mesh path at the Radau abscissae."""
    el = mesh.elements
    worst = np.inf
    for c in (0.0, *RADAU_C):
        x = trajectory.X0 + c * (trajectory.X1 - trajectory.X0)
        p = x[el]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        worst = min(worst, float((e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]).min()))
    return worst


@dataclass
class StepStats:
    t: float
    dt: float
    newton_iterations: int
    error_norm: float
    rejected: int
    min_area: float
    boundary_deviation: float


@dataclass
class SolverState:
    mesh: Mesh
    U: np.ndarray  # nodal values on all vertices
    t: float
    dt: float
    dt_mesh: float  # pseudo-interval for the next mesh relaxation
    history: ControllerHistory = field(default_factory=ControllerHistory)
    step: int = 0


@dataclass
class SolverSettings:
    metric: str = "hessian"
    smoothing: int = 2
    mmpde: MmpdeParams = field(default_factory=MmpdeParams)
    radau: RadauConfig = field(default_factory=RadauConfig)
    xi_rtol: float = 1e-4
    xi_atol: float = 1e-7
    move_mesh: bool = True
    # length of the mesh-relaxation interval: "previous" accepted step or the "trial" step
    xi_interval: str = "trial"
    # rejections tolerated with a fixed target mesh before it is regenerated over the shorter step
    kept_rejections: int = 3

    def __post_init__(self):
        if self.xi_interval not in ("previous", "trial"):
            raise ValueError("xi_interval must be 'previous' or 'trial'")


def mesh_is_moving(settings: SolverSettings) -> bool:
    # the uniform metric leaves the uniform reference mesh stationary
    return settings.move_mesh and settings.metric != "uniform"


def generate_mesh(state: SolverState, reference: Mesh, settings: SolverSettings,
                  interval: float | None = None) -> Mesh:
    """Target physical mesh for the next step (the current mesh if it is not moving)."""
    if not mesh_is_moving(settings):
        return state.mesh
    M = build_metric(state.mesh, state.U, settings.metric, settings.smoothing)
    if interval is None:
        interval = state.dt_mesh if settings.xi_interval == "previous" else state.dt
    return move_mesh(state.mesh, M, reference, interval, settings.mmpde,
                     rtol=settings.xi_rtol, atol=settings.xi_atol)


def advance_step(state: SolverState, reference: Mesh, coeffs: ProblemCoefficients,
                 settings: SolverSettings, t_stop: float | None = None):
    """Advance the coupled mesh/PDE system by one accepted step.

    The target mesh is generated first and kept through step rejections; a
    rejected step only shortens the interval over which the mesh travels to it.
    After ``settings.kept_rejections`` rejections in a row the target is
    regenerated with the shortened step as relaxation interval, since a fixed
    displacement over an ever shorter step never satisfies the error test.
    Returns ``(new_state, StepStats)``; ``state`` itself is never modified.
    """
    cfg = settings.radau
    mesh = state.mesh
    target = generate_mesh(state, reference, settings)
    asm = assembler_for(mesh)
    U0 = state.U[asm.interior]
    history = ControllerHistory(state.history.dt_prev, state.history.err_prev)
    dt = state.dt
    rejected = 0
    kept = 0
    while True:
        if t_stop is not None:
            dt = min(dt, t_stop - state.t)
        if dt < cfg.dt_min:
            raise StepSizeUnderflow(f"step size {dt:.3e} below {cfg.dt_min:g} at t = {state.t:.6g}")
        if kept >= settings.kept_rejections and mesh_is_moving(settings):
            target = generate_mesh(state, reference, settings, interval=dt)
            kept = 0
        traj = MeshTrajectory(mesh.vertices, target.vertices, state.t, state.t + dt)
        if min_stage_det(mesh, traj) <= 0:
            raise MeshTanglingError(f"mesh path inverts an element at t = {state.t:.6g}")
        system = MovingMeshSystem(asm, traj, coeffs)
        res = radau_step(system, state.t, U0, dt, cfg, refine_error=(rejected > 0 or state.step == 0))
        if not res.converged:
            log.debug("t=%.6g dt=%.3e rejected: Newton did not converge", state.t, dt)
            rejected += 1
            kept += 1
            dt *= 0.5
            continue
        accept, dt_next = step_controller(res.error_norm, dt, history, cfg)
        if accept:
            break
        log.debug("t=%.6g dt=%.3e rejected: error norm %.3g", state.t, dt, res.error_norm)
        rejected += 1
        kept += 1
        dt = dt_next
    new_state = SolverState(
        mesh=target, U=asm.full(res.u), t=state.t + dt, dt=dt_next, dt_mesh=dt,
        history=history, step=state.step + 1,
    )
    stats = StepStats(
        t=new_state.t, dt=dt, newton_iterations=res.newton_iterations, error_norm=res.error_norm,
        rejected=rejected, min_area=float(target.areas.min()),
        boundary_deviation=target.boundary_deviation() if target.domain is not None else 0.0,
    )
    return new_state, stats
