"""Simulation driver, convergence studies and slope fitting."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .fem import ErrorAccumulator, project_initial
from .mesh import Mesh, build_structured_mesh
from .metric import METRIC_TYPES
from .mmpde import MmpdeParams
from .problems import ProblemSpec, get_problem
from .timeint import (RadauConfig, SolverSettings, SolverState, StepStats, advance_step,
                      generate_mesh)

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    problem: str = "barenblatt-m2"
    metric: str = "hessian"
    n: Optional[int] = None  # cells per side; None takes the problem default
    pattern: Optional[str] = None  # "right" (2n^2 elements) or "crisscross" (4n^2)
    tau: float = 1e-4
    dt_max: float = 1e-3
    rtol: float = 1e-6
    atol: float = 1e-8
    t_end: Optional[float] = None
    snapshots: tuple = ()
    smoothing: int = 2
    theta: float = 1.0 / 3.0
    p: float = 2.0
    initial_adapt: int = 0  # mesh relaxations on u0 before time stepping
    xi_interval: str = "trial"
    out: Optional[str] = None
    seed: int = 0  # reserved; the solver is deterministic
    threads: int = 1
    serial_verify: bool = False

    def __post_init__(self):
        if self.metric not in METRIC_TYPES:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRIC_TYPES}")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be positive")
        for name in ("tau", "dt_max", "rtol", "atol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.smoothing < 0 or self.initial_adapt < 0 or self.threads < 1:
            raise ValueError("smoothing and initial_adapt must be >= 0, threads >= 1")
        self.snapshots = tuple(float(s) for s in self.snapshots)


def elements_for(n: int, pattern: str) -> int:
    return (4 if pattern == "crisscross" else 2) * n * n


@dataclass
class RunResult:
    config: RunConfig
    problem: ProblemSpec
    mesh: Mesh
    U: np.ndarray
    t: float
    steps: list  # StepStats of accepted steps
    snapshots: dict  # requested time -> (t_actual, Mesh, U)
    l2l2: float = float("nan")
    l1l1: float = float("nan")
    seconds: float = 0.0
    min_det: float = float("inf")  # over all accepted meshes
    max_boundary_deviation: float = 0.0

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements


def _settings(cfg: RunConfig) -> SolverSettings:
    return SolverSettings(
        metric=cfg.metric,
        smoothing=cfg.smoothing,
        mmpde=MmpdeParams(theta=cfg.theta, p=cfg.p, tau=cfg.tau),
        radau=RadauConfig(rtol=cfg.rtol, atol=cfg.atol, dt_max=cfg.dt_max,
                          dt_init=min(1e-6, cfg.dt_max)),
        xi_interval=cfg.xi_interval,
    )


def simulate(cfg: RunConfig, problem: ProblemSpec | None = None,
             on_step: Callable[[SolverState, StepStats], None] | None = None) -> RunResult:
    """Integrate one problem to its final time and collect diagnostics.

    Error norms are accumulated only when the problem has an exact solution.
    Snapshots are taken at the first accepted time at or after each requested
    time; the step size is clipped so requested times are hit exactly.
    """
    problem = problem or get_problem(cfg.problem)
    n = cfg.n or problem.n
    pattern = cfg.pattern or problem.pattern
    t_end = problem.t_end if cfg.t_end is None else cfg.t_end
    if not t_end > problem.t_start:
        raise ValueError(f"end time {t_end} does not follow the start time {problem.t_start}")
    settings = _settings(cfg)
    reference = build_structured_mesh(problem.domain, n, pattern)
    clock = time.perf_counter()

    mesh = reference
    U = project_initial(mesh, problem.u0)
    state = SolverState(mesh, U, problem.t_start, settings.radau.dt_init, settings.radau.dt_max)
    for _ in range(cfg.initial_adapt):
        # relax the starting mesh towards u0 over ten mesh response times, re-project
        mesh = generate_mesh(state, reference, settings, interval=10 * settings.mmpde.tau)
        U = project_initial(mesh, problem.u0)
        state = SolverState(mesh, U, problem.t_start, settings.radau.dt_init, settings.radau.dt_max)

    acc = ErrorAccumulator(problem.exact) if problem.exact is not None else None
    if acc is not None:
        acc.add(state.mesh, state.U, state.t)
    stops = sorted(s for s in cfg.snapshots if problem.t_start <= s <= t_end)
    snaps = {}
    steps = []
    min_det = float(state.mesh.dets.min())
    max_dev = state.mesh.boundary_deviation()

    def take_snapshots(st):
        while stops and st.t >= stops[0] - 1e-12 * max(1.0, abs(stops[0])):
            snaps[stops.pop(0)] = (st.t, st.mesh, st.U.copy())

    take_snapshots(state)
    while state.t < t_end - 1e-12 * max(1.0, abs(t_end)):
        t_stop = stops[0] if stops and stops[0] < t_end else t_end
        state, stats = advance_step(state, reference, problem.coefficients, settings, t_stop=t_stop)
        steps.append(stats)
        min_det = min(min_det, float(state.mesh.dets.min()))
        max_dev = max(max_dev, stats.boundary_deviation)
        if acc is not None:
            acc.add(state.mesh, state.U, state.t)
        take_snapshots(state)
        if on_step is not None:
            on_step(state, stats)
        log.debug("t=%.6g dt=%.3e newton=%d err=%.3g", stats.t, stats.dt,
                  stats.newton_iterations, stats.error_norm)

    res = RunResult(cfg, problem, state.mesh, state.U, state.t, steps, snaps,
                    seconds=time.perf_counter() - clock, min_det=min_det,
                    max_boundary_deviation=max_dev)
    if acc is not None:
        res.l2l2, res.l1l1 = acc.norms()
    return res


def fit_slope(h: Sequence[float], err: Sequence[float]) -> float:
    """Least-squares slope of log(err) against log(h)."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    if h.shape != err.shape or h.ndim != 1:
        raise ValueError("h and err must be 1-D sequences of equal length")
    if len(h) < 2:
        raise ValueError("need at least two points")
    if np.any(h <= 0) or np.any(err <= 0):
        raise ValueError("h and errors must be positive")
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


@dataclass
class ConvergenceRow:
    N: int
    h: float
    l2l2: float
    l1l1: float
    seconds: float
    min_det: float = float("inf")
    max_boundary_deviation: float = 0.0


@dataclass
class ConvergenceReport:
    problem: str
    metric: str
    tau: float
    rows: list = field(default_factory=list)

    def _h(self):
        return [r.h for r in self.rows]

    @property
    def slope_l2(self) -> float:
        return fit_slope(self._h(), [r.l2l2 for r in self.rows])

    @property
    def slope_l1(self) -> float:
        return fit_slope(self._h(), [r.l1l1 for r in self.rows])


def mesh_width(N: int) -> float:
    """Nominal mesh width h = N^(-1/2), so error = O(N^-1) has slope 2 in h."""
    return 1.0 / np.sqrt(N)


def converge(base: RunConfig, n_list: Sequence[int], problem: ProblemSpec | None = None,
             on_run: Callable[[RunResult], None] | None = None) -> ConvergenceReport:
    """Run ``base`` at each mesh size in ``n_list`` and collect space-time errors."""
    problem = problem or get_problem(base.problem)
    if problem.exact is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution")
    report = ConvergenceReport(problem.name, base.metric, base.tau)
    for n in n_list:
        res = simulate(replace(base, n=n), problem)
        report.rows.append(ConvergenceRow(res.n_elements, mesh_width(res.n_elements), res.l2l2,
                                          res.l1l1, res.seconds, res.min_det,
                                          res.max_boundary_deviation))
        log.info("%s %s N=%d l2l2=%.4e l1l1=%.4e (%.1fs)", problem.name, base.metric,
                 res.n_elements, res.l2l2, res.l1l1, res.seconds)
        if on_run is not None:
            on_run(res)
    return report


def config_fields() -> dict:
    return {f.name: f for f in fields(RunConfig)}
