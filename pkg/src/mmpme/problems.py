"""Porous medium test problems and the Barenblatt-Pattle exact solution."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fem import ProblemCoefficients
from .mesh import Mesh, Rectangle, eval_pwl


def barenblatt_t0(m: float, r0: float = 0.5, d: int = 2) -> float:
    return r0**2 * m / (2.0 * (2.0 + d * m))


def barenblatt(x, y, t, m: float, r0: float = 0.5, d: int = 2):
    """Barenblatt-Pattle solution of u_t = div(|u|^m grad u), normalised so u(0, t0) = 1.

    Valid for t >= t0 = r0^2 m / (2(2 + d m)); earlier times raise ``ValueError``.
    """
    if m < 1:
        raise ValueError("Barenblatt solution requires m >= 1")
    t0 = barenblatt_t0(m, r0, d)
    if t < t0 * (1 - 1e-14):
        raise ValueError(f"t = {t} precedes t0 = {t0}")
    lam = (t / t0) ** (1.0 / (2.0 + d * m))
    r2 = np.asarray(x, dtype=float) ** 2 + np.asarray(y, dtype=float) ** 2
    core = np.maximum(0.0, 1.0 - r2 / (r0 * lam) ** 2)
    return lam ** (-d) * core ** (1.0 / m)


def barenblatt_radius(t, m: float, r0: float = 0.5, d: int = 2) -> float:
    """Radius of the support of the Barenblatt solution at time t."""
    return r0 * (t / barenblatt_t0(m, r0, d)) ** (1.0 / (2.0 + d * m))


@dataclass
class ProblemSpec:
    name: str
    domain: Rectangle
    coefficients: ProblemCoefficients
    u0: Callable
    t_start: float
    t_end: float
    exact: Optional[Callable] = None
    metric: str = "hessian"
    n: int = 40
    pattern: str = "crisscross"
    snapshot_times: tuple = ()
    description: str = ""
    extras: dict = field(default_factory=dict)


def _box(x, y, x0, x1, y0, y1):
    return (x > x0) & (x < x1) & (y > y0) & (y < y1)


def _barenblatt_problem(m: int) -> ProblemSpec:
    r0 = 0.5
    t0 = barenblatt_t0(m, r0)
    T = (t0 + 0.1) / 2
    return ProblemSpec(
        name=f"barenblatt-m{m}",
        domain=Rectangle.square(-0.75, 0.75),
        coefficients=ProblemCoefficients(exponent=float(m)),
        u0=lambda x, y: barenblatt(x, y, t0, m, r0),
        t_start=t0,
        t_end=T,
        exact=lambda x, y, t: barenblatt(x, y, t, m, r0),
        snapshot_times=(t0, T),
        description=f"Barenblatt-Pattle solution, m = {m}, r0 = 0.5",
        extras={"m": m, "r0": r0},
    )


def _two_box(name, high):
    def u0(x, y):
        return np.where(_box(x, y, 0.5, 3, 0.5, 3), 1.0, 0.0) + np.where(_box(x, y, -3, -0.5, -3, -0.5), high, 0.0)

    times = (0, 0.51, 100.01, 500) if high == 1.0 else (0, 0.5, 100, 500)
    return ProblemSpec(
        name=name, domain=Rectangle.square(-5.5, 5.5), coefficients=ProblemCoefficients(5.0),
        u0=u0, t_start=0.0, t_end=500.0, n=60, snapshot_times=times,
        description=f"two boxes of heights 1 and {high:g}, m = 5",
    )


def _waiting_time():
    def u0(x, y):
        r = np.hypot(x, y)
        return np.where(r <= np.pi / 2, np.cos(r), 0.0)

    return ProblemSpec(
        name="waiting-time", domain=Rectangle.square(-np.pi, np.pi), coefficients=ProblemCoefficients(8.0),
        u0=u0, t_start=0.0, t_end=18.01, n=100,
        snapshot_times=(0, 0.1, 0.5, 5, 18.01) + tuple(range(10, 19)),
        description="cosine cap with vanishing pressure gradient at its edge, m = 8",
    )


def _absorption():
    def u0(x, y):
        r = np.hypot(x, y)
        return np.where(r < np.pi / 6, 0.5, np.where(r < np.pi, np.abs(np.sin(r)), 0.0))

    return ProblemSpec(
        name="absorption-splitting", domain=Rectangle.square(-1.5 * np.pi, 1.5 * np.pi),
        coefficients=ProblemCoefficients(exponent=2.0, lam=1.0, sigma=0.1),
        u0=u0, t_start=0.0, t_end=0.80, n=100, snapshot_times=(0, 0.40, 0.64, 0.80),
        description="constant exponents with absorption (lambda = 1, gamma = 2, sigma = 0.1)",
    )


def _varexp_hole():
    def u0(x, y):
        r = np.hypot(x, y)
        return np.where((r > 0.5) & (r < 1.0), -np.sin(2 * np.pi * r), 0.0)

    return ProblemSpec(
        name="varexp-hole", domain=Rectangle.square(-2, 2),
        coefficients=ProblemCoefficients(exponent=lambda x, y, t: (x / 2) ** 2 + (y / 2) ** 2 + 1.1),
        u0=u0, t_start=0.0, t_end=0.70, n=80, snapshot_times=(0, 0.02, 0.10, 0.15, 0.20, 0.70),
        description="variable exponent (x/2)^2 + (y/2)^2 + 1.1, annular data whose hole closes",
        extras={"stated_t_end": 0.2},
    )


def _varexp_waiting():
    def u0(x, y):
        r2 = x * x + y * y
        return np.where(r2 < 0.25, 5.0 * (0.25 - r2), 0.0)

    return ProblemSpec(
        name="varexp-waiting", domain=Rectangle.square(-1.5, 1.5),
        # 2 - x - y turns negative in the far corner x + y > 2, where u vanishes; clamp it there
        coefficients=ProblemCoefficients(exponent=lambda x, y, t: np.maximum(2.0 - x - y, 0.0)),
        u0=u0, t_start=0.0, t_end=0.95, n=80,
        snapshot_times=(0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.28, 0.90, 0.95),
        description="variable exponent 2 - x - y, waiting time on the lower-left interface",
        extras={"stated_t_end": 0.05},
    )


def _varexp_absorption():
    def u0(x, y):
        r2 = x * x + y * y
        return np.where(r2 < 0.25, np.cos(2 * np.pi * r2), 0.0)

    return ProblemSpec(
        name="varexp-absorption", domain=Rectangle.square(-1.5, 1.5),
        coefficients=ProblemCoefficients(
            exponent=lambda x, y, t: (x * x + y * y) / (t * t + 1),
            lam=1.0,
            sigma=lambda x, y, t: x * x + y * y + 1 + np.exp(-t),
        ),
        u0=u0, t_start=0.0, t_end=0.50, n=80, snapshot_times=(0, 0.03, 0.06, 0.1, 0.50),
        description="time-dependent exponents with absorption",
        extras={"stated_t_end": 0.1},
    )


_FACTORIES = {
    "barenblatt-m1": lambda: _barenblatt_problem(1),
    "barenblatt-m2": lambda: _barenblatt_problem(2),
    "barenblatt-m3": lambda: _barenblatt_problem(3),
    "two-box-equal": lambda: _two_box("two-box-equal", 1.0),
    "two-box-unequal": lambda: _two_box("two-box-unequal", 1.5),
    "waiting-time": _waiting_time,
    "absorption-splitting": _absorption,
    "varexp-hole": _varexp_hole,
    "varexp-waiting": _varexp_waiting,
    "varexp-absorption": _varexp_absorption,
}


def problem_ids() -> list:
    return list(_FACTORIES)


def registry() -> dict:
    """All problems by id."""
    return {name: make() for name, make in _FACTORIES.items()}


def get_problem(name: str) -> ProblemSpec:
    try:
        return _FACTORIES[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(_FACTORIES)}") from None


def free_boundary_radius(mesh: Mesh, U, eps: float = 1e-3, direction=(1.0, 0.0),
                         resolution: float = 1e-4, origin=(0.0, 0.0)) -> float:
    """Largest distance r along a ray with u_h(origin + r d) >= eps.

    The ray is sampled at spacing ``resolution`` to find the outermost sample at
    or above ``eps``; the crossing is then refined by bisection.  Returns 0 if
    u_h stays below ``eps`` along the whole ray.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    o = np.asarray(origin, dtype=float)
    dom = mesh.domain
    # distance to the domain boundary along the ray
    with np.errstate(divide="ignore"):
        tx = np.where(d[0] > 0, (dom.xmax - o[0]) / d[0], np.where(d[0] < 0, (dom.xmin - o[0]) / d[0], np.inf))
        ty = np.where(d[1] > 0, (dom.ymax - o[1]) / d[1], np.where(d[1] < 0, (dom.ymin - o[1]) / d[1], np.inf))
    rmax = float(min(tx, ty))
    r = np.linspace(0.0, rmax, int(np.ceil(rmax / resolution)) + 1)
    vals = eval_pwl(mesh, U, o + r[:, None] * d)
    above = np.flatnonzero(vals >= eps)
    if len(above) == 0:
        return 0.0
    i = above[-1]
    if i == len(r) - 1:
        return rmax
    lo, hi = r[i], r[i + 1]
    while hi - lo > 1e-3 * resolution:
        mid = 0.5 * (lo + hi)
        if eval_pwl(mesh, U, o + mid * d) >= eps:
            lo = mid
        else:
            hi = mid
    return float(lo)
