"""Adaptive moving-mesh linear finite elements for the porous medium equation."""
from .fem import ProblemCoefficients, error_norms, mass_matrix, project_initial, rhs
from .mesh import Mesh, Rectangle, build_structured_mesh, eval_pwl, locate_point
from .metric import build_metric, metric_arclength, metric_hessian, recover_hessian
from .mmpde import MmpdeParams, assemble_velocities, energy_Ih, move_mesh
from .problems import barenblatt, free_boundary_radius, get_problem, registry
from .study import RunConfig, converge, fit_slope, simulate
from .timeint import RadauConfig, SolverSettings, advance_step, radau_step

__version__ = "0.1.0"
