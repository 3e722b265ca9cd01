"""Fast direct solver for Helmholtz boundary integral equations on surfaces."""

from .driver import (BvpProblem, DirichletSolver, SolverOptions, TargetTooClose,
                     ValidationReport, benchmark_sweep, eval_exterior,
                     monostatic_rcs, solve_dirichlet, validate_point_sources)
from .factorization import FactorOptions, FmmLuFactorization, factorize
from .geometry import (SurfaceDiscretization, make_multiscale_plate, make_sphere,
                       make_wiggly_torus)
from .hlinalg import id_fixed_tolerance
from .kernels import KernelKind, kernel_matrix
from .octree import Octree, build_tree, enforce_level_restriction
from .quadrature import EntryOracle, build_near_table

__version__ = "0.1.0"
