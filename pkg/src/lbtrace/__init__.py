"""Trace finite elements for the Laplace–Beltrami operator on implicit surfaces,
with quadrature on the exact surface and a solver for singular pencils."""
from .assembly import SparseSymMatrix, assemble, kernel_dimension_report
from .exceptions import (ClassificationAmbiguous, DegenerateGradient, EmptyCut, FrameFailure,
                         InconsistentRHS, LBTraceError, MultiplicityMismatch, NoConvergence,
                         NotDefinite, OutsideElement, RankEstimateUnstable, RootFindFailure,
                         UnsupportedDegree)
from .fespace import FESpace, build_space, eval_basis, interpolate, tangential_gradient
from .harness import (ExperimentConfig, discretize, run_example1, run_example2, run_example3,
                      surface_error_norms)
from .levelset import LevelSetSurface, load_surface, polynomial_surface, sphere, tooth
from .mesh import CutElementSet, TetMesh, build_uniform_mesh, classify_cut_elements
from .quadrature import build_element_rule, build_rules, choose_frame, integrate_global
from .solvers import (nrank_estimate, solve_helmholtz, solve_regular_gep, solve_singular_gep)

__version__ = "0.1.0"
