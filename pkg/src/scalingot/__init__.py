"""Stabilized sparse multi-scale scaling algorithms for entropic transport problems."""

from .measures import DiscreteMeasure, GridGeometry, kl_conjugate, kl_divergence, softmax, softmin
from .costs import ExplicitMatrix, SquaredEuclidean, WassersteinFisherRao, make_cost
from .hierarchy import HierarchicalPartition, build_partition, extend_dual, refine_duals
from .kernel import ProblemSpec, SparseKernel, get_truncated_kernel, primal_dual_gap
from .proxdiv import (FixedMarginal, KLFidelity, PorousMediumProx, StarvationError,
                      lambert_w)
from .solvers import (DivergedError, LInfMarginal, PrimalDualGap, FixedIterations, MassTarget,
                      ScalingState, SolveReport, SolverConfig, default_eps_lists, eps_scaling,
                      scaling_algorithm, scaling_algorithm_stabilized, solve_barycenter,
                      solve_full, solve_multi_marginal, solve_wfr_barycenter, gradient_flow_step)

__version__ = "0.1.0"
