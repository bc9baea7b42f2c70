"""Minimal-surface area measurements, their linearization and conformal-factor inversion."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .fields import AmbientPullback, BumpExpansion, Constant, Frame, GaussianBump, SampledTubeField
from .geometry import (FermiGrid, GraphFunction, MetricField, TensorPerturbation, density,
                       evaluate_on_graph, graph_area, induced_volume_density)
from .solver import (SolverConfig, admissibility_margin, assemble_stability, dirichlet_spectrum,
                     make_admissible, mse_residual, solve_mse, solve_stability, top_eigenvalues)
from .runge import (DirichletBasis, basis_from_boundary, bolker_check, candidate_pool,
                    select_embedding_basis)
from .transform import (MeasurementTensor, ZSampler, fd_consistency, linearize_DF, measure_F,
                        transform_R)
from .inversion import (assemble_forward, build_family, make_unknown_basis, measure_family,
                        normal_operator_stats, reconstruct_conformal, relative_error,
                        solve_linear_inverse, stability_exponent)
