"""Inference for switching linear dynamical systems.

Building blocks: a conditional-Gaussian exponential family (switch label
plus continuous state), chain potentials compiled from model plus
observations, damped collapse-based message passing, a double-loop energy
minimizer with guaranteed descent, an exact enumeration oracle for
verification, and an experiment harness with a CSV-emitting CLI.
"""

from .cg import (CGCanonical, CGMeanParams, CGMoments, canonical_to_moments,
                 cg_collapse, cg_damped_mix, cg_divide, cg_kl, cg_multiply,
                 mean_param_distance, mean_params, moments_to_canonical,
                 natural_params)
from .ep import (EPConfig, EPRunRecord, STATUS_CONVERGED, STATUS_IMPROPER,
                 STATUS_LIMIT_CYCLE, STATUS_MAX_ITERS, TwoSliceMarginal,
                 backward_update, collapse_head, collapse_tail,
                 constraint_residual, ep_marginals, ep_sweep, forward_update,
                 gpb2_filter, log_likelihood_estimate, run_ep,
                 two_slice_marginal)
from .errors import (ImproperPotential, ImproperTwoSlice, InferenceFailure,
                     InnerStall, InstanceFormatError, OuterProjectionFailure,
                     StateVanished, WeightUnderflow)
from .exact import (ExactBeliefs, belief_kl_total, enumerate_paths,
                    exact_beliefs, exact_log_likelihood, kalman_filter_path,
                    kalman_smooth_path)
from .free_energy import (DoubleLoopConfig, DoubleLoopRecord,
                          FreeEnergyReport, HessianReport, InnerResult,
                          SaddleState, belief_normalizer_sum,
                          bethe_free_energy, double_loop, dual_gradient,
                          dual_objective, evaluate_saddle,
                          hessian_diagnostics, hessian_from_function,
                          inner_loop, outer_step, saddle_from_messages,
                          saddle_residual)
from .harness import (ExperimentConfig, ResultRow, SearchResult,
                      polish_fixed_point, rows_from_csv, rows_to_csv,
                      run_experiment, search_difficult)
from .model import (ObservationSequence, SLDSModel, TwoSlicePotential,
                    build_potential, build_potentials, parse_instance,
                    random_instance, serialize_instance)

__version__ = "0.1.0"

__all__ = [
    "CGCanonical", "CGMeanParams", "CGMoments", "DoubleLoopConfig",
    "DoubleLoopRecord", "EPConfig", "EPRunRecord", "ExactBeliefs",
    "ExperimentConfig", "FreeEnergyReport", "HessianReport",
    "ImproperPotential", "ImproperTwoSlice", "InferenceFailure",
    "InnerResult", "InnerStall", "InstanceFormatError",
    "ObservationSequence", "OuterProjectionFailure", "ResultRow",
    "SLDSModel", "STATUS_CONVERGED", "STATUS_IMPROPER",
    "STATUS_LIMIT_CYCLE", "STATUS_MAX_ITERS", "SaddleState", "SearchResult",
    "StateVanished", "TwoSliceMarginal", "TwoSlicePotential",
    "WeightUnderflow", "backward_update", "belief_kl_total",
    "belief_normalizer_sum", "bethe_free_energy", "build_potential",
    "build_potentials", "canonical_to_moments", "cg_collapse",
    "cg_damped_mix", "cg_divide", "cg_kl", "cg_multiply",
    "collapse_head", "collapse_tail", "constraint_residual", "double_loop",
    "dual_gradient", "dual_objective", "enumerate_paths", "ep_marginals",
    "ep_sweep", "evaluate_saddle", "exact_beliefs", "exact_log_likelihood",
    "forward_update", "gpb2_filter", "hessian_diagnostics",
    "hessian_from_function", "inner_loop", "kalman_filter_path",
    "kalman_smooth_path", "log_likelihood_estimate", "mean_param_distance",
    "mean_params", "moments_to_canonical", "natural_params", "outer_step",
    "parse_instance", "polish_fixed_point", "random_instance",
    "rows_from_csv", "rows_to_csv", "run_ep", "run_experiment",
    "saddle_from_messages", "saddle_residual", "search_difficult",
    "serialize_instance", "two_slice_marginal",
]
