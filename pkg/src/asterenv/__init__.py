"""Aster life-history models with envelope variance reduction."""

from .bootstrap import (
    BootstrapConfig,
    BootstrapReport,
    mle_reference_bootstrap,
    ratio_table,
    run_double_bootstrap,
    write_report,
)
from .envelope import (
    EigenBasis,
    EnvelopeStructure,
    SelectionResult,
    build_envelope_matrix,
    eigen_decompose,
    enumerate_reducing_subspaces,
    envelope_from_subspace,
    onedim_algorithm,
    select_structure,
)
from .families import Family, cumulant, cumulant_d1, cumulant_d2, sample_sum
from .fitness import FitnessQuery, delta_method_se, expected_fitness, landscape_grid
from .graph import (
    GraphSpec,
    compute_mu,
    load_graph,
    phi_to_theta,
    save_graph,
    simulate,
    survival_fecundity_chain,
    survival_reproduction_graph,
    theta_to_phi,
    validate,
)
from .model import AsterModel, FitResult, fisher_info, fit_mle, log_lik, score, tau_to_beta
from .scenario import Scenario, ScenarioSpec, generate_scenario

__version__ = "0.1.0"

__all__ = [
    "AsterModel",
    "BootstrapConfig",
    "BootstrapReport",
    "EigenBasis",
    "EnvelopeStructure",
    "Family",
    "FitResult",
    "FitnessQuery",
    "GraphSpec",
    "Scenario",
    "ScenarioSpec",
    "SelectionResult",
    "build_envelope_matrix",
    "compute_mu",
    "cumulant",
    "cumulant_d1",
    "cumulant_d2",
    "delta_method_se",
    "eigen_decompose",
    "enumerate_reducing_subspaces",
    "envelope_from_subspace",
    "expected_fitness",
    "fisher_info",
    "fit_mle",
    "landscape_grid",
    "load_graph",
    "log_lik",
    "mle_reference_bootstrap",
    "onedim_algorithm",
    "phi_to_theta",
    "ratio_table",
    "run_double_bootstrap",
    "sample_sum",
    "save_graph",
    "score",
    "select_structure",
    "simulate",
    "survival_fecundity_chain",
    "survival_reproduction_graph",
    "tau_to_beta",
    "theta_to_phi",
    "validate",
    "write_report",
]
