"""Multilevel Picard solver and explicit-network toolkit for control-affine HJB equations."""

from hjbmlp.problem import (
    ControlProblem,
    TruncationLevel,
    brute_force_hamiltonian,
    clip,
    gradient_bound,
    hamiltonian,
    hamiltonian_lipschitz_estimate,
    optimal_control,
    truncated_hamiltonian,
)
from hjbmlp.netcalc import NeuralNet, realize
from hjbmlp.mlp import MlpParams, count_indices, freeze_to_net, mlp_estimate
from hjbmlp.oracle import cole_hopf_value, fd_solve_1d, heat_value

__version__ = "0.1.0"

__all__ = [
    "ControlProblem",
    "MlpParams",
    "NeuralNet",
    "TruncationLevel",
    "brute_force_hamiltonian",
    "clip",
    "cole_hopf_value",
    "count_indices",
    "fd_solve_1d",
    "freeze_to_net",
    "gradient_bound",
    "hamiltonian",
    "hamiltonian_lipschitz_estimate",
    "heat_value",
    "mlp_estimate",
    "optimal_control",
    "realize",
    "truncated_hamiltonian",
]
