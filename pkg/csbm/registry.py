"""
Solver registry: the algorithms the CLI can run on one (instance, supervision) pair.
"""
import logging
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional

from .amp_bp import RunOptions, overlap, run
from .dense import (
    SeOptions,
    dense_params_from_sparse,
    run_amp_amp,
    sample_dense_instance,
    se_predicted_overlap,
    state_evolution,
)
from .errors import InvalidParameterError
from .free_energy import bethe_free_entropy
from .model import ModelParams, make_supervision, sample_instance
from .multi import MultiParams, make_multi_supervision, overlap_multi, run_multi, sample_multi_instance
from .oracles import McmcOptions, logistic_baseline, mcmc_marginals

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOutcome:
    """What every solver reports for one sweep row."""
    q_u: float
    iterations: int
    converged: bool
    phi: Optional[float] = None


@dataclass
class Solver:
    """An algorithm the CLI can select by name."""
    name: str
    description: str
    parameters: Dict[str, Any]  # option name -> description
    handler: Callable[..., SolverOutcome]

    def describe(self) -> str:
        options = ", ".join(sorted(self.parameters)) or "none"
        return f"{self.name}: {self.description} (options: {options})"


class SolverRegistry:
    """Registry for managing available solvers."""

    def __init__(self):
        self.solvers: Dict[str, Solver] = {}

    def register(self, solver: Solver):
        """Register a solver; a later registration under the same name replaces it."""
        self.solvers[solver.name] = solver

    def get(self, name: str) -> Optional[Solver]:
        return self.solvers.get(name)

    def require(self, name: str) -> Solver:
        """Like get, but unknown names raise with the list of valid ones."""
        solver = self.get(name)
        if solver is None:
            raise InvalidParameterError(f"Unknown algorithm {name!r}; available: {', '.join(self.names())}")
        return solver

    def names(self) -> List[str]:
        return sorted(self.solvers)

    def list_solvers(self) -> List[Solver]:
        return list(self.solvers.values())

    def describe(self) -> str:
        return "\n".join(self.solvers[name].describe() for name in self.names())


def _supervision(instance, params: ModelParams, seed: int):
    return make_supervision(instance, params.train_fraction, params.label_flip_keep_prob, seed=seed)


def solve_amp_bp(params: ModelParams, seed: int, options: RunOptions) -> SolverOutcome:
    instance = sample_instance(params, seed)
    supervision = _supervision(instance, params, seed)
    fixed_point = run(instance, supervision, replace(options, seed=seed), truth=instance.spins)
    q_u = overlap(fixed_point.hard_labels, instance.spins, supervision.revealed)
    phi = bethe_free_entropy(fixed_point, instance, supervision).phi
    return SolverOutcome(q_u, fixed_point.iters_used, fixed_point.converged, phi)


def solve_multi(params: ModelParams, seed: int, options: RunOptions) -> SolverOutcome:
    multi_params = MultiParams(
        n_nodes=params.n_nodes,
        feature_dim=params.feature_dim,
        prior_weights=params.group_prior(),
        affinity_matrix=params.affinity(),
        snr_mu=params.snr_mu,
        train_fraction=params.train_fraction,
        label_flip_keep_prob=params.label_flip_keep_prob,
    )
    instance = sample_multi_instance(multi_params, seed)
    supervision = make_multi_supervision(instance, rho=params.train_fraction,
                                         keep_prob=params.label_flip_keep_prob, seed=seed)
    fixed_point = run_multi(instance, supervision, replace(options, seed=seed), truth=instance.groups)
    q_u = overlap_multi(fixed_point.hard_labels, instance.groups, supervision.revealed,
                        multi_params.num_groups, multi_params.group_prior())
    return SolverOutcome(q_u, fixed_point.iters_used, fixed_point.converged)


def solve_amp_amp(params: ModelParams, seed: int, options: RunOptions) -> SolverOutcome:
    instance = sample_dense_instance(dense_params_from_sparse(params), seed)
    supervision = _supervision(instance, params, seed)
    fixed_point = run_amp_amp(instance, supervision, replace(options, seed=seed), truth=instance.spins)
    q_u = overlap(fixed_point.hard_labels, instance.spins, supervision.revealed)
    return SolverOutcome(q_u, fixed_point.iters_used, fixed_point.converged)


def solve_se(params: ModelParams, seed: int, options: RunOptions) -> SolverOutcome:
    """State evolution prediction; the seed is unused since the recursion is deterministic."""
    dense = dense_params_from_sparse(params)
    result = state_evolution(params.snr_mu, params.alpha, dense.delta_i, params.train_fraction,
                             SeOptions(max_iters=max(options.max_iters, 1000)))
    q_u = se_predicted_overlap(result.fixed_point.m_u, params.train_fraction, result.fixed_point.m)
    return SolverOutcome(q_u, result.iterations, result.converged)


def solve_mcmc(params: ModelParams, seed: int, options: RunOptions, sweeps: int = 100_000,
               burn_in: int = 10_000) -> SolverOutcome:
    instance = sample_instance(params, seed)
    supervision = _supervision(instance, params, seed)
    table = mcmc_marginals(instance, supervision, McmcOptions(sweeps=sweeps, burn_in=burn_in, seed=seed))
    q_u = overlap(table.hard_labels(), instance.spins, supervision.revealed)
    return SolverOutcome(q_u, sweeps, True)


def solve_logistic(params: ModelParams, seed: int, options: RunOptions) -> SolverOutcome:
    instance = sample_instance(params, seed)
    supervision = _supervision(instance, params, seed)
    q_u = logistic_baseline(instance, supervision, seed=seed)
    return SolverOutcome(q_u, 0, True)


def default_registry() -> SolverRegistry:
    """Registry holding the built-in solvers."""
    registry = SolverRegistry()
    registry.register(Solver(
        name="amp_bp",
        description="AMP-BP on the sparse CSBM, with the Bethe free entropy",
        parameters={"max_iters": "iteration cap", "msg_tol": "message tolerance", "damping": "message damping"},
        handler=solve_amp_bp,
    ))
    registry.register(Solver(
        name="multi",
        description="multi-group AMP-BP with one-hot labels",
        parameters={"max_iters": "iteration cap", "msg_tol": "message tolerance", "damping": "message damping"},
        handler=solve_multi,
    ))
    registry.register(Solver(
        name="amp_amp",
        description="AMP-AMP on the transformed adjacency (dense limit)",
        parameters={"max_iters": "iteration cap", "msg_tol": "tolerance on the change of u_hat"},
        handler=solve_amp_amp,
    ))
    registry.register(Solver(
        name="se",
        description="state evolution prediction of the dense-limit overlap",
        parameters={},
        handler=solve_se,
    ))
    registry.register(Solver(
        name="mcmc",
        description="Metropolis-within-Gibbs posterior sampling",
        parameters={"sweeps": "chain length", "burn_in": "discarded sweeps"},
        handler=solve_mcmc,
    ))
    registry.register(Solver(
        name="logistic",
        description="L2-regularized logistic regression on the features only",
        parameters={"l2_grid": "regularization strengths"},
        handler=solve_logistic,
    ))
    logger.debug("Registered solvers: %s", ", ".join(registry.names()))
    return registry
