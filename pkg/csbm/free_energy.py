"""
Bethe free entropy at an AMP-BP fixed point, its gradient in (c_in, c_out, mu)
and the expectation-maximization updates built on it.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .amp_bp import LOG_FLOOR, FixedPoint, RunOptions, run
from .errors import DivergenceError, InvalidParameterError
from .model import Affinity, Instance, Supervision

logger = logging.getLogger(__name__)

MU_DENOMINATOR_FLOOR = 1e-12

TraceRow = Tuple[int, float, float, float, float]


@dataclass(frozen=True)
class BetheValue:
    """Per-node Bethe free entropy; ``warning`` is set when the fixed point had not converged."""
    phi: float
    converged: bool = True
    warning: Optional[str] = None


@dataclass(frozen=True)
class ParamEstimate:
    """
    Estimate of (c_in, c_out, mu).

    ``trace`` rows are (outer iteration, c_in, c_out, mu, phi) for the
    parameters each AMP-BP run was made at.
    """
    c_in: float
    c_out: float
    mu: float
    trace: List[TraceRow] = field(default_factory=list)
    mu_informative: bool = True
    converged: bool = False
    aborted: bool = False
    error: Optional[str] = None

    def affinity(self) -> Affinity:
        return Affinity.binary(self.c_in, self.c_out)


@dataclass(frozen=True)
class EmOptions:
    max_outer: int = 50
    tol: float = 1e-4
    damping: float = 0.5
    warm_start: bool = True
    run_options: RunOptions = field(default_factory=RunOptions)

    def __post_init__(self):
        if self.max_outer <= 0:
            raise InvalidParameterError(f"max_outer must be positive, got {self.max_outer}")
        if self.tol <= 0:
            raise InvalidParameterError(f"tol must be positive, got {self.tol}")
        if not 0.0 <= self.damping < 1.0:
            raise InvalidParameterError(f"damping must lie in [0, 1), got {self.damping}")


def _edge_messages(fixed_point: FixedPoint, instance: Instance):
    """χ_+^{i->j} and χ_+^{j->i} for every undirected edge, once each."""
    graph = instance.graph
    forward = np.flatnonzero(graph.src < graph.dst)
    chi = fixed_point.state.chi_plus_dir
    return chi[forward], chi[graph.rev[forward]]


def _edge_partition(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Σ_{u,t} C_{u,t} χ_u^{i->j} χ_t^{j->i} with a, b the + components."""
    return (c[0, 0] * a * b + c[0, 1] * a * (1.0 - b)
            + c[1, 0] * (1.0 - a) * b + c[1, 1] * (1.0 - a) * (1.0 - b))


def feature_term(fixed_point: FixedPoint, instance: Instance, mu: float, naive: bool = False) -> float:
    """
    Σ_{i,β} (√(μ/N)·B_βi·v̂_β·û_i - (μ/N)·(v̂_β²/2 + û_i²·σ_V - v̂_β²·û_i²/2)).

    The default form factorizes into v̂ᵀBû and the sums Σv̂², Σû²; ``naive``
    evaluates the double sum entry by entry.
    """
    state = fixed_point.state
    n, p = instance.n_nodes, instance.feature_dim
    u, v = state.u_hat, state.v_hat
    if naive:
        vv = v[:, None] ** 2
        uu = u[None, :] ** 2
        entries = (math.sqrt(mu / n) * instance.features * v[:, None] * u[None, :]
                   - mu / n * (0.5 * vv + uu * state.sigma_v - 0.5 * vv * uu))
        return float(entries.sum())
    sum_v2 = float(v @ v)
    sum_u2 = float(u @ u)
    bilinear = float(v @ (instance.features @ u))
    return (math.sqrt(mu / n) * bilinear
            - mu / n * (0.5 * n * sum_v2 + p * state.sigma_v * sum_u2 - 0.5 * sum_v2 * sum_u2))


def bethe_free_entropy(fixed_point: FixedPoint, instance: Instance, supervision: Supervision,
                       affinity: Optional[Affinity] = None, mu: Optional[float] = None,
                       naive: bool = False) -> BetheValue:
    """
    φ at an AMP-BP fixed point, per node.

    Nφ = N·d/2 + Σ_i node term - Σ_edges edge term + Σ_β feature-variable term
    - Σ_{i,β} feature-edge term, with d the model mean degree of ``affinity``.
    The parameters default to the ones the fixed point was computed at.
    """
    affinity = affinity or fixed_point.affinity
    mu = fixed_point.mu if mu is None else float(mu)
    state = fixed_point.state
    graph = instance.graph
    n = instance.n_nodes
    c = affinity.matrix

    chi = state.chi_plus_dir
    log_plus = np.log(np.maximum(c[0, 0] * chi + c[0, 1] * (1.0 - chi), LOG_FLOOR))
    log_minus = np.log(np.maximum(c[1, 0] * chi + c[1, 1] * (1.0 - chi), LOG_FLOOR))
    incoming = np.stack([
        np.bincount(graph.dst, weights=log_plus, minlength=n),
        np.bincount(graph.dst, weights=log_minus, minlength=n),
    ], axis=1)
    node_term = float(logsumexp(state.tilde_field + incoming, axis=1).sum())

    a, b = _edge_messages(fixed_point, instance)
    edge_term = float(np.log(np.maximum(_edge_partition(a, b, c), LOG_FLOOR)).sum())

    a_u = state.a_u
    variable_term = 0.5 * float(np.sum(state.b_u ** 2 / (1.0 + a_u) - math.log1p(a_u)))

    total = (n * affinity.mean_degree() / 2.0 + node_term - edge_term
             + variable_term - feature_term(fixed_point, instance, mu, naive))
    phi = total / n
    if not math.isfinite(phi):
        raise DivergenceError("bethe free entropy", state.iter)
    if fixed_point.converged:
        return BetheValue(phi)
    message = f"fixed point not converged after {fixed_point.iters_used} iterations"
    logger.warning("Bethe free entropy evaluated at a %s", message)
    return BetheValue(phi, converged=False, warning=message)


def free_entropy_gradient(fixed_point: FixedPoint, instance: Instance, affinity: Optional[Affinity] = None,
                          mu: Optional[float] = None) -> Tuple[float, float, Optional[float]]:
    """
    (∂φ/∂c_in, ∂φ/∂c_out, ∂φ/∂μ) at a fixed point.

    The constant part is 1/4 - Σ_u m_u·∂h_u/∂c, which is -1/4 for balanced
    marginals m. The μ component is None at μ = 0, where it is singular.
    """
    affinity = affinity or fixed_point.affinity
    mu = fixed_point.mu if mu is None else float(mu)
    state = fixed_point.state
    n = instance.n_nodes
    c = affinity.matrix

    m_plus = float(np.mean(state.chi_plus_node))
    m_minus = 1.0 - m_plus
    a, b = _edge_messages(fixed_point, instance)
    z = np.maximum(_edge_partition(a, b, c), LOG_FLOOR)
    same = a * b + (1.0 - a) * (1.0 - b)
    diff = a * (1.0 - b) + (1.0 - a) * b
    d_cin = 0.25 - (m_plus ** 2 + m_minus ** 2) + float(np.sum(same / z)) / n
    d_cout = 0.25 - 2.0 * m_plus * m_minus + float(np.sum(diff / z)) / n

    if mu <= 0.0:
        return d_cin, d_cout, None
    u, v = state.u_hat, state.v_hat
    bilinear = float(v @ (instance.features @ u))
    d_mu = (bilinear / math.sqrt(mu * n) - float(v @ v) - state.sigma_v * float(u @ u) / instance.alpha) / (2.0 * n)
    return d_cin, d_cout, d_mu


def em_step(fixed_point: FixedPoint, instance: Instance) -> ParamEstimate:
    """
    One expectation-maximization update from a fixed point run at the current
    parameters (the C inside the update is that current estimate).

    When û and v̂ are both numerically zero the μ update carries no
    information; μ is then kept and ``mu_informative`` is False.
    """
    c = fixed_point.affinity.matrix
    n = instance.n_nodes
    a, b = _edge_messages(fixed_point, instance)
    z = np.maximum(_edge_partition(a, b, c), LOG_FLOOR)
    c_in = 4.0 / n * float(np.sum((c[0, 0] * a * b + c[1, 1] * (1.0 - a) * (1.0 - b)) / z))
    c_out = 4.0 / n * float(np.sum((c[0, 1] * a * (1.0 - b) + c[1, 0] * (1.0 - a) * b) / z))

    state = fixed_point.state
    alpha = instance.alpha
    u, v = state.u_hat, state.v_hat
    denominator = alpha * float(v @ v) + state.sigma_v * float(u @ u)
    if denominator < MU_DENOMINATOR_FLOOR:
        logger.warning("EM mu update is uninformative (û and v̂ vanish); keeping mu = %g", fixed_point.mu)
        return ParamEstimate(c_in, c_out, fixed_point.mu, mu_informative=False)
    bilinear = float(v @ (instance.features @ u))
    mu = (alpha / math.sqrt(n) * bilinear / denominator) ** 2
    return ParamEstimate(c_in, c_out, mu)


def _relative_change(old: Tuple[float, float, float], new: Tuple[float, float, float]) -> float:
    return max(abs(b - a) / max(abs(a), 1e-12) for a, b in zip(old, new))


def em_fit(instance: Instance, supervision: Supervision, init_params: Tuple[float, float, float],
           options: Optional[EmOptions] = None) -> ParamEstimate:
    """
    Alternate AMP-BP at the current (c_in, c_out, mu) with em_step until the
    relative parameter change drops below ``tol``.

    Updates are damped: θ <- damping·θ + (1 - damping)·θ_em. If AMP-BP
    diverges the fit stops and the estimate so far is returned with
    ``aborted`` set and the trace kept.
    """
    options = options or EmOptions()
    theta = tuple(float(x) for x in init_params)
    if len(theta) != 3 or min(theta) < 0:
        raise InvalidParameterError(f"init_params must be nonnegative (c_in, c_out, mu), got {init_params}")
    trace: List[TraceRow] = []
    warm = None
    mu_informative = True

    for outer in range(1, options.max_outer + 1):
        c_in, c_out, mu = theta
        try:
            fixed_point = run(instance, supervision, options.run_options,
                              affinity=Affinity.binary(c_in, c_out), mu=mu, init=warm)
            phi = bethe_free_entropy(fixed_point, instance, supervision).phi
        except DivergenceError as e:
            logger.error("EM aborted at outer iteration %d: %s", outer, e)
            return ParamEstimate(c_in, c_out, mu, trace, mu_informative, converged=False, aborted=True, error=str(e))
        trace.append((outer, c_in, c_out, mu, phi))
        if options.warm_start:
            warm = replace(fixed_point.state, iter=0)

        update = em_step(fixed_point, instance)
        mu_informative = update.mu_informative
        target = (update.c_in, update.c_out, update.mu)
        new_theta = tuple(options.damping * old + (1.0 - options.damping) * t for old, t in zip(theta, target))
        change = _relative_change(theta, new_theta)
        logger.debug("EM %d: c_in=%.4f c_out=%.4f mu=%.4f phi=%.6f change=%.2e",
                     outer, new_theta[0], new_theta[1], new_theta[2], phi, change)
        theta = new_theta
        if change < options.tol:
            logger.info("EM converged after %d outer iterations", outer)
            return ParamEstimate(*theta, trace=trace, mu_informative=mu_informative, converged=True)

    logger.warning("EM stopped after %d outer iterations without meeting tol=%g", options.max_outer, options.tol)
    return ParamEstimate(*theta, trace=trace, mu_informative=mu_informative, converged=False)


def compare_initializations(instance: Instance, supervision: Supervision,
                            options: Optional[RunOptions] = None) -> Tuple[BetheValue, BetheValue]:
    """
    Bethe free entropy from a random start and from the planted start.

    Different values indicate two coexisting fixed points, the signature of a
    first-order transition.
    """
    options = options or RunOptions()
    random_fp = run(instance, supervision, replace(options, init_mode="random"))
    planted_fp = run(instance, supervision, replace(options, init_mode="planted"))
    phi_random = bethe_free_entropy(random_fp, instance, supervision)
    phi_planted = bethe_free_entropy(planted_fp, instance, supervision)
    logger.info("phi(random) = %.6f, phi(planted) = %.6f", phi_random.phi, phi_planted.phi)
    return phi_random, phi_planted
