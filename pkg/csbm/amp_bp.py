"""
AMP-BP for the binary CSBM.

AMP runs on the dense feature side (estimates of v and of the spins), BP runs
on the sparse graph, and the two exchange a per-node field. One iteration costs
O(NP + |E|).
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.special import expit

from .config import compute_context
from .errors import DivergenceError, EmptyTestSetError, InvalidParameterError
from .model import Affinity, Instance, Supervision, derive_stream

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-300

CRITERIA = ("messages", "overlap")
INIT_MODES = ("random", "planted")


@dataclass(frozen=True)
class RunOptions:
    """Iteration controls shared by AMP-BP, its multi-group version and AMP-AMP."""
    max_iters: int = 200
    msg_tol: float = 1e-6
    overlap_tol: float = 1e-3
    damping: float = 0.0
    init_noise: float = 1e-2
    seed: int = 0
    criterion: str = "messages"
    init_mode: str = "random"
    deterministic: bool = False

    def __post_init__(self):
        if self.max_iters <= 0:
            raise InvalidParameterError(f"max_iters must be positive, got {self.max_iters}")
        if self.msg_tol <= 0 or self.overlap_tol <= 0:
            raise InvalidParameterError("Convergence tolerances must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise InvalidParameterError(f"damping must lie in [0, 1), got {self.damping}")
        if self.init_noise < 0:
            raise InvalidParameterError(f"init_noise must be nonnegative, got {self.init_noise}")
        if self.criterion not in CRITERIA:
            raise InvalidParameterError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.init_mode not in INIT_MODES:
            raise InvalidParameterError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")


@dataclass(frozen=True, eq=False)
class MessageState:
    """
    Everything one AMP-BP iteration produces.

    chi_plus_dir is indexed by directed-edge id (see model.Graph);
    tilde_field[:, 0] and [:, 1] are the per-node fields for the +1 and -1 spin.
    """
    chi_plus_dir: np.ndarray
    chi_plus_node: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    sigma_v: float
    a_u: float
    b_u: np.ndarray
    b_v: np.ndarray
    field_plus: float
    field_minus: float
    tilde_field: np.ndarray
    iter: int = 0


@dataclass(frozen=True, eq=False)
class FixedPoint:
    state: MessageState
    converged: bool
    iters_used: int
    hard_labels: np.ndarray
    affinity: Affinity
    mu: float
    overlap_trace: Optional[List[float]] = None


def hard_labels(u_hat: np.ndarray) -> np.ndarray:
    """sign(u_hat) with sign(0) = +1."""
    return np.where(u_hat >= 0, 1, -1).astype(np.int64)


def overlap(u_hat_hard: np.ndarray, truth: np.ndarray, revealed: np.ndarray) -> float:
    """
    Test overlap q_U in [0, 1] on the hidden nodes, invariant to a global flip.

    Raises:
        EmptyTestSetError: if every node is revealed.
    """
    test = np.ones(truth.shape[0], dtype=bool)
    test[np.asarray(revealed, dtype=np.int64)] = False
    n_test = int(test.sum())
    if n_test == 0:
        raise EmptyTestSetError("Overlap is undefined when every node is revealed")
    agree = int(np.count_nonzero(np.asarray(u_hat_hard)[test] == np.asarray(truth)[test]))
    best = max(agree, n_test - agree) / n_test
    return 2.0 * best - 1.0


def mse_v(v_hat: np.ndarray, v_truth: np.ndarray) -> float:
    """Mean squared error of the centroid estimate."""
    v_hat = np.asarray(v_hat, dtype=np.float64)
    v_truth = np.asarray(v_truth, dtype=np.float64)
    if v_hat.shape != v_truth.shape:
        raise InvalidParameterError(f"Shape mismatch: {v_hat.shape} vs {v_truth.shape}")
    return float(np.mean((v_hat - v_truth) ** 2))


def magnetization(u_hat: np.ndarray, truth: np.ndarray) -> float:
    """(1/N)·Σ û_i u_i."""
    return float(np.mean(np.asarray(u_hat) * np.asarray(truth)))


def _check_binary(instance: Instance, supervision: Supervision, affinity: Affinity) -> None:
    if instance.num_groups != 2 or instance.embedding != "antipodal":
        raise InvalidParameterError("AMP-BP needs a binary instance; use csbm.multi for r > 2")
    if supervision.num_groups != 2 or supervision.n_nodes != instance.n_nodes:
        raise InvalidParameterError("Supervision does not match the instance")
    if affinity.num_groups != 2:
        raise InvalidParameterError("AMP-BP needs a 2 x 2 affinity")


def _ensure_finite(name: str, values, iteration: int) -> None:
    if not np.all(np.isfinite(values)):
        raise DivergenceError(name, iteration)


def _fields(u_hat: np.ndarray, affinity: Affinity):
    """h_+ and h_- from the mean marginal (1 + û)/2."""
    c = affinity.matrix
    m_plus = float(np.mean((1.0 + u_hat) / 2.0)) if u_hat.size else 0.5
    h_plus = c[0, 0] * m_plus + c[0, 1] * (1.0 - m_plus)
    h_minus = c[1, 0] * m_plus + c[1, 1] * (1.0 - m_plus)
    return h_plus, h_minus


def _log_priors(supervision: Supervision) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(supervision.priors)


def edge_log_ratio(chi_plus_dir: np.ndarray, affinity: Affinity) -> np.ndarray:
    """
    log((c_o + (c_i - c_o)·χ) / (c_i - (c_i - c_o)·χ)) per directed edge, the
    contribution of message k -> i to the log-odds of node i.
    """
    c = affinity.matrix
    plus = c[0, 0] * chi_plus_dir + c[0, 1] * (1.0 - chi_plus_dir)
    minus = c[1, 0] * chi_plus_dir + c[1, 1] * (1.0 - chi_plus_dir)
    return np.log(np.maximum(plus, LOG_FLOOR)) - np.log(np.maximum(minus, LOG_FLOOR))


def init_state(instance: Instance, supervision: Supervision, options: Optional[RunOptions] = None,
               affinity: Optional[Affinity] = None) -> MessageState:
    """
    Initial messages: priors plus uniform noise on [-init_noise, init_noise].

    With init_mode="planted" the messages and û start at the true labels and v̂
    at the true centroids instead.
    """
    options = options or RunOptions()
    affinity = affinity or instance.params.affinity()
    _check_binary(instance, supervision, affinity)
    graph = instance.graph
    rng = derive_stream(options.seed, "init")
    a = options.init_noise
    eps_dir = rng.uniform(-a, a, graph.num_directed)
    eps_node = rng.uniform(-a, a, instance.n_nodes)
    eps_feat = rng.uniform(-a, a, instance.feature_dim)

    prior_plus = supervision.node_prior_plus
    if options.init_mode == "planted":
        spins = instance.spins.astype(np.float64)
        u_hat = spins.copy()
        chi_dir = (1.0 + spins[graph.src]) / 2.0
        v_hat = np.asarray(instance.centroids, dtype=np.float64).copy()
    else:
        chi_dir = np.clip(prior_plus[graph.src] + eps_dir, 0.0, 1.0)
        u_hat = np.clip(2.0 * prior_plus - 1.0 + eps_node, -1.0, 1.0)
        v_hat = eps_feat

    h_plus, h_minus = _fields(u_hat, affinity)
    log_prior = _log_priors(supervision)
    tilde = np.stack([-h_plus + log_prior[:, 0], -h_minus + log_prior[:, 1]], axis=1)
    return MessageState(
        chi_plus_dir=chi_dir,
        chi_plus_node=(1.0 + u_hat) / 2.0,
        u_hat=u_hat,
        v_hat=v_hat,
        sigma_v=1.0,
        a_u=0.0,
        b_u=np.zeros(instance.feature_dim),
        b_v=np.zeros(instance.n_nodes),
        field_plus=h_plus,
        field_minus=h_minus,
        tilde_field=tilde,
        iter=0,
    )


def iterate(state: MessageState, instance: Instance, supervision: Supervision, affinity: Affinity,
            mu: float, damping: float = 0.0) -> MessageState:
    """
    One synchronous AMP-BP step.

    A_U and B_U use û(t); B_V uses v̂(t+1) with the Onsager term
    -(mu/alpha)·σ_V·û(t); every BP message is computed from the messages of
    step t.

    Raises:
        DivergenceError: naming the first quantity that became non-finite.
    """
    n = instance.n_nodes
    alpha = instance.alpha
    graph = instance.graph
    features = instance.features
    t = state.iter + 1
    u = state.u_hat

    # AMP on v
    sigma_u = 1.0 - u * u
    a_u = mu / n * float(u @ u)
    b_u = math.sqrt(mu / n) * (features @ u) - mu / n * float(sigma_u.sum()) * state.v_hat
    _ensure_finite("B_U", b_u, t)
    sigma_v = 1.0 / (1.0 + a_u)
    v_hat = b_u * sigma_v

    # AMP on u
    b_v = math.sqrt(mu / n) * (features.T @ v_hat) - mu / alpha * sigma_v * u
    _ensure_finite("B_V", b_v, t)

    h_plus, h_minus = _fields(u, affinity)
    log_prior = _log_priors(supervision)
    tilde = np.stack([-h_plus + log_prior[:, 0] + b_v, -h_minus + log_prior[:, 1] - b_v], axis=1)
    with np.errstate(invalid="ignore"):
        node_logit = tilde[:, 0] - tilde[:, 1]

    # BP on the graph
    log_ratio = edge_log_ratio(state.chi_plus_dir, affinity)
    incoming = np.bincount(graph.dst, weights=log_ratio, minlength=n)
    chi_dir = expit(node_logit[graph.src] + incoming[graph.src] - log_ratio[graph.rev])
    if damping > 0.0:
        chi_dir = (1.0 - damping) * chi_dir + damping * state.chi_plus_dir
    chi_node = expit(node_logit + incoming)
    _ensure_finite("chi_dir", chi_dir, t)
    _ensure_finite("chi_node", chi_node, t)

    return MessageState(
        chi_plus_dir=chi_dir,
        chi_plus_node=chi_node,
        u_hat=2.0 * chi_node - 1.0,
        v_hat=v_hat,
        sigma_v=sigma_v,
        a_u=a_u,
        b_u=b_u,
        b_v=b_v,
        field_plus=h_plus,
        field_minus=h_minus,
        tilde_field=tilde,
        iter=t,
    )


def max_change(old: MessageState, new: MessageState) -> float:
    """Largest absolute change over directed messages and node marginals."""
    delta = 0.0
    if new.chi_plus_dir.size:
        delta = float(np.max(np.abs(new.chi_plus_dir - old.chi_plus_dir)))
    if new.chi_plus_node.size:
        delta = max(delta, float(np.max(np.abs(new.chi_plus_node - old.chi_plus_node))))
    return delta


def run(instance: Instance, supervision: Supervision, options: Optional[RunOptions] = None, *,
        affinity: Optional[Affinity] = None, mu: Optional[float] = None,
        truth: Optional[np.ndarray] = None, init: Optional[MessageState] = None) -> FixedPoint:
    """
    Iterate AMP-BP to a fixed point.

    Args:
        instance: binary CSBM instance
        supervision: node priors
        options: iteration controls
        affinity, mu: model parameters; default to the ones the instance was drawn with
        truth: optional ±1 labels; enables the overlap trace and the overlap criterion
        init: optional starting state (warm start)

    Returns:
        FixedPoint; non-convergence is reported through ``converged``.
    """
    options = options or RunOptions()
    affinity = affinity or instance.params.affinity()
    mu = instance.params.snr_mu if mu is None else float(mu)
    _check_binary(instance, supervision, affinity)
    if options.criterion == "overlap" and truth is None:
        raise InvalidParameterError("The overlap criterion needs ground-truth labels")

    state = init if init is not None else init_state(instance, supervision, options, affinity)
    track = truth is not None and supervision.revealed.size < instance.n_nodes
    trace: Optional[List[float]] = [] if track else None
    converged = False
    iters = 0

    with compute_context(options.deterministic):
        for _ in range(options.max_iters):
            new = iterate(state, instance, supervision, affinity, mu, options.damping)
            iters += 1
            delta = max_change(state, new)
            state = new
            if trace is not None:
                trace.append(overlap(hard_labels(state.u_hat), truth, supervision.revealed))
            logger.debug("amp-bp iter %d: max change %.3e", iters, delta)
            if options.criterion == "overlap":
                if trace is not None and len(trace) >= 2 and abs(trace[-1] - trace[-2]) < options.overlap_tol:
                    converged = True
                    break
            elif delta < options.msg_tol:
                converged = True
                break

    if converged:
        logger.info("AMP-BP converged in %d iterations", iters)
    else:
        logger.warning("AMP-BP did not converge within %d iterations", options.max_iters)
    return FixedPoint(
        state=state,
        converged=converged,
        iters_used=iters,
        hard_labels=hard_labels(state.u_hat),
        affinity=affinity,
        mu=mu,
        overlap_trace=trace,
    )
