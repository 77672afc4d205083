"""
Dense-graph limit: AMP-AMP on the rank-one transformed adjacency, and the
scalar state evolution that predicts its fixed point.

When the mean degree grows with N the graph behaves like a spiked Wigner
matrix, so BP on the graph is replaced by a second AMP.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import sparse
from scipy.special import ndtr

from .amp_bp import RunOptions, hard_labels, overlap
from .config import compute_context, get_settings
from .errors import DivergenceError, InvalidParameterError, ResourceBudgetError
from .model import Affinity, ModelParams, Supervision, _sample, derive_stream

logger = logging.getLogger(__name__)

DEFAULT_QUADRATURE_NODES = 101


@dataclass(frozen=True)
class DenseParams:
    """
    Binary CSBM in the dense regime.

    degree_fraction is d̃ = d/N and graph_snr is ν with c_in - c_out = ν·√N.
    """
    n_nodes: int
    feature_dim: int
    degree_fraction: float
    graph_snr: float
    snr_mu: float
    train_fraction: float = 0.0
    label_flip_keep_prob: float = 1.0

    def __post_init__(self):
        if self.n_nodes <= 0 or self.feature_dim <= 0:
            raise InvalidParameterError(
                f"n_nodes and feature_dim must be positive, got N={self.n_nodes}, P={self.feature_dim}"
            )
        if not 0.0 < self.degree_fraction < 1.0:
            raise InvalidParameterError(f"degree_fraction must lie in (0, 1), got {self.degree_fraction}")
        if self.graph_snr < 0:
            raise InvalidParameterError(f"graph_snr must be nonnegative, got {self.graph_snr}")
        if self.snr_mu < 0:
            raise InvalidParameterError(f"snr_mu must be nonnegative, got {self.snr_mu}")
        if self.c_out < 0 or self.c_in > self.n_nodes:
            raise InvalidParameterError(
                f"graph_snr = {self.graph_snr} puts an edge probability outside [0, 1] "
                f"(c_in = {self.c_in:.4g}, c_out = {self.c_out:.4g}, N = {self.n_nodes})"
            )

    num_groups = 2

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    @property
    def avg_degree(self) -> float:
        return self.degree_fraction * self.n_nodes

    @property
    def c_in(self) -> float:
        return self.avg_degree + self.graph_snr * math.sqrt(self.n_nodes) / 2.0

    @property
    def c_out(self) -> float:
        return self.avg_degree - self.graph_snr * math.sqrt(self.n_nodes) / 2.0

    @property
    def delta_i(self) -> float:
        """Δ_I = ν² / (4 d̃ (1 - d̃)), the effective graph snr (≈ λ²)."""
        return self.graph_snr ** 2 / (4.0 * self.degree_fraction * (1.0 - self.degree_fraction))

    def affinity(self) -> Affinity:
        return Affinity.binary(self.c_in, self.c_out)

    def group_prior(self) -> np.ndarray:
        return np.full(2, 0.5)


def dense_params_from_sparse(params: ModelParams) -> DenseParams:
    """d̃ = d/N and ν = (c_in - c_out)/√N = 2λ√d/√N."""
    if params.num_groups != 2:
        raise InvalidParameterError("The dense limit is only defined for two groups")
    n = params.n_nodes
    return DenseParams(
        n_nodes=n,
        feature_dim=params.feature_dim,
        degree_fraction=params.avg_degree / n,
        graph_snr=2.0 * params.snr_lambda * math.sqrt(params.avg_degree) / math.sqrt(n),
        snr_mu=params.snr_mu,
        train_fraction=params.train_fraction,
        label_flip_keep_prob=params.label_flip_keep_prob,
    )


def sparse_params_from_dense(params: DenseParams) -> ModelParams:
    d = params.avg_degree
    return ModelParams(
        n_nodes=params.n_nodes,
        feature_dim=params.feature_dim,
        avg_degree=d,
        snr_lambda=params.graph_snr * math.sqrt(params.n_nodes) / (2.0 * math.sqrt(d)),
        snr_mu=params.snr_mu,
        train_fraction=params.train_fraction,
        label_flip_keep_prob=params.label_flip_keep_prob,
    )


def _check_dense_size(n_nodes: int) -> None:
    settings = get_settings()
    if n_nodes > settings.dense_max_nodes:
        raise ResourceBudgetError("Dense instance (nodes)", n_nodes, settings.dense_max_nodes, "CSBM_DENSE_MAX_NODES")
    requested = 8 * n_nodes * n_nodes
    if requested > settings.memory_budget_bytes:
        raise ResourceBudgetError("Dense N x N matrix (bytes)", requested, settings.memory_budget_bytes,
                                  "CSBM_MEMORY_BUDGET_MB")


def _check_fraction(d_tilde: float) -> None:
    if not 0.0 < d_tilde < 1.0:
        raise InvalidParameterError(f"d_tilde must lie strictly between 0 and 1, got {d_tilde}")


def transform_adjacency(adjacency, d_tilde: float, nu: float):
    """
    S_ij = (1/2)·(A_ij/d̃ - (1 - A_ij)/(1 - d̃)) off the diagonal, 0 on it.

    Returns:
        (S as a dense N x N array, Δ_I = ν²/(4 d̃ (1 - d̃)))
    """
    _check_fraction(d_tilde)
    shape = adjacency.shape if sparse.issparse(adjacency) else np.shape(adjacency)
    if len(shape) != 2 or shape[0] != shape[1]:
        raise InvalidParameterError(f"Adjacency must be square, got shape {shape}")
    _check_dense_size(shape[0])
    a = adjacency.toarray() if sparse.issparse(adjacency) else np.asarray(adjacency, dtype=np.float64)
    s = 0.5 * (a / d_tilde - (1.0 - a) / (1.0 - d_tilde))
    np.fill_diagonal(s, 0.0)
    delta_i = nu ** 2 / (4.0 * d_tilde * (1.0 - d_tilde))
    return s, delta_i


class TransformedAdjacency:
    """
    S applied to vectors without forming it:
    S·x = κ·A·x - β·(1ᵀx - x), κ = 1/(2d̃(1-d̃)), β = 1/(2(1-d̃)).
    """

    def __init__(self, adjacency: sparse.spmatrix, d_tilde: float):
        _check_fraction(d_tilde)
        self.adjacency = sparse.csr_matrix(adjacency, dtype=np.float64)
        self.d_tilde = d_tilde
        self.kappa = 1.0 / (2.0 * d_tilde * (1.0 - d_tilde))
        self.beta = 1.0 / (2.0 * (1.0 - d_tilde))

    @property
    def shape(self):
        return self.adjacency.shape

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.kappa * (self.adjacency @ x) - self.beta * (x.sum(axis=0) - x)

    def to_dense(self) -> np.ndarray:
        s, _ = transform_adjacency(self.adjacency, self.d_tilde, 0.0)
        return s


@dataclass(frozen=True, eq=False)
class DenseInstance:
    """
    Features and labels plus the transformed graph operator S.

    ``base`` is the sparse-format Instance the graph was drawn as, or None for
    the Gaussian surrogate.
    """
    operator: Union[TransformedAdjacency, np.ndarray]
    features: np.ndarray
    groups: np.ndarray
    centroids: np.ndarray
    params: DenseParams
    seed: int
    base: Optional[object] = None

    num_groups = 2

    @property
    def n_nodes(self) -> int:
        return int(self.groups.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[0])

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    @property
    def spins(self) -> np.ndarray:
        return (1 - 2 * self.groups).astype(np.int64)


def sample_dense_instance(params: DenseParams, seed: int, surrogate: bool = False) -> DenseInstance:
    """
    Draw a dense instance.

    By default the graph comes from the sparse generator at d = d̃N and is
    wrapped in a TransformedAdjacency. With ``surrogate`` the graph is replaced
    by S = Y / (2√(d̃(1-d̃))) with Y = √(Δ_I/N)·uuᵀ + W, W symmetric standard
    Gaussian with zero diagonal. Only the surrogate forms an N x N matrix, so
    only it is held to the dense size limits.
    """
    if not surrogate:
        base = _sample(params, params.group_prior(), params.affinity(), "antipodal", seed)
        operator = TransformedAdjacency(base.graph.adjacency(), params.degree_fraction)
        return DenseInstance(operator, base.features, base.groups, base.centroids, params, int(seed), base)

    _check_dense_size(params.n_nodes)
    # Features and labels from the usual stream with an edgeless graph.
    empty = Affinity(np.zeros((2, 2)))
    base = _sample(params, params.group_prior(), empty, "antipodal", seed)
    n = params.n_nodes
    rng = derive_stream(seed, "dense")
    noise = np.triu(rng.standard_normal((n, n)), k=1)
    noise = noise + noise.T
    spins = (1 - 2 * base.groups).astype(np.float64)
    y = math.sqrt(params.delta_i / n) * np.outer(spins, spins) + noise
    np.fill_diagonal(y, 0.0)
    d_tilde = params.degree_fraction
    s = y / (2.0 * math.sqrt(d_tilde * (1.0 - d_tilde)))
    s.setflags(write=False)
    return DenseInstance(s, base.features, base.groups, base.centroids, params, int(seed), None)


@dataclass(frozen=True, eq=False)
class DenseFixedPoint:
    u_hat: np.ndarray
    v_hat: np.ndarray
    sigma_v: float
    converged: bool
    iters_used: int
    hard_labels: np.ndarray
    overlap_trace: Optional[List[float]] = None


def _f_u(field_total: np.ndarray, prior_plus: np.ndarray) -> np.ndarray:
    """Posterior mean of a ±1 spin with prior P(+1) = p under a linear field B."""
    with np.errstate(divide="ignore"):
        tilt = 0.5 * (np.log(prior_plus) - np.log1p(-prior_plus))
        return np.tanh(field_total + tilt)


def run_amp_amp(instance: DenseInstance, supervision: Supervision, options: Optional[RunOptions] = None, *,
                mu: Optional[float] = None, truth: Optional[np.ndarray] = None) -> DenseFixedPoint:
    """
    AMP-AMP with the same convergence contract as amp_bp.run.

    Convergence is measured on the largest change of û. û at step -1 is the zero
    vector, so the first graph Onsager term vanishes.
    """
    options = options or RunOptions()
    params = instance.params
    mu = params.snr_mu if mu is None else float(mu)
    if options.criterion == "overlap" and truth is None:
        raise InvalidParameterError("The overlap criterion needs ground-truth labels")
    n = instance.n_nodes
    alpha = instance.alpha
    features = instance.features
    s_op = instance.operator
    nu = params.graph_snr
    delta_i = params.delta_i
    prior_plus = supervision.node_prior_plus

    rng = derive_stream(options.seed, "init")
    a = options.init_noise
    eps_node = rng.uniform(-a, a, n)
    eps_feat = rng.uniform(-a, a, instance.feature_dim)
    if options.init_mode == "planted":
        u = instance.spins.astype(np.float64)
        v_hat = np.asarray(instance.centroids, dtype=np.float64).copy()
    else:
        u = np.clip(2.0 * prior_plus - 1.0 + eps_node, -1.0, 1.0)
        v_hat = eps_feat
    u_prev = np.zeros(n)
    sigma_v = 1.0

    track = truth is not None and supervision.revealed.size < n
    trace: Optional[List[float]] = [] if track else None
    converged = False
    iters = 0

    with compute_context(options.deterministic):
        for t in range(1, options.max_iters + 1):
            sigma_u = 1.0 - u * u
            sum_sigma_u = float(sigma_u.sum())
            a_u = mu / n * float(u @ u)
            b_u = math.sqrt(mu / n) * (features @ u) - mu / n * sum_sigma_u * v_hat
            sigma_v = 1.0 / (1.0 + a_u)
            v_hat = b_u * sigma_v
            b_v = math.sqrt(mu / n) * (features.T @ v_hat) - mu / alpha * sigma_v * u
            b_uu = nu / math.sqrt(n) * (s_op @ u) - delta_i / n * sum_sigma_u * u_prev
            if not (np.all(np.isfinite(b_u)) and np.all(np.isfinite(b_v))):
                raise DivergenceError("B_U/B_V", t)
            if not np.all(np.isfinite(b_uu)):
                raise DivergenceError("B_UU", t)

            u_new = _f_u(b_uu + b_v, prior_plus)
            if options.damping > 0.0:
                u_new = (1.0 - options.damping) * u_new + options.damping * u
            delta = float(np.max(np.abs(u_new - u))) if n else 0.0
            u_prev, u = u, u_new
            iters = t
            if trace is not None:
                trace.append(overlap(hard_labels(u), truth, supervision.revealed))
            logger.debug("amp-amp iter %d: max change %.3e", t, delta)
            if options.criterion == "overlap":
                if trace is not None and len(trace) >= 2 and abs(trace[-1] - trace[-2]) < options.overlap_tol:
                    converged = True
                    break
            elif delta < options.msg_tol:
                converged = True
                break

    if converged:
        logger.info("AMP-AMP converged in %d iterations", iters)
    else:
        logger.warning("AMP-AMP did not converge within %d iterations", options.max_iters)
    return DenseFixedPoint(u, v_hat, sigma_v, converged, iters, hard_labels(u), trace)


def gaussian_expectation(f: Callable[[np.ndarray], np.ndarray], nodes: int = DEFAULT_QUADRATURE_NODES) -> float:
    """E[f(W)] for W ~ N(0, 1) by Gauss-Hermite quadrature (probabilists' weight)."""
    x, w = hermegauss(nodes)
    return float(np.sum(w * f(x)) / math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class SeState:
    """
    Order parameters at one step: the field m, the label overlap m_u and the
    centroid overlap m_v = μ·m_u/(1 + μ·m_u) that the next step uses.
    """
    m: float
    m_u: float
    m_v: float


@dataclass(frozen=True)
class SeOptions:
    max_iters: int = 1000
    tol: float = 1e-10
    informative: bool = False
    quadrature_nodes: int = DEFAULT_QUADRATURE_NODES

    def __post_init__(self):
        if self.max_iters <= 0:
            raise InvalidParameterError(f"max_iters must be positive, got {self.max_iters}")
        if self.tol <= 0:
            raise InvalidParameterError(f"tol must be positive, got {self.tol}")
        if self.quadrature_nodes < 61:
            raise InvalidParameterError(f"Use at least 61 quadrature nodes, got {self.quadrature_nodes}")


@dataclass(frozen=True)
class SeResult:
    trajectory: List[SeState] = field(default_factory=list)
    converged: bool = False

    @property
    def fixed_point(self) -> SeState:
        return self.trajectory[-1]

    @property
    def iterations(self) -> int:
        return len(self.trajectory) - 1

    @property
    def predicted_overlap(self) -> float:
        return se_predicted_overlap(self.fixed_point.m_u, 0.0, self.fixed_point.m)


def se_label_overlap(m: float, rho: float, nodes: int = DEFAULT_QUADRATURE_NODES) -> float:
    """m_u = ρ + (1 - ρ)·E_W[tanh(m + √m·W)]."""
    if m <= 0.0:
        return rho
    root = math.sqrt(m)
    return rho + (1.0 - rho) * gaussian_expectation(lambda w: np.tanh(m + root * w), nodes)


def _se_step(m_u: float, mu: float, alpha: float, delta_i: float, rho: float, nodes: int) -> SeState:
    m_v = mu * m_u / (1.0 + mu * m_u)
    m = mu / alpha * m_v + delta_i * m_u
    m_u_next = se_label_overlap(m, rho, nodes)
    return SeState(m=m, m_u=m_u_next, m_v=mu * m_u_next / (1.0 + mu * m_u_next))


def state_evolution(mu: float, alpha: float, delta_i: float, rho: float,
                    options: Optional[SeOptions] = None) -> SeResult:
    """
    Iterate the scalar recursion from m_u = ρ (or 1 with ``informative``) until
    |Δm_u| < tol.
    """
    options = options or SeOptions()
    if mu < 0 or delta_i < 0:
        raise InvalidParameterError("mu and delta_i must be nonnegative")
    if alpha <= 0 or not math.isfinite(alpha):
        raise InvalidParameterError(f"alpha must be finite and positive, got {alpha}")
    if not 0.0 <= rho <= 1.0:
        raise InvalidParameterError(f"rho must lie in [0, 1], got {rho}")

    m_u = 1.0 if options.informative else rho
    trajectory = [SeState(m=0.0, m_u=m_u, m_v=mu * m_u / (1.0 + mu * m_u))]
    converged = False
    for t in range(options.max_iters):
        state = _se_step(trajectory[-1].m_u, mu, alpha, delta_i, rho, options.quadrature_nodes)
        change = abs(state.m_u - trajectory[-1].m_u)
        trajectory.append(state)
        if change < options.tol:
            converged = True
            break
    if not converged:
        logger.warning("State evolution did not converge within %d iterations", options.max_iters)
    else:
        logger.info("State evolution converged in %d steps (m_u = %.6f)", len(trajectory) - 1, trajectory[-1].m_u)
    return SeResult(trajectory, converged)


def se_predicted_overlap(m_u_fixed: float, rho: float, m_fixed: float) -> float:
    """
    Hidden-node overlap of the sign estimator, 2Φ(√m) - 1: a hidden +1 node sees
    the effective field m + √m·W.
    """
    if m_fixed < 0:
        raise InvalidParameterError(f"m must be nonnegative, got {m_fixed}")
    if not 0.0 <= rho <= 1.0 or not -1e-12 <= m_u_fixed <= 1.0 + 1e-12:
        raise InvalidParameterError("m_u and rho must lie in [0, 1]")
    if math.isinf(m_fixed):
        return 1.0
    return float(2.0 * ndtr(math.sqrt(m_fixed)) - 1.0)
