"""
Reference answers to check AMP-BP against: exact posterior marginals by
enumeration, a Metropolis-within-Gibbs sampler, and a logistic-regression
baseline that ignores the graph.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp
from sklearn.model_selection import train_test_split

from .amp_bp import overlap
from .config import get_settings
from .errors import EnumerationLimitError, InvalidParameterError
from .model import Instance, Supervision, derive_stream

try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda func: func

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-300
L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
LOGISTIC_STEPS = 2000
VALIDATION_FRACTION = 0.2


@dataclass(frozen=True, eq=False)
class MarginalTable:
    """P(u_i = +1 | A, B, Ξ) per node."""
    prob_plus: np.ndarray

    def hard_labels(self) -> np.ndarray:
        """sign(2p - 1), ties to +1."""
        return np.where(self.prob_plus >= 0.5, 1, -1).astype(np.int64)


@dataclass(frozen=True)
class McmcOptions:
    sweeps: int = 100_000
    burn_in: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.sweeps <= 0 or self.burn_in <= 0:
            raise InvalidParameterError("sweeps and burn_in must be positive")
        if self.burn_in >= self.sweeps:
            raise InvalidParameterError(f"burn_in ({self.burn_in}) must be below sweeps ({self.sweeps})")


def _check_binary(instance: Instance, supervision: Supervision) -> None:
    if instance.num_groups != 2:
        raise InvalidParameterError("The oracles only handle the binary model")
    if supervision.n_nodes != instance.n_nodes or supervision.num_groups != 2:
        raise InvalidParameterError("Supervision does not match the instance")


def feature_log_likelihood(features: np.ndarray, spins: np.ndarray, mu: float) -> np.ndarray:
    """
    log P(B | u) with the centroids integrated out, for one or many ±1 vectors.

    Per feature row the marginal is Gaussian with covariance I + (μ/N)·uuᵀ, so
    log P(B_β | u) = -(|B_β|² - (μ/N)(B_β·u)²/(1+μ))/2 - log(1+μ)/2 - (N/2)·log 2π.

    Args:
        features: P x N matrix B
        spins: (N,) or (K, N) array of ±1 labels

    Returns:
        scalar array, or (K,) for a batch
    """
    b = np.asarray(features, dtype=np.float64)
    p, n = b.shape
    u = np.atleast_2d(np.asarray(spins, dtype=np.float64))
    projections = u @ b.T
    quad = float(np.sum(b * b)) - mu / n * np.sum(projections ** 2, axis=1) / (1.0 + mu)
    out = -0.5 * quad - 0.5 * p * math.log1p(mu) - 0.5 * p * n * math.log(2.0 * math.pi)
    return out if np.ndim(spins) == 2 else out[0]


def _graph_log_likelihood(configs: np.ndarray, instance: Instance) -> np.ndarray:
    """Σ_{i<j} log P(A_ij | u_i, u_j) for each row of a (K, N) group-index array."""
    n = instance.n_nodes
    c = instance.params.affinity().matrix
    with np.errstate(divide="ignore"):
        log_edge = np.log(c / n)
        log_none = np.log1p(-c / n)
    edges = instance.graph.edges
    n1 = configs.sum(axis=1)
    n0 = n - n1
    pairs = {
        (0, 0): n0 * (n0 - 1) // 2,
        (0, 1): n0 * n1,
        (1, 1): n1 * (n1 - 1) // 2,
    }
    if edges.size:
        gi = configs[:, edges[:, 0]]
        gj = configs[:, edges[:, 1]]
        kind = gi + gj
        counts = {(0, 0): np.sum(kind == 0, axis=1), (0, 1): np.sum(kind == 1, axis=1),
                  (1, 1): np.sum(kind == 2, axis=1)}
    else:
        zero = np.zeros(configs.shape[0], dtype=np.int64)
        counts = {key: zero for key in pairs}
    total = np.zeros(configs.shape[0])
    with np.errstate(invalid="ignore"):
        for (a, b), n_pairs in pairs.items():
            k = counts[(a, b)]
            total += np.where(k > 0, k * log_edge[a, b], 0.0) + np.where(n_pairs - k > 0,
                                                                        (n_pairs - k) * log_none[a, b], 0.0)
    return total


def _mean_field_log_likelihood(configs: np.ndarray, instance: Instance,
                              mean_field: Tuple[float, float]) -> np.ndarray:
    """Σ_edges log C[u_i, u_j] - Σ_i h[u_i]: edge factors only, non-edges replaced by the field h."""
    c = instance.params.affinity().matrix
    with np.errstate(divide="ignore"):
        log_c = np.log(c)
    edges = instance.graph.edges
    total = -np.asarray(mean_field, dtype=np.float64)[configs].sum(axis=1)
    if edges.size:
        total = total + log_c[configs[:, edges[:, 0]], configs[:, edges[:, 1]]].sum(axis=1)
    return total


def exact_posterior(instance: Instance, supervision: Supervision,
                    mean_field: Optional[Tuple[float, float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Every labeling consistent with the pinned nodes and its posterior
    probability, with the centroids integrated out in closed form.

    Returns:
        (configs, probs): a (K, N) array of group indices (0 is the +1 spin)
        and the (K,) probabilities, which sum to one.

    Raises:
        EnumerationLimitError: above the configured node limit (16).
    """
    _check_binary(instance, supervision)
    n = instance.n_nodes
    limit = get_settings().enumeration_max_nodes
    if n > limit:
        raise EnumerationLimitError(f"Exact enumeration handles at most {limit} nodes, got {n}")

    codes = np.arange(2 ** n, dtype=np.int64)
    configs = (codes[:, None] >> np.arange(n)) & 1
    with np.errstate(divide="ignore"):
        log_prior = np.log(supervision.priors)
    prior_term = np.where(configs == 0, log_prior[:, 0], log_prior[:, 1]).sum(axis=1)
    keep = np.isfinite(prior_term)
    configs, prior_term = configs[keep], prior_term[keep]

    spins = 1 - 2 * configs
    if mean_field is None:
        graph_term = _graph_log_likelihood(configs, instance)
    else:
        graph_term = _mean_field_log_likelihood(configs, instance, mean_field)
    log_w = prior_term + graph_term
    log_w = log_w + feature_log_likelihood(instance.features, spins, instance.params.snr_mu)
    logger.debug("Enumerated %d labelings for N=%d", configs.shape[0], n)
    return configs, np.exp(log_w - logsumexp(log_w))


def exact_marginals(instance: Instance, supervision: Supervision,
                    mean_field: Optional[Tuple[float, float]] = None) -> MarginalTable:
    """
    Posterior marginals by summing over the labelings of exact_posterior.

    With ``mean_field`` = (h_+, h_-) the non-edge factors are replaced by that
    external field, which is the factor graph AMP-BP iterates on; on a tree its
    converged marginals then match these exactly.
    """
    configs, probs = exact_posterior(instance, supervision, mean_field)
    return MarginalTable(np.clip(probs @ (configs == 0), 0.0, 1.0))


@njit(cache=True)
def flip_log_ratio(i, groups, group_count, indptr, dst, field, log_prior, log_edge, log_none):
    """
    log π(u with u_i flipped) - log π(u) for π(u) ∝ P(A | u)·exp(Σ_j u_j·field_j)·P_U(u).
    """
    g = groups[i]
    h = 1 - g
    k0 = 0
    k1 = 0
    for e in range(indptr[i], indptr[i + 1]):
        if groups[dst[e]] == 0:
            k0 += 1
        else:
            k1 += 1
    # non-neighbours of i per group, i itself excluded
    m0 = group_count[0] - k0 - (1 if g == 0 else 0)
    m1 = group_count[1] - k1 - (1 if g == 1 else 0)
    delta = (k0 * (log_edge[h, 0] - log_edge[g, 0]) + k1 * (log_edge[h, 1] - log_edge[g, 1])
             + m0 * (log_none[h, 0] - log_none[g, 0]) + m1 * (log_none[h, 1] - log_none[g, 1]))
    spin = 1.0 - 2.0 * g
    delta += -2.0 * spin * field[i]
    delta += log_prior[i, h] - log_prior[i, g]
    return delta


@njit(cache=True)
def _metropolis_sweep(groups, group_count, indptr, dst, field, log_prior, pinned, log_edge, log_none,
                      uniforms):
    """One pass of single-label flips over all nodes, in place."""
    n = groups.shape[0]
    for i in range(n):
        if pinned[i]:
            continue
        delta = flip_log_ratio(i, groups, group_count, indptr, dst, field, log_prior, log_edge, log_none)
        if delta >= 0.0 or uniforms[i] < math.exp(delta):
            g = groups[i]
            groups[i] = 1 - g
            group_count[g] -= 1
            group_count[1 - g] += 1


def gibbs_draw_v(features: np.ndarray, spins: np.ndarray, mu: float, rng: np.random.Generator) -> np.ndarray:
    """Exact draw of v | u: v_β ~ N(√(μ/N)·(B_β·u)/(1+μ), 1/(1+μ)) independently per feature."""
    p, n = features.shape
    mean = math.sqrt(mu / n) * (features @ spins) / (1.0 + mu)
    return mean + rng.standard_normal(p) / math.sqrt(1.0 + mu)


def mcmc_samples(instance: Instance, supervision: Supervision,
                 options: Optional[McmcOptions] = None) -> Iterator[np.ndarray]:
    """
    Run the chain and yield a copy of the group indices after every
    post-burn-in sweep.

    Each sweep redraws v exactly from its Gaussian conditional and then
    proposes a flip of every unpinned node with Metropolis acceptance.
    """
    options = options or McmcOptions()
    _check_binary(instance, supervision)
    n = instance.n_nodes
    mu = instance.params.snr_mu
    c = instance.params.affinity().matrix
    graph = instance.graph
    features = instance.features
    rng = derive_stream(options.seed, "mcmc")

    log_edge = np.log(np.maximum(c / n, LOG_FLOOR))
    log_none = np.log(np.maximum(1.0 - c / n, LOG_FLOOR))
    log_prior = np.log(np.maximum(supervision.priors, LOG_FLOOR))
    pinned = supervision.pinned_mask()

    groups = rng.integers(0, 2, n).astype(np.int64)
    groups[pinned] = np.argmax(supervision.priors[pinned], axis=1)
    group_count = np.bincount(groups, minlength=2).astype(np.int64)
    indptr = np.ascontiguousarray(graph.indptr)
    dst = np.ascontiguousarray(graph.dst)
    scale = math.sqrt(mu / n)

    for sweep in range(options.sweeps):
        v = gibbs_draw_v(features, 1.0 - 2.0 * groups, mu, rng)
        field = scale * (features.T @ v)
        _metropolis_sweep(groups, group_count, indptr, dst, field, log_prior, pinned, log_edge, log_none,
                          rng.random(n))
        if sweep >= options.burn_in:
            yield groups.copy()


def mcmc_marginals(instance: Instance, supervision: Supervision,
                   options: Optional[McmcOptions] = None) -> MarginalTable:
    """Fraction of post-burn-in sweeps of mcmc_samples with u_i = +1."""
    options = options or McmcOptions()
    plus_counts = np.zeros(instance.n_nodes, dtype=np.int64)
    kept = 0
    for groups in mcmc_samples(instance, supervision, options):
        plus_counts += groups == 0
        kept += 1
    logger.info("MCMC kept %d of %d sweeps (numba=%s)", kept, options.sweeps, NUMBA_AVAILABLE)
    return MarginalTable(plus_counts / kept)


def _fit_logistic(x: np.ndarray, y: np.ndarray, l2: float, steps: int):
    """Full-batch gradient descent on the mean logistic loss + (l2/2)|w|²; the bias is not penalized."""
    n, p = x.shape
    w = np.zeros(p)
    b = 0.0
    step = 0.1 / (1.0 + l2)
    for _ in range(steps):
        margin = y * (x @ w + b)
        weight = -y * expit(-margin) / n
        w -= step * (x.T @ weight + l2 * w)
        b -= step * float(weight.sum())
    return w, b


def logistic_baseline(instance: Instance, supervision: Supervision, l2_grid: Sequence[float] = L2_GRID,
                      seed: Optional[int] = None, steps: int = LOGISTIC_STEPS) -> float:
    """
    q_U of an L2-regularized logistic classifier trained on the revealed nodes'
    features; the graph is ignored.

    The regularization strength is picked on a random 80/20 split of the
    revealed set (first best on ties), then the model is refit on all revealed
    nodes.
    """
    _check_binary(instance, supervision)
    revealed = supervision.revealed
    if revealed.size == 0:
        raise InvalidParameterError("The logistic baseline needs at least one revealed node")
    if not l2_grid or min(l2_grid) < 0:
        raise InvalidParameterError("l2_grid must be a nonempty list of nonnegative strengths")

    x = np.ascontiguousarray(instance.features.T)
    y_all = 1.0 - 2.0 * supervision.observed
    rng = derive_stream(instance.seed if seed is None else seed, "logistic")
    best_l2 = l2_grid[0]
    if revealed.size >= 2:
        train, val = train_test_split(revealed, test_size=VALIDATION_FRACTION,
                                      random_state=int(rng.integers(2 ** 31 - 1)))
        best_acc = -1.0
        for l2 in l2_grid:
            w, b = _fit_logistic(x[train], y_all[train], l2, steps)
            acc = float(np.mean(np.where(x[val] @ w + b >= 0, 1.0, -1.0) == y_all[val]))
            logger.debug("logistic l2=%g validation accuracy %.4f", l2, acc)
            if acc > best_acc:
                best_acc, best_l2 = acc, l2
    w, b = _fit_logistic(x[revealed], y_all[revealed], best_l2, steps)
    predictions = np.where(x @ w + b >= 0, 1, -1)
    q_u = overlap(predictions, instance.spins, revealed)
    logger.info("Logistic baseline: l2=%g q_U=%.4f", best_l2, q_u)
    return q_u
