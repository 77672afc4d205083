"""
AMP-BP for r possibly unbalanced communities with a general affinity matrix.

Labels live in an embedding space: one-hot vectors in R^r, or for two groups
the antipodal embedding (+1 / -1 in R^1), which is the binary model. With the
antipodal embedding every update below coincides with csbm.amp_bp.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax

from .amp_bp import LOG_FLOOR, MessageState, RunOptions
from .config import compute_context
from .errors import DivergenceError, EmptyTestSetError, InvalidParameterError
from .model import (
    EMBEDDINGS,
    Affinity,
    Instance,
    Supervision,
    _embedding_matrix,
    _sample,
    derive_stream,
    make_supervision,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MultiParams:
    """
    CSBM with r groups drawn from ``prior_weights`` and edge probability C[a, b]/N.

    Exposes the same ``alpha`` / ``affinity()`` / ``group_prior()`` accessors as
    ModelParams, so an Instance can carry either.
    """
    n_nodes: int
    feature_dim: int
    prior_weights: Sequence[float]
    affinity_matrix: Affinity
    snr_mu: float
    train_fraction: float = 0.0
    label_flip_keep_prob: float = 1.0
    embedding: str = "onehot"

    def __post_init__(self):
        if self.n_nodes <= 0 or self.feature_dim <= 0:
            raise InvalidParameterError(
                f"n_nodes and feature_dim must be positive, got N={self.n_nodes}, P={self.feature_dim}"
            )
        if not isinstance(self.affinity_matrix, Affinity):
            object.__setattr__(self, "affinity_matrix", Affinity(np.asarray(self.affinity_matrix)))
        prior = np.asarray(self.prior_weights, dtype=np.float64)
        r = self.affinity_matrix.num_groups
        if prior.shape != (r,):
            raise InvalidParameterError(f"prior_weights must have {r} entries, got {prior.shape}")
        if np.any(prior < 0) or not math.isclose(float(prior.sum()), 1.0, abs_tol=1e-12):
            raise InvalidParameterError("prior_weights must be a probability vector")
        object.__setattr__(self, "prior_weights", tuple(float(x) for x in prior))
        if self.snr_mu < 0:
            raise InvalidParameterError(f"snr_mu must be nonnegative, got {self.snr_mu}")
        for name in ("train_fraction", "label_flip_keep_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {value}")
        if self.embedding not in EMBEDDINGS:
            raise InvalidParameterError(f"embedding must be one of {EMBEDDINGS}, got {self.embedding!r}")
        _embedding_matrix(self.embedding, r)

    @property
    def num_groups(self) -> int:
        return self.affinity_matrix.num_groups

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    def affinity(self) -> Affinity:
        return self.affinity_matrix

    def group_prior(self) -> np.ndarray:
        return np.asarray(self.prior_weights, dtype=np.float64)

    def to_dict(self) -> Dict[str, object]:
        return {
            "n_nodes": self.n_nodes,
            "feature_dim": self.feature_dim,
            "prior_weights": list(self.prior_weights),
            "affinity_matrix": self.affinity_matrix.matrix.tolist(),
            "snr_mu": self.snr_mu,
            "train_fraction": self.train_fraction,
            "label_flip_keep_prob": self.label_flip_keep_prob,
            "embedding": self.embedding,
        }


@dataclass(frozen=True, eq=False)
class MultiState:
    """
    One iteration of the multi-group algorithm.

    With k the embedding dimension (r for one-hot, 1 for antipodal):
    chi_dir is (2|E|, r), chi_node (N, r), u_hat (N, k), v_hat and b_u (P, k),
    b_v (N, k), sigma_u (N, k, k), sigma_v / a_u / a_v (k, k), field (r,).
    """
    chi_dir: np.ndarray
    chi_node: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    sigma_u: np.ndarray
    sigma_v: np.ndarray
    a_u: np.ndarray
    a_v: np.ndarray
    b_u: np.ndarray
    b_v: np.ndarray
    field: np.ndarray
    iter: int = 0


@dataclass(frozen=True, eq=False)
class MultiFixedPoint:
    state: MultiState
    converged: bool
    iters_used: int
    hard_labels: np.ndarray
    overlap_trace: Optional[List[float]] = None


def sample_multi_instance(params: MultiParams, seed: int) -> Instance:
    """Sample an r-group instance; the features use the params' label embedding."""
    return _sample(params, params.group_prior(), params.affinity(), params.embedding, seed)


def make_multi_supervision(instance: Instance, group_prior: Optional[Sequence[float]] = None, rho: float = 0.0,
                           keep_prob: float = 1.0, seed: Optional[int] = None) -> Supervision:
    """Supervision whose hidden-node prior is the group prior P_U (the params' prior by default)."""
    if group_prior is None:
        group_prior = instance.params.group_prior()
    return make_supervision(instance, rho, keep_prob=keep_prob, seed=seed, group_prior=group_prior)


def _sigma_u(chi_node: np.ndarray, u_hat: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """Per-node posterior covariance Σ_s χ_s e_s e_sᵀ - û ûᵀ (diag(û) - ûûᵀ for one-hot)."""
    second = np.einsum("ns,sa,sb->nab", chi_node, emb, emb)
    return second - u_hat[:, :, None] * u_hat[:, None, :]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    """Clip to nonnegative and rescale each row to sum to one (uniform if the row vanishes)."""
    x = np.clip(x, 0.0, None)
    total = x.sum(axis=1, keepdims=True)
    out = np.full_like(x, 1.0 / x.shape[1])
    np.divide(x, total, out=out, where=total > 0)
    return out


def init_multi_state(instance: Instance, supervision: Supervision, options: Optional[RunOptions] = None,
                     affinity: Optional[Affinity] = None) -> MultiState:
    """Priors plus uniform noise, clipped and renormalized onto the simplex."""
    options = options or RunOptions()
    affinity = affinity or instance.params.affinity()
    emb = _embedding_matrix(instance.embedding, affinity.num_groups)
    graph = instance.graph
    r = affinity.num_groups
    rng = derive_stream(options.seed, "init")
    a = options.init_noise
    eps_dir = rng.uniform(-a, a, (graph.num_directed, r))
    eps_node = rng.uniform(-a, a, (instance.n_nodes, r))
    eps_feat = rng.uniform(-a, a, (instance.feature_dim, emb.shape[1]))

    if options.init_mode == "planted":
        chi_node = np.eye(r)[instance.groups]
        chi_dir = chi_node[graph.src].copy()
        centroids = np.asarray(instance.centroids, dtype=np.float64)
        v_hat = centroids.reshape(instance.feature_dim, -1).copy()
    else:
        priors = supervision.priors
        chi_dir = _normalize_rows(priors[graph.src] + eps_dir)
        chi_node = _normalize_rows(priors + eps_node)
        v_hat = eps_feat
    k = emb.shape[1]
    u_hat = chi_node @ emb
    return MultiState(
        chi_dir=chi_dir,
        chi_node=chi_node,
        u_hat=u_hat,
        v_hat=v_hat,
        sigma_u=_sigma_u(chi_node, u_hat, emb),
        sigma_v=np.eye(k),
        a_u=np.zeros((k, k)),
        a_v=np.zeros((k, k)),
        b_u=np.zeros_like(v_hat),
        b_v=np.zeros((instance.n_nodes, k)),
        field=affinity.matrix @ chi_node.mean(axis=0),
        iter=0,
    )


def lift_binary_state(state: MessageState) -> MultiState:
    """The binary AMP-BP state viewed as a multi-group state with the antipodal embedding."""
    emb = _embedding_matrix("antipodal", 2)
    chi_dir = np.stack([state.chi_plus_dir, 1.0 - state.chi_plus_dir], axis=1)
    chi_node = np.stack([state.chi_plus_node, 1.0 - state.chi_plus_node], axis=1)
    # û is taken verbatim so a lifted state continues the binary trajectory exactly.
    u_hat = state.u_hat.reshape(-1, 1).copy()
    v_hat = state.v_hat.reshape(-1, 1).copy()
    return MultiState(
        chi_dir=chi_dir,
        chi_node=chi_node,
        u_hat=u_hat,
        v_hat=v_hat,
        sigma_u=_sigma_u(chi_node, u_hat, emb),
        sigma_v=np.array([[state.sigma_v]]),
        a_u=np.array([[state.a_u]]),
        a_v=np.zeros((1, 1)),
        b_u=state.b_u.reshape(-1, 1).copy(),
        b_v=state.b_v.reshape(-1, 1).copy(),
        field=np.array([state.field_plus, state.field_minus]),
        iter=state.iter,
    )


def _ensure_finite(name: str, values, iteration: int) -> None:
    if not np.all(np.isfinite(values)):
        raise DivergenceError(name, iteration)


def iterate_multi(state: MultiState, instance: Instance, supervision: Supervision, affinity: Affinity,
                  mu: float, damping: float = 0.0) -> MultiState:
    """One synchronous step of the multi-group algorithm, same time indexing as AMP-BP."""
    n = instance.n_nodes
    alpha = instance.alpha
    graph = instance.graph
    features = instance.features
    emb = _embedding_matrix(instance.embedding, affinity.num_groups)
    k = emb.shape[1]
    t = state.iter + 1
    u = state.u_hat

    # AMP on v
    a_u = mu / n * (u.T @ u)
    sum_sigma_u = state.sigma_u.sum(axis=0)
    b_u = math.sqrt(mu / n) * (features @ u) - mu / n * (state.v_hat @ sum_sigma_u)
    _ensure_finite("B_U", b_u, t)
    factor = linalg.cho_factor(np.eye(k) + a_u)
    sigma_v = linalg.cho_solve(factor, np.eye(k))
    sigma_v = (sigma_v + sigma_v.T) / 2.0
    v_hat = b_u @ sigma_v
    a_v = mu / n * (state.v_hat.T @ state.v_hat)

    # AMP on u
    b_v = math.sqrt(mu / n) * (features.T @ v_hat) - mu / alpha * (u @ sigma_v)
    _ensure_finite("B_V", b_v, t)

    chi_node_prev = state.chi_node
    field = affinity.matrix @ chi_node_prev.mean(axis=0) if n else np.zeros(affinity.num_groups)
    with np.errstate(divide="ignore"):
        log_prior = np.log(supervision.priors)
    quad = np.einsum("sa,ab,sb->s", emb, a_v, emb)
    node_log = log_prior - field[None, :] + b_v @ emb.T - quad[None, :] / 2.0

    # BP on the graph; L[e, s] = log Σ_t C[t, s] χ_t^{src -> dst}
    log_edge = np.log(np.maximum(state.chi_dir @ affinity.matrix, LOG_FLOOR))
    incoming = np.zeros((n, affinity.num_groups))
    np.add.at(incoming, graph.dst, log_edge)
    chi_dir = softmax(node_log[graph.src] + incoming[graph.src] - log_edge[graph.rev], axis=1)
    if damping > 0.0:
        chi_dir = (1.0 - damping) * chi_dir + damping * state.chi_dir
    chi_node = softmax(node_log + incoming, axis=1)
    _ensure_finite("chi_dir", chi_dir, t)
    _ensure_finite("chi_node", chi_node, t)

    u_new = chi_node @ emb
    return MultiState(
        chi_dir=chi_dir,
        chi_node=chi_node,
        u_hat=u_new,
        v_hat=v_hat,
        sigma_u=_sigma_u(chi_node, u_new, emb),
        sigma_v=sigma_v,
        a_u=a_u,
        a_v=a_v,
        b_u=b_u,
        b_v=b_v,
        field=field,
        iter=t,
    )


def multi_hard_labels(chi_node: np.ndarray) -> np.ndarray:
    """argmax_s χ_s^i; np.argmax already breaks ties toward the lowest index."""
    return np.argmax(chi_node, axis=1).astype(np.int64)


def overlap_multi(hard_labels: np.ndarray, truth: np.ndarray, revealed: np.ndarray, num_groups: int,
                  group_prior: Optional[Sequence[float]] = None) -> float:
    """
    Test overlap (q̂ - max P_U) / (1 - max P_U) for group-index labels.

    Without revealed nodes q̂ is the best agreement over group relabelings,
    found by an assignment on the confusion matrix; with revealed nodes the
    labels are already aligned and q̂ is the raw agreement.
    """
    hard_labels = np.asarray(hard_labels, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    revealed = np.asarray(revealed, dtype=np.int64)
    test = np.ones(truth.shape[0], dtype=bool)
    test[revealed] = False
    n_test = int(test.sum())
    if n_test == 0:
        raise EmptyTestSetError("Overlap is undefined when every node is revealed")
    prior = np.full(num_groups, 1.0 / num_groups) if group_prior is None else np.asarray(group_prior, dtype=float)
    base = float(prior.max())
    if base >= 1.0:
        raise InvalidParameterError("Overlap is undefined when one group has prior mass 1")

    if revealed.size == 0:
        confusion = np.zeros((num_groups, num_groups), dtype=np.int64)
        np.add.at(confusion, (hard_labels[test], truth[test]), 1)
        rows, cols = linear_sum_assignment(confusion, maximize=True)
        agree = int(confusion[rows, cols].sum())
    else:
        agree = int(np.count_nonzero(hard_labels[test] == truth[test]))
    q_hat = agree / n_test
    return (q_hat - base) / (1.0 - base)


def _max_change(old: MultiState, new: MultiState) -> float:
    delta = 0.0
    if new.chi_dir.size:
        delta = float(np.max(np.abs(new.chi_dir - old.chi_dir)))
    if new.chi_node.size:
        delta = max(delta, float(np.max(np.abs(new.chi_node - old.chi_node))))
    return delta


def run_multi(instance: Instance, supervision: Supervision, options: Optional[RunOptions] = None, *,
              affinity: Optional[Affinity] = None, mu: Optional[float] = None,
              truth: Optional[np.ndarray] = None, init: Optional[MultiState] = None) -> MultiFixedPoint:
    """
    Iterate the multi-group algorithm to a fixed point.

    ``truth`` holds group indices; it enables the overlap trace and the overlap
    criterion exactly as in amp_bp.run.
    """
    options = options or RunOptions()
    affinity = affinity or instance.params.affinity()
    mu = instance.params.snr_mu if mu is None else float(mu)
    if supervision.num_groups != affinity.num_groups or supervision.n_nodes != instance.n_nodes:
        raise InvalidParameterError("Supervision does not match the instance")
    if options.criterion == "overlap" and truth is None:
        raise InvalidParameterError("The overlap criterion needs ground-truth labels")

    state = init if init is not None else init_multi_state(instance, supervision, options, affinity)
    prior = instance.params.group_prior()
    track = truth is not None and supervision.revealed.size < instance.n_nodes
    trace: Optional[List[float]] = [] if track else None
    converged = False
    iters = 0

    with compute_context(options.deterministic):
        for _ in range(options.max_iters):
            new = iterate_multi(state, instance, supervision, affinity, mu, options.damping)
            iters += 1
            delta = _max_change(state, new)
            state = new
            if trace is not None:
                trace.append(overlap_multi(multi_hard_labels(state.chi_node), truth, supervision.revealed,
                                           affinity.num_groups, prior))
            logger.debug("multi iter %d: max change %.3e", iters, delta)
            if options.criterion == "overlap":
                if trace is not None and len(trace) >= 2 and abs(trace[-1] - trace[-2]) < options.overlap_tol:
                    converged = True
                    break
            elif delta < options.msg_tol:
                converged = True
                break

    if converged:
        logger.info("Multi-group AMP-BP converged in %d iterations", iters)
    else:
        logger.warning("Multi-group AMP-BP did not converge within %d iterations", options.max_iters)
    return MultiFixedPoint(
        state=state,
        converged=converged,
        iters_used=iters,
        hard_labels=multi_hard_labels(state.chi_node),
        overlap_trace=trace,
    )
