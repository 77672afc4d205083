"""
Contextual stochastic block model: parameters, instance sampling and priors.

An instance is a sparse SBM graph on N nodes plus a P x N Gaussian-mixture
feature matrix whose centroids are tied to the same hidden groups.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .config import get_settings
from .errors import InvalidParameterError, ResourceBudgetError

logger = logging.getLogger(__name__)

# Stream ids for SeedSequence.spawn_key; never renumber, saved seeds depend on them.
STREAMS: Dict[str, int] = {
    "instance": 0,
    "supervision": 1,
    "init": 2,
    "mcmc": 3,
    "logistic": 4,
    "dense": 5,
}

EMBEDDINGS = ("antipodal", "onehot")


def derive_stream(seed: int, name: str) -> np.random.Generator:
    """
    Independent PCG64 generator for one named purpose.

    The stream for ``name`` is SeedSequence(seed, spawn_key=(STREAMS[name],)),
    so the instance, the supervision and the solver noise never share draws.
    """
    if name not in STREAMS:
        raise InvalidParameterError(f"Unknown random stream {name!r}; expected one of {sorted(STREAMS)}")
    seq = np.random.SeedSequence(entropy=int(seed) & (2 ** 64 - 1), spawn_key=(STREAMS[name],))
    return np.random.Generator(np.random.PCG64(seq))


def row_seed(master_seed: int, point: int, repeat: int) -> int:
    """64-bit seed for one (grid point, repeat) cell of a sweep."""
    seq = np.random.SeedSequence(entropy=int(master_seed) & (2 ** 64 - 1), spawn_key=(int(point), int(repeat)))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ModelParams:
    """Hyperparameters of the (binary, balanced) CSBM."""
    n_nodes: int
    feature_dim: int
    avg_degree: float
    snr_lambda: float
    snr_mu: float
    train_fraction: float = 0.0
    label_flip_keep_prob: float = 1.0
    num_groups: int = 2

    def __post_init__(self):
        if self.n_nodes <= 0 or self.feature_dim <= 0:
            raise InvalidParameterError(
                f"n_nodes and feature_dim must be positive, got N={self.n_nodes}, P={self.feature_dim}"
            )
        if self.num_groups < 2:
            raise InvalidParameterError(f"num_groups must be >= 2, got {self.num_groups}")
        if self.snr_mu < 0:
            raise InvalidParameterError(f"snr_mu must be nonnegative, got {self.snr_mu}")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise InvalidParameterError(f"train_fraction must lie in [0, 1], got {self.train_fraction}")
        if not 0.0 <= self.label_flip_keep_prob <= 1.0:
            raise InvalidParameterError(
                f"label_flip_keep_prob must lie in [0, 1], got {self.label_flip_keep_prob}"
            )
        # Validates the snr range as a side effect.
        affinity_from_snr(self.avg_degree, self.snr_lambda, self.num_groups)

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    def affinity(self) -> "Affinity":
        return affinity_from_snr(self.avg_degree, self.snr_lambda, self.num_groups)

    def group_prior(self) -> np.ndarray:
        return np.full(self.num_groups, 1.0 / self.num_groups)

    def to_dict(self) -> Dict[str, float]:
        return {
            "n_nodes": self.n_nodes,
            "feature_dim": self.feature_dim,
            "avg_degree": self.avg_degree,
            "snr_lambda": self.snr_lambda,
            "snr_mu": self.snr_mu,
            "train_fraction": self.train_fraction,
            "label_flip_keep_prob": self.label_flip_keep_prob,
            "num_groups": self.num_groups,
        }


@dataclass(frozen=True, eq=False)
class Affinity:
    """Symmetric r x r affinity matrix C; edge probability is C[a, b] / N."""
    matrix: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.matrix, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
            raise InvalidParameterError(f"Affinity must be a square matrix with r >= 2, got shape {c.shape}")
        if not np.allclose(c, c.T, rtol=0.0, atol=1e-12):
            raise InvalidParameterError("Affinity matrix must be symmetric")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise InvalidParameterError("Affinity entries must be finite and nonnegative")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "matrix", c)

    @classmethod
    def binary(cls, c_in: float, c_out: float) -> "Affinity":
        return cls(np.array([[c_in, c_out], [c_out, c_in]], dtype=np.float64))

    @property
    def num_groups(self) -> int:
        return self.matrix.shape[0]

    @property
    def c_in(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def c_out(self) -> float:
        return float(self.matrix[0, 1])

    def mean_degree(self, group_prior: Optional[np.ndarray] = None) -> float:
        prior = np.full(self.num_groups, 1.0 / self.num_groups) if group_prior is None else group_prior
        return float(prior @ self.matrix @ prior)


def affinity_from_snr(d: float, lam: float, num_groups: int = 2) -> Affinity:
    """
    Affinity of the symmetric SBM with mean degree d and graph snr lambda.

    For r groups c_in = d + (r - 1)·λ√d and c_out = d - λ√d; at r = 2 this is
    c_in = d + λ√d, c_out = d - λ√d. The detectability threshold sits at |λ| = 1.

    Raises:
        InvalidParameterError: if a probability would be negative (|λ| >= √d).
    """
    if d < 0:
        raise InvalidParameterError(f"Average degree must be nonnegative, got {d}")
    if num_groups < 2:
        raise InvalidParameterError(f"num_groups must be >= 2, got {num_groups}")
    root_d = math.sqrt(d)
    if d == 0.0:
        if lam != 0.0:
            raise InvalidParameterError("An empty graph (d = 0) only admits lambda = 0")
    elif not abs(lam) < root_d:
        raise InvalidParameterError(
            f"|lambda| must be below sqrt(d) = {root_d:.6g}, got lambda = {lam}; "
            "larger values give negative edge probabilities"
        )
    c_in = d + (num_groups - 1) * lam * root_d
    c_out = d - lam * root_d
    if c_in < 0:
        raise InvalidParameterError(
            f"lambda = {lam} gives a negative within-group affinity for {num_groups} groups"
        )
    matrix = np.full((num_groups, num_groups), c_out)
    np.fill_diagonal(matrix, c_in)
    return Affinity(matrix)


@dataclass(frozen=True, eq=False)
class Graph:
    """
    Undirected simple graph with a directed-edge index.

    Directed edge e runs src[e] -> dst[e]; edges are sorted by (src, dst) so
    the out-edges of node i are indptr[i]:indptr[i+1], and rev[e] is the id of
    dst[e] -> src[e]. The in-edges of i are therefore rev[indptr[i]:indptr[i+1]].
    """
    n_nodes: int
    edges: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rev: np.ndarray
    indptr: np.ndarray

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "Graph":
        """Build from an (M, 2) array of undirected pairs; order and orientation are free."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n_nodes):
            raise InvalidParameterError(f"Edge endpoints must lie in [0, {n_nodes})")
        if np.any(e[:, 0] == e[:, 1]):
            raise InvalidParameterError("Graph must not contain self-loops")
        lo = np.minimum(e[:, 0], e[:, 1])
        hi = np.maximum(e[:, 0], e[:, 1])
        keys = lo * n_nodes + hi
        if np.unique(keys).size != keys.size:
            raise InvalidParameterError("Graph must not contain duplicate edges")
        order = np.argsort(keys, kind="stable")
        undirected = np.stack([lo[order], hi[order]], axis=1)

        src = np.concatenate([undirected[:, 0], undirected[:, 1]])
        dst = np.concatenate([undirected[:, 1], undirected[:, 0]])
        dkeys = src * n_nodes + dst
        perm = np.argsort(dkeys, kind="stable")
        src, dst, dkeys = src[perm], dst[perm], dkeys[perm]
        rev = np.searchsorted(dkeys, dst * n_nodes + src).astype(np.int64)
        indptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n_nodes), out=indptr[1:])

        arrays = [undirected, src, dst, rev, indptr]
        for a in arrays:
            a.setflags(write=False)
        return cls(n_nodes, undirected, src, dst, rev, indptr)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_directed(self) -> int:
        return int(self.src.shape[0])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.dst[self.indptr[i]:self.indptr[i + 1]]

    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 adjacency as a CSR matrix."""
        data = np.ones(self.num_directed, dtype=np.float64)
        return sparse.csr_matrix((data, self.dst, self.indptr), shape=(self.n_nodes, self.n_nodes))


@dataclass(frozen=True, eq=False)
class Instance:
    """
    One sampled dataset.

    ``features`` is P x N stored column-major, so the P features of node i are
    contiguous. ``groups`` holds group indices; for the binary model group 0 is
    the +1 spin. ``centroids`` is (P,) for the antipodal embedding and (P, r)
    for one-hot labels.
    """
    graph: Graph
    features: np.ndarray
    groups: np.ndarray
    centroids: np.ndarray
    params: object
    seed: int
    embedding: str = "antipodal"

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[0])

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    @property
    def num_groups(self) -> int:
        return int(self.params.num_groups)

    @property
    def spins(self) -> np.ndarray:
        """Labels in {+1, -1}; only defined for two groups."""
        if self.num_groups != 2:
            raise InvalidParameterError("Spin labels are only defined for two groups")
        return (1 - 2 * self.groups).astype(np.int64)

    @property
    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_groups, dtype=np.float64)[self.groups]

    @property
    def truth_labels(self) -> np.ndarray:
        return self.spins if self.embedding == "antipodal" else self.one_hot


@dataclass(frozen=True, eq=False)
class Supervision:
    """
    Revealed nodes and the per-node label prior.

    ``priors[i, s]`` is P_{U,i}(s); for two groups column 0 is the +1 spin.
    ``observed[i]`` is the revealed (possibly flipped) group, or -1 when hidden.
    """
    revealed: np.ndarray
    priors: np.ndarray
    observed: np.ndarray
    keep_prob: float = 1.0

    @property
    def n_nodes(self) -> int:
        return int(self.priors.shape[0])

    @property
    def num_groups(self) -> int:
        return int(self.priors.shape[1])

    @property
    def node_prior_plus(self) -> np.ndarray:
        if self.num_groups != 2:
            raise InvalidParameterError("node_prior_plus is only defined for two groups")
        return self.priors[:, 0]

    @property
    def rho(self) -> float:
        return self.revealed.size / self.n_nodes

    def hidden_mask(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.revealed] = False
        return mask

    def pinned_mask(self) -> np.ndarray:
        """Nodes whose prior is a point mass (noiselessly revealed)."""
        return np.any(self.priors == 1.0, axis=1)


def _embedding_matrix(embedding: str, num_groups: int) -> np.ndarray:
    if embedding == "antipodal":
        if num_groups != 2:
            raise InvalidParameterError("The antipodal label embedding needs exactly two groups")
        return np.array([[1.0], [-1.0]])
    if embedding == "onehot":
        return np.eye(num_groups)
    raise InvalidParameterError(f"Unknown label embedding {embedding!r}; expected one of {EMBEDDINGS}")


def check_feature_budget(n_nodes: int, feature_dim: int) -> None:
    budget = get_settings().memory_budget_bytes
    requested = 8 * int(n_nodes) * int(feature_dim)
    if requested > budget:
        raise ResourceBudgetError("Feature matrix", requested, budget, "CSBM_MEMORY_BUDGET_MB")


def _draw_block_pairs(first: np.ndarray, second: np.ndarray, same: bool, count: int,
                      n_nodes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform set of ``count`` distinct pairs from a block, as keys lo*N + hi."""
    found = np.empty(0, dtype=np.int64)
    while found.size < count:
        batch = int(1.2 * (count - found.size)) + 16
        i = first[rng.integers(0, first.size, batch)]
        j = second[rng.integers(0, second.size, batch)]
        if same:
            keep = i != j
            i, j = i[keep], j[keep]
        keys = np.minimum(i, j) * n_nodes + np.maximum(i, j)
        candidates = np.concatenate([found, keys])
        # First occurrence in draw order, so the accepted set stays uniform.
        _, first_idx = np.unique(candidates, return_index=True)
        first_idx.sort()
        found = candidates[first_idx][:count]
    return found


def sample_graph(groups: np.ndarray, affinity: Affinity, rng: np.random.Generator) -> Graph:
    """
    SBM graph in O(|E|): a binomial edge count per block, then uniform endpoints
    with duplicates and self-loops rejected.
    """
    n = groups.size
    r = affinity.num_groups
    members = [np.flatnonzero(groups == a) for a in range(r)]
    keys = []
    for a in range(r):
        for b in range(a, r):
            size_a, size_b = members[a].size, members[b].size
            pairs = size_a * (size_a - 1) // 2 if a == b else size_a * size_b
            prob = affinity.matrix[a, b] / n
            if prob > 1.0:
                raise InvalidParameterError(
                    f"Edge probability C[{a},{b}]/N = {prob:.3g} exceeds 1; increase N or lower the degree"
                )
            if pairs == 0 or prob == 0.0:
                continue
            count = int(rng.binomial(pairs, prob))
            if count:
                keys.append(_draw_block_pairs(members[a], members[b], a == b, count, n, rng))
    all_keys = np.sort(np.concatenate(keys)) if keys else np.empty(0, dtype=np.int64)
    edges = np.stack([all_keys // n, all_keys % n], axis=1)
    return Graph.from_edges(n, edges)


def _sample(params, group_prior: np.ndarray, affinity: Affinity, embedding: str, seed: int) -> Instance:
    n, p = params.n_nodes, params.feature_dim
    check_feature_budget(n, p)
    emb = _embedding_matrix(embedding, affinity.num_groups)
    rng = derive_stream(seed, "instance")

    groups = rng.choice(affinity.num_groups, size=n, p=group_prior).astype(np.int64)
    graph = sample_graph(groups, affinity, rng)
    centroids = rng.standard_normal((p, emb.shape[1]))
    # Transposing an (N, P) draw gives a P x N column-major array.
    features = rng.standard_normal((n, p)).T
    if params.snr_mu > 0:
        features += math.sqrt(params.snr_mu / n) * (centroids @ emb[groups].T)
    features.setflags(write=False)
    groups.setflags(write=False)
    if embedding == "antipodal":
        centroids = centroids[:, 0].copy()
    centroids.setflags(write=False)
    logger.debug("Sampled instance N=%d P=%d |E|=%d seed=%d", n, p, graph.num_edges, seed)
    return Instance(graph, features, groups, centroids, params, int(seed), embedding)


def sample_instance(params: ModelParams, seed: int) -> Instance:
    """
    Sample a CSBM instance; identical (params, seed) give identical arrays.

    Labels are i.i.d. uniform over the groups, each pair is an edge with
    probability C[u_i, u_j]/N, and B = sqrt(mu/N)·v·uᵀ + Z.
    """
    if params.num_groups == 2:
        embedding = "antipodal"
    else:
        embedding = "onehot"
    return _sample(params, params.group_prior(), params.affinity(), embedding, seed)


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise InvalidParameterError(f"{name} must lie in [0, 1], got {value}")


def make_supervision(instance: Instance, rho: float, keep_prob: float = 1.0, seed: Optional[int] = None,
                     group_prior: Optional[Sequence[float]] = None) -> Supervision:
    """
    Reveal round(rho·N) nodes chosen uniformly, independently of the groups.

    A revealed label is the true one with probability ``keep_prob``; otherwise it
    is another group (the opposite spin when r = 2). The prior is keep_prob on
    the observed group and the rest spread evenly over the other groups; hidden
    nodes get ``group_prior`` (uniform by default).
    """
    _check_fraction("rho", rho)
    _check_fraction("keep_prob", keep_prob)
    n = instance.n_nodes
    r = instance.num_groups
    prior = np.full(r, 1.0 / r) if group_prior is None else np.asarray(group_prior, dtype=np.float64)
    if prior.shape != (r,) or np.any(prior < 0) or not math.isclose(prior.sum(), 1.0, abs_tol=1e-12):
        raise InvalidParameterError("group_prior must be a probability vector over the groups")

    rng = derive_stream(instance.seed if seed is None else seed, "supervision")
    size = int(math.floor(rho * n + 0.5))
    revealed = np.sort(rng.choice(n, size=size, replace=False)).astype(np.int64)

    truth = instance.groups[revealed]
    flip = rng.random(size) >= keep_prob
    shift = rng.integers(1, r, size=size)
    observed_revealed = np.where(flip, (truth + shift) % r, truth)

    priors = np.tile(prior, (n, 1))
    if size:
        priors[revealed] = (1.0 - keep_prob) / (r - 1)
        priors[revealed, observed_revealed] = keep_prob
    observed = np.full(n, -1, dtype=np.int64)
    observed[revealed] = observed_revealed
    for a in (revealed, priors, observed):
        a.setflags(write=False)
    return Supervision(revealed, priors, observed, keep_prob)


def detectability_threshold(mu: float, alpha: float) -> Optional[float]:
    """
    Graph snr lambda_c = sqrt(1 - mu²/alpha) below which unsupervised recovery fails.

    Returns:
        lambda_c, or None when mu²/alpha > 1 (the features alone already make the
        groups detectable, so there is no threshold).
    """
    if alpha <= 0 or not math.isfinite(alpha):
        raise InvalidParameterError(f"alpha must be finite and positive, got {alpha}")
    ratio = mu * mu / alpha
    if ratio > 1.0:
        return None
    return math.sqrt(1.0 - ratio)


def effective_snr(lam: float, mu: float, alpha: float) -> float:
    return lam * lam + mu * mu / alpha


def params_from_phi_eps(phi: float, eps: float, alpha: float, d: Optional[float] = None) -> Tuple[float, float]:
    """
    Invert lambda² + mu²/alpha = 1 + eps and phi = (2/pi)·arctan(lambda·sqrt(alpha)/mu).

    Returns:
        (lambda, mu)
    """
    if not -1.0 <= phi <= 1.0:
        raise InvalidParameterError(f"phi must lie in [-1, 1], got {phi}")
    if eps < -1.0:
        raise InvalidParameterError(f"eps must be >= -1, got {eps}")
    if alpha <= 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    scale = math.sqrt(1.0 + eps)
    angle = math.pi * phi / 2.0
    lam = scale * math.sin(angle)
    mu = math.sqrt(alpha) * scale * math.cos(angle)
    if abs(phi) == 1.0:
        mu = 0.0
    if d is not None and d > 0 and not abs(lam) < math.sqrt(d):
        raise InvalidParameterError(f"phi={phi}, eps={eps} gives |lambda| = {abs(lam):.4g} >= sqrt(d)")
    return lam, mu


def phi_eps_from_params(lam: float, mu: float, alpha: float) -> Tuple[float, float]:
    """Forward map of params_from_phi_eps."""
    if alpha <= 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    phi = 2.0 / math.pi * math.atan2(lam * math.sqrt(alpha), mu)
    return phi, effective_snr(lam, mu, alpha) - 1.0
