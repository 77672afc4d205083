#!/usr/bin/env python3
"""
Tests for AMP-BP on the binary CSBM.
"""
import math
import sys

import numpy as np
import pytest

sys.path.insert(0, '.')

from csbm.amp_bp import RunOptions, hard_labels, init_state, iterate, magnetization, max_change, mse_v, overlap, run
from csbm.errors import EmptyTestSetError, InvalidParameterError
from csbm.model import Graph, Instance, ModelParams, Supervision, make_supervision, sample_instance
from csbm.oracles import exact_marginals


def tree_instance(n: int, seed: int) -> Instance:
    """Random recursive tree on n nodes with feature snr 0."""
    rng = np.random.default_rng(seed)
    edges = [(int(rng.integers(0, child)), child) for child in range(1, n)]
    params = ModelParams(n_nodes=n, feature_dim=4, avg_degree=2.0, snr_lambda=1.0, snr_mu=0.0)
    groups = rng.integers(0, 2, n).astype(np.int64)
    features = np.asfortranarray(rng.standard_normal((4, n)))
    return Instance(Graph.from_edges(n, edges), features, groups, np.zeros(4), params, seed)


def test_overlap():
    """q_U is 1 for perfect or globally flipped labels and ignores revealed nodes."""
    print("=" * 60)
    print("Testing overlap")
    print("=" * 60)
    truth = np.array([1, -1, 1, -1, 1, 1])
    assert overlap(truth, truth, np.array([], dtype=np.int64)) == 1.0
    assert overlap(-truth, truth, np.array([], dtype=np.int64)) == 1.0
    guess = truth.copy()
    guess[0] = -guess[0]
    assert overlap(guess, truth, np.array([0])) == 1.0
    assert overlap(guess, truth, np.array([], dtype=np.int64)) == pytest.approx(2.0 * 5.0 / 6.0 - 1.0)
    with pytest.raises(EmptyTestSetError):
        overlap(truth, truth, np.arange(6))
    assert np.array_equal(hard_labels(np.array([0.0, -0.2, 0.3])), [1, -1, 1])
    assert magnetization(np.array([1.0, -1.0]), np.array([1, -1])) == 1.0
    assert mse_v(np.zeros(3), np.ones(3)) == 1.0
    print("✓ Overlap works")


def test_run_options_validation():
    with pytest.raises(InvalidParameterError):
        RunOptions(damping=1.0)
    with pytest.raises(InvalidParameterError):
        RunOptions(criterion="energy")
    with pytest.raises(InvalidParameterError):
        RunOptions(max_iters=0)


@pytest.mark.parametrize("seed", range(1, 21))
def test_tree_marginals_match_enumeration(seed):
    """At mu = 0 on a tree, converged marginals are exact for the factor graph AMP-BP iterates on."""
    print("=" * 60)
    print("Testing tree exactness")
    print("=" * 60)
    n = 8 + seed % 7
    instance = tree_instance(n, seed)
    supervision = make_supervision(instance, 0.3, keep_prob=0.9, seed=seed)
    fixed_point = run(instance, supervision, RunOptions(max_iters=2000, msg_tol=1e-13, seed=seed))
    assert fixed_point.converged
    state = fixed_point.state
    exact = exact_marginals(instance, supervision, mean_field=(state.field_plus, state.field_minus))
    gap = float(np.max(np.abs(state.chi_plus_node - exact.prob_plus)))
    print(f"  N={n}: max gap {gap:.2e}")
    assert gap < 1e-8
    print("✓ BP is exact on trees")


def test_fixed_point_properties():
    """Messages stay in [0, 1], σ_V(1 + A_U) = 1, and one more step barely moves a converged state."""
    params = ModelParams(n_nodes=1500, feature_dim=150, avg_degree=5.0, snr_lambda=1.2, snr_mu=2.0)
    instance = sample_instance(params, 4)
    supervision = make_supervision(instance, 0.1, seed=4)
    options = RunOptions(max_iters=500, msg_tol=1e-8, seed=4)
    fixed_point = run(instance, supervision, options, truth=instance.spins)
    state = fixed_point.state
    assert fixed_point.converged
    assert np.all((state.chi_plus_dir >= -1e-12) & (state.chi_plus_dir <= 1.0 + 1e-12))
    assert np.all((state.chi_plus_node >= -1e-12) & (state.chi_plus_node <= 1.0 + 1e-12))
    assert state.sigma_v * (1.0 + state.a_u) == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(state.u_hat, 2.0 * state.chi_plus_node - 1.0)

    again = iterate(state, instance, supervision, fixed_point.affinity, fixed_point.mu)
    assert max_change(state, again) < 1e-6
    assert len(fixed_point.overlap_trace) == fixed_point.iters_used


def test_revealed_nodes_stay_pinned():
    """Noiselessly revealed nodes keep marginals of exactly 0 or 1."""
    params = ModelParams(n_nodes=800, feature_dim=80, avg_degree=4.0, snr_lambda=1.0, snr_mu=1.0)
    instance = sample_instance(params, 8)
    supervision = make_supervision(instance, 0.2, seed=8)
    fixed_point = run(instance, supervision, RunOptions(max_iters=50, seed=8))
    revealed = supervision.revealed
    expected = (supervision.observed[revealed] == 0).astype(float)
    assert np.array_equal(fixed_point.state.chi_plus_node[revealed], expected)


def test_no_signal_gives_no_overlap():
    """With λ = μ = ρ = 0 the labels are unrecoverable."""
    n = 2000
    params = ModelParams(n_nodes=n, feature_dim=200, avg_degree=5.0, snr_lambda=0.0, snr_mu=0.0)
    instance = sample_instance(params, 21)
    supervision = make_supervision(instance, 0.0, seed=21)
    fixed_point = run(instance, supervision, RunOptions(max_iters=100, seed=21))
    q_u = overlap(fixed_point.hard_labels, instance.spins, supervision.revealed)
    assert q_u < 4.0 / math.sqrt(n)


def test_recovers_labels_above_threshold():
    """λ² + μ²/α > 1 gives a clearly positive overlap."""
    print("=" * 60)
    print("Testing recovery above threshold")
    print("=" * 60)
    params = ModelParams(n_nodes=3000, feature_dim=300, avg_degree=5.0, snr_lambda=1.0, snr_mu=2.0,
                         train_fraction=0.1)
    instance = sample_instance(params, 0)
    supervision = make_supervision(instance, 0.1, seed=0)
    fixed_point = run(instance, supervision, RunOptions(seed=0), truth=instance.spins)
    q_u = overlap(fixed_point.hard_labels, instance.spins, supervision.revealed)
    print(f"  q_U = {q_u:.3f} after {fixed_point.iters_used} iterations")
    assert q_u > 0.25
    print("✓ Recovery works")


def test_runs_are_reproducible():
    params = ModelParams(n_nodes=500, feature_dim=50, avg_degree=4.0, snr_lambda=1.0, snr_mu=1.5)
    instance = sample_instance(params, 6)
    supervision = make_supervision(instance, 0.05, seed=6)
    first = run(instance, supervision, RunOptions(max_iters=30, seed=9))
    second = run(instance, supervision, RunOptions(max_iters=30, seed=9, deterministic=True))
    assert np.allclose(first.state.chi_plus_node, second.state.chi_plus_node, atol=1e-12)


def test_planted_start_and_overlap_criterion():
    """The overlap criterion needs truth; a planted start begins at the true labels."""
    params = ModelParams(n_nodes=500, feature_dim=50, avg_degree=4.0, snr_lambda=1.5, snr_mu=2.0)
    instance = sample_instance(params, 7)
    supervision = make_supervision(instance, 0.0, seed=7)
    with pytest.raises(InvalidParameterError):
        run(instance, supervision, RunOptions(criterion="overlap"))
    state = init_state(instance, supervision, RunOptions(init_mode="planted"))
    assert np.array_equal(state.u_hat, instance.spins.astype(float))
    fixed_point = run(instance, supervision, RunOptions(criterion="overlap", init_mode="planted", max_iters=200),
                      truth=instance.spins)
    assert fixed_point.converged
    assert fixed_point.iters_used >= 2


def symmetry_setup(seed: int = 12):
    params = ModelParams(n_nodes=1000, feature_dim=100, avg_degree=5.0, snr_lambda=1.2, snr_mu=2.0)
    instance = sample_instance(params, seed)
    supervision = make_supervision(instance, 0.1, keep_prob=0.9, seed=seed)
    options = RunOptions(max_iters=1000, msg_tol=1e-11, init_mode="planted")
    return instance, supervision, options


def test_node_relabeling_equivariance():
    """Renumbering the nodes renumbers the fixed point and leaves v̂ unchanged."""
    instance, supervision, options = symmetry_setup()
    n = instance.n_nodes
    order = np.random.default_rng(0).permutation(n)
    position = np.argsort(order)
    relabeled = Instance(
        Graph.from_edges(n, position[instance.graph.edges]),
        np.asfortranarray(instance.features[:, order]),
        instance.groups[order],
        instance.centroids,
        instance.params,
        instance.seed,
    )
    relabeled_supervision = Supervision(
        np.sort(position[supervision.revealed]),
        supervision.priors[order],
        supervision.observed[order],
        supervision.keep_prob,
    )
    original = run(instance, supervision, options)
    moved = run(relabeled, relabeled_supervision, options)
    assert original.converged and moved.converged
    assert np.allclose(moved.state.chi_plus_node, original.state.chi_plus_node[order], atol=1e-8, rtol=0.0)
    assert np.allclose(moved.state.v_hat, original.state.v_hat, atol=1e-8, rtol=0.0)
    assert np.array_equal(moved.hard_labels, original.hard_labels[order])


def test_global_sign_symmetry():
    """Flipping every label and the centroids keeps B; the fixed point flips with them."""
    instance, supervision, options = symmetry_setup()
    flipped = Instance(instance.graph, instance.features, 1 - instance.groups, -instance.centroids,
                       instance.params, instance.seed)
    observed = np.asarray(supervision.observed)
    flipped_supervision = Supervision(
        supervision.revealed,
        supervision.priors[:, ::-1].copy(),
        np.where(observed >= 0, 1 - observed, -1),
        supervision.keep_prob,
    )
    original = run(instance, supervision, options)
    mirrored = run(flipped, flipped_supervision, options)
    assert original.converged and mirrored.converged
    assert np.allclose(mirrored.state.chi_plus_node, 1.0 - original.state.chi_plus_node, atol=1e-8, rtol=0.0)
    assert np.allclose(mirrored.state.u_hat, -original.state.u_hat, atol=1e-8, rtol=0.0)
    assert np.allclose(mirrored.state.v_hat, -original.state.v_hat, atol=1e-8, rtol=0.0)
    q_original = overlap(original.hard_labels, instance.spins, supervision.revealed)
    q_mirrored = overlap(mirrored.hard_labels, flipped.spins, supervision.revealed)
    assert q_mirrored == pytest.approx(q_original, abs=2.0 / n_hidden(supervision))


def n_hidden(supervision: Supervision) -> int:
    return int(supervision.hidden_mask().sum())


def test_centroid_estimate_at_high_snr():
    """With μ = 20 and almost perfect labels the centroid error is close to 1/(1 + μ)."""
    mu = 20.0
    params = ModelParams(n_nodes=2000, feature_dim=200, avg_degree=5.0, snr_lambda=1.5, snr_mu=mu)
    instance = sample_instance(params, 13)
    supervision = make_supervision(instance, 0.1, seed=13)
    fixed_point = run(instance, supervision, RunOptions(max_iters=500, seed=13))
    error = mse_v(fixed_point.state.v_hat, instance.centroids)
    print(f"  mse_v = {error:.4f}")
    assert fixed_point.converged
    assert error < 0.1
    assert error == pytest.approx(1.0 / (1.0 + mu), abs=0.03)


@pytest.mark.parametrize("lam", [0.8, 1.2, 2.0])
def test_overlap_criterion_iteration_count(lam):
    """α = 10, μ² = 4, d = 5, ρ = 0.1: stopping on a 10⁻³ overlap change takes between 5 and 40 iterations."""
    params = ModelParams(n_nodes=3000, feature_dim=300, avg_degree=5.0, snr_lambda=lam, snr_mu=2.0)
    counts = []
    for seed in range(5):
        instance = sample_instance(params, seed)
        supervision = make_supervision(instance, 0.1, seed=seed)
        fixed_point = run(instance, supervision, RunOptions(criterion="overlap", seed=seed), truth=instance.spins)
        assert fixed_point.converged
        counts.append(fixed_point.iters_used)
    mean = float(np.mean(counts))
    print(f"  λ = {lam}: mean iterations {mean:.1f}")
    assert 5.0 <= mean <= 40.0


@pytest.mark.slow
def test_overlap_criterion_iteration_count_across_sizes():
    means = []
    for n in (3000, 10_000, 30_000):
        params = ModelParams(n_nodes=n, feature_dim=n // 10, avg_degree=5.0, snr_lambda=1.2, snr_mu=2.0)
        counts = []
        for seed in range(5):
            instance = sample_instance(params, seed)
            supervision = make_supervision(instance, 0.1, seed=seed)
            fixed_point = run(instance, supervision, RunOptions(criterion="overlap", seed=seed),
                              truth=instance.spins)
            counts.append(fixed_point.iters_used)
        means.append(float(np.mean(counts)))
    print(f"  mean iterations per size: {means}")
    assert max(means) <= 1.5 * min(means)


def test_overlap_grows_with_supervision():
    """More revealed labels never lower the test overlap."""
    params = ModelParams(n_nodes=3000, feature_dim=300, avg_degree=5.0, snr_lambda=1.0, snr_mu=2.0)
    instance = sample_instance(params, 14)
    scores = []
    for rho in (0.0, 0.1, 0.3, 0.5):
        supervision = make_supervision(instance, rho, seed=14)
        fixed_point = run(instance, supervision, RunOptions(max_iters=500, seed=14))
        scores.append(overlap(fixed_point.hard_labels, instance.spins, supervision.revealed))
    print(f"  q_U by rho: {[round(q, 3) for q in scores]}")
    assert all(later >= earlier - 0.01 for earlier, later in zip(scores, scores[1:]))
    assert scores[-1] > scores[0]


def test_non_convergence_is_reported():
    params = ModelParams(n_nodes=500, feature_dim=50, avg_degree=4.0, snr_lambda=1.0, snr_mu=1.0)
    instance = sample_instance(params, 3)
    supervision = make_supervision(instance, 0.0, seed=3)
    fixed_point = run(instance, supervision, RunOptions(max_iters=1, msg_tol=1e-15))
    assert not fixed_point.converged
    assert fixed_point.iters_used == 1


@pytest.mark.slow
@pytest.mark.parametrize("lam,below", [(0.6, True), (1.0, False)])
def test_detectability_threshold_at_scale(lam, below):
    """μ² = 4, α = 10, d = 5: the transition sits at λ ≈ 0.775."""
    n = 30_000
    params = ModelParams(n_nodes=n, feature_dim=n // 10, avg_degree=5.0, snr_lambda=lam, snr_mu=2.0)
    overlaps = []
    for seed in range(3):
        instance = sample_instance(params, seed)
        supervision = make_supervision(instance, 0.0, seed=seed)
        fixed_point = run(instance, supervision, RunOptions(seed=seed))
        overlaps.append(overlap(fixed_point.hard_labels, instance.spins, supervision.revealed))
    mean = float(np.mean(overlaps))
    print(f"  λ = {lam}: mean q_U = {mean:.3f}")
    if below:
        assert mean < 0.05
    else:
        assert mean > 0.15


@pytest.mark.slow
def test_supervision_lifts_sub_threshold_overlap():
    n = 30_000
    params = ModelParams(n_nodes=n, feature_dim=n // 10, avg_degree=5.0, snr_lambda=0.5, snr_mu=2.0)
    gains = []
    for seed in range(3):
        instance = sample_instance(params, seed)
        scores = []
        for rho in (0.0, 0.1):
            supervision = make_supervision(instance, rho, seed=seed)
            fixed_point = run(instance, supervision, RunOptions(seed=seed))
            scores.append(overlap(fixed_point.hard_labels, instance.spins, supervision.revealed))
        gains.append(scores[1] - scores[0])
    assert float(np.mean(gains)) > 0.1


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
