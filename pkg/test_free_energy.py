#!/usr/bin/env python3
"""
Tests for the Bethe free entropy, its gradient and the EM parameter fit.
"""
import math
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, '.')

from csbm.amp_bp import RunOptions, run
from csbm.errors import InvalidParameterError
from csbm.free_energy import (
    EmOptions,
    bethe_free_entropy,
    compare_initializations,
    em_fit,
    em_step,
    feature_term,
    free_entropy_gradient,
)
from csbm.model import Affinity, ModelParams, make_supervision, sample_instance


def null_setup(seed: int = 1):
    params = ModelParams(n_nodes=1000, feature_dim=100, avg_degree=3.0, snr_lambda=0.0, snr_mu=0.0)
    instance = sample_instance(params, seed)
    supervision = make_supervision(instance, 0.0, seed=seed)
    fixed_point = run(instance, supervision, RunOptions(seed=seed))
    return instance, supervision, fixed_point


def signal_setup(seed: int = 2, n: int = 1200):
    params = ModelParams(n_nodes=n, feature_dim=n // 10, avg_degree=5.0, snr_lambda=1.2, snr_mu=2.0)
    instance = sample_instance(params, seed)
    supervision = make_supervision(instance, 0.1, seed=seed)
    fixed_point = run(instance, supervision, RunOptions(max_iters=300, seed=seed))
    return instance, supervision, fixed_point


def test_null_model_closed_form():
    """With c_in = c_out and μ = 0, φ = -d/2 + (|E|/N)·log d."""
    print("=" * 60)
    print("Testing Bethe free entropy at the null model")
    print("=" * 60)
    instance, supervision, fixed_point = null_setup()
    assert fixed_point.converged
    n = instance.n_nodes
    expected = -3.0 / 2.0 + instance.graph.num_edges / n * math.log(3.0)
    value = bethe_free_entropy(fixed_point, instance, supervision)
    assert value.converged and value.warning is None
    assert value.phi == pytest.approx(expected, abs=1e-10)
    print(f"✓ φ = {value.phi:.8f}")


def test_factorized_feature_term_matches_double_sum():
    instance, supervision, fixed_point = signal_setup()
    mu = instance.params.snr_mu
    fast = feature_term(fixed_point, instance, mu)
    slow = feature_term(fixed_point, instance, mu, naive=True)
    assert fast == pytest.approx(slow, rel=1e-9, abs=1e-8)
    naive_phi = bethe_free_entropy(fixed_point, instance, supervision, naive=True).phi
    assert bethe_free_entropy(fixed_point, instance, supervision).phi == pytest.approx(naive_phi, abs=1e-9)


def test_symmetric_gradient():
    """At the symmetric point ∂φ/∂c_in = ∂φ/∂c_out = -1/4 + |E|/(2dN)."""
    instance, _, fixed_point = null_setup(seed=3)
    d_cin, d_cout, d_mu = free_entropy_gradient(fixed_point, instance)
    expected = -0.25 + instance.graph.num_edges / (2.0 * 3.0 * instance.n_nodes)
    assert d_cin == pytest.approx(expected, abs=1e-12)
    assert d_cout == pytest.approx(d_cin, abs=1e-12)
    assert d_mu is None


def test_gradient_matches_finite_differences():
    """Central differences of φ over fresh fixed points agree with the analytic gradient."""
    instance, supervision, fixed_point = null_setup(seed=11)
    d_cin, d_cout, _ = free_entropy_gradient(fixed_point, instance)
    eps = 1e-3

    def phi_at(c_in, c_out):
        shifted = run(instance, supervision, RunOptions(seed=11), affinity=Affinity.binary(c_in, c_out))
        return bethe_free_entropy(shifted, instance, supervision).phi

    fd_cin = (phi_at(3.0 + eps, 3.0) - phi_at(3.0 - eps, 3.0)) / (2.0 * eps)
    fd_cout = (phi_at(3.0, 3.0 + eps) - phi_at(3.0, 3.0 - eps)) / (2.0 * eps)
    assert fd_cin == pytest.approx(d_cin, abs=5e-3)
    assert fd_cout == pytest.approx(d_cout, abs=5e-3)


@pytest.mark.parametrize("lam,mu,rho,scale", [
    (1.2, 2.0, 0.1, (1.2, 0.8, 1.5)),
    (1.5, 1.5, 0.05, (0.9, 1.1, 0.7)),
])
def test_gradient_matches_finite_differences_with_features(lam, mu, rho, scale):
    """Away from the true parameters all three components match central differences of φ."""
    params = ModelParams(n_nodes=2000, feature_dim=200, avg_degree=5.0, snr_lambda=lam, snr_mu=mu)
    instance = sample_instance(params, 15)
    supervision = make_supervision(instance, rho, seed=15)
    truth = params.affinity()
    point = np.array([scale[0] * truth.c_in, scale[1] * truth.c_out, scale[2] * mu])
    options = RunOptions(max_iters=3000, msg_tol=1e-11, init_mode="planted")
    base = run(instance, supervision, options, affinity=Affinity.binary(point[0], point[1]), mu=point[2])
    assert base.converged
    analytic = free_entropy_gradient(base, instance)
    warm = replace(base.state, iter=0)

    def phi_at(shifted):
        fixed_point = run(instance, supervision, options, affinity=Affinity.binary(shifted[0], shifted[1]),
                          mu=shifted[2], init=warm)
        assert fixed_point.converged
        return bethe_free_entropy(fixed_point, instance, supervision).phi

    eps = 1e-3
    for k in range(3):
        step = np.zeros(3)
        step[k] = eps
        numeric = (phi_at(point + step) - phi_at(point - step)) / (2.0 * eps)
        print(f"  component {k}: analytic {analytic[k]:.6f}, finite difference {numeric:.6f}")
        assert numeric == pytest.approx(analytic[k], rel=0.05, abs=1e-3)


def test_gradient_has_mu_component_with_features():
    instance, _, fixed_point = signal_setup(seed=4, n=800)
    d_cin, d_cout, d_mu = free_entropy_gradient(fixed_point, instance)
    assert all(math.isfinite(x) for x in (d_cin, d_cout, d_mu))


def test_em_step_degree_consistency():
    """(c_in + c_out)/2 from one update equals 2|E|/N at any fixed point."""
    for instance, _, fixed_point in (null_setup(seed=5), signal_setup(seed=5)):
        update = em_step(fixed_point, instance)
        mean_degree = 2.0 * instance.graph.num_edges / instance.n_nodes
        assert (update.c_in + update.c_out) / 2.0 == pytest.approx(mean_degree, abs=1e-9)
        assert update.c_in >= 0.0 and update.c_out >= 0.0


def test_em_step_uninformative_mu():
    """At μ = 0 with no revealed nodes û and v̂ vanish, so μ is kept."""
    instance, _, fixed_point = null_setup(seed=6)
    update = em_step(fixed_point, instance)
    assert not update.mu_informative
    assert update.mu == 0.0


def test_unconverged_value_carries_warning():
    params = ModelParams(n_nodes=500, feature_dim=50, avg_degree=4.0, snr_lambda=1.0, snr_mu=1.0)
    instance = sample_instance(params, 7)
    supervision = make_supervision(instance, 0.0, seed=7)
    fixed_point = run(instance, supervision, RunOptions(max_iters=1, msg_tol=1e-15))
    value = bethe_free_entropy(fixed_point, instance, supervision)
    assert not value.converged
    assert "not converged" in value.warning


def test_em_fit_bookkeeping():
    """The trace holds one row per outer step at the parameters that step ran with."""
    instance, supervision, _ = signal_setup(seed=8, n=800)
    truth = instance.params.affinity()
    init = (truth.c_in, truth.c_out, instance.params.snr_mu)
    estimate = em_fit(instance, supervision, init, EmOptions(max_outer=3, tol=1e-12,
                                                            run_options=RunOptions(max_iters=100, seed=8)))
    assert not estimate.converged and not estimate.aborted
    assert len(estimate.trace) == 3
    assert estimate.trace[0][1:4] == pytest.approx(init)
    assert [row[0] for row in estimate.trace] == [1, 2, 3]
    assert min(estimate.c_in, estimate.c_out, estimate.mu) >= 0.0
    with pytest.raises(InvalidParameterError):
        em_fit(instance, supervision, (1.0, 2.0))
    with pytest.raises(InvalidParameterError):
        EmOptions(damping=1.0)


@pytest.mark.slow
def test_em_recovers_parameters():
    """N = 3·10⁴, d = 5, λ = 1, μ = 2, ρ = 0.1: EM from a perturbed start lands within 5% with φ never decreasing."""
    print("=" * 60)
    print("Testing EM parameter recovery")
    print("=" * 60)
    params = ModelParams(n_nodes=30_000, feature_dim=3000, avg_degree=5.0, snr_lambda=1.0, snr_mu=2.0)
    instance = sample_instance(params, 0)
    supervision = make_supervision(instance, 0.1, seed=0)
    truth = params.affinity()
    init = (1.3 * truth.c_in, 0.7 * truth.c_out, 1.5 * params.snr_mu)
    estimate = em_fit(instance, supervision, init, EmOptions(run_options=RunOptions(seed=0)))
    print(f"  c_in={estimate.c_in:.3f} c_out={estimate.c_out:.3f} mu={estimate.mu:.3f}")
    assert estimate.converged
    assert estimate.c_in == pytest.approx(truth.c_in, rel=0.05)
    assert estimate.c_out == pytest.approx(truth.c_out, rel=0.05)
    assert estimate.mu == pytest.approx(params.snr_mu, rel=0.05)
    phis = np.array([row[4] for row in estimate.trace])
    assert np.all(np.diff(phis) >= -1e-6)

    # Started at its own output the fit is already stationary.
    fitted = (estimate.c_in, estimate.c_out, estimate.mu)
    restart = em_fit(instance, supervision, fitted, EmOptions(run_options=RunOptions(seed=0)))
    assert restart.converged
    assert len(restart.trace) <= 3
    assert (restart.c_in, restart.c_out, restart.mu) == pytest.approx(fitted, rel=1e-3)
    print("✓ EM works")


@pytest.mark.slow
def test_random_and_planted_starts_agree_above_threshold():
    params = ModelParams(n_nodes=3000, feature_dim=300, avg_degree=5.0, snr_lambda=1.5, snr_mu=2.0)
    instance = sample_instance(params, 10)
    supervision = make_supervision(instance, 0.1, seed=10)
    phi_random, phi_planted = compare_initializations(instance, supervision, RunOptions(max_iters=500, seed=10))
    assert phi_random.phi == pytest.approx(phi_planted.phi, abs=1e-3)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
