import itertools
import math

import numpy as np
import pytest

from vmpo.core import RngStream, SizeLimitError
from vmpo.tabular import (
    TabularChain,
    TabularPolicy,
    enumerate_expected_grad_mc,
    enumerate_trajectories,
    exact_kl,
    exact_kl_grad,
    exact_soft_value,
    exact_tilted_kernel,
    random_chain,
    row_kl_grad,
    soft_tilted_kernels,
    standard_chain,
    state_marginals,
)
from vmpo.verify import random_tabular_policy


def _two_state_chain(reward):
    return TabularChain(np.full((1, 2, 2), 0.5), [0.5, 0.5], reward)


def _python_kl(p, q):
    return math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def _softmax(z):
    e = [math.exp(v - max(z)) for v in z]
    s = math.fsum(e)
    return [v / s for v in e]


# Tilted kernels ----------------------------------------------------------------

def test_tilt_of_uniform_row():
    beta = 0.5
    chain = _two_state_chain([beta * math.log(2), 0.0])
    assert np.allclose(exact_tilted_kernel(chain, 1, beta)[0], [2 / 3, 1 / 3], atol=1e-15)


def test_tilt_with_zero_reward_is_reference():
    chain = random_chain(3, 2, RngStream(4), reward=np.zeros(3))
    for t in (1, 2):
        assert np.max(np.abs(exact_tilted_kernel(chain, t, 0.3) - chain.ref_kernels[t - 1])) < 1e-15


def test_tilt_matches_scalar_oracle():
    chain = random_chain(3, 1, RngStream(9))
    beta = 0.7
    tilted = exact_tilted_kernel(chain, 1, beta)
    for x in range(3):
        w = [chain.ref_kernels[0, x, y] * math.exp(chain.reward[y] / beta) for y in range(3)]
        z = math.fsum(w)
        assert np.allclose(tilted[x], [v / z for v in w], rtol=0, atol=1e-14)


def test_tilt_rejects_non_positive_beta():
    with pytest.raises(ValueError):
        exact_tilted_kernel(standard_chain(), 1, 0.0)


# Soft values ---------------------------------------------------------------------

def test_soft_value_of_constant_reward_is_constant():
    chain = random_chain(3, 3, RngStream(1), reward=np.full(3, 1.7))
    assert np.allclose(exact_soft_value(chain, 0.4), 1.7, atol=1e-13)


def test_soft_value_two_state_example():
    beta = 0.5
    chain = _two_state_chain([beta * math.log(2), 0.0])
    # V_1 = beta * log(0.5 * 2 + 0.5 * 1)
    assert np.allclose(exact_soft_value(chain, beta)[1], beta * math.log(1.5), atol=1e-15)


def test_soft_value_high_temperature_limit_is_expected_reward():
    chain = standard_chain()
    V = exact_soft_value(chain, 1e3)
    expected = state_marginals_from(chain)
    assert np.max(np.abs(V[chain.steps] - expected)) < 1e-3


def state_marginals_from(chain):
    """E_ref[r(x_0) | x_T = x] by explicit matrix products."""
    prod = np.eye(chain.num_states)
    for t in range(chain.steps, 0, -1):
        prod = prod @ chain.ref_kernels[t - 1]
    return prod @ chain.reward


def test_soft_tilt_makes_per_step_weights_constant():
    chain = standard_chain()
    beta = 0.5
    V = exact_soft_value(chain, beta)
    tilted = soft_tilted_kernels(chain, beta)
    for t in range(1, chain.steps + 1):
        ref, q = chain.ref_kernels[t - 1], tilted[t - 1]
        for x in range(chain.num_states):
            f = np.log(ref[x]) - np.log(q[x]) + (V[t - 1] - V[t, x]) / beta
            assert np.max(np.abs(f)) < 1e-9


# KL and its gradient ---------------------------------------------------------------

def test_exact_kl_examples():
    assert exact_kl([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert exact_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)
    p, q = [0.2, 0.3, 0.5], [0.4, 0.4, 0.2]
    assert exact_kl(p, q) == pytest.approx(_python_kl(p, q), abs=1e-15)


def test_exact_kl_support_violation():
    with pytest.raises(ValueError):
        exact_kl([0.5, 0.5], [1.0, 0.0])


def test_kl_grad_vanishes_at_tilt():
    chain = random_chain(3, 2, RngStream(6))
    beta = 0.6
    tilted = TabularPolicy.from_kernels(np.stack([exact_tilted_kernel(chain, t, beta) for t in (1, 2)]))
    for t in (1, 2):
        for x in range(3):
            assert np.max(np.abs(exact_kl_grad(chain, tilted, t, x, beta))) < 1e-12


def test_kl_grad_zero_for_reference_without_reward():
    chain = random_chain(3, 1, RngStream(7), reward=np.zeros(3))
    ref = TabularPolicy.reference(chain)
    assert np.max(np.abs(exact_kl_grad(chain, ref, 1, 0, 1.0))) < 1e-14


def test_kl_grad_matches_finite_differences():
    chain = random_chain(4, 1, RngStream(8))
    policy = random_tabular_policy(chain, RngStream(9))
    beta, x = 0.5, 2
    target = exact_tilted_kernel(chain, 1, beta)[x]
    z = list(policy.logits[0, x])
    h = 1e-5
    numeric = []
    for i in range(4):
        up, down = list(z), list(z)
        up[i] += h
        down[i] -= h
        numeric.append((_python_kl(_softmax(up), target) - _python_kl(_softmax(down), target)) / (2 * h))
    assert np.max(np.abs(exact_kl_grad(chain, policy, 1, x, beta) - numeric)) < 1e-6


def test_row_kl_grad_matches_exact_kl_grad():
    chain = random_chain(3, 1, RngStream(10))
    policy = random_tabular_policy(chain, RngStream(11))
    target = exact_tilted_kernel(chain, 1, 0.9)
    for x in range(3):
        assert np.allclose(row_kl_grad(policy.kernel(1, x), target[x]), exact_kl_grad(chain, policy, 1, x, 0.9),
                           atol=1e-15)


# Enumerated Monte-Carlo gradient ------------------------------------------------------

def test_enumerated_grad_matches_exact_three_states():
    chain = random_chain(3, 1, RngStream(12))
    policy = random_tabular_policy(chain, RngStream(13))
    for x in range(3):
        mc = enumerate_expected_grad_mc(chain, policy, 1, x, 2, 0.5)
        assert np.max(np.abs(mc - exact_kl_grad(chain, policy, 1, x, 0.5))) < 1e-10


def test_enumerated_grad_zero_for_reference_without_reward():
    chain = random_chain(3, 1, RngStream(14), reward=np.zeros(3))
    mc = enumerate_expected_grad_mc(chain, TabularPolicy.reference(chain), 1, 1, 2, 1.0)
    assert np.max(np.abs(mc)) < 1e-15


def test_enumerated_grad_independent_of_group_size():
    chain = random_chain(3, 2, RngStream(15))
    policy = random_tabular_policy(chain, RngStream(16))
    for t, x in itertools.product((1, 2), range(3)):
        g2 = enumerate_expected_grad_mc(chain, policy, t, x, 2, 0.4)
        g3 = enumerate_expected_grad_mc(chain, policy, t, x, 3, 0.4)
        assert np.max(np.abs(g2 - g3)) < 1e-10


def test_enumeration_size_guard():
    chain = standard_chain()
    with pytest.raises(SizeLimitError):
        enumerate_expected_grad_mc(chain, TabularPolicy.reference(chain), 1, 0, 10, 0.5)
    with pytest.raises(ValueError):
        enumerate_expected_grad_mc(chain, TabularPolicy.reference(chain), 1, 0, 1, 0.5)


# Chains, policies and marginals ---------------------------------------------------------

def test_chain_text_round_trip_is_exact(tmp_path):
    chain = random_chain(4, 3, RngStream(17))
    path = tmp_path / "chain.txt"
    chain.save(path)
    back = TabularChain.load(path)
    assert np.array_equal(back.ref_kernels, chain.ref_kernels)
    assert np.array_equal(back.prior, chain.prior)
    assert np.array_equal(back.reward, chain.reward)


@pytest.mark.parametrize("text", ["", "2\n", "2 1\n0.5 0.5\n0 1\n0.5 0.5\n", "2 1\n0.5 0.5\n0 1\n0.5 0.5\n0.9 0.3\n"])
def test_chain_from_text_rejects_malformed(text):
    with pytest.raises(ValueError):
        TabularChain.from_text(text)


def test_chain_rejects_non_stochastic_rows():
    with pytest.raises(ValueError):
        TabularChain(np.array([[[0.6, 0.6], [0.5, 0.5]]]), [0.5, 0.5], [0.0, 0.0])
    with pytest.raises(ValueError):
        TabularChain(np.full((1, 2, 2), 0.5), [0.7, 0.7], [0.0, 0.0])


def test_standard_chain_is_fixed():
    a, b = standard_chain(), standard_chain()
    assert np.array_equal(a.ref_kernels, b.ref_kernels)
    assert a.num_states == 4 and a.steps == 3


def test_policy_from_kernels_recovers_kernels():
    chain = standard_chain()
    policy = TabularPolicy.reference(chain)
    assert np.max(np.abs(policy.kernels() - chain.ref_kernels)) < 1e-15


def test_policy_logp_grad_matches_finite_differences():
    chain = random_chain(3, 2, RngStream(18))
    policy = random_tabular_policy(chain, RngStream(19))
    t_idx, x_t, x_prev = np.array([0, 1, 1]), np.array([2, 0, 0]), np.array([1, 2, 0])
    coeff = np.array([0.3, -1.2, 0.8])

    def value(flat):
        p = TabularPolicy(flat.reshape(policy.logits.shape))
        return float(np.sum(coeff * p.log_kernels()[t_idx, x_t, x_prev]))

    flat = policy.params()
    h = 1e-6
    numeric = np.array([(value(flat + h * e) - value(flat - h * e)) / (2 * h) for e in np.eye(flat.size)])
    assert np.max(np.abs(policy.logp_grad(t_idx, x_t, x_prev, coeff) - numeric)) < 1e-8


def test_state_marginals_match_trajectory_enumeration():
    chain = random_chain(3, 3, RngStream(20))
    policy = random_tabular_policy(chain, RngStream(21))
    states, prob = enumerate_trajectories(chain, policy)
    assert prob.sum() == pytest.approx(1.0, abs=1e-12)
    marg = state_marginals(chain, policy.kernels())
    for t in range(4):
        brute = np.bincount(states[:, t], weights=prob, minlength=3)
        assert np.max(np.abs(brute - marg[t])) < 1e-12


def test_trajectory_enumeration_size_guard():
    chain = random_chain(10, 6, RngStream(0))
    with pytest.raises(SizeLimitError):
        enumerate_trajectories(chain, TabularPolicy.reference(chain))
