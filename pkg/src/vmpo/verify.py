"""Deterministic oracle checks: enumeration identities, bounds and finite differences."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, SizeLimitError, Trajectory
from .smc import PotentialSpec, check_potential_constraint, transition_log_potentials
from .tabular import (
    ENUMERATION_LIMIT,
    TabularChain,
    TabularPolicy,
    enumerate_expected_grad_mc,
    enumerate_expected_loss_mc,
    enumerate_trajectories,
    exact_kl_grad,
    exact_log_variance_loss,
    exact_soft_value,
    soft_tilted_kernels,
)

IDENTITY_TOL = 1e-9
BOUND_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_err: float
    extra: dict = field(default_factory=dict)
    details: object = None

    def line(self) -> str:
        status = "pass" if self.passed else "fail"
        tail = "".join(f" {k}={float(v)!r}" for k, v in self.extra.items())
        return f"check={self.name} status={status} max_err={self.max_err!r}{tail}"


def check_gradient_identity(chain: TabularChain, policy: TabularPolicy, beta: float, K: int,
                                  reward=None) -> CheckResult:
    """Enumerated expected Monte-Carlo gradient against the exact KL gradient, per row."""
    T, S = chain.steps, chain.num_states
    errs = np.zeros((T, S))
    for t in range(1, T + 1):
        for x in range(S):
            mc = enumerate_expected_grad_mc(chain, policy, t, x, K, beta, reward)
            exact = exact_kl_grad(chain, policy, t, x, beta, reward)
            errs[t - 1, x] = np.max(np.abs(mc - exact))
    worst = float(errs.max())
    return CheckResult(f"gradient_identity_K{K}", worst < IDENTITY_TOL, worst, details=errs)


def _trajectory_rewards(chain: TabularChain, states, value_table=None):
    T = chain.steps
    if value_table is not None:
        return np.asarray(value_table)[np.arange(T + 1), states]
    rewards = np.zeros(states.shape, dtype=float)
    rewards[:, :T] = chain.reward[states[:, :T]]
    return rewards


def check_variance_bound(chain: TabularChain, policy: TabularPolicy, spec: PotentialSpec, beta: float):
    """Exact ``(lhs, rhs, slack)`` of the trajectory-variance bound under the policy.

    Per-step log-weights cover the T transitions; the initial potential on
    ``x_T`` is shared with the prior and left out of both sides.
    """
    states, prob = enumerate_trajectories(chain, policy)
    T = chain.steps
    log_k = policy.log_kernels()
    with np.errstate(divide="ignore"):
        log_ref = np.log(chain.ref_kernels)
    t_idx = np.arange(T)
    ratio = log_ref[t_idx, states[:, 1:], states[:, :-1]] - log_k[t_idx, states[:, 1:], states[:, :-1]]
    rewards = _trajectory_rewards(chain, states, spec.value_table)
    log_w = ratio + transition_log_potentials(spec, beta, rewards)
    keep = prob > 0
    prob, log_w = prob[keep], log_w[keep]

    def var(a):
        m = np.sum(prob * a)
        return float(np.sum(prob * (a - m) ** 2))

    lhs = var(log_w.sum(axis=1))
    rhs = T * sum(var(log_w[:, t]) for t in range(T))
    return lhs, rhs, rhs - lhs


def finite_diff_check(loss, params, step: float = 1e-5, tol: float = 1e-6) -> CheckResult:
    """Central differences against the analytic gradient of ``loss(params) -> (value, grad)``.

    The error is normwise: ``max|analytic - numeric| / max(|numeric|, |analytic|)``.
    """
    if not step > 0:
        raise ValueError("step must be > 0")
    params = np.array(params, dtype=float)
    _, analytic = loss(params.copy())
    analytic = np.ravel(np.asarray(analytic, dtype=float))
    numeric = np.zeros_like(params.ravel())
    flat = params.ravel()
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = step
        hi = loss((flat + e).reshape(params.shape))[0]
        lo = loss((flat - e).reshape(params.shape))[0]
        numeric[i] = (hi - lo) / (2 * step)
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0))
    err = 0.0 if scale == 0 else float(np.max(np.abs(analytic - numeric)) / scale)
    return CheckResult("finite_diff", err < tol, err)


def check_biased_loss_unbiased_grad(chain: TabularChain, beta: float, K: int, policy: TabularPolicy | None = None,
                                    reward=None) -> tuple[float, float]:
    """``(loss bias, grad gap)``, each maximised over rows, by tuple enumeration."""
    policy = TabularPolicy.reference(chain) if policy is None else policy
    bias = gap = 0.0
    for t in range(1, chain.steps + 1):
        for x in range(chain.num_states):
            est = enumerate_expected_loss_mc(chain, policy, t, x, K, beta, reward)
            bias = max(bias, abs(est - exact_log_variance_loss(chain, policy, t, x, beta, reward)))
            mc = enumerate_expected_grad_mc(chain, policy, t, x, K, beta, reward)
            gap = max(gap, float(np.max(np.abs(mc - exact_kl_grad(chain, policy, t, x, beta, reward)))))
    return bias, gap


def random_tabular_policy(chain: TabularChain, rng: RngStream, scale: float = 1.0) -> TabularPolicy:
    return TabularPolicy(scale * rng.normal((chain.steps, chain.num_states, chain.num_states)))


def random_trajectory(chain: TabularChain, rng: RngStream, value_table=None) -> Trajectory:
    """A random state path with random policy log-densities and chain-consistent rewards."""
    T, S = chain.steps, chain.num_states
    states = np.floor(rng.uniform(T + 1) * S).astype(int)
    rewards = _trajectory_rewards(chain, states[None, :], value_table)[0]
    lp = np.log(rng.uniform(T) * 0.9 + 0.05)
    ref = np.log(chain.ref_kernels[np.arange(T), states[1:], states[:-1]])
    return Trajectory(states, lp, lp.copy(), ref, rewards)


def run_all_checks(chain: TabularChain, beta: float, K: int, seed: int = 0, gaussian_chain=None) -> list[CheckResult]:
    """The full oracle suite on one tabular fixture (plus Gaussian checks if a chain is given)."""
    from .objectives import MeanEstimator, detailed_balance_loss, vmpo_amortised_loss
    from .trainer import policy_logp, policy_logp_backward, rollout

    rng = RngStream(seed, stream=7)
    results = []
    policy = random_tabular_policy(chain, rng)
    for k in sorted({2, K}):
        results.append(check_gradient_identity(chain, policy, beta, k))
    bias, gap = check_biased_loss_unbiased_grad(chain, beta, K, policy)
    results.append(CheckResult("biased_loss_unbiased_grad", gap < IDENTITY_TOL, gap, {"loss_bias": bias}))

    V = exact_soft_value(chain, beta)
    worst = 0.0
    for _ in range(20):
        lhs, rhs, slack = check_variance_bound(chain, random_tabular_policy(chain, rng), PotentialSpec("difference", beta), beta)
        worst = max(worst, -slack)
    results.append(CheckResult("variance_bound", worst <= BOUND_TOL, max(worst, 0.0)))

    worst = 0.0
    for kind in ("return_to_go", "difference"):
        spec = PotentialSpec(kind, beta)
        for _ in range(200):
            worst = max(worst, abs(check_potential_constraint(spec, random_trajectory(chain, rng))))
    results.append(CheckResult("potential_constraint", worst < 1e-12, worst))

    # Tilted kernels built from soft values zero every detailed-balance residual.
    tilted = TabularPolicy.from_kernels(soft_tilted_kernels(chain, beta))
    batch = rollout(tilted, chain, K, rng, groups=4, value_table=V)
    db = detailed_balance_loss(batch, beta).loss
    results.append(CheckResult("detailed_balance_soft_values", db < IDENTITY_TOL, db))

    # Amortised-loss adjoint against finite differences over all tabular logits.
    est = MeanEstimator(chain.steps, values=rng.normal(chain.steps))
    batch = rollout(policy, chain, K, rng, groups=2, value_table=V)

    def amortised(params):
        p = TabularPolicy(params.reshape(policy.logits.shape))
        res = vmpo_amortised_loss(batch.with_policy_logp(policy_logp(p, batch)), beta, est, "difference")
        return res.loss, policy_logp_backward(p, batch, res.theta_adjoint)

    fd = finite_diff_check(amortised, policy.params(), 1e-5, 1e-6)
    results.append(CheckResult("finite_diff_vmpo_amortised", fd.passed, fd.max_err))

    if gaussian_chain is not None:
        results.extend(_gaussian_checks(gaussian_chain, beta, rng))
    return results


def _gaussian_checks(chain, beta: float, rng: RngStream) -> list[CheckResult]:
    from .gaussian import (
        GaussianPolicy,
        QuadraticReward,
        QuadraticTiltPolicy,
        GaussianChain,
        gaussian_logpdf,
        grad_x_logpdf,
    )
    from .objectives import grad_matching_loss
    from .trainer import rollout

    out = []
    x, mean = rng.normal(chain.dim), rng.normal(chain.dim)
    fd = finite_diff_check(lambda z: (gaussian_logpdf(z, mean, 0.7), grad_x_logpdf(z, mean, 0.7)), x, 1e-5, 1e-7)
    out.append(CheckResult("finite_diff_gaussian_logpdf", fd.passed, fd.max_err))

    policy = GaussianPolicy.init(chain, rng, hidden=6)
    policy.set_params(0.3 * rng.normal(policy.num_params))
    batch = rollout(policy, chain, 4, rng)
    states = np.asarray(batch.states)
    coeff = rng.normal((4, chain.steps))
    theta = policy.params()

    def logp_sum(params):
        p = policy.copy()
        p.set_params(params)
        val = sum(np.sum(coeff[:, t - 1] * p.logp(t, states[:, t], states[:, t - 1])) for t in range(1, chain.steps + 1))
        grad = sum(p.logp_grad(t, states[:, t], states[:, t - 1], coeff[:, t - 1]) for t in range(1, chain.steps + 1))
        return val, grad

    fd = finite_diff_check(logp_sum, theta, 1e-5, 1e-5)
    out.append(CheckResult("finite_diff_meannet", fd.passed, fd.max_err))

    quad = QuadraticReward(1.0, np.ones(chain.dim))
    qchain = GaussianChain(chain.schedule, chain.dim, quad)

    def gm(params):
        p = GaussianPolicy(qchain, policy.net.copy(), policy.log_var_offset.copy())
        p.set_params(params)
        return grad_matching_loss(batch, beta, "both", qchain, p)

    fd = finite_diff_check(gm, theta, 1e-5, 1e-5)
    out.append(CheckResult("finite_diff_grad_matching", fd.passed, fd.max_err))

    tilt = QuadraticTiltPolicy(qchain, quad, beta)
    loss, _ = grad_matching_loss(batch, beta, "prev", qchain, tilt, need_grad=False)
    out.append(CheckResult("grad_matching_closed_form", loss < 1e-8, loss))
    return out


__all__ = [
    "CheckResult", "check_gradient_identity", "check_variance_bound", "finite_diff_check",
    "check_biased_loss_unbiased_grad", "random_tabular_policy", "random_trajectory", "run_all_checks",
    "ENUMERATION_LIMIT", "SizeLimitError",
]
