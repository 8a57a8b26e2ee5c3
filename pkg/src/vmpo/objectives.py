"""Alignment losses and advantages over a ``RolloutBatch``.

Every loss returns adjoints with respect to the per-transition policy
log-densities (shape ``(..., K, T)``); the model turns those into parameter
gradients. Stacked batches are averaged over their leading group axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RolloutBatch
from .smc import PotentialSpec, _kind, effective_rewards, training_reward_terms

BASELINES = ("group_mean", "amortised", "none")
GRAD_SIDES = ("prev", "next", "both")


class UnsupportedModelError(TypeError):
    """Raised when an objective needs structure the model does not have."""


@dataclass(frozen=True)
class AdvantageBatch:
    values: np.ndarray
    baseline: str

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.baseline == "group_mean":
            sums = np.sum(self.values, axis=-2)
            scale = max(1.0, float(np.max(np.abs(self.values), initial=0.0)))
            if np.max(np.abs(sums), initial=0.0) > 1e-9 * scale:
                raise ValueError("group-mean advantages must sum to zero over the group")


class MeanEstimator:
    """Per-step scalars ``M[t - 1]``, optionally one row per condition."""

    def __init__(self, steps: int, num_conditions: int | None = None, values=None):
        shape = (steps,) if num_conditions is None else (num_conditions, steps)
        self.values = np.zeros(shape) if values is None else np.array(values, dtype=float).reshape(shape)
        self.conditional = num_conditions is not None

    @property
    def steps(self) -> int:
        return self.values.shape[-1]

    def params(self) -> np.ndarray:
        return self.values.ravel().copy()

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if not np.all(np.isfinite(flat)):
            raise FloatingPointError("mean estimator values must be finite")
        self.values = flat.reshape(self.values.shape).copy()

    def copy(self) -> "MeanEstimator":
        return MeanEstimator(self.steps, self.values.shape[0] if self.conditional else None, self.values)

    def broadcast(self, batch: RolloutBatch) -> np.ndarray:
        shape = np.shape(batch.logp_policy)
        if shape[-1] != self.steps:
            raise ValueError("estimator and batch disagree on T")
        if not self.conditional:
            return np.broadcast_to(self.values, shape)
        cond = np.asarray(batch.condition, dtype=int)
        rows = self.values[cond]  # (..., T)
        return np.broadcast_to(np.expand_dims(rows, -2), shape)

    def reduce(self, grad_full, batch: RolloutBatch) -> np.ndarray:
        """Sum a full-shape gradient back onto the estimator's parameters."""
        g = np.asarray(grad_full).reshape(-1, *np.shape(batch.logp_policy)[-2:]).sum(axis=1)  # (G, T)
        if not self.conditional:
            return g.sum(axis=0)
        out = np.zeros_like(self.values)
        np.add.at(out, np.ravel(np.asarray(batch.condition, dtype=int)), g)
        return out.ravel()


def _check_group(batch: RolloutBatch) -> None:
    if batch.group_size < 2:
        raise ValueError("group size K must be >= 2")


def _groups(batch: RolloutBatch) -> int:
    return int(np.prod(np.shape(batch.logp_policy)[:-2], dtype=int))


def log_weight_terms(batch: RolloutBatch, beta: float, potential="return_to_go", factors=None) -> np.ndarray:
    """Per-transition log-weights ``logp_ref - logp_policy + reward term``."""
    ratio = np.asarray(batch.logp_ref) - np.asarray(batch.logp_policy)
    return ratio + training_reward_terms(potential, beta, batch.rewards, factors)


def _factor_adjoint(dl_df, rewards, beta, potential):
    """Chain a log-weight adjoint onto per-entry forward-looking factors."""
    if potential is not None and _kind(potential) == "return_to_go":
        return np.zeros(np.shape(rewards))
    out = np.zeros(np.shape(rewards))
    r = np.asarray(rewards, dtype=float) / beta
    out[..., :-1] += dl_df * r[..., :-1]
    out[..., 1:] -= dl_df * r[..., 1:]
    return out


def group_advantages(values) -> AdvantageBatch:
    v = np.asarray(values, dtype=float)
    return AdvantageBatch(v - v.mean(axis=-2, keepdims=True), "group_mean")


def vmpo_mc_loss(batch: RolloutBatch, beta: float, potential="return_to_go", factors=None) -> float:
    """Leave-one-out log-variance estimate ``sum A^2 / (2 (K - 1))``."""
    _check_group(batch)
    adv = group_advantages(log_weight_terms(batch, beta, potential, factors)).values
    return float(np.sum(adv**2) / (2 * (batch.group_size - 1)) / _groups(batch))


def vmpo_mc_grad(batch: RolloutBatch, beta: float, potential="return_to_go", factors=None) -> np.ndarray:
    """Adjoint ``-A / (K - 1)`` on each policy log-density, advantages held fixed."""
    _check_group(batch)
    adv = group_advantages(log_weight_terms(batch, beta, potential, factors)).values
    return -adv / (batch.group_size - 1) / _groups(batch)


@dataclass(frozen=True)
class AmortisedLoss:
    loss: float
    theta_adjoint: np.ndarray
    phi_grad: np.ndarray
    factor_adjoint: np.ndarray


def vmpo_amortised_loss(batch: RolloutBatch, beta: float, estimator: MeanEstimator,
                        potential="return_to_go", factors=None) -> AmortisedLoss:
    """Mean of ``(f - M(t))^2`` with mutually stop-gradiented adjoints.

    The policy side sees ``M`` as a constant and the estimator side (including
    any forward-looking factors) sees the policy log-densities as constants.
    """
    f = log_weight_terms(batch, beta, potential, factors)
    resid = f - estimator.broadcast(batch)
    n = resid.size
    dl_df = 2.0 * resid / n
    return AmortisedLoss(
        loss=float(np.mean(resid**2)),
        theta_adjoint=-dl_df,
        phi_grad=estimator.reduce(-dl_df, batch),
        factor_adjoint=_factor_adjoint(dl_df, batch.rewards, beta, potential),
    )


def grpo_advantage(rewards) -> np.ndarray:
    """Group-relative advantage ``G - mean(G)`` over the last axis (no std scaling)."""
    g = np.asarray(rewards, dtype=float)
    if g.shape[-1] < 2:
        raise ValueError("group size K must be >= 2")
    return g - g.mean(axis=-1, keepdims=True)


def clipped_surrogate(rho, A, eps):
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    rho = np.asarray(rho, dtype=float)
    return np.minimum(rho * A, np.clip(rho, 1 - eps, 1 + eps) * A)


def clipped_surrogate_grad(rho, A, eps):
    """``d clipped_surrogate / d rho``: ``A`` where the unclipped branch is selected, else 0."""
    rho = np.asarray(rho, dtype=float)
    A = np.asarray(A, dtype=float)
    unclipped = rho * A <= np.clip(rho, 1 - eps, 1 + eps) * A
    return np.where(unclipped, A, 0.0)


def vmpo_clipped_objective(batch: RolloutBatch, beta: float, eps: float, potential="return_to_go",
                           factors=None) -> tuple[float, np.ndarray]:
    """Clipped importance-sampled VMPO surrogate (to be maximised) and its adjoint.

    Advantages use the log-weights at the current (stop-gradient) policy; the
    ratio is taken against the behaviour policy that produced the batch.
    """
    _check_group(batch)
    adv = group_advantages(log_weight_terms(batch, beta, potential, factors)).values
    rho = np.exp(np.asarray(batch.logp_policy) - np.asarray(batch.logp_old))
    scale = 1.0 / ((batch.group_size - 1) * _groups(batch))
    obj = float(np.sum(clipped_surrogate(rho, adv, eps)) * scale)
    adjoint = clipped_surrogate_grad(rho, adv, eps) * rho * scale
    return obj, adjoint


def kl_shaped_return(G, logp_policy, logp_ref, beta):
    """``G - beta * log(pi / pi_ref)``, summing per-step log-ratios over the last axis."""
    log_ratio = np.asarray(logp_policy, dtype=float) - np.asarray(logp_ref, dtype=float)
    if log_ratio.ndim:
        log_ratio = log_ratio.sum(axis=-1)
    return np.asarray(G, dtype=float) - beta * log_ratio


def grpo_objective(batch: RolloutBatch, eps: float, returns=None) -> tuple[float, np.ndarray]:
    """GRPO clipped surrogate (to be maximised) with a per-trajectory advantage."""
    _check_group(batch)
    G = batch.terminal_rewards if returns is None else np.asarray(returns, dtype=float)
    adv = np.broadcast_to(grpo_advantage(G)[..., None], np.shape(batch.logp_policy))
    rho = np.exp(np.asarray(batch.logp_policy) - np.asarray(batch.logp_old))
    scale = 1.0 / (batch.group_size * _groups(batch))
    obj = float(np.sum(clipped_surrogate(rho, adv, eps)) * scale)
    return obj, clipped_surrogate_grad(rho, adv, eps) * rho * scale


@dataclass(frozen=True)
class DetailedBalanceLoss:
    loss: float
    theta_adjoint: np.ndarray
    factor_adjoint: np.ndarray
    residuals: np.ndarray


def detailed_balance_loss(batch: RolloutBatch, beta: float, factors=None) -> DetailedBalanceLoss:
    """Mean squared per-step residual of the difference-potential log-weight."""
    resid = log_weight_terms(batch, beta, "difference", factors)
    dl_df = 2.0 * resid / resid.size
    return DetailedBalanceLoss(
        loss=float(np.mean(resid**2)),
        theta_adjoint=-dl_df,
        factor_adjoint=_factor_adjoint(dl_df, batch.rewards, beta, "difference"),
        residuals=resid,
    )


def grad_matching_loss(batch: RolloutBatch, beta: float, side: str, chain, policy,
                       need_grad: bool = True) -> tuple[float, np.ndarray | None]:
    """Mean squared norm of the state-gradient of the per-step log-weight.

    ``side="prev"`` differentiates with respect to ``x_{t-1}`` and
    ``side="next"`` with respect to ``x_t``; ``"both"`` adds the two. The
    reward gradient is taken at the state itself, and ``r(x_T)`` is zero.
    """
    from .tabular import TabularChain

    if isinstance(chain, TabularChain) or not np.issubdtype(np.asarray(batch.states).dtype, np.floating):
        raise UnsupportedModelError("gradient matching needs a continuous (Gaussian) chain")
    if side not in GRAD_SIDES:
        raise ValueError(f"side must be one of {GRAD_SIDES}")
    states = np.asarray(batch.states, dtype=float)
    T, d = batch.steps, states.shape[-1]
    states = states.reshape(-1, T + 1, d)
    cond = np.broadcast_to(np.expand_dims(np.asarray(batch.condition, dtype=int), -1),
                           np.shape(batch.logp_policy)[:-1]).ravel()
    n = states.shape[0]
    count = n * T
    total = 0.0
    grad = np.zeros(policy.num_params) if need_grad else None
    for t in range(1, T + 1):
        x_t, x_prev = states[:, t], states[:, t - 1]
        v_ref = chain.step_variance[t - 1]
        ref_mu = chain.ref_mean(t, x_t)
        if side in ("prev", "both"):
            resid = (chain.reward.grad(x_prev) / beta + (ref_mu - x_prev) / v_ref
                     - policy.grad_x_prev_logp(t, x_t, x_prev, cond))
            total += np.sum(resid**2)
            if need_grad:
                grad += policy.grad_x_prev_logp_backward(t, x_t, x_prev, -2.0 * resid / count, cond)
        if side in ("next", "both"):
            reward_grad = chain.reward.grad(x_t) / beta if t < T else np.zeros_like(x_t)
            ref_grad = chain.ref_mean_slope(t) * (x_prev - ref_mu) / v_ref
            resid = ref_grad - policy.grad_x_t_logp(t, x_t, x_prev, cond) - reward_grad
            total += np.sum(resid**2)
            if need_grad:
                grad += policy.grad_x_t_logp_backward(t, x_t, x_prev, -2.0 * resid / count, cond)
    return float(total / count), grad


def kl_to_old(policy, old_policy, batch: RolloutBatch) -> tuple[float, np.ndarray]:
    """Mean exact per-step ``KL(p_theta || p_old)`` over the visited states, and its gradient."""
    from .tabular import TabularPolicy, row_kl, row_kl_grad

    T = batch.steps
    if isinstance(policy, TabularPolicy):
        states = np.asarray(batch.states).reshape(-1, T + 1)
        p, q = policy.kernels(), old_policy.kernels()
        t_idx = np.broadcast_to(np.arange(T), (len(states), T)).ravel()
        rows = states[:, 1:].ravel()
        value = float(np.mean(row_kl(p[t_idx, rows], q[t_idx, rows])))
        grad = np.zeros_like(policy.logits)
        np.add.at(grad, (t_idx, rows), row_kl_grad(p[t_idx, rows], q[t_idx, rows]) / len(rows))
        return value, grad.ravel()
    from .gaussian import gaussian_kl, meannet_backward

    states = np.asarray(batch.states, dtype=float)
    d = states.shape[-1]
    states = states.reshape(-1, T + 1, d)
    count = states.shape[0] * T
    value = 0.0
    g_net = np.zeros(policy.net.num_params)
    g_var = np.zeros(T)
    for t in range(1, T + 1):
        _, b = policy.chain.coefficients(t)
        mu, cache = policy.mean(t, states[:, t])
        mu_old, _ = old_policy.mean(t, states[:, t])
        v, v_old = policy.variance(t), old_policy.variance(t)
        value += np.sum(gaussian_kl(mu, v, mu_old, v_old))
        g_net += meannet_backward(policy.net, b * (mu - mu_old) / v_old / count, cache)
        g_var[t - 1] = len(states) * 0.5 * d * (v / v_old - 1.0) / count
    return float(value / count), np.concatenate([g_net, g_var])


def resolve_potential(potential, beta) -> PotentialSpec:
    return potential if isinstance(potential, PotentialSpec) else PotentialSpec(str(potential), beta)


__all__ = [
    "AdvantageBatch", "MeanEstimator", "AmortisedLoss", "DetailedBalanceLoss", "UnsupportedModelError",
    "log_weight_terms", "group_advantages", "vmpo_mc_loss", "vmpo_mc_grad", "vmpo_amortised_loss",
    "grpo_advantage", "clipped_surrogate", "clipped_surrogate_grad", "vmpo_clipped_objective",
    "kl_shaped_return", "grpo_objective", "detailed_balance_loss", "grad_matching_loss", "kl_to_old",
    "effective_rewards", "resolve_potential",
]
