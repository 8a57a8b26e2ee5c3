"""Rollout and update loop with an adaptive first-order optimiser."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .core import OBJECTIVE_KINDS, ObjectiveSpec, RngStream, RolloutBatch, categorical_draw
from .gaussian import GaussianChain, GaussianPolicy, gaussian_kl, gaussian_logpdf, make_gaussian_chain
from .objectives import (
    GRAD_SIDES,
    MeanEstimator,
    detailed_balance_loss,
    grad_matching_loss,
    grpo_objective,
    kl_shaped_return,
    kl_to_old,
    vmpo_amortised_loss,
    vmpo_clipped_objective,
    vmpo_mc_grad,
    vmpo_mc_loss,
)
from .smc import POTENTIAL_KINDS, PotentialSpec, WeightSet, ess
from .tabular import (
    TabularChain,
    TabularPolicy,
    exact_soft_value,
    row_kl,
    soft_tilted_kernels,
    standard_chain,
    state_marginals,
    total_variation,
)

MODEL_KINDS = ("tabular", "gaussian")
CSV_HEADER = "epoch,mean_reward,kl_to_ref,loss,ess,tv_to_tilt,seconds"
INIT_STREAM = 0
LR_SCHEDULES = ("cosine", "constant")


class ConfigDomainError(ValueError):
    """A configuration value violates a documented invariant."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, t: int | None, term: str):
        self.epoch, self.t, self.term = epoch, t, term
        where = "" if t is None else f" at step t={t}"
        super().__init__(f"non-finite loss in epoch {epoch}{where}: offending term '{term}'")


@dataclass(frozen=True)
class TrainConfig:
    model: str = "tabular"
    num_states: int = 4
    dim: int = 2
    steps: int = 3
    alpha_min: float = 0.3
    objective: str = "vmpo_amortised"
    potential: str = "difference"
    beta: float = 0.5
    clip_eps: float = 0.2
    kl_old_coeff: float = 0.0
    group_size: int = 8
    rollouts_per_epoch: int = 8
    updates_per_epoch: int = 2
    epochs: int = 200
    lr_theta: float = 0.05
    lr_phi: float = 0.05
    seed: int = 0
    reward_rescale: bool = False
    eval_every: int = 1
    out_dir: str = "runs"
    # Python-only knobs (not part of the config file format).
    hidden: int = 16
    grad_side: str = "prev"
    lr_schedule: str = "cosine"

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigDomainError(msg)

        need(self.model in MODEL_KINDS, f"model must be one of {MODEL_KINDS}")
        need(self.objective in OBJECTIVE_KINDS, f"objective must be one of {OBJECTIVE_KINDS}")
        need(self.potential in POTENTIAL_KINDS, f"potential must be one of {POTENTIAL_KINDS}")
        need(self.group_size >= 2, "group_size: the group size K must satisfy K >= 2")
        need(self.num_states >= 1, "num_states must be >= 1")
        need(1 <= self.dim <= 4, "dim must lie in 1..4")
        need(self.steps >= 1, "steps must be >= 1")
        need(0.0 < self.alpha_min < 1.0, "alpha_min must lie in (0, 1)")
        need(self.beta > 0, "beta must be > 0")
        need(0.0 <= self.clip_eps < 1.0, "clip_eps must lie in [0, 1)")
        need(self.kl_old_coeff >= 0, "kl_old_coeff must be >= 0")
        need(self.rollouts_per_epoch >= 1, "rollouts_per_epoch must be >= 1")
        need(self.updates_per_epoch >= 1, "updates_per_epoch must be >= 1")
        need(self.epochs >= 0, "epochs must be >= 0")
        need(self.lr_theta >= 0 and self.lr_phi >= 0, "learning rates must be >= 0")
        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        need(self.eval_every >= 1, "eval_every must be >= 1")
        need(self.hidden >= 1, "hidden must be >= 1")
        need(self.grad_side in GRAD_SIDES, f"grad_side must be one of {GRAD_SIDES}")
        need(self.lr_schedule in LR_SCHEDULES, f"lr_schedule must be one of {LR_SCHEDULES}")
        need(not (self.model == "tabular" and self.objective == "grad_matching"),
             "grad_matching needs model = gaussian")

    @property
    def objective_spec(self) -> ObjectiveSpec:
        return ObjectiveSpec(self.objective, self.beta, PotentialSpec(self.potential, self.beta),
                             self.clip_eps, self.kl_old_coeff)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    mean_reward: float
    kl_to_ref: float
    loss: float
    ess: float
    tv_to_tilt: float | None
    seconds: float

    def to_csv(self) -> str:
        return ",".join([str(self.epoch)] + [_fmt(getattr(self, f.name)) for f in fields(self)[1:]])

    @classmethod
    def from_csv(cls, line: str) -> "MetricsRow":
        parts = line.strip().split(",")
        if len(parts) != 7:
            raise ValueError(f"expected 7 fields, got {len(parts)}")
        vals = [None if p == "" else float(p) for p in parts[1:]]
        return cls(int(parts[0]), *vals)


# Optimiser ---------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def clip_gradient(grads, max_norm: float = 1.0) -> np.ndarray:
    grads = np.asarray(grads, dtype=float)
    norm = float(np.linalg.norm(grads))
    return grads * (max_norm / norm) if norm > max_norm else grads


def adaptive_step(params, grads, state: AdamState | None, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, weight_decay: float = 0.0, clip_norm: float = 1.0):
    """One AdamW-style update: global norm clip, bias-corrected moments, decoupled decay."""
    params = np.asarray(params, dtype=float)
    if state is None:
        state = AdamState.zeros(params.size)
    g = clip_gradient(grads, clip_norm)
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g**2
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    new = params - lr * weight_decay * params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, step)


def lr_factor(schedule: str, epoch: int, epochs: int) -> float:
    """Multiplier on the base learning rate: cosine decay to zero, or constant."""
    if schedule == "constant" or epochs <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


# Rollouts ----------------------------------------------------------------

def rollout(policy, chain, K: int, rng: RngStream, groups: int | None = None, value_table=None) -> RolloutBatch:
    """Sample ``K`` trajectories (per group) ancestrally from ``x_T`` down to ``x_0``.

    The sampling policy doubles as the behaviour policy, so ``logp_policy``
    and ``logp_old`` coincide. Tabular rewards are ``value_table[t, x_t]``
    when a table is given, else the chain reward with ``r(x_T) = 0``.
    Gaussian intermediate rewards use the one-step data prediction.
    """
    G = 1 if groups is None else groups
    n = G * K
    T = chain.steps
    logp = np.empty((n, T))
    logp_ref = np.empty((n, T))
    rewards = np.zeros((n, T + 1))
    if isinstance(chain, TabularChain):
        states = np.empty((n, T + 1), dtype=np.intp)
        states[:, T] = categorical_draw(np.broadcast_to(chain.prior, (n, chain.num_states)), rng)
        log_k = policy.log_kernels()
        with np.errstate(divide="ignore"):
            log_ref = np.log(chain.ref_kernels)
        kern = np.exp(log_k)
        for t in range(T, 0, -1):
            x_t = states[:, t]
            x_prev = categorical_draw(kern[t - 1, x_t] / kern[t - 1, x_t].sum(axis=1, keepdims=True), rng)
            states[:, t - 1] = x_prev
            logp[:, t - 1] = log_k[t - 1, x_t, x_prev]
            logp_ref[:, t - 1] = log_ref[t - 1, x_t, x_prev]
        if value_table is not None:
            rewards = np.asarray(value_table)[np.arange(T + 1), states]
        else:
            rewards[:, :T] = chain.reward[states[:, :T]]
    else:
        d = chain.dim
        states = np.empty((n, T + 1, d))
        states[:, T] = chain.sample_prior(n, rng)
        for t in range(T, 0, -1):
            x_t = states[:, t]
            mu, _ = policy.mean(t, x_t)
            x_prev = mu + np.sqrt(policy.variance(t)) * rng.normal((n, d))
            states[:, t - 1] = x_prev
            logp[:, t - 1] = gaussian_logpdf(x_prev, mu, policy.variance(t))
            logp_ref[:, t - 1] = chain.ref_logp(t, x_t, x_prev)
            if t < T:
                rewards[:, t] = chain.reward.value(policy.predict(t, x_t)[0])
        rewards[:, 0] = chain.reward.value(states[:, 0])
    shape = (K,) if groups is None else (G, K)
    return RolloutBatch(
        states=states.reshape(shape + states.shape[1:]),
        logp_policy=logp.reshape(shape + (T,)),
        logp_old=logp.reshape(shape + (T,)).copy(),
        logp_ref=logp_ref.reshape(shape + (T,)),
        rewards=rewards.reshape(shape + (T + 1,)),
        condition=0 if groups is None else np.zeros(G, dtype=int),
    )


def policy_logp(policy, batch: RolloutBatch) -> np.ndarray:
    """Re-evaluate the per-transition log-densities of a batch under ``policy``."""
    T = batch.steps
    lead = np.shape(batch.logp_policy)[:-1]
    if isinstance(policy, TabularPolicy):
        states = np.asarray(batch.states)
        log_k = policy.log_kernels()
        t_idx = np.arange(T)
        return log_k[t_idx, states[..., 1:], states[..., :-1]]
    states = np.asarray(batch.states).reshape(-1, T + 1, policy.chain.dim)
    out = np.empty((len(states), T))
    for t in range(1, T + 1):
        out[:, t - 1] = policy.logp(t, states[:, t], states[:, t - 1])
    return out.reshape(lead + (T,))


def policy_logp_backward(policy, batch: RolloutBatch, adjoint) -> np.ndarray:
    """Parameter gradient of ``sum adjoint * logp_policy``."""
    T = batch.steps
    adjoint = np.asarray(adjoint, dtype=float)
    if isinstance(policy, TabularPolicy):
        states = np.asarray(batch.states)
        t_idx = np.broadcast_to(np.arange(T), adjoint.shape)
        return policy.logp_grad(t_idx, states[..., 1:], states[..., :-1], adjoint)
    states = np.asarray(batch.states).reshape(-1, T + 1, policy.chain.dim)
    adj = adjoint.reshape(-1, T)
    grad = np.zeros(policy.num_params)
    for t in range(1, T + 1):
        grad += policy.logp_grad(t, states[:, t], states[:, t - 1], adj[:, t - 1])
    return grad


def rescale_rewards(batch: RolloutBatch) -> RolloutBatch:
    """Per-group affine standardisation by the terminal rewards' mean and spread."""
    from dataclasses import replace

    G = batch.terminal_rewards
    mu = G.mean(axis=-1, keepdims=True)
    sd = G.std(axis=-1, keepdims=True)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return replace(batch, rewards=(np.asarray(batch.rewards) - mu[..., None]) / sd[..., None])


# Forward-looking factors -------------------------------------------------

class ForwardFactors:
    """Learned multiplicative reward factors ``F`` with ``F(x_0) = 1`` held fixed.

    Tabular chains keep one factor per ``(t, state)``; Gaussian chains one per step.
    """

    def __init__(self, chain):
        T = chain.steps
        self.tabular = isinstance(chain, TabularChain)
        self.values = np.ones((T + 1, chain.num_states) if self.tabular else (T + 1,))

    def params(self) -> np.ndarray:
        return self.values.ravel().copy()

    def set_params(self, flat) -> None:
        vals = np.asarray(flat, dtype=float).reshape(self.values.shape).copy()
        vals[0] = 1.0
        self.values = vals

    def gather(self, batch: RolloutBatch) -> np.ndarray:
        T = batch.steps
        if self.tabular:
            return self.values[np.arange(T + 1), np.asarray(batch.states)]
        return np.broadcast_to(self.values, np.shape(batch.rewards))

    def scatter(self, adjoint, batch: RolloutBatch) -> np.ndarray:
        T = batch.steps
        adjoint = np.asarray(adjoint)
        if self.tabular:
            grad = np.zeros_like(self.values)
            t_idx = np.broadcast_to(np.arange(T + 1), adjoint.shape)
            np.add.at(grad, (t_idx, np.asarray(batch.states)), adjoint)
        else:
            grad = adjoint.reshape(-1, T + 1).sum(axis=0)
        grad[0] = 0.0
        return grad.ravel()


# Metrics -----------------------------------------------------------------

def path_kl_to_ref(policy, chain, batch: RolloutBatch | None = None) -> float:
    """``KL(p_theta(x_{0:T}) || p_ref(x_{0:T}))``: exact for tabular, Monte Carlo otherwise."""
    if isinstance(policy, TabularPolicy):
        kernels = policy.kernels()
        marg = state_marginals(chain, kernels)
        kl_rows = row_kl(kernels, chain.ref_kernels)  # (T, S)
        return max(float(np.sum(marg[1:] * kl_rows)), 0.0)
    T = chain.steps
    states = np.asarray(batch.states).reshape(-1, T + 1, chain.dim)
    total = 0.0
    for t in range(1, T + 1):
        mu, _ = policy.mean(t, states[:, t])
        total += np.mean(gaussian_kl(mu, policy.variance(t), chain.ref_mean(t, states[:, t]),
                                     chain.step_variance[t - 1]))
    return float(total)


def max_tv_to_target(policy: TabularPolicy, target_kernels) -> float:
    return float(np.max(total_variation(policy.kernels(), target_kernels)))


def mean_group_ess(batch: RolloutBatch, beta: float) -> float:
    """Mean per-group ESS of the whole-trajectory weights against the reward tilt."""
    lw = np.sum(np.asarray(batch.logp_ref) - np.asarray(batch.logp_old), axis=-1) + batch.terminal_rewards / beta
    lw = lw.reshape(-1, batch.group_size)
    return float(np.mean([ess(WeightSet.from_log_weights(row)) for row in lw]))


# Training ----------------------------------------------------------------

@dataclass
class TrainResult:
    rows: list
    policy: object
    estimator: MeanEstimator
    factors: ForwardFactors
    chain: object


def build_model(config: TrainConfig):
    """The chain and initial (reference) policy named by ``config``."""
    if config.model == "tabular":
        chain = standard_chain(config.num_states, config.steps)
        return chain, TabularPolicy.reference(chain)
    chain = make_gaussian_chain(config.dim, config.steps, config.alpha_min)
    return chain, GaussianPolicy.init(chain, RngStream(config.seed, INIT_STREAM), config.hidden)


def _first_nonfinite(batch: RolloutBatch):
    for term in ("logp_policy", "logp_ref", "rewards"):
        arr = np.asarray(getattr(batch, term))
        bad = ~np.isfinite(arr)
        if np.any(bad):
            col = int(np.argwhere(bad)[0][-1])
            # log-density column j is the transition out of x_{j+1}
            return term, col if term == "rewards" else col + 1
    return "loss", None


def _objective_step(config, batch, policy, old_policy, chain, estimator, factors, value_factors):
    """Loss and gradients ``(loss, g_theta, g_phi, g_factors)`` for one update."""
    beta = config.beta
    potential = config.potential
    g_phi = np.zeros(estimator.values.size)
    g_fac = np.zeros(factors.values.size)
    kind = config.objective
    if kind == "vmpo_amortised":
        res = vmpo_amortised_loss(batch, beta, estimator, potential, value_factors)
        loss, adj, g_phi = res.loss, res.theta_adjoint, res.phi_grad
        if potential == "forward_looking":
            g_fac = factors.scatter(res.factor_adjoint, batch)
    elif kind == "vmpo_mc":
        loss = vmpo_mc_loss(batch, beta, potential, value_factors)
        adj = vmpo_mc_grad(batch, beta, potential, value_factors)
    elif kind == "vmpo_clipped":
        obj, adj = vmpo_clipped_objective(batch, beta, config.clip_eps, potential, value_factors)
        loss, adj = -obj, -adj
    elif kind == "grpo":
        shaped = kl_shaped_return(batch.terminal_rewards, batch.logp_old, batch.logp_ref, beta)
        obj, adj = grpo_objective(batch, config.clip_eps, shaped)
        loss, adj = -obj, -adj
    elif kind == "detailed_balance":
        res = detailed_balance_loss(batch, beta, value_factors)
        loss, adj = res.loss, res.theta_adjoint
        if potential == "forward_looking":
            g_fac = factors.scatter(res.factor_adjoint, batch)
    else:
        loss, g_theta = grad_matching_loss(batch, beta, config.grad_side, chain, policy)
        adj = None
    if adj is not None:
        g_theta = policy_logp_backward(policy, batch, adj)
    if config.kl_old_coeff > 0:
        kl_val, kl_grad = kl_to_old(policy, old_policy, batch)
        loss += config.kl_old_coeff * kl_val
        g_theta = g_theta + config.kl_old_coeff * kl_grad
    return loss, g_theta, g_phi, g_fac


def train(config: TrainConfig, chain=None, policy=None, clock=None, on_epoch=None) -> TrainResult:
    """Run the epoch loop and return metrics rows plus the final trained state.

    ``chain`` and ``policy`` override the config-built model. ``clock`` is an
    optional zero-argument timer; without it the ``seconds`` column is 0 so
    that repeated runs are byte-identical. ``on_epoch(epoch, policy)`` is
    called with a frozen copy of each epoch's rollout policy.
    """
    if chain is None or policy is None:
        built_chain, built_policy = build_model(config)
        chain = built_chain if chain is None else chain
        policy = built_policy if policy is None else policy
    tabular = isinstance(chain, TabularChain)
    T, K, beta = chain.steps, config.group_size, config.beta
    value_table = exact_soft_value(chain, beta) if tabular else None
    target = soft_tilted_kernels(chain, beta) if tabular else None
    estimator = MeanEstimator(T)
    factors = ForwardFactors(chain)
    theta_state = phi_state = fac_state = None
    start = clock() if clock is not None else 0.0
    rows = []
    for epoch in range(config.epochs):
        old_policy = policy.copy()
        if on_epoch is not None:
            on_epoch(epoch, old_policy.copy())
        batch = rollout(old_policy, chain, K, RngStream(config.seed, epoch + 1),
                        groups=config.rollouts_per_epoch, value_table=value_table)
        term, t = _first_nonfinite(batch)
        if term != "loss":
            raise NonFiniteLossError(epoch, t, term)
        mean_reward = float(np.mean(batch.terminal_rewards))
        batch_ess = mean_group_ess(batch, beta)
        kl_ref = path_kl_to_ref(old_policy, chain, batch)
        tv = max_tv_to_target(old_policy, target) if tabular else None
        if config.reward_rescale:
            batch = rescale_rewards(batch)
        losses = []
        scale = lr_factor(config.lr_schedule, epoch, config.epochs)
        for _ in range(config.updates_per_epoch):
            current = batch.with_policy_logp(policy_logp(policy, batch))
            value_factors = factors.gather(current) if config.potential == "forward_looking" else None
            with np.errstate(all="ignore"):
                loss, g_theta, g_phi, g_fac = _objective_step(config, current, policy, old_policy, chain,
                                                              estimator, factors, value_factors)
            if not (math.isfinite(loss) and np.all(np.isfinite(g_theta))):
                term, t = _first_nonfinite(current)
                raise NonFiniteLossError(epoch, t, term)
            losses.append(loss)
            new_theta, theta_state = adaptive_step(policy.params(), g_theta, theta_state, scale * config.lr_theta)
            policy.set_params(new_theta)
            if config.objective == "vmpo_amortised":
                new_phi, phi_state = adaptive_step(estimator.params(), g_phi, phi_state, scale * config.lr_phi)
                estimator.set_params(new_phi)
            if config.potential == "forward_looking" and config.objective in ("vmpo_amortised", "detailed_balance"):
                new_fac, fac_state = adaptive_step(factors.params(), g_fac, fac_state, scale * config.lr_phi)
                factors.set_params(new_fac)
        if epoch % config.eval_every == 0:
            seconds = clock() - start if clock is not None else 0.0
            rows.append(MetricsRow(epoch, mean_reward, kl_ref, float(np.mean(losses)), batch_ess, tv, seconds))
    return TrainResult(rows, policy, estimator, factors, chain)
