"""Importance weights, SMC potentials, effective sample size and resampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import PROB_ATOL, RngStream, Trajectory, categorical_draw

POTENTIAL_KINDS = ("return_to_go", "difference", "forward_looking")


@dataclass(frozen=True)
class PotentialSpec:
    """Choice of potential ``U(x_{t:T})`` and its intermediate-reward source.

    ``value_table`` optionally holds exact soft values ``V[t, x]`` for tabular
    chains; when present, rollouts attach ``V_t(x_t)`` as the intermediate
    reward of every state. Forward-looking potentials rescale the
    intermediate reward by a learned factor ``F`` with ``F(x_0) = 1``; the
    factor table is trained state and is passed separately as ``factors``.
    """

    kind: str
    beta: float
    value_table: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential {self.kind!r}; expected one of {POTENTIAL_KINDS}")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.value_table is not None:
            table = np.array(self.value_table, dtype=float)
            table.setflags(write=False)
            object.__setattr__(self, "value_table", table)


def _kind(potential) -> str:
    kind = potential.kind if isinstance(potential, PotentialSpec) else str(potential)
    if kind not in POTENTIAL_KINDS:
        raise ValueError(f"unknown potential {kind!r}")
    return kind


@dataclass(frozen=True)
class WeightSet:
    log_weights: np.ndarray
    normalised: np.ndarray
    log_normaliser: float

    @classmethod
    def from_log_weights(cls, log_weights) -> "WeightSet":
        lw = np.asarray(log_weights, dtype=float)
        if lw.ndim != 1 or len(lw) == 0:
            raise ValueError("log weights must be a non-empty vector")
        log_z = float(logsumexp(lw))
        if not np.isfinite(log_z):
            raise FloatingPointError("weight normaliser is not finite")
        w = np.exp(lw - np.max(lw))
        w /= w.sum()
        return cls(lw, w, log_z)

    def __post_init__(self):
        if abs(float(np.sum(self.normalised)) - 1.0) > PROB_ATOL:
            raise ValueError("normalised weights must sum to 1")


def effective_rewards(rewards, factors=None):
    """Intermediate rewards after an optional forward-looking rescaling."""
    rewards = np.asarray(rewards, dtype=float)
    return rewards if factors is None else rewards * np.asarray(factors, dtype=float)


def step_log_weight(spec: PotentialSpec, logp_ref, logp_policy, r_prev, r_cur):
    """Per-transition training log-weight.

    For ``return_to_go`` the full terminal reward is passed as ``r_prev`` (the
    1/T share is folded into beta); for the other kinds ``r_prev`` and
    ``r_cur`` are the rewards at ``x_{t-1}`` and ``x_t``.
    """
    ratio = np.asarray(logp_ref) - np.asarray(logp_policy)
    if _kind(spec) == "return_to_go":
        return ratio + np.asarray(r_prev) / spec.beta
    return ratio + (np.asarray(r_prev) - np.asarray(r_cur)) / spec.beta


def training_reward_terms(potential, beta, rewards, factors=None):
    """Reward part of the training log-weight, shape ``(..., T)``."""
    rewards = np.asarray(rewards, dtype=float)
    if _kind(potential) == "return_to_go":
        T = rewards.shape[-1] - 1
        return np.repeat(rewards[..., :1], T, axis=-1) / beta
    eff = effective_rewards(rewards, factors)
    return (eff[..., :-1] - eff[..., 1:]) / beta


def transition_log_potentials(potential, beta, rewards, factors=None):
    """Exact ``log U`` for each transition, shape ``(..., T)``.

    Return-to-go spreads ``r(x_0) / beta`` evenly over the T transitions; the
    difference kinds telescope ``(r(x_{t-1}) - r(x_t)) / beta``.
    """
    rewards = np.asarray(rewards, dtype=float)
    T = rewards.shape[-1] - 1
    if _kind(potential) == "return_to_go":
        return np.repeat(rewards[..., :1], T, axis=-1) / (T * beta)
    eff = effective_rewards(rewards, factors)
    return (eff[..., :-1] - eff[..., 1:]) / beta


def initial_log_potential(potential, beta, rewards, factors=None):
    """``log U(x_T)``: zero for return-to-go, ``r(x_T) / beta`` otherwise."""
    rewards = np.asarray(rewards, dtype=float)
    if _kind(potential) == "return_to_go":
        return np.zeros(rewards.shape[:-1])
    return effective_rewards(rewards, factors)[..., -1] / beta


def trajectory_log_weight(spec: PotentialSpec, traj: Trajectory, factors=None) -> float:
    """Log importance weight of a whole trajectory under ``spec``.

    Includes the initial potential ``U(x_T)``, so for every potential whose
    product telescopes to ``exp(r(x_0)/beta)`` the result is
    ``log p_ref(x_{0:T}) - log p_theta(x_{0:T}) + r(x_0)/beta``.
    """
    ratio = np.sum(traj.logp_ref - traj.logp_policy)
    steps = transition_log_potentials(spec, spec.beta, traj.rewards, factors)
    init = initial_log_potential(spec, spec.beta, traj.rewards, factors)
    return float(ratio + np.sum(steps) + init)


def check_potential_constraint(spec: PotentialSpec, traj: Trajectory, factors=None) -> float:
    """``sum_t log U(x_{t:T}) - r(x_0)/beta``; zero when the constraint holds."""
    total = np.sum(transition_log_potentials(spec, spec.beta, traj.rewards, factors))
    total += initial_log_potential(spec, spec.beta, traj.rewards, factors)
    return float(total - traj.rewards[0] / spec.beta)


def ess(weights: WeightSet) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``, evaluated in log space."""
    lw = weights.log_weights
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def snis_resample(weights: WeightSet, rng: RngStream) -> np.ndarray:
    """Multinomial resampling: K independent ancestor draws."""
    K = len(weights.normalised)
    probs = np.broadcast_to(weights.normalised, (K, K))
    return categorical_draw(probs, rng)
