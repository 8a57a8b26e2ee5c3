"""Shared value types, random streams and schedule arithmetic.

Index conventions used throughout the package:

* ``states[t]`` is ``x_t`` for ``t = 0..T`` (``x_0`` clean, ``x_T`` noise).
* ``logp_*[t - 1]`` is the log-density of the transition ``x_t -> x_{t-1}``.
* ``rewards[t]`` is the (intermediate) reward attached to ``x_t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .smc import PotentialSpec

PROB_ATOL = 1e-9

OBJECTIVE_KINDS = (
    "vmpo_amortised",
    "vmpo_mc",
    "vmpo_clipped",
    "grpo",
    "detailed_balance",
    "grad_matching",
)


class SizeLimitError(ValueError):
    """Raised when an exact enumeration would exceed its size guard."""


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance-preserving signal/noise pairs ``(alpha_t, sigma_t)``, ``t = 0..T``."""

    alphas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        alphas = _frozen(self.alphas)
        sigmas = _frozen(self.sigmas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "sigmas", sigmas)
        if alphas.ndim != 1 or alphas.shape != sigmas.shape or len(alphas) < 2:
            raise ValueError("alphas and sigmas must be equal-length vectors of length T+1 >= 2")
        if alphas[0] != 1.0 or sigmas[0] != 0.0:
            raise ValueError("schedule must start at alpha_0 = 1, sigma_0 = 0")
        if np.any(np.diff(alphas) >= 0):
            raise ValueError("alphas must be strictly decreasing in t")
        if np.any(alphas <= 0) or np.any(alphas > 1) or np.any(sigmas < 0) or np.any(sigmas >= 1):
            raise ValueError("alphas must lie in (0, 1] and sigmas in [0, 1)")
        if np.max(np.abs(alphas**2 + sigmas**2 - 1.0)) > 1e-12:
            raise ValueError("schedule violates alpha_t^2 + sigma_t^2 = 1")

    @property
    def steps(self) -> int:
        return len(self.alphas) - 1


def make_linear_schedule(steps: int, alpha_min: float) -> DiffusionSchedule:
    """Linear-in-alpha schedule from ``alpha_0 = 1`` down to ``alpha_T = alpha_min``."""
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps!r}")
    if not 0.0 < alpha_min < 1.0:
        raise ValueError(f"alpha_min must lie in (0, 1), got {alpha_min!r}")
    t = np.arange(steps + 1) / steps
    alphas = 1.0 - (1.0 - alpha_min) * t
    alphas[0], alphas[-1] = 1.0, alpha_min
    sigmas = np.sqrt(1.0 - alphas**2)
    return DiffusionSchedule(alphas, sigmas)


class RngStream:
    """A reproducible random stream keyed by ``(seed, stream)``.

    Streams are single-owner. Parallel work should take distinct stream ids
    rather than share one instance.
    """

    def __init__(self, seed: int, stream: int = 0):
        seed, stream = int(seed), int(stream)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if stream < 0:
            raise ValueError("stream id must be non-negative")
        self.seed = seed
        self.stream = stream
        seq = np.random.SeedSequence(seed, spawn_key=(stream,))
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def dirichlet(self, alpha, size=None):
        return self._gen.dirichlet(alpha, size)


def categorical_draw(probs, rng: RngStream):
    """Inverse-CDF categorical draw.

    ``probs`` may be a vector (returns an int) or a matrix of row distributions
    (returns one index per row). A uniform ``u`` in ``(0, 1]`` selects the first
    index whose cumulative mass reaches ``u``, so boundary ties go to the lower
    index and zero-mass entries are never returned.
    """
    p = np.asarray(probs, dtype=float)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    if np.any(p2 < 0):
        raise ValueError("probabilities must be non-negative")
    totals = p2.sum(axis=1)
    if np.any(np.abs(totals - 1.0) > PROB_ATOL):
        raise ValueError("probabilities must sum to 1 within 1e-9")
    cdf = np.cumsum(p2, axis=1) / totals[:, None]
    # Pin the cumulative mass to exactly 1 from the last supported entry on.
    last = p2.shape[1] - 1 - np.argmax(p2[:, ::-1] > 0, axis=1)
    cdf[np.arange(p2.shape[1])[None, :] >= last[:, None]] = 1.0
    u = 1.0 - rng.uniform(p2.shape[0])
    idx = np.sum(cdf < u[:, None], axis=1)
    return int(idx[0]) if single else idx


@dataclass(frozen=True)
class Trajectory:
    """One denoising rollout ``x_T -> x_0``; see the module docstring for indexing."""

    states: np.ndarray
    logp_policy: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    rewards: np.ndarray
    condition: int | None = None

    def __post_init__(self):
        for name in ("states", "logp_policy", "logp_old", "logp_ref", "rewards"):
            object.__setattr__(self, name, _frozen(getattr(self, name), None if name == "states" else float))
        T = len(self.logp_policy)
        if T < 1 or len(self.logp_old) != T or len(self.logp_ref) != T:
            raise ValueError("log-density tracks must share one length T >= 1")
        if len(self.states) != T + 1 or len(self.rewards) != T + 1:
            raise ValueError("states and rewards must have length T+1")

    @property
    def steps(self) -> int:
        return len(self.logp_policy)

    @property
    def terminal_reward(self) -> float:
        return float(self.rewards[0])


@dataclass(frozen=True)
class RolloutBatch:
    """K trajectories sharing a condition, stored as stacked arrays.

    Arrays have shape ``(..., K, T)`` (log-densities), ``(..., K, T+1)``
    (rewards) and ``(..., K, T+1[, d])`` (states). Leading axes index
    independent groups; every objective treats axis ``-2`` as the group axis.
    """

    states: np.ndarray
    logp_policy: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    rewards: np.ndarray
    condition: int | np.ndarray = 0

    def __post_init__(self):
        shape = np.shape(self.logp_policy)
        if len(shape) < 2:
            raise ValueError("log-density arrays must have shape (..., K, T)")
        if shape[-2] < 2:
            raise ValueError("group size K must be >= 2")
        if np.shape(self.logp_old) != shape or np.shape(self.logp_ref) != shape:
            raise ValueError("log-density arrays must share one shape")
        if np.shape(self.rewards) != shape[:-1] + (shape[-1] + 1,):
            raise ValueError("rewards must have shape (..., K, T+1)")
        if np.shape(self.states)[: len(shape)] != shape[:-1] + (shape[-1] + 1,):
            raise ValueError("states must have shape (..., K, T+1[, d])")

    @property
    def group_size(self) -> int:
        return np.shape(self.logp_policy)[-2]

    @property
    def steps(self) -> int:
        return np.shape(self.logp_policy)[-1]

    @property
    def stacked(self) -> bool:
        return np.ndim(self.logp_policy) > 2

    @property
    def terminal_rewards(self) -> np.ndarray:
        return np.asarray(self.rewards)[..., 0]

    def with_policy_logp(self, logp_policy) -> "RolloutBatch":
        return replace(self, logp_policy=np.asarray(logp_policy, dtype=float))

    @property
    def trajectories(self) -> list[Trajectory]:
        if self.stacked:
            raise ValueError("trajectories are only available on an unstacked batch")
        return [
            Trajectory(
                self.states[i], self.logp_policy[i], self.logp_old[i],
                self.logp_ref[i], self.rewards[i], int(self.condition),
            )
            for i in range(self.group_size)
        ]

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "RolloutBatch":
        if len(trajectories) < 2:
            raise ValueError("group size K must be >= 2")
        T = trajectories[0].steps
        cond = trajectories[0].condition
        for tr in trajectories:
            if tr.steps != T:
                raise ValueError("all trajectories in a group must share T")
            if tr.condition != cond:
                raise ValueError("all trajectories in a group must share the condition")
        return cls(
            states=np.stack([tr.states for tr in trajectories]),
            logp_policy=np.stack([tr.logp_policy for tr in trajectories]),
            logp_old=np.stack([tr.logp_old for tr in trajectories]),
            logp_ref=np.stack([tr.logp_ref for tr in trajectories]),
            rewards=np.stack([tr.rewards for tr in trajectories]),
            condition=0 if cond is None else cond,
        )

    @classmethod
    def stack(cls, batches: Sequence["RolloutBatch"]) -> "RolloutBatch":
        """Stack equally-shaped groups along a new leading axis."""
        return cls(
            states=np.stack([b.states for b in batches]),
            logp_policy=np.stack([b.logp_policy for b in batches]),
            logp_old=np.stack([b.logp_old for b in batches]),
            logp_ref=np.stack([b.logp_ref for b in batches]),
            rewards=np.stack([b.rewards for b in batches]),
            condition=np.array([b.condition for b in batches]),
        )


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which alignment loss to optimise and its scalar hyperparameters."""

    kind: str
    beta: float
    potential: "PotentialSpec" = field(default=None)  # type: ignore[assignment]
    clip_eps: float = 0.2
    kl_old_coeff: float = 0.0

    def __post_init__(self):
        from .smc import PotentialSpec

        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}; expected one of {OBJECTIVE_KINDS}")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not 0.0 <= self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in [0, 1)")
        if not self.kl_old_coeff >= 0:
            raise ValueError("kl_old_coeff must be >= 0")
        if self.potential is None:
            object.__setattr__(self, "potential", PotentialSpec("return_to_go", self.beta))
        elif self.potential.beta != self.beta:
            raise ValueError("potential beta must match objective beta")
