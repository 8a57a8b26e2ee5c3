"""Finite-state denoising chains and exact, enumeration-based oracles.

Kernels are stored per step as an array of shape ``(T, S, S)``: entry
``[t - 1, x_t, x_{t-1}]`` is the probability of stepping from ``x_t`` to
``x_{t-1}``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, logsumexp

from .core import RngStream, SizeLimitError

ENUMERATION_LIMIT = 10**6
STOCHASTIC_ATOL = 1e-10


def _safe_log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


@dataclass(frozen=True, eq=False)
class TabularChain:
    ref_kernels: np.ndarray
    prior: np.ndarray
    reward: np.ndarray

    def __post_init__(self):
        kernels = np.array(self.ref_kernels, dtype=float)
        prior = np.array(self.prior, dtype=float)
        reward = np.array(self.reward, dtype=float)
        if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2] or kernels.shape[0] < 1:
            raise ValueError("ref_kernels must have shape (T, S, S) with T >= 1")
        S = kernels.shape[1]
        if prior.shape != (S,) or reward.shape != (S,):
            raise ValueError("prior and reward must have length S")
        if np.any(kernels < 0) or np.any(np.abs(kernels.sum(axis=2) - 1.0) > STOCHASTIC_ATOL):
            raise ValueError("every kernel row must be a probability vector")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > STOCHASTIC_ATOL:
            raise ValueError("prior must be a probability vector")
        if not np.all(np.isfinite(reward)):
            raise ValueError("rewards must be finite")
        for name, arr in (("ref_kernels", kernels), ("prior", prior), ("reward", reward)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_states(self) -> int:
        return self.ref_kernels.shape[1]

    @property
    def steps(self) -> int:
        return self.ref_kernels.shape[0]

    def with_reward(self, reward) -> "TabularChain":
        return TabularChain(self.ref_kernels, self.prior, reward)

    # Plain-text format: "S T", the prior row, the reward row, then T blocks
    # of S kernel rows. Blank lines and '#' comments are ignored.
    def to_text(self) -> str:
        fmt = lambda row: " ".join("%.17g" % v for v in row)  # noqa: E731
        lines = [f"{self.num_states} {self.steps}", fmt(self.prior), fmt(self.reward)]
        for t in range(self.steps):
            lines.append("")
            lines.extend(fmt(row) for row in self.ref_kernels[t])
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TabularChain":
        rows = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
        if not rows or len(rows[0]) != 2:
            raise ValueError("first line must hold 'S T'")
        S, T = int(rows[0][0]), int(rows[0][1])
        body = [[float(v) for v in r] for r in rows[1:]]
        if len(body) != 2 + T * S or any(len(r) != S for r in body):
            raise ValueError(f"expected {2 + T * S} rows of {S} values")
        kernels = np.array(body[2:]).reshape(T, S, S)
        return cls(kernels, body[0], body[1])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TabularChain":
        return cls.from_text(Path(path).read_text())


def random_chain(num_states: int, steps: int, rng: RngStream, concentration: float = 2.0,
                 reward=None) -> TabularChain:
    """Dirichlet kernel rows, uniform prior, rewards evenly spaced on [0, 1]."""
    S = num_states
    kernels = rng.dirichlet(np.full(S, concentration), size=(steps, S))
    if reward is None:
        reward = np.linspace(0.0, 1.0, S)
    return TabularChain(kernels, np.full(S, 1.0 / S), reward)


FIXTURE_SEED = 20240611


def standard_chain(num_states: int = 4, steps: int = 3) -> TabularChain:
    """The standard fixture: a fixed-seed random chain, independent of the training seed."""
    return random_chain(num_states, steps, RngStream(FIXTURE_SEED, stream=num_states * 1000 + steps))


class TabularPolicy:
    """Per-step, per-row softmax policy. ``logits`` has shape ``(T, S, S)``."""

    def __init__(self, logits):
        self.logits = np.array(logits, dtype=float)
        if self.logits.ndim != 3 or self.logits.shape[1] != self.logits.shape[2]:
            raise ValueError("logits must have shape (T, S, S)")

    @classmethod
    def from_kernels(cls, kernels) -> "TabularPolicy":
        return cls(np.log(np.maximum(np.asarray(kernels, dtype=float), 1e-300)))

    @classmethod
    def reference(cls, chain: TabularChain) -> "TabularPolicy":
        return cls.from_kernels(chain.ref_kernels)

    @property
    def steps(self) -> int:
        return self.logits.shape[0]

    @property
    def num_states(self) -> int:
        return self.logits.shape[1]

    def log_kernels(self) -> np.ndarray:
        return log_softmax(self.logits, axis=2)

    def kernels(self) -> np.ndarray:
        return np.exp(self.log_kernels())

    def kernel(self, t: int, x_t: int | None = None) -> np.ndarray:
        k = np.exp(log_softmax(self.logits[t - 1], axis=1))
        return k if x_t is None else k[x_t]

    def params(self) -> np.ndarray:
        return self.logits.ravel().copy()

    def set_params(self, flat) -> None:
        self.logits = np.asarray(flat, dtype=float).reshape(self.logits.shape).copy()

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.logits.copy())

    def logp_grad(self, t_index, x_t, x_prev, coeff) -> np.ndarray:
        """Gradient of ``sum coeff * log p(x_prev | x_t)`` over the logits.

        ``t_index``, ``x_t``, ``x_prev`` and ``coeff`` are equal-shape arrays;
        ``t_index`` is zero-based (transition ``t`` uses ``t - 1``).
        """
        t_index, x_t, x_prev = (np.ravel(a) for a in (t_index, x_t, x_prev))
        coeff = np.ravel(coeff).astype(float)
        grad = np.zeros_like(self.logits)
        np.add.at(grad, (t_index, x_t, x_prev), coeff)
        # d log softmax / d logits = e_{x_prev} - p(. | x_t), summed per row.
        row_weight = np.zeros(self.logits.shape[:2])
        np.add.at(row_weight, (t_index, x_t), coeff)
        grad -= row_weight[:, :, None] * self.kernels()
        return grad.ravel()


def exact_tilted_kernel(chain: TabularChain, t: int, beta: float, reward=None) -> np.ndarray:
    """Reference kernel at step ``t`` tilted by ``exp(reward(x_{t-1}) / beta)``.

    ``reward`` defaults to the chain reward; passing soft values ``V[t - 1]``
    gives the conditional of the full trajectory tilt.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    r = chain.reward if reward is None else np.asarray(reward, dtype=float)
    logits = _safe_log(chain.ref_kernels[t - 1]) + r[None, :] / beta
    norm = logsumexp(logits, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError(f"tilt normaliser is not finite at step {t}")
    return np.exp(logits - norm)


def exact_soft_value(chain: TabularChain, beta: float) -> np.ndarray:
    """Soft values ``V[t, x] = beta * log E_ref[exp(r(x_0) / beta) | x_t = x]``."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    V = np.empty((chain.steps + 1, chain.num_states))
    V[0] = chain.reward
    log_k = _safe_log(chain.ref_kernels)
    for t in range(1, chain.steps + 1):
        V[t] = beta * logsumexp(log_k[t - 1] + V[t - 1][None, :] / beta, axis=1)
    return V


def soft_tilted_kernels(chain: TabularChain, beta: float) -> np.ndarray:
    """All ``T`` tilted kernels built from soft values, shape ``(T, S, S)``."""
    V = exact_soft_value(chain, beta)
    return np.stack([exact_tilted_kernel(chain, t, beta, V[t - 1]) for t in range(1, chain.steps + 1)])


def exact_kl(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("p and q must have equal shapes")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("KL undefined: q vanishes where p has mass")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def exact_kl_grad(chain: TabularChain, policy: TabularPolicy, t: int, x_t: int, beta: float,
                  reward=None) -> np.ndarray:
    """Gradient of ``KL(p_theta(.|x_t) || p_tilt(.|x_t))`` over ``logits[t-1, x_t]``."""
    target = exact_tilted_kernel(chain, t, beta, reward)[x_t]
    p = policy.kernel(t, x_t)
    log_ratio = np.where(p > 0, _safe_log(p) - _safe_log(target), 0.0)
    kl = float(np.sum(p * log_ratio))
    return p * (log_ratio - kl)


def _tuples(n_support: int, K: int) -> np.ndarray:
    if n_support**K > ENUMERATION_LIMIT:
        raise SizeLimitError(f"{n_support}^{K} tuples exceeds the enumeration limit {ENUMERATION_LIMIT}")
    return np.array(list(itertools.product(range(n_support), repeat=K)), dtype=np.intp).reshape(-1, K)


def _row_terms(chain, policy, t, x_t, beta, reward):
    r = chain.reward if reward is None else np.asarray(reward, dtype=float)
    p = policy.kernel(t, x_t)
    support = np.flatnonzero(p > 0)
    f = _safe_log(chain.ref_kernels[t - 1, x_t, support]) - np.log(p[support]) + r[support] / beta
    return p, support, f


def enumerate_expected_grad_mc(chain: TabularChain, policy: TabularPolicy, t: int, x_t: int, K: int,
                               beta: float, reward=None) -> np.ndarray:
    """Exact expectation of the K-sample Monte-Carlo gradient over one row's logits.

    Enumerates every ordered K-tuple drawn i.i.d. from the policy row and
    weights it by its probability. Only states in the row's support are
    enumerated, so the guard applies to ``|support|^K``.
    """
    if K < 2:
        raise ValueError("group size K must be >= 2")
    p, support, f = _row_terms(chain, policy, t, x_t, beta, reward)
    idx = _tuples(len(support), K)
    prob = np.prod(p[support][idx], axis=1)
    fs = f[idx]
    adv = fs - fs.mean(axis=1, keepdims=True)
    # Per-tuple gradient: -(1/(K-1)) sum_i A_i (e_{x_i} - p).
    coeff = -adv / (K - 1)
    grad = np.zeros(len(p))
    np.add.at(grad, support[idx].ravel(), (prob[:, None] * coeff).ravel())
    grad -= np.sum(prob * coeff.sum(axis=1)) * p
    return grad


def enumerate_expected_loss_mc(chain: TabularChain, policy: TabularPolicy, t: int, x_t: int, K: int,
                               beta: float, reward=None) -> float:
    """Exact expectation of the K-sample Monte-Carlo log-variance loss for one row."""
    if K < 2:
        raise ValueError("group size K must be >= 2")
    p, support, f = _row_terms(chain, policy, t, x_t, beta, reward)
    idx = _tuples(len(support), K)
    prob = np.prod(p[support][idx], axis=1)
    fs = f[idx]
    adv = fs - fs.mean(axis=1, keepdims=True)
    return float(np.sum(prob * np.sum(adv**2, axis=1)) / (2 * (K - 1)))


def exact_log_variance_loss(chain: TabularChain, policy: TabularPolicy, t: int, x_t: int, beta: float,
                            reward=None) -> float:
    """Half the exact variance of the per-step log-weight under the policy row."""
    p, support, f = _row_terms(chain, policy, t, x_t, beta, reward)
    w = p[support]
    mean = np.sum(w * f)
    return float(0.5 * np.sum(w * (f - mean) ** 2))


def state_marginals(chain: TabularChain, kernels=None) -> np.ndarray:
    """Marginals of ``x_t`` for ``t = 0..T`` under ``kernels`` (default: reference)."""
    kernels = chain.ref_kernels if kernels is None else np.asarray(kernels)
    T = chain.steps
    out = np.empty((T + 1, chain.num_states))
    out[T] = chain.prior
    for t in range(T, 0, -1):
        out[t - 1] = out[t] @ kernels[t - 1]
    return out


def total_variation(p, q, axis=-1):
    return 0.5 * np.sum(np.abs(np.asarray(p) - np.asarray(q)), axis=axis)


def row_kl(p, q) -> np.ndarray:
    """Row-wise KL over the last axis, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def row_kl_grad(p, q) -> np.ndarray:
    """Gradient of row-wise ``KL(softmax(z) || q)`` over the logits ``z``."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.where(p > 0, np.log(p) - np.log(q), 0.0)
    kl = np.sum(p * log_ratio, axis=-1, keepdims=True)
    return p * (log_ratio - kl)


def enumerate_trajectories(chain: TabularChain, policy: TabularPolicy):
    """All ``S^(T+1)`` trajectories with their probabilities under the policy.

    Returns ``(states, prob)`` where ``states[n, t]`` is ``x_t``.
    """
    S, T = chain.num_states, chain.steps
    if S ** (T + 1) > ENUMERATION_LIMIT:
        raise SizeLimitError(f"{S}^{T + 1} trajectories exceeds the enumeration limit {ENUMERATION_LIMIT}")
    states = np.array(list(itertools.product(range(S), repeat=T + 1)), dtype=np.intp)
    log_k = policy.log_kernels()
    logp = _safe_log(chain.prior[states[:, T]])
    for t in range(1, T + 1):
        logp = logp + log_k[t - 1, states[:, t], states[:, t - 1]]
    return states, np.exp(logp)
