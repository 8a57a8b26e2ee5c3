"""Gaussian denoising chains over small real vectors, with a tiny mean network.

The reference chain predicts clean data with the Bayes-optimal affine map for
Gaussian data ``N(data_mean, data_std^2 I)``, so every reference kernel is an
exact Gaussian. The trained policy adds a two-layer ``tanh`` residual to that
prediction and a learnable per-step log-variance offset.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .core import DiffusionSchedule, RngStream

PARAM_MAGIC = b"MNET"
PARAM_VERSION = 1
_HEADER = struct.Struct("<4sIQ")  # magic, version, parameter count: 16 bytes


def posterior_coefficients(schedule: DiffusionSchedule, t: int) -> tuple[float, float]:
    """Weights ``(a, b)`` of the DDPM posterior mean ``a * x_t + b * x_hat``."""
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"step t must lie in 1..{schedule.steps}, got {t}")
    a_t, a_p = schedule.alphas[t], schedule.alphas[t - 1]
    s_t2, s_p2 = schedule.sigmas[t] ** 2, schedule.sigmas[t - 1] ** 2
    return a_t * s_p2 / (a_p * s_t2), (a_p**2 - a_t**2) / (a_p * s_t2)


def posterior_mean(schedule: DiffusionSchedule, t: int, x_t, x_hat):
    a, b = posterior_coefficients(schedule, t)
    return a * np.asarray(x_t, dtype=float) + b * np.asarray(x_hat, dtype=float)


def reverse_step_variance(schedule: DiffusionSchedule) -> np.ndarray:
    """Forward-step noise ``1 - alpha_t^2 / alpha_{t-1}^2`` for ``t = 1..T``.

    The posterior variance vanishes at ``t = 1``, which would make the last
    reverse kernel degenerate, so the forward-step noise is used instead.
    """
    a = schedule.alphas
    return 1.0 - a[1:] ** 2 / a[:-1] ** 2


def gaussian_logpdf(x, mean, var):
    """Isotropic Gaussian log-density over the last axis."""
    if not np.all(np.asarray(var) > 0):
        raise ValueError("variance must be > 0")
    diff = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    d = diff.shape[-1] if diff.ndim else 1
    sq = np.sum(diff**2, axis=-1) if diff.ndim else diff**2
    return -0.5 * d * np.log(2 * np.pi * var) - sq / (2 * var)


def grad_x_logpdf(x, mean, var, wrt: str = "x"):
    if not np.all(np.asarray(var) > 0):
        raise ValueError("variance must be > 0")
    g = -(np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)) / var
    if wrt == "x":
        return g
    if wrt == "mean":
        return -g
    raise ValueError("wrt must be 'x' or 'mean'")


def gaussian_kl(mean1, var1, mean2, var2):
    """``KL(N(mean1, var1 I) || N(mean2, var2 I))`` over the last axis."""
    diff = np.asarray(mean1, dtype=float) - np.asarray(mean2, dtype=float)
    d = diff.shape[-1]
    ratio = var1 / var2
    return 0.5 * d * (ratio - 1.0 - np.log(ratio)) + np.sum(diff**2, axis=-1) / (2 * var2)


def quadratic_tilt_closed_form(mean, var, lam, center, beta):
    """Exact tilt of ``N(mean, var I)`` by ``exp(-lam |x - center|^2 / (2 beta))``."""
    if lam < 0 or not var > 0 or not beta > 0:
        raise ValueError("need lam >= 0, var > 0, beta > 0")
    precision = 1.0 / var + lam / beta
    m = (np.asarray(mean, dtype=float) / var + lam * np.asarray(center, dtype=float) / beta) / precision
    return m, 1.0 / precision


# Rewards -----------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticReward:
    """``r(x) = -lam * |x - center|^2 / 2``."""

    lam: float
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))

    def value(self, x):
        return -0.5 * self.lam * np.sum((np.asarray(x) - self.center) ** 2, axis=-1)

    def grad(self, x):
        return -self.lam * (np.asarray(x) - self.center)


@dataclass(frozen=True)
class MixtureReward:
    """Log-density of an isotropic Gaussian mixture."""

    means: np.ndarray
    weights: np.ndarray
    std: float

    def __post_init__(self):
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=float)))
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w / w.sum())

    def _component_logs(self, x):
        x = np.asarray(x, dtype=float)
        comps = gaussian_logpdf(x[..., None, :], self.means, self.std**2)
        return comps + np.log(self.weights)

    def value(self, x):
        return logsumexp(self._component_logs(x), axis=-1)

    def grad(self, x):
        logs = self._component_logs(x)
        resp = np.exp(logs - logsumexp(logs, axis=-1, keepdims=True))
        x = np.asarray(x, dtype=float)
        return np.einsum("...k,...kd->...d", resp, (self.means - x[..., None, :])) / self.std**2


def shifted_mode_reward(dim: int) -> MixtureReward:
    """Two-mode target whose dominant mode sits away from the data mean."""
    dominant = np.full(dim, 1.5)
    return MixtureReward(np.stack([dominant, -dominant]), np.array([0.8, 0.2]), 0.6)


# Chain -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianChain:
    schedule: DiffusionSchedule
    dim: int
    reward: object
    data_mean: np.ndarray = None  # type: ignore[assignment]
    data_std: float = 1.0
    num_conditions: int = 1
    step_variance: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 1 <= self.dim:
            raise ValueError("dim must be >= 1")
        mean = np.zeros(self.dim) if self.data_mean is None else np.asarray(self.data_mean, dtype=float)
        if mean.shape != (self.dim,):
            raise ValueError("data_mean must have length dim")
        object.__setattr__(self, "data_mean", mean)
        var = reverse_step_variance(self.schedule)
        if np.any(var <= 0):
            raise ValueError("step variances must be > 0")
        object.__setattr__(self, "step_variance", var)
        a, s2 = self.schedule.alphas, self.data_std**2
        slopes = a * s2 / (a**2 * s2 + self.schedule.sigmas**2)
        object.__setattr__(self, "_slopes", slopes)
        object.__setattr__(self, "_coeffs", [None] + [posterior_coefficients(self.schedule, t)
                                                      for t in range(1, self.steps + 1)])

    @property
    def steps(self) -> int:
        return self.schedule.steps

    @property
    def prior_mean(self) -> np.ndarray:
        return self.schedule.alphas[-1] * self.data_mean

    @property
    def prior_var(self) -> float:
        aT, sT = self.schedule.alphas[-1], self.schedule.sigmas[-1]
        return float(aT**2 * self.data_std**2 + sT**2)

    def coefficients(self, t: int) -> tuple[float, float]:
        return self._coeffs[t]

    def ref_slope(self, t: int) -> float:
        return float(self._slopes[t])

    def ref_predict(self, t: int, x_t):
        slope = self._slopes[t]
        return slope * np.asarray(x_t, dtype=float) + (1.0 - slope * self.schedule.alphas[t]) * self.data_mean

    def ref_mean(self, t: int, x_t):
        a, b = self.coefficients(t)
        return a * np.asarray(x_t, dtype=float) + b * self.ref_predict(t, x_t)

    def ref_mean_slope(self, t: int) -> float:
        """``d ref_mean / d x_t`` (a multiple of the identity)."""
        a, b = self.coefficients(t)
        return a + b * self.ref_slope(t)

    def ref_logp(self, t: int, x_t, x_prev):
        return gaussian_logpdf(x_prev, self.ref_mean(t, x_t), self.step_variance[t - 1])

    def sample_prior(self, n: int, rng: RngStream) -> np.ndarray:
        return self.prior_mean + np.sqrt(self.prior_var) * rng.normal((n, self.dim))


def make_gaussian_chain(dim: int, steps: int, alpha_min: float, reward=None, **kwargs) -> GaussianChain:
    from .core import make_linear_schedule

    reward = shifted_mode_reward(dim) if reward is None else reward
    return GaussianChain(make_linear_schedule(steps, alpha_min), dim, reward, **kwargs)


# Mean network ------------------------------------------------------------

def embed_time(t, steps: int) -> np.ndarray:
    """Fixed four-feature sinusoidal embedding of the step index."""
    s = np.atleast_1d(np.asarray(t, dtype=float)) / steps
    return np.stack([np.sin(np.pi * s / 2), np.cos(np.pi * s / 2), np.sin(2 * np.pi * s), np.cos(2 * np.pi * s)],
                    axis=-1)


TIME_FEATURES = 4


@dataclass
class MeanNetCache:
    inputs: np.ndarray
    hidden: np.ndarray


class MeanNet:
    """``W2 tanh(W1 u + b1) + b2``; the first ``dim`` inputs are the state."""

    def __init__(self, W1, b1, W2, b2, state_dim: int):
        self.W1 = np.array(W1, dtype=float)
        self.b1 = np.array(b1, dtype=float)
        self.W2 = np.array(W2, dtype=float)
        self.b2 = np.array(b2, dtype=float)
        self.state_dim = int(state_dim)
        H, In = self.W1.shape
        if self.b1.shape != (H,) or self.W2.shape[1] != H or self.b2.shape != (self.W2.shape[0],):
            raise ValueError("inconsistent layer shapes")
        if not 0 < self.state_dim <= In:
            raise ValueError("state_dim must not exceed the input width")

    @classmethod
    def init(cls, state_dim: int, extra_inputs: int, hidden: int, rng: RngStream, scale: float = 1.0) -> "MeanNet":
        """Random first layer, zero output layer (so the residual starts at zero)."""
        In = state_dim + extra_inputs
        W1 = scale * rng.normal((hidden, In)) / np.sqrt(In)
        return cls(W1, np.zeros(hidden), np.zeros((state_dim, hidden)), np.zeros(state_dim), state_dim)

    @property
    def num_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {flat.shape}")
        i = 0
        for name in ("W1", "b1", "W2", "b2"):
            arr = getattr(self, name)
            setattr(self, name, flat[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def copy(self) -> "MeanNet":
        return MeanNet(self.W1, self.b1, self.W2, self.b2, self.state_dim)

    def forward(self, inputs):
        u = np.atleast_2d(np.asarray(inputs, dtype=float))
        h = np.tanh(u @ self.W1.T + self.b1)
        return h @ self.W2.T + self.b2, MeanNetCache(u, h)

    def input_jacobian(self, cache: MeanNetCache) -> np.ndarray:
        """``d output / d state`` per sample, shape ``(N, d, d)``."""
        W1x = self.W1[:, : self.state_dim]
        return np.einsum("ik,nk,kj->nij", self.W2, 1.0 - cache.hidden**2, W1x)

    def _pack(self, gW1, gb1, gW2, gb2) -> np.ndarray:
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def jacobian_vjp(self, cache: MeanNetCache, left, right) -> np.ndarray:
        """Gradient over parameters of ``sum_n left_n . J_n right_n``."""
        W1x = self.W1[:, : self.state_dim]
        h = cache.hidden
        deriv = 1.0 - h**2
        p = right @ W1x.T  # (N, H)
        q = left @ self.W2  # (N, H)
        gW2 = left.T @ (deriv * p)
        gz = -2.0 * h * deriv * q * p
        gW1 = gz.T @ cache.inputs
        gW1[:, : self.state_dim] += (q * deriv).T @ right
        return self._pack(gW1, gz.sum(axis=0), gW2, np.zeros_like(self.b2))


def meannet_backward(net: MeanNet, adjoint, cache: MeanNetCache) -> np.ndarray:
    """Reverse-mode gradient of ``sum_n <adjoint_n, net(u_n)>`` over the parameters."""
    adjoint = np.atleast_2d(np.asarray(adjoint, dtype=float))
    expected = (cache.hidden.shape[0], net.W2.shape[0])
    if adjoint.shape != expected:
        raise ValueError(f"adjoint shape {adjoint.shape} does not match network output {expected}")
    gW2 = adjoint.T @ cache.hidden
    gz = (adjoint @ net.W2) * (1.0 - cache.hidden**2)
    return net._pack(gz.T @ cache.inputs, gz.sum(axis=0), gW2, adjoint.sum(axis=0))


def save_params(path, params) -> None:
    params = np.asarray(params, dtype="<f8").ravel()
    Path(path).write_bytes(_HEADER.pack(PARAM_MAGIC, PARAM_VERSION, params.size) + params.tobytes())


def load_params(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("parameter file is shorter than its header")
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != PARAM_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != PARAM_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    if len(raw) != _HEADER.size + 8 * count:
        raise ValueError(f"header declares {count} parameters but payload holds {(len(raw) - _HEADER.size) / 8}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)


# Policies ----------------------------------------------------------------

class GaussianPolicy:
    """Reference prediction plus a ``MeanNet`` residual, with per-step variance offsets.

    Parameters are flattened as ``[net parameters, log-variance offsets]``.
    """

    def __init__(self, chain: GaussianChain, net: MeanNet, log_var_offset=None):
        self.chain = chain
        self.net = net
        T = chain.steps
        self.log_var_offset = np.zeros(T) if log_var_offset is None else np.array(log_var_offset, dtype=float)
        if self.log_var_offset.shape != (T,):
            raise ValueError("log_var_offset must have length T")

    @classmethod
    def init(cls, chain: GaussianChain, rng: RngStream, hidden: int = 16) -> "GaussianPolicy":
        extra = TIME_FEATURES + chain.num_conditions
        return cls(chain, MeanNet.init(chain.dim, extra, hidden, rng))

    @property
    def num_params(self) -> int:
        return self.net.num_params + self.chain.steps

    def params(self) -> np.ndarray:
        return np.concatenate([self.net.params(), self.log_var_offset])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        self.net.set_params(flat[: self.net.num_params])
        self.log_var_offset = flat[self.net.num_params:].copy()

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.chain, self.net.copy(), self.log_var_offset.copy())

    def _inputs(self, t: int, x_t, cond):
        x_t = np.atleast_2d(x_t)
        n = len(x_t)
        onehot = np.zeros((n, self.chain.num_conditions))
        onehot[np.arange(n), np.broadcast_to(np.asarray(cond, dtype=int), (n,))] = 1.0
        emb = np.repeat(embed_time(t, self.chain.steps), n, axis=0)
        return np.concatenate([x_t, emb, onehot], axis=1)

    def predict(self, t: int, x_t, cond=0):
        """Data prediction ``x_hat(x_t, t)`` and the network cache."""
        out, cache = self.net.forward(self._inputs(t, x_t, cond))
        return self.chain.ref_predict(t, np.atleast_2d(x_t)) + out, cache

    def mean(self, t: int, x_t, cond=0):
        a, b = self.chain.coefficients(t)
        x_hat, cache = self.predict(t, x_t, cond)
        return a * np.atleast_2d(x_t) + b * x_hat, cache

    def variance(self, t: int) -> float:
        return float(self.chain.step_variance[t - 1] * np.exp(self.log_var_offset[t - 1]))

    def logp(self, t: int, x_t, x_prev, cond=0):
        mu, _ = self.mean(t, x_t, cond)
        return gaussian_logpdf(x_prev, mu, self.variance(t))

    def sample_step(self, t: int, x_t, noise, cond=0):
        mu, _ = self.mean(t, x_t, cond)
        return mu + np.sqrt(self.variance(t)) * noise

    def logp_grad(self, t: int, x_t, x_prev, coeff, cond=0) -> np.ndarray:
        """Parameter gradient of ``sum_n coeff_n log p(x_prev_n | x_t_n)`` at one step."""
        _, b = self.chain.coefficients(t)
        mu, cache = self.mean(t, x_t, cond)
        v = self.variance(t)
        coeff = np.asarray(coeff, dtype=float)
        err = np.atleast_2d(x_prev) - mu
        g_net = meannet_backward(self.net, coeff[:, None] * b * err / v, cache)
        g_var = np.zeros(self.chain.steps)
        g_var[t - 1] = np.sum(coeff * (np.sum(err**2, axis=1) / (2 * v) - 0.5 * self.chain.dim))
        return np.concatenate([g_net, g_var])

    def grad_x_prev_logp(self, t: int, x_t, x_prev, cond=0):
        mu, _ = self.mean(t, x_t, cond)
        return grad_x_logpdf(x_prev, mu, self.variance(t))

    def grad_x_prev_logp_backward(self, t: int, x_t, x_prev, adjoint, cond=0) -> np.ndarray:
        """Parameter gradient of ``sum_n <adjoint_n, grad_x_prev_logp_n>``."""
        _, b = self.chain.coefficients(t)
        mu, cache = self.mean(t, x_t, cond)
        err = np.atleast_2d(x_prev) - mu
        v = self.variance(t)
        y = np.atleast_2d(adjoint)
        g_net = meannet_backward(self.net, b * y / v, cache)
        g_var = np.zeros(self.chain.steps)
        g_var[t - 1] = np.sum(y * err) / v
        return np.concatenate([g_net, g_var])

    def grad_x_t_logp(self, t: int, x_t, x_prev, cond=0):
        """``d log p(x_prev | x_t) / d x_t`` including the network's input Jacobian."""
        a, b = self.chain.coefficients(t)
        mu, cache = self.mean(t, x_t, cond)
        err = np.atleast_2d(x_prev) - mu
        v = self.variance(t)
        J = self.net.input_jacobian(cache)
        lin = a + b * self.chain.ref_slope(t)
        return (lin * err + b * np.einsum("nij,ni->nj", J, err)) / v

    def grad_x_t_logp_backward(self, t: int, x_t, x_prev, adjoint, cond=0) -> np.ndarray:
        """Parameter gradient of ``sum_n <adjoint_n, grad_x_t_logp_n>``."""
        a, b = self.chain.coefficients(t)
        mu, cache = self.mean(t, x_t, cond)
        err = np.atleast_2d(x_prev) - mu
        v = self.variance(t)
        y = np.atleast_2d(adjoint)
        J = self.net.input_jacobian(cache)
        lin = a + b * self.chain.ref_slope(t)
        My = lin * y + b * np.einsum("nij,nj->ni", J, y)
        # Through the mean: d<My, err>/d mu = -My.
        g_net = meannet_backward(self.net, -b * My / v, cache)
        # Through the Jacobian: b * err^T J y.
        g_net += b / v * self.net.jacobian_vjp(cache, err, y)
        g_var = np.zeros(self.chain.steps)
        g_var[t - 1] = -np.sum(My * err) / v
        return np.concatenate([g_net, g_var])


class QuadraticTiltPolicy:
    """The exact step-wise tilt of the reference chain by a quadratic reward.

    Parameter-free; exposes the same state-gradient interface as
    ``GaussianPolicy`` so it can be scored by the gradient-matching loss.
    """

    def __init__(self, chain: GaussianChain, reward: QuadraticReward, beta: float):
        self.chain, self.reward, self.beta = chain, reward, beta

    def _tilt(self, t, x_t):
        return quadratic_tilt_closed_form(self.chain.ref_mean(t, np.atleast_2d(x_t)), self.chain.step_variance[t - 1],
                                          self.reward.lam, self.reward.center, self.beta)

    def mean(self, t, x_t, cond=0):
        return self._tilt(t, x_t)[0], None

    def variance(self, t):
        return float(self._tilt(t, np.zeros((1, self.chain.dim)))[1])

    def logp(self, t, x_t, x_prev, cond=0):
        m, v = self._tilt(t, x_t)
        return gaussian_logpdf(x_prev, m, v)

    def grad_x_prev_logp(self, t, x_t, x_prev, cond=0):
        m, v = self._tilt(t, x_t)
        return grad_x_logpdf(x_prev, m, v)

    def grad_x_t_logp(self, t, x_t, x_prev, cond=0):
        m, v = self._tilt(t, x_t)
        slope = self.chain.ref_mean_slope(t) * v / self.chain.step_variance[t - 1]
        return slope * (np.atleast_2d(x_prev) - m) / v
