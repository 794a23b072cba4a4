"""Diagonal Gaussian policies with optional tanh squashing."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .nn import MlpParams, init_mlp, mlp_apply

LOG_2PI = float(np.log(2.0 * np.pi))
ATANH_MARGIN = 1e-6


@dataclass(frozen=True)
class GaussianPolicy:
    """State-conditional diagonal Gaussian, optionally squashed through tanh.

    The network maps a state to ``[mean, log_std]`` (``2 * action_dim``
    outputs), or to the mean alone when ``fixed_log_std`` is set.
    """

    net: MlpParams
    action_dim: int
    squash: bool = True
    log_std_min: float = -20.0
    log_std_max: float = 2.0
    fixed_log_std: float | None = None

    def __post_init__(self):
        want = self.action_dim if self.fixed_log_std is not None else 2 * self.action_dim
        if self.net.out_dim != want:
            raise ValueError(f"policy network must output {want} values, has {self.net.out_dim}")

    @property
    def state_dim(self) -> int:
        return self.net.in_dim

    def with_net(self, net: MlpParams) -> "GaussianPolicy":
        return replace(self, net=net)


def make_policy(state_dim, action_dim, rng, hidden=(64, 64), activation="elu", **kwargs) -> GaussianPolicy:
    out = action_dim if kwargs.get("fixed_log_std") is not None else 2 * action_dim
    net = init_mlp([state_dim, *hidden, out], rng, activation, out_scale=0.1)
    return GaussianPolicy(net, action_dim, **kwargs)


class ActionSample(NamedTuple):
    action: np.ndarray
    pre_squash: np.ndarray
    log_prob: np.ndarray
    noise: np.ndarray


class DiagGaussian(NamedTuple):
    """Fixed diagonal Gaussian density over actions (the marginal model)."""

    mean: np.ndarray
    var: np.ndarray

    def log_prob(self, a):
        a = np.asarray(a, dtype=np.float64)
        z = (a - self.mean) ** 2 / self.var
        return -0.5 * np.sum(z + np.log(self.var) + LOG_2PI, axis=-1)


# ---------------------------------------------------------------------------
# building blocks shared by the eager and graph paths


def head(policy: GaussianPolicy, s, net=None):
    """Mean and clamped log-std of the base Gaussian at states ``s``."""
    out = mlp_apply(net if net is not None else policy.net, s)
    d = policy.action_dim
    if policy.fixed_log_std is not None:
        return out, ad.add(ad.mul(out, 0.0), policy.fixed_log_std)
    mu = ad.slice_last(out, 0, d)
    log_std = ad.clip(ad.slice_last(out, d, 2 * d), policy.log_std_min, policy.log_std_max)
    return mu, log_std


def gaussian_log_density(u, mu, log_std):
    """Diagonal Gaussian log-density summed over the last axis."""
    z = ad.mul(ad.sub(u, mu), ad.exp(ad.neg(log_std)))
    per_dim = ad.add(ad.add(ad.mul(ad.square(z), -0.5), ad.neg(log_std)), -0.5 * LOG_2PI)
    return ad.sum(per_dim, axis=-1)


def squash_correction(u):
    """``sum log(1 - tanh(u)**2)`` over the last axis."""
    return ad.sum(ad.squash_logdet(u), axis=-1)


def reparam_sample(policy: GaussianPolicy, mu, log_std, eps):
    """Differentiable ``(action, pre_squash, log_prob)`` from fixed noise ``eps``."""
    u = ad.add(mu, ad.mul(eps, ad.exp(log_std)))
    logp = gaussian_log_density(u, mu, log_std)
    if policy.squash:
        return ad.tanh(u), u, ad.sub(logp, squash_correction(u))
    return u, u, logp


def pre_squash(policy: GaussianPolicy, a, margin=ATANH_MARGIN):
    """Map actions to the base Gaussian's coordinates (atanh with a boundary margin)."""
    a = np.asarray(a, dtype=np.float64)
    if not policy.squash:
        return a
    return np.arctanh(np.clip(a, -1.0 + margin, 1.0 - margin))


# ---------------------------------------------------------------------------
# eager API


def log_prob(policy: GaussianPolicy, s, a):
    """Exact log-density of actions ``a`` at states ``s``.

    Under squashing every ``|a_i|`` must be strictly below 1; use
    :func:`dataset_log_prob` for actions that may sit on the boundary.
    """
    a = np.asarray(a, dtype=np.float64)
    if policy.squash and np.any(np.abs(a) >= 1.0):
        raise ValueError("squashed policy: action coordinates must satisfy |a| < 1")
    mu, log_std = head(policy, np.asarray(s, dtype=np.float64))
    if not policy.squash:
        return gaussian_log_density(a, mu, log_std)
    u = np.arctanh(a)
    return gaussian_log_density(u, mu, log_std) - squash_correction(u)


def dataset_log_prob(policy: GaussianPolicy, s, a, margin=ATANH_MARGIN):
    a = np.asarray(a, dtype=np.float64)
    if policy.squash:
        a = np.clip(a, -1.0 + margin, 1.0 - margin)
    return log_prob(policy, s, a)


def rsample(policy: GaussianPolicy, s, rng, eps=None) -> ActionSample:
    """Reparameterised sample ``squash(mu + eps * sigma)``."""
    s = np.asarray(s, dtype=np.float64)
    mu, log_std = head(policy, s)
    if eps is None:
        eps = rng.standard_normal(np.shape(mu))
    a, u, logp = reparam_sample(policy, mu, log_std, np.asarray(eps, dtype=np.float64))
    return ActionSample(a, u, logp, eps)


def mean_action(policy: GaussianPolicy, s):
    mu, _ = head(policy, np.asarray(s, dtype=np.float64))
    return np.tanh(mu) if policy.squash else mu


def entropy_estimate(policy: GaussianPolicy, s, n=1000, rng=None):
    """Policy entropy at states ``s`` (one value per state).

    Closed form without squashing; Monte Carlo ``-E[log pi]`` with ``n``
    samples otherwise.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    s = np.asarray(s, dtype=np.float64)
    mu, log_std = head(policy, s)
    if not policy.squash:
        return np.sum(log_std + 0.5 * (LOG_2PI + 1.0), axis=-1)
    rng = rng if rng is not None else np.random.default_rng(0)
    eps = rng.standard_normal((n, *np.shape(mu)))
    _, _, logp = reparam_sample(policy, mu, log_std, eps)
    return -np.mean(logp, axis=0)


def fit_marginal(actions, var_floor=1e-6) -> DiagGaussian:
    """Maximum-likelihood diagonal Gaussian over a set of action vectors."""
    a = np.asarray(actions, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < 2:
        raise ValueError("fit_marginal needs at least two actions")
    mean = a.mean(axis=0)
    var = np.maximum(a.var(axis=0), var_floor)
    return DiagGaussian(mean, var)
