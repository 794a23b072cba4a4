"""Hamiltonian Monte Carlo for the self-normalised improved policy.

The target is ``p(a|s) ∝ pi(a|s) * exp(Q(s, a))``. For squashed policies the
chain runs in the pre-squash coordinates ``u`` (``a = tanh(u)``), where the
target is ``N(u; mu, sigma) * exp(Q(s, tanh(u)))`` and smooth everywhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .mi_estimators import Critic
from .nn import bind

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HmcConfig:
    burn_in: int = 5
    leapfrog_steps: int = 2
    step_size: float = 1.0
    chains: int = 1
    precondition: bool = True

    def __post_init__(self):
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")


class EnergyTarget:
    """Unnormalised log-density over a batch of independent chains.

    ``value_and_grad(x)`` maps ``(C, d)`` positions to ``(C,)`` log-densities
    and their ``(C, d)`` gradients.
    """

    def __init__(self, value_and_grad: Callable):
        self.value_and_grad = value_and_grad

    @classmethod
    def from_functions(cls, log_density, grad) -> "EnergyTarget":
        return cls(lambda x: (log_density(x), grad(x)))

    def log_density(self, x):
        return self.value_and_grad(x)[0]

    def grad(self, x):
        return self.value_and_grad(x)[1]


class HmcResult(NamedTuple):
    samples: np.ndarray  # (num_samples, C, d)
    acceptance_rate: float
    accept_per_chain: np.ndarray


def _as_chains(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None], True
    return x, False


def hmc_chain(target: EnergyTarget, init, config: HmcConfig, rng, num_samples=1) -> HmcResult:
    """Run independent HMC chains, one per row of ``init``.

    Each iteration resamples a unit-Gaussian momentum, integrates
    ``leapfrog_steps`` leapfrog steps and applies a Metropolis correction.
    The first ``burn_in`` states are discarded; the following
    ``num_samples`` states are returned. A 1-D ``init`` is a batch of scalar
    chains.
    """
    x, scalar = _as_chains(init)
    logp, grad = target.value_and_grad(x)
    if not np.all(np.isfinite(logp)) or not np.all(np.isfinite(grad)):
        raise ValueError("non-finite energy at chain initialisation")
    eps, n_leap = config.step_size, config.leapfrog_steps
    total = config.burn_in + num_samples
    out = np.empty((num_samples, *x.shape))
    accepted = np.zeros(x.shape[0])
    for it in range(total):
        p0 = rng.standard_normal(x.shape)
        xn, gn = x, grad
        p = p0 + 0.5 * eps * gn
        for i in range(n_leap):
            xn = xn + eps * p
            ln, gn = target.value_and_grad(xn)
            if i < n_leap - 1:
                p = p + eps * gn
        p = p + 0.5 * eps * gn
        with np.errstate(over="ignore", invalid="ignore"):
            h0 = -logp + 0.5 * np.sum(p0 * p0, axis=-1)
            h1 = -ln + 0.5 * np.sum(p * p, axis=-1)
            log_ratio = h0 - h1
        finite = np.isfinite(log_ratio) & np.all(np.isfinite(xn), axis=-1) & np.all(np.isfinite(gn), axis=-1)
        log_u = np.log(rng.uniform(size=x.shape[0]))
        accept = finite & (log_u < np.where(finite, log_ratio, -np.inf))
        x = np.where(accept[:, None], xn, x)
        grad = np.where(accept[:, None], gn, grad)
        logp = np.where(accept, ln, logp)
        if it >= config.burn_in:
            out[it - config.burn_in] = x
            accepted += accept
    rate = accepted / max(num_samples, 1)
    if scalar:
        out = out[..., 0]
    return HmcResult(out, float(rate.mean()), rate)


# ---------------------------------------------------------------------------
# improved-policy target


_GRAD_GRAPHS: dict = {}


def _critic_grad_graph(critic: Critic):
    key = tuple((tuple(n.sizes), n.activation) for n in critic.nets)
    if key not in _GRAD_GRAPHS:
        g = ad.Graph()
        s, a = g.leaf("s"), g.leaf("a")
        nets = tuple(bind(g, n, f"T{i}") for i, n in enumerate(critic.nets))
        q = critic.value(s, a, nets)
        g.output("q", q)
        _GRAD_GRAPHS[key] = (g, g.output("total", ad.sum(q)))
    return _GRAD_GRAPHS[key]


def critic_value_and_grad(critic, s, a):
    """``Q(s, a)`` and ``dQ/da`` for a batch of pairs."""
    if isinstance(critic, Critic):
        g, total = _critic_grad_graph(critic)
        inputs = critic.named("T")
        inputs.update(s=s, a=a)
        out = ad.forward(g, inputs)
        return out["q"] + critic.offset, ad.backward(g, total, wrt=["a"])["a"]
    grad_fn = getattr(critic, "grad", None)
    if grad_fn is None:
        raise TypeError("critic needs a 'grad' function to drive HMC")
    return critic(s, a), np.asarray(grad_fn(s, a), dtype=np.float64)


def improved_policy_target(policy: dist.GaussianPolicy, critic, s, precondition=False) -> EnergyTarget:
    """Target ``log N(u; mu(s), sigma(s)) + Q(s, squash(u))`` over pre-squash ``u``.

    With ``precondition`` the chain coordinate is ``z = (u - mu) / sigma``
    instead, which amounts to a diagonal mass matrix ``sigma**-2`` and keeps
    a unit leapfrog step stable for narrow policies.
    """
    s = np.asarray(s, dtype=np.float64)
    mu, log_std = dist.head(policy, s)
    inv_var = np.exp(-2.0 * log_std)
    sigma = np.exp(log_std)

    if precondition:
        def value_and_grad(z):
            u = mu + sigma * z
            base = -0.5 * np.sum(z * z, axis=-1)
            a = np.tanh(u) if policy.squash else u
            q, gq = critic_value_and_grad(critic, s, a)
            if policy.squash:
                gq = gq * (1.0 - a * a)
            return base + q, -z + gq * sigma
        return EnergyTarget(value_and_grad)

    def value_and_grad(u):
        base = dist.gaussian_log_density(u, mu, log_std)
        gbase = -(u - mu) * inv_var
        if policy.squash:
            a = np.tanh(u)
            q, gq = critic_value_and_grad(critic, s, a)
            return base + q, gbase + gq * (1.0 - a * a)
        q, gq = critic_value_and_grad(critic, s, u)
        return base + q, gbase + gq

    return EnergyTarget(value_and_grad)


class ImprovedSamples(NamedTuple):
    actions: np.ndarray  # (num_samples * chains, B, da)
    pre_squash: np.ndarray
    acceptance_rate: float


def sample_improved_policy(policy: dist.GaussianPolicy, critic, s, config: HmcConfig, rng,
                           num_samples=1) -> ImprovedSamples:
    """Draw actions from ``pi(a|s) exp(Q(s, a)) / Z(s)`` for each state in ``s``.

    Every chain starts from a fresh policy sample. With
    ``config.precondition`` the chain runs on the standardised pre-squash
    coordinate (see :func:`improved_policy_target`).
    """
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite state")
    single = s.ndim == 1
    s2 = s[None, :] if single else s
    if config.chains > 1:
        s2 = np.repeat(s2, config.chains, axis=0)
    draw = dist.rsample(policy, s2, rng)
    init = draw.noise if config.precondition else draw.pre_squash
    target = improved_policy_target(policy, critic, s2, config.precondition)
    res = hmc_chain(target, init, config, rng, num_samples)
    u = res.samples
    if config.precondition:
        mu, log_std = dist.head(policy, s2)
        u = mu + np.exp(log_std) * u
    if config.chains > 1:
        n, bc, d = u.shape
        u = u.reshape(n, bc // config.chains, config.chains, d).transpose(0, 2, 1, 3).reshape(-1, bc // config.chains, d)
    if single:
        u = u[:, 0, :]
    a = np.tanh(u) if policy.squash else u
    log.debug("hmc acceptance %.3f", res.acceptance_rate)
    return ImprovedSamples(a, u, res.acceptance_rate)


def snis_expectation(policy: dist.GaussianPolicy, critic, s, f, k, rng):
    """Self-normalised importance estimate of ``E_{p(a|s)}[f(a)]``.

    Proposals are ``k`` policy samples per state weighted by
    ``softmax_j Q(s, a_j)``.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = s[None, :] if single else s
    s_rep = np.broadcast_to(s2[:, None, :], (s2.shape[0], k, s2.shape[1]))
    a = dist.rsample(policy, s_rep, rng).action
    q = np.asarray(critic(s_rep, a), dtype=np.float64)
    w = np.exp(q - q.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    fa = np.asarray(f(a), dtype=np.float64)
    if fa.ndim == 2:
        fa = fa[..., None]
    out = np.einsum("bk,bkd->bd", w, fa)
    return out[0] if single else out
