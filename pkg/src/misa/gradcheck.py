"""Check MI policy-gradient estimators against a quadrature oracle.

The test problem has a 1-D state and a 1-D unsquashed Gaussian policy, so
``log E_pi[exp(T(s, a))]`` can be integrated on a dense action grid and the
exact gradient of the MI bound obtained by central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import distributions as dist
from .agent import misa_policy_gradient
from .mcmc import HmcConfig
from .mi_estimators import FunctionCritic, constant_critic, make_critic

GRID = np.linspace(-40.0, 40.0, 16001)


@dataclass(frozen=True)
class GradcheckProblem:
    policy: dist.GaussianPolicy
    critic: object
    s: np.ndarray  # (N, 1)
    a: np.ndarray  # (N, 1)


def quadratic_critic(peak=0.5, curvature=1.0) -> FunctionCritic:
    """``T(s, a) = -curvature * (a - peak * s)**2`` with its action gradient."""
    def fn(s, a):
        return -curvature * np.sum((a - peak * s) ** 2, axis=-1)

    def grad(s, a):
        return -2.0 * curvature * (a - peak * s)

    return FunctionCritic(fn, grad=grad)


def make_problem(rng, q="mlp", n=8, hidden=(8,)) -> GradcheckProblem:
    """Random policy, critic and data pairs.

    ``q`` selects the critic: ``"mlp"`` (random ELU network), ``"peaked"``
    (sharp quadratic), ``"quadratic"`` (unit-curvature quadratic) or
    ``"zero"``.
    """
    policy = dist.make_policy(1, 1, rng, hidden, "tanh", squash=False)
    net = policy.net
    layers = tuple((w * 3.0, b * 3.0) if i == len(net.layers) - 1 else (w, b)
                   for i, (w, b) in enumerate(net.layers))
    policy = policy.with_net(type(net)(layers, net.activation))
    if q == "mlp":
        critic = make_critic(1, 1, rng, (16,), "elu", out_scale=1.0)
    elif q == "peaked":
        critic = quadratic_critic(0.5, 25.0)
    elif q == "quadratic":
        critic = quadratic_critic(0.5, 1.0)
    elif q == "zero":
        critic = constant_critic(0.0)
    else:
        raise ValueError(f"unknown critic {q!r}")
    s = rng.uniform(-1.0, 1.0, size=(n, 1))
    a = 0.5 * s + 0.5 * rng.standard_normal((n, 1))
    return GradcheckProblem(policy, critic, s, a)


def _critic_on_grid(critic, s):
    a = np.broadcast_to(GRID[None, :, None], (len(s), len(GRID), 1))
    return np.asarray(critic(s[:, None, :], a), dtype=np.float64)


def quadrature_bound(policy, critic, s, a, t_grid=None) -> float:
    """``mean log pi(a|s) - mean_s log integral pi(a|s) exp(T(s, a)) da``.

    The energy's data term does not depend on the policy and is left out.
    """
    mu, log_std = dist.head(policy, s)
    data = np.mean(dist.gaussian_log_density(a, mu, log_std))
    t = _critic_on_grid(critic, s) if t_grid is None else t_grid
    z = (GRID[None, :] - mu) / np.exp(log_std)
    log_pi = -0.5 * z * z - log_std - 0.5 * dist.LOG_2PI
    x = log_pi + t
    m = x.max(axis=1, keepdims=True)
    dx = GRID[1] - GRID[0]
    log_int = m[:, 0] + np.log(np.trapezoid(np.exp(x - m), dx=dx, axis=1))
    return float(data - np.mean(log_int))


def oracle_gradient(problem: GradcheckProblem, h=1e-5) -> dict:
    """Central finite differences of :func:`quadrature_bound` in every parameter."""
    policy, s, a = problem.policy, problem.s, problem.a
    t_grid = _critic_on_grid(problem.critic, s)
    params = policy.net.named("pi")
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            vals = []
            for sign in (1.0, -1.0):
                p = dict(params)
                v = value.copy()
                v[idx] += sign * h
                p[name] = v
                pol = policy.with_net(policy.net.replace_named("pi", p))
                vals.append(quadrature_bound(pol, problem.critic, s, a, t_grid))
            g[idx] = (vals[0] - vals[1]) / (2.0 * h)
        grads[name] = g
    return grads


def estimator_gradient(problem: GradcheckProblem, mode="unbiased_mcmc", k=10_000, rng=None,
                       hmc: HmcConfig | None = None, kind="MISA", per_state_k=50) -> dict:
    """MI gradient estimate with about ``k`` normaliser samples in total.

    The data pairs are replicated so that each state gets ``k / N`` chains
    (or, for ``reparam``, ``per_state_k`` samples per replicated state).
    """
    rng = rng if rng is not None else np.random.default_rng()
    reps = max(1, k // len(problem.s))
    s = np.repeat(problem.s, reps, axis=0)
    a = np.repeat(problem.a, reps, axis=0)
    if mode == "reparam":
        reps = max(1, k // (len(problem.s) * per_state_k))
        s = np.repeat(problem.s, reps, axis=0)
        a = np.repeat(problem.a, reps, axis=0)
    grads, _ = misa_policy_gradient(problem.policy, problem.critic, s, a, mode, rng,
                                    k=per_state_k, hmc=hmc, kind=kind, margin=0.0)
    return grads


def flatten(grads: dict) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) for k in sorted(grads)])


def cosine(g1: dict, g2: dict) -> float:
    x, y = flatten(g1), flatten(g2)
    denom = np.linalg.norm(x) * np.linalg.norm(y)
    if denom == 0.0:
        return 1.0 if np.allclose(x, y) else 0.0
    return float(x @ y / denom)


def run_gradcheck(points=20, k=10_000, mode="unbiased_mcmc", q="mlp", seed=0,
                  hmc: HmcConfig | None = None) -> dict:
    """Cosine similarity between estimator and oracle at random parameter points.

    Passes when the minimum exceeds 0.95 and the mean exceeds 0.99.
    """
    rng = np.random.default_rng(seed)
    cos = []
    for _ in range(points):
        problem = make_problem(rng, q)
        cos.append(cosine(estimator_gradient(problem, mode, k, rng, hmc), oracle_gradient(problem)))
    cos = np.asarray(cos)
    return {
        "mode": mode,
        "critic": q,
        "points": points,
        "k": k,
        "cosines": [float(c) for c in cos],
        "mean_cosine": float(cos.mean()),
        "min_cosine": float(cos.min()),
        "passed": bool(cos.min() > 0.95 and cos.mean() > 0.99),
    }


def gradient_variance(problem: GradcheckProblem, mode, resamples=100, rng=None, k=400,
                      hmc: HmcConfig | None = None) -> float:
    """Trace of the covariance of an estimator's gradient over resamples."""
    rng = rng if rng is not None else np.random.default_rng()
    draws = np.stack([flatten(estimator_gradient(problem, mode, k, rng, hmc)) for _ in range(resamples)])
    return float(np.trace(np.atleast_2d(np.cov(draws, rowvar=False))))

