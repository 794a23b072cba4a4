import numpy as np
import pytest

from misa import distributions as dist
from misa import gradcheck as gc
from misa.mcmc import HmcConfig
from misa.mi_estimators import constant_critic


def test_quadrature_bound_with_zero_critic_is_data_log_likelihood(rng):
    problem = gc.make_problem(rng, "zero")
    mu, log_std = dist.head(problem.policy, problem.s)
    expected = np.mean(dist.gaussian_log_density(problem.a, mu, log_std))
    # log integral of a normalised density is zero
    assert gc.quadrature_bound(problem.policy, problem.critic, problem.s, problem.a) == pytest.approx(expected, abs=1e-10)


def test_quadrature_bound_constant_shift():
    rng = np.random.default_rng(3)
    problem = gc.make_problem(rng, "zero")
    base = gc.quadrature_bound(problem.policy, problem.critic, problem.s, problem.a)
    shifted = gc.quadrature_bound(problem.policy, constant_critic(2.5), problem.s, problem.a)
    assert shifted == pytest.approx(base - 2.5, abs=1e-10)


def test_quadratic_critic_closed_form():
    # integral of N(a; mu, sd^2) exp(-c (a - m)^2) da in closed form
    rng = np.random.default_rng(4)
    problem = gc.make_problem(rng, "quadratic")
    mu, log_std = dist.head(problem.policy, problem.s)
    var, c, m = np.exp(2 * log_std[:, 0]), 1.0, 0.5 * problem.s[:, 0]
    log_int = -0.5 * np.log1p(2 * c * var) - c * (mu[:, 0] - m) ** 2 / (1 + 2 * c * var)
    data = np.mean(dist.gaussian_log_density(problem.a, mu, log_std))
    expected = data - np.mean(log_int)
    assert gc.quadrature_bound(problem.policy, problem.critic, problem.s, problem.a) == pytest.approx(expected, abs=1e-9)


def test_cosine_helper():
    a = {"x": np.array([1.0, 0.0]), "y": np.array([[2.0]])}
    assert gc.cosine(a, a) == pytest.approx(1.0)
    assert gc.cosine(a, {k: -v for k, v in a.items()}) == pytest.approx(-1.0)
    zero = {k: np.zeros_like(v) for k, v in a.items()}
    assert gc.cosine(zero, zero) == 1.0


def test_mlp_critic_gradient_agrees_with_oracle():
    report = gc.run_gradcheck(points=2, k=10_000, q="mlp", seed=1)
    assert report["mean_cosine"] > 0.99


def test_quadratic_critic_needs_burn_in():
    report = gc.run_gradcheck(points=2, k=10_000, q="quadratic", seed=2, hmc=HmcConfig(burn_in=20))
    assert report["mean_cosine"] > 0.99


def test_reparam_mode_runs():
    rng = np.random.default_rng(5)
    problem = gc.make_problem(rng, "mlp")
    grads = gc.estimator_gradient(problem, "reparam", k=800, rng=rng)
    assert set(grads) == set(problem.policy.net.named("pi"))
    assert gc.cosine(grads, gc.oracle_gradient(problem)) > 0.5


def test_unknown_critic():
    with pytest.raises(ValueError):
        gc.make_problem(np.random.default_rng(0), "cubic")
