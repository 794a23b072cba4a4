import numpy as np
import pytest

from misa import distributions as dist
from misa.mi_estimators import (
    BoundKind,
    EstimatorConfig,
    EstimatorDivergence,
    GaussianJoint,
    constant_critic,
    estimate_ba,
    estimate_bound,
    estimate_misa,
    estimate_misa_dv,
    estimate_misa_f,
    log_mean_exp,
    make_critic,
    train_estimator,
)
from misa.nn import MlpParams

ENERGY_KINDS = (BoundKind.MISA_F, BoundKind.MISA_DV, BoundKind.MISA)


def conditional_policy(rho):
    """Unsquashed linear policy equal to the joint's exact conditional."""
    w = np.array([[rho, 0.0]])
    b = np.array([0.0, 0.5 * np.log1p(-rho**2)])
    return dist.GaussianPolicy(MlpParams(((w, b),)), 1, squash=False)


@pytest.fixture
def batch(rng):
    return GaussianJoint(0.6).sample(rng, 512)


def test_log_mean_exp_values():
    assert log_mean_exp(np.zeros(3)) == 0.0
    assert log_mean_exp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0)
    assert log_mean_exp(np.array([0.0, np.log(3.0)])) == pytest.approx(np.log(2.0))
    with pytest.raises(ValueError):
        log_mean_exp(np.zeros(0))


def test_ba_of_exact_conditional_recovers_analytic_mi():
    joint = GaussianJoint(0.8)
    rng = np.random.default_rng(0)
    est = estimate_ba(joint.sample(rng, 200_000), conditional_policy(0.8), joint.marginal)
    assert est.value == pytest.approx(joint.mutual_information, abs=0.01)
    assert joint.mutual_information == pytest.approx(0.5108256, abs=1e-7)


def test_ba_independent_and_state_blind_policies_are_zero(rng):
    joint = GaussianJoint(0.0)
    s, a = joint.sample(rng, 100_000)
    assert estimate_ba((s, a), conditional_policy(0.0), joint.marginal).value == pytest.approx(0.0, abs=0.01)
    # state-blind policy equal to the shared analytic marginal: terms cancel exactly
    s, a = GaussianJoint(0.7).sample(rng, 64)
    assert estimate_ba((s, a), conditional_policy(0.0), joint.marginal).value == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("c", [0.0, 1.0, -3.0])
def test_constant_energy_closed_forms(batch, c):
    pol = dist.make_policy(1, 1, np.random.default_rng(1), (8,), squash=False)
    ba = estimate_ba(batch, pol).value
    critic = constant_critic(c)
    for fn in (estimate_misa, estimate_misa_dv):
        assert fn(batch, pol, critic, k=8, rng=np.random.default_rng(2)).value == pytest.approx(ba, abs=1e-12)
    f_val = estimate_misa_f(batch, pol, critic, k=8, rng=np.random.default_rng(2)).value
    assert f_val == pytest.approx(ba + c - np.exp(c - 1.0), abs=1e-12)
    if c == 1.0:
        assert f_val == pytest.approx(ba, abs=1e-12)
    if c == 0.0:
        assert f_val == pytest.approx(ba - 0.36787944, abs=1e-8)


def test_bound_ordering_for_fixed_critic_and_samples(batch, rng):
    pol = dist.make_policy(1, 1, rng, (8,), squash=False)
    critic = make_critic(1, 1, rng, (8,), out_scale=0.5)
    samples = dist.rsample(pol, np.repeat(batch[0][:, None, :], 16, axis=1), rng).action
    vals = {k: estimate_bound(k, batch, pol, critic, samples=samples).value for k in ENERGY_KINDS}
    # Jensen: mean of per-state lme <= lme pooled; log x <= x / e
    assert vals[BoundKind.MISA] >= vals[BoundKind.MISA_DV] - 1e-12
    assert vals[BoundKind.MISA_DV] >= vals[BoundKind.MISA_F] - 1e-12


def test_terms_reported(batch, rng):
    pol = dist.make_policy(1, 1, rng, (8,), squash=False)
    est = estimate_misa(batch, pol, make_critic(1, 1, rng, (8,)), k=4, rng=rng, marginal=GaussianJoint(0.6).marginal)
    assert est.value == pytest.approx(est.ba_term + est.energy_term - est.normalizer_term)
    assert est.marginal_mode == "analytic"
    assert estimate_ba(batch, pol).marginal_mode == "omitted"


def test_f_bound_clamp_flag(batch, rng):
    pol = dist.make_policy(1, 1, rng, (8,), squash=False)
    est = estimate_misa_f(batch, pol, constant_critic(60.0), k=4, rng=rng)
    assert est.clipped
    assert np.isfinite(est.value)


def test_invalid_inputs(rng):
    pol = dist.make_policy(1, 1, rng, (8,), squash=False)
    critic = constant_critic(0.0)
    with pytest.raises(ValueError):
        estimate_misa((np.zeros((0, 1)), np.zeros((0, 1))), pol, critic)
    with pytest.raises(ValueError):
        estimate_misa((np.zeros((2, 1)), np.zeros((2, 1))), pol, critic, k=0)
    with pytest.raises(ValueError):
        BoundKind("nope")


def test_trained_misa_brackets_rho_half():
    joint = GaussianJoint(0.5)
    cfg = EstimatorConfig(batch_size=128, k=50, seed=0, mi_hint=joint.mutual_information)
    res = train_estimator(joint.sample, BoundKind.MISA, 800, cfg, joint.marginal)
    assert 0.09 <= res.final <= joint.mutual_information + 0.05
    assert len(res.curve) == 800
    assert {"step", "kind", "value", "ba_term", "energy_term", "normalizer_term"} <= set(res.curve[0])


def test_divergence_is_detected():
    joint = GaussianJoint(0.99)
    cfg = EstimatorConfig(batch_size=64, k=8, seed=0, mi_hint=0.0)
    with pytest.raises(EstimatorDivergence, match="ba="):
        train_estimator(joint.sample, BoundKind.BA, 2000, cfg, joint.marginal)
