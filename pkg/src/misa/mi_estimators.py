"""Variational lower bounds on the state-action mutual information.

Four bounds are provided, all built from a batch of dataset pairs, a
variational policy and an energy (critic) function ``T``:

* ``BA``      ``E_D[log pi(a|s) - log p(a)]``
* ``MISA_F``  BA + ``E_D[T] - E_{p(s) pi}[exp(T - 1)]``
* ``MISA_DV`` BA + ``E_D[T] - log E_{p(s) pi}[exp(T)]`` (one normaliser pooled over states)
* ``MISA``    BA + ``E_D[T] - E_{p(s)} log E_{pi}[exp(T)]`` (one normaliser per state)

At a common ``(pi, T)`` they satisfy ``MISA >= MISA_DV >= MISA_F``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .nn import Adam, bind, init_mlp, mlp_apply

log = logging.getLogger(__name__)

EXP_CLAMP = 50.0


class BoundKind(str, enum.Enum):
    BA = "BA"
    MISA_F = "MISA_F"
    MISA_DV = "MISA_DV"
    MISA = "MISA"


# tightness chain, loosest first
BOUND_ORDER = (BoundKind.MISA_F, BoundKind.MISA_DV, BoundKind.MISA)


class EstimatorDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class MIBoundEstimate:
    kind: BoundKind
    value: float
    ba_term: float
    energy_term: float
    normalizer_term: float
    k: int
    marginal_mode: str
    clipped: bool = False

    @property
    def terms(self) -> dict:
        return {
            "ba_term": self.ba_term,
            "energy_term": self.energy_term,
            "normalizer_term": self.normalizer_term,
        }


@dataclass(frozen=True)
class Critic:
    """Scalar function of ``(s, a)`` backed by one or two MLP heads.

    With two heads the value is their elementwise minimum. ``offset`` is a
    constant added to the output.
    """

    nets: tuple
    offset: float = 0.0

    def heads(self, s, a, nets=None):
        x = ad.concat((s, a), axis=-1)
        return [ad.slice_last(mlp_apply(n, x), 0, 1) for n in (nets or self.nets)]

    def value(self, s, a, nets=None):
        hs = self.heads(s, a, nets)
        q = hs[0] if len(hs) == 1 else ad.minimum(hs[0], hs[1])
        q = ad.sum(q, axis=-1)
        return q if self.offset == 0.0 else ad.add(q, self.offset)

    def __call__(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        s = np.broadcast_to(s, (*a.shape[:-1], s.shape[-1]))
        return self.value(s, a)

    def shifted(self, c: float) -> "Critic":
        return Critic(self.nets, self.offset + c)

    def named(self, prefix="T") -> dict:
        out = {}
        for i, n in enumerate(self.nets):
            out.update(n.named(f"{prefix}{i}"))
        return out

    def with_named(self, values: dict, prefix="T") -> "Critic":
        nets = tuple(n.replace_named(f"{prefix}{i}", values) for i, n in enumerate(self.nets))
        return Critic(nets, self.offset)


def make_critic(state_dim, action_dim, rng, hidden=(64, 64), activation="elu", heads=1,
                out_scale=1.0) -> Critic:
    nets = tuple(init_mlp([state_dim + action_dim, *hidden, 1], rng, activation, out_scale)
                 for _ in range(heads))
    return Critic(nets)


@dataclass(frozen=True)
class FunctionCritic:
    """Critic given by a plain numpy function ``f(s, a) -> values``.

    ``grad(s, a)`` (optional) returns ``df/da`` and is needed for HMC.
    """

    fn: Callable
    offset: float = 0.0
    grad: Callable | None = None

    def __call__(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        s = np.broadcast_to(s, (*a.shape[:-1], s.shape[-1]))
        return np.asarray(self.fn(s, a), dtype=np.float64) + self.offset

    def shifted(self, c: float) -> "FunctionCritic":
        return FunctionCritic(self.fn, self.offset + c, self.grad)


def constant_critic(c: float) -> FunctionCritic:
    return FunctionCritic(lambda s, a: np.zeros(a.shape[:-1]), offset=c, grad=lambda s, a: np.zeros_like(a))


# ---------------------------------------------------------------------------
# numerics shared by evaluation and training


def log_mean_exp(values, axis=-1):
    """``log(mean(exp(values)))`` computed with max subtraction."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_mean_exp of an empty array")
    v = np.moveaxis(v, axis, -1)
    return ad.log_mean_exp(v)


def normalizer(kind: BoundKind, t_samples, clamp: float | None = EXP_CLAMP):
    """Normaliser term from critic values at policy samples, shape ``(B, k)``."""
    if kind == BoundKind.MISA:
        return ad.mean(ad.log_mean_exp(t_samples))
    if kind == BoundKind.MISA_DV:
        per_state = ad.log_mean_exp(t_samples)
        return ad.log_mean_exp(per_state)
    if kind == BoundKind.MISA_F:
        t = t_samples if clamp is None else ad.clip(t_samples, -np.inf, clamp)
        return ad.mean(ad.exp(ad.sub(t, 1.0)))
    raise ValueError(f"{kind} has no normaliser")


def bound_terms(kind, logp_data, t_data, t_samples, logm_data=None, clamp=EXP_CLAMP):
    """``(value, ba, energy, normaliser)`` for arrays or graph nodes."""
    ba_vals = logp_data if logm_data is None else ad.sub(logp_data, logm_data)
    ba = ad.mean(ba_vals)
    if kind == BoundKind.BA:
        return ba, ba, 0.0, 0.0
    energy = ad.mean(t_data)
    norm = normalizer(kind, t_samples, clamp)
    return ad.sub(ad.add(ba, energy), norm), ba, energy, norm


def _policy_samples(policy, s, k, rng):
    s_rep = np.broadcast_to(s[:, None, :], (s.shape[0], k, s.shape[1]))
    return s_rep, dist.rsample(policy, s_rep, rng).action


def _resolve_marginal(marginal, marginal_mode):
    if marginal is None:
        return "omitted"
    return marginal_mode or "analytic"


def estimate_bound(kind, batch, policy, critic=None, k=50, rng=None, marginal=None,
                   marginal_mode=None, clamp=EXP_CLAMP, samples=None) -> MIBoundEstimate:
    """Evaluate one bound on a batch ``(s, a)``.

    ``samples`` may supply pre-drawn policy actions of shape ``(B, k, da)``
    so several bounds can share common random numbers.
    """
    kind = BoundKind(kind)
    s, a = (np.asarray(x, dtype=np.float64) for x in batch)
    if s.shape[0] == 0:
        raise ValueError("empty batch")
    if k < 1:
        raise ValueError("k must be >= 1")
    mode = _resolve_marginal(marginal, marginal_mode)
    logp = dist.dataset_log_prob(policy, s, a)
    logm = None if marginal is None else marginal.log_prob(a)
    if kind == BoundKind.BA:
        value, ba, energy, norm = bound_terms(kind, logp, None, None, logm)
        return MIBoundEstimate(kind, float(value), float(ba), 0.0, 0.0, k, mode)
    if samples is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        _, samples = _policy_samples(policy, s, k, rng)
    t_data = critic(s, a)
    t_samp = critic(s[:, None, :], samples)
    clipped = kind == BoundKind.MISA_F and clamp is not None and bool(np.any(t_samp > clamp))
    value, ba, energy, norm = bound_terms(kind, logp, t_data, t_samp, logm, clamp)
    est = MIBoundEstimate(kind, float(value), float(ba), float(energy), float(norm),
                          samples.shape[1], mode, clipped)
    if not np.isfinite(est.value):
        raise FloatingPointError(f"non-finite {kind.value} estimate: {est}")
    return est


def estimate_ba(batch, policy, marginal=None, marginal_mode=None) -> MIBoundEstimate:
    return estimate_bound(BoundKind.BA, batch, policy, marginal=marginal, marginal_mode=marginal_mode)


def estimate_misa_f(batch, policy, critic, k=50, rng=None, marginal=None, **kw) -> MIBoundEstimate:
    return estimate_bound(BoundKind.MISA_F, batch, policy, critic, k, rng, marginal, **kw)


def estimate_misa_dv(batch, policy, critic, k=50, rng=None, marginal=None, **kw) -> MIBoundEstimate:
    return estimate_bound(BoundKind.MISA_DV, batch, policy, critic, k, rng, marginal, **kw)


def estimate_misa(batch, policy, critic, k=50, rng=None, marginal=None, **kw) -> MIBoundEstimate:
    return estimate_bound(BoundKind.MISA, batch, policy, critic, k, rng, marginal, **kw)


# ---------------------------------------------------------------------------
# synthetic joints with known mutual information


@dataclass(frozen=True)
class GaussianJoint:
    """``s ~ N(0, 1)``, ``a | s ~ N(rho * s, 1 - rho**2)`` (so ``a ~ N(0, 1)``)."""

    rho: float

    @property
    def mutual_information(self) -> float:
        return -0.5 * np.log1p(-self.rho**2)

    @property
    def marginal(self) -> dist.DiagGaussian:
        return dist.DiagGaussian(np.zeros(1), np.ones(1))

    def sample(self, rng, n):
        s = rng.standard_normal((n, 1))
        a = self.rho * s + np.sqrt(1.0 - self.rho**2) * rng.standard_normal((n, 1))
        return s, a

    def conditional_log_prob(self, s, a):
        var = 1.0 - self.rho**2
        return -0.5 * np.sum((a - self.rho * s) ** 2 / var + np.log(var) + dist.LOG_2PI, axis=-1)


# ---------------------------------------------------------------------------
# training


@dataclass
class EstimatorConfig:
    batch_size: int = 256
    k: int = 50
    lr: float = 3e-3
    hidden: tuple = (32, 32)
    activation: str = "elu"
    seed: int = 0
    mi_hint: float | None = None
    squash: bool = False
    clamp: float | None = EXP_CLAMP
    tail_fraction: float = 0.1


@dataclass
class EstimatorResult:
    policy: dist.GaussianPolicy
    critic: Critic | None
    curve: list = field(default_factory=list)
    final: float = float("nan")


def _bound_graph(kind, policy, critic, clamp=EXP_CLAMP):
    """Bound value and a surrogate whose gradient is used for training.

    The policy never sees a pathwise gradient through the sampled
    normaliser: with finitely many samples that gradient can shrink the
    estimated normaliser by moving samples away from high-energy regions.
    The surrogate instead differentiates ``log pi`` at fixed samples with
    self-normalised weights ``exp(T)``.
    """
    g = ad.Graph()
    s, a = g.leaf("s"), g.leaf("a")
    eps, s_rep = g.leaf("eps"), g.leaf("s_rep")
    logm = g.leaf("logm")
    inv_count = g.leaf("inv_count")
    pi_net = bind(g, policy.net, "pi")
    mu, log_std = dist.head(policy, s, pi_net)
    a_pre = g.leaf("a_pre")
    logp = dist.gaussian_log_density(a_pre, mu, log_std)
    if policy.squash:
        logp = ad.sub(logp, dist.squash_correction(a_pre))
    if kind == BoundKind.BA:
        value, ba, energy, norm = bound_terms(kind, logp, None, None, logm)
        surrogate = value
    else:
        t_nets = tuple(bind(g, n, f"T{i}") for i, n in enumerate(critic.nets))
        mu_r, log_std_r = ad.expand_dims(mu, 1), ad.expand_dims(log_std, 1)
        a_samp, u_samp, _ = dist.reparam_sample(policy, mu_r, log_std_r, eps)
        a_samp, u_samp = ad.stop_gradient(a_samp), ad.stop_gradient(u_samp)
        t_data = critic.value(s, a, t_nets)
        t_samp = critic.value(s_rep, a_samp, t_nets)
        value, ba, energy, norm = bound_terms(kind, logp, t_data, t_samp, logm, clamp)
        if kind == BoundKind.MISA_F:
            t = t_samp if clamp is None else ad.clip(t_samp, -np.inf, clamp)
            w = ad.mul(ad.exp(ad.sub(t, 1.0)), inv_count)
        else:
            per_state = ad.logsumexp(t_samp)
            w = ad.exp(ad.sub(t_samp, ad.expand_dims(per_state, -1)))
            if kind == BoundKind.MISA:
                w = ad.mul(w, inv_count)
            else:
                across = ad.exp(ad.sub(per_state, ad.logsumexp(per_state)))
                w = ad.mul(w, ad.expand_dims(across, -1))
        score = ad.sum(ad.mul(ad.stop_gradient(w), dist.gaussian_log_density(u_samp, mu_r, log_std_r)))
        surrogate = ad.sub(value, score)
    g.output("value", value)
    g.output("surrogate", surrogate)
    for name, node in (("ba", ba), ("energy", energy), ("norm", norm)):
        if isinstance(node, ad.Node):
            g.output(name, node)
    return g, surrogate


def train_estimator(sampler, kind, steps, config: EstimatorConfig | None = None, marginal=None,
                    state_dim=1, action_dim=1) -> EstimatorResult:
    """Gradient ascent on one bound w.r.t. both the policy and the critic.

    ``sampler(rng, n)`` returns i.i.d. ``(s, a)`` pairs. The reported final
    estimate is the mean bound value over the last ``tail_fraction`` of steps.
    """
    kind = BoundKind(kind)
    cfg = config or EstimatorConfig()
    rng = np.random.default_rng(cfg.seed)
    policy = dist.make_policy(state_dim, action_dim, rng, cfg.hidden, cfg.activation, squash=cfg.squash)
    critic = None
    if kind != BoundKind.BA:
        critic = make_critic(state_dim, action_dim, rng, cfg.hidden, cfg.activation, out_scale=0.1)
    g, surrogate = _bound_graph(kind, policy, critic, cfg.clamp)
    params = dict(policy.net.named("pi"))
    if critic is not None:
        params.update(critic.named("T"))
    opt = Adam(lr=cfg.lr)
    limit = 10.0 * max(cfg.mi_hint if cfg.mi_hint is not None else 0.0, 0.1)
    curve = []
    mode = _resolve_marginal(marginal, "analytic")
    for step in range(steps):
        s, a = sampler(rng, cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, cfg.k, action_dim))
        inputs = dict(params)
        inputs.update(
            s=s, a=a, a_pre=dist.pre_squash(policy, a), eps=eps,
            s_rep=np.broadcast_to(s[:, None, :], (cfg.batch_size, cfg.k, state_dim)),
            logm=np.zeros(cfg.batch_size) if marginal is None else marginal.log_prob(a),
            inv_count=1.0 / cfg.batch_size if kind == BoundKind.MISA else 1.0 / (cfg.batch_size * cfg.k),
        )
        out = ad.forward(g, inputs)
        val = float(out["value"])
        if not np.isfinite(val) or (cfg.mi_hint is not None and val > limit):
            raise EstimatorDivergence(
                f"{kind.value} estimate {val:.4g} at step {step} (limit {limit:.3g}); "
                f"terms ba={float(out.get('ba', np.nan)):.4g} energy={float(out.get('energy', 0.0)):.4g} "
                f"norm={float(out.get('norm', 0.0)):.4g}"
            )
        curve.append({
            "step": step, "kind": kind.value, "value": val,
            "ba_term": float(out.get("ba", val)),
            "energy_term": float(out.get("energy", 0.0)),
            "normalizer_term": float(out.get("norm", 0.0)),
        })
        grads = ad.backward(g, surrogate, wrt=list(params))
        params = opt.step(params, {n: -gr for n, gr in grads.items()})
    policy = policy.with_net(policy.net.replace_named("pi", params))
    if critic is not None:
        critic = critic.with_named(params, "T")
    tail = max(1, int(round(cfg.tail_fraction * steps)))
    final = float(np.mean([row["value"] for row in curve[-tail:]])) if curve else float("nan")
    log.info("%s final estimate %.4f (%s marginal)", kind.value, final, mode)
    return EstimatorResult(policy, critic, curve, final)
