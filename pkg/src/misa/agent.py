"""Offline actor-critic with mutual-information regularisation.

The critic minimises the TD error plus ``gamma1`` times a conservative
penalty ``normaliser(Q at policy samples) - mean Q(data)``. The actor
maximises the soft Q value plus ``gamma2`` times an MI lower bound whose
normaliser gradient is estimated with samples from the improved policy
``pi(a|s) exp(Q(s, a)) / Z(s)`` drawn by HMC.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .mcmc import HmcConfig, sample_improved_policy
from .mi_estimators import EXP_CLAMP, BoundKind, Critic, log_mean_exp, make_critic, normalizer
from .nn import Adam, bind, dump_array, load_array, polyak

log = logging.getLogger(__name__)

MI_GRAD_MODES = ("unbiased_mcmc", "reparam", "data_term_only")
Q_REG_MODES = ("fixed", "lagrange")
TEMPERATURE_MODES = ("fixed", "auto")
METRIC_COLUMNS = ("step", "td_loss", "penalty", "gamma1", "mi_estimate", "policy_entropy",
                  "q_data_mean", "q_ood_mean")


class NumericalAbort(FloatingPointError):
    """Training produced a non-finite quantity; ``diagnostics`` holds the context."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def softplus(x):
    return float(np.logaddexp(0.0, x))


def inverse_softplus(y):
    if y <= 0:
        return -30.0
    return float(y + np.log(-np.expm1(-y)))


@dataclass(frozen=True)
class TrainConfig:
    discount: float = 0.99
    k: int = 50
    hmc: HmcConfig = field(default_factory=HmcConfig)
    gamma1: float = 1.0
    gamma2: float = 1.0
    q_reg: str = "lagrange"
    tau: float = 3.0
    mi_grad: str = "unbiased_mcmc"
    bound: str = "MISA"
    no_ba: bool = False
    misa_t: bool = False
    temperature: str = "auto"
    init_temperature: float = 1.0
    entropy_target: float | None = None
    critic_lr: float = 1e-4
    policy_lr: float = 1e-4
    dual_lr: float | None = None
    lr_schedule: str = "constant"
    polyak_rate: float = 0.005
    batch_size: int = 256
    steps: int = 100_000
    seed: int = 0
    hidden: tuple = (256, 256)
    activation: str = "elu"
    action_margin: float = 1e-4
    clamp: float | None = EXP_CLAMP

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.q_reg not in Q_REG_MODES:
            raise ValueError(f"q_reg must be one of {Q_REG_MODES}")
        if self.mi_grad not in MI_GRAD_MODES:
            raise ValueError(f"mi_grad must be one of {MI_GRAD_MODES}")
        if self.temperature not in TEMPERATURE_MODES:
            raise ValueError(f"temperature must be one of {TEMPERATURE_MODES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma1 and gamma2 must be >= 0")
        BoundKind(self.bound)
        if self.bound == "BA":
            raise ValueError("the critic penalty needs an energy bound: MISA, MISA_DV or MISA_F")
        if isinstance(self.hmc, dict):
            object.__setattr__(self, "hmc", HmcConfig(**self.hmc))
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hmc" in d and isinstance(d["hmc"], dict):
            d["hmc"] = HmcConfig(**d["hmc"])
        return cls(**d)


# ---------------------------------------------------------------------------
# ablation variants

VARIANTS = ("k=5", "k=20", "BI=1", "no BA", "BA", "MISA-f", "MISA-DV", "MISA-biased", "MISA-T", "MISA")


def variant_matrix(name: str, config: TrainConfig | None = None) -> TrainConfig:
    """Resolve an ablation column name to a training configuration."""
    cfg = config or TrainConfig()
    if name == "MISA":
        return cfg
    if name in ("k=5", "k=20"):
        return replace(cfg, k=int(name[2:]))
    if name == "BI=1":
        return replace(cfg, hmc=replace(cfg.hmc, burn_in=1))
    if name == "no BA":
        return replace(cfg, no_ba=True)
    if name == "BA":
        return replace(cfg, q_reg="fixed", gamma1=0.0, mi_grad="data_term_only")
    if name == "MISA-f":
        return replace(cfg, bound="MISA_F")
    if name == "MISA-DV":
        return replace(cfg, bound="MISA_DV")
    if name == "MISA-biased":
        return replace(cfg, mi_grad="reparam")
    if name == "MISA-T":
        return replace(cfg, misa_t=True)
    if name == "SAC":
        return replace(cfg, q_reg="fixed", gamma1=0.0, gamma2=0.0)
    raise ValueError(f"unknown variant {name!r}; choose from {list(VARIANTS) + ['SAC']}")


# ---------------------------------------------------------------------------
# state


@dataclass
class TwinQNetwork:
    online: Critic
    target: Critic

    def update_target(self, rate: float) -> None:
        t = polyak(self.target.named("Q"), self.online.named("Q"), rate)
        self.target = self.target.with_named(t, "Q")


@dataclass
class TrainState:
    config: TrainConfig
    policy: dist.GaussianPolicy
    q: TwinQNetwork
    energy: Critic | None
    dual_raw: float
    log_temperature: float
    optimizers: dict
    rng: np.random.Generator
    step: int = 0
    hmc_fallbacks: int = 0

    @property
    def gamma1(self) -> float:
        if self.config.q_reg == "fixed":
            return self.config.gamma1
        return softplus(self.dual_raw)

    @property
    def temperature(self) -> float:
        return math.exp(self.log_temperature)

    def mi_energy(self) -> Critic:
        return self.energy if self.config.misa_t else self.q.online


def init_train_state(config: TrainConfig, state_dim: int, action_dim: int) -> TrainState:
    rng = np.random.default_rng(config.seed)
    policy = dist.make_policy(state_dim, action_dim, rng, config.hidden, config.activation)
    online = make_critic(state_dim, action_dim, rng, config.hidden, config.activation, heads=2)
    energy = None
    if config.misa_t:
        energy = make_critic(state_dim, action_dim, rng, config.hidden, config.activation)
    dual_lr = config.dual_lr if config.dual_lr is not None else config.critic_lr
    opts = {
        "critic": Adam(lr=config.critic_lr),
        "policy": Adam(lr=config.policy_lr),
        "dual": Adam(lr=dual_lr),
        "temperature": Adam(lr=config.policy_lr),
    }
    if config.misa_t:
        opts["energy"] = Adam(lr=config.critic_lr)
    return TrainState(
        config=config,
        policy=policy,
        q=TwinQNetwork(online, online),
        energy=energy,
        dual_raw=inverse_softplus(config.gamma1),
        log_temperature=math.log(config.init_temperature),
        optimizers=opts,
        rng=rng,
    )


def _entropy_target(state: TrainState) -> float:
    t = state.config.entropy_target
    return -float(state.policy.action_dim) if t is None else t


def _lr_factor(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant":
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, cfg.steps) / max(cfg.steps, 1)))


# ---------------------------------------------------------------------------
# graphs (built once per network shape and flag combination)

_GRAPHS: dict = {}


def _shape_key(*objs):
    key = []
    for o in objs:
        if isinstance(o, Critic):
            key.append(tuple((tuple(n.sizes), n.activation) for n in o.nets))
        elif isinstance(o, dist.GaussianPolicy):
            key.append((tuple(o.net.sizes), o.net.activation, o.squash, o.fixed_log_std,
                        o.log_std_min, o.log_std_max))
        else:
            key.append(o)
    return tuple(key)


def _critic_graph(critic: Critic, kind: BoundKind, clamp, prefix="Q"):
    """Loss ``sum_i TD_i + gamma1 * sum_i penalty_i`` over the critic heads."""
    key = ("critic", _shape_key(critic, kind, clamp, prefix))
    if key in _GRAPHS:
        return _GRAPHS[key]
    g = ad.Graph()
    s, a, y = g.leaf("s"), g.leaf("a"), g.leaf("y")
    s_rep, a_pi = g.leaf("s_rep"), g.leaf("a_pi")
    gamma1, td_weight = g.leaf("gamma1"), g.leaf("td_weight")
    nets = tuple(bind(g, n, f"{prefix}{i}") for i, n in enumerate(critic.nets))
    q_data = [ad.sum(h, axis=-1) for h in critic.heads(s, a, nets)]
    q_samp = [ad.sum(h, axis=-1) for h in critic.heads(s_rep, a_pi, nets)]
    td = None
    pens = []
    for qd, qs in zip(q_data, q_samp):
        err = ad.mean(ad.square(ad.sub(qd, y)))
        td = err if td is None else ad.add(td, err)
        pens.append(ad.sub(normalizer(kind, qs, clamp), ad.mean(qd)))
    td = ad.mul(td, 0.5)
    pen_sum = pens[0] if len(pens) == 1 else ad.add(pens[0], pens[1])
    loss = ad.add(ad.mul(td, td_weight), ad.mul(pen_sum, gamma1))
    q_min = q_data[0] if len(q_data) == 1 else ad.minimum(q_data[0], q_data[1])
    s_min = q_samp[0] if len(q_samp) == 1 else ad.minimum(q_samp[0], q_samp[1])
    g.output("loss", loss)
    g.output("td", ad.mul(td, 1.0 / len(q_data)))
    g.output("penalty", ad.mul(pen_sum, 1.0 / len(pens)))
    g.output("q_data", ad.mean(q_min))
    g.output("lme", ad.mean(ad.log_mean_exp(s_min)))
    _GRAPHS[key] = (g, loss)
    return g, loss


def _policy_graph(policy, q_critic, e_critic, kind: BoundKind, mode: str, no_ba: bool, clamp,
                  share_energy=True):
    """Actor loss ``-(q_weight * E[Q - temp log pi] + gamma2 * MI)`` and the MI term.

    Without ``q_critic`` the loss is the MI part alone. The energy network
    only enters the graph for the reparameterised normaliser; it shares the
    Q parameters when ``share_energy`` is set.
    """
    key = ("policy", _shape_key(policy, q_critic, e_critic, kind, mode, no_ba, clamp, share_energy))
    if key in _GRAPHS:
        return _GRAPHS[key]
    g = ad.Graph()
    s, a_pre, gamma2 = g.leaf("s"), g.leaf("a_pre"), g.leaf("gamma2")
    pi_net = bind(g, policy.net, "pi")
    mu, log_std = dist.head(policy, s, pi_net)
    q_nets = None
    if q_critic is not None:
        eps, temp, q_weight = g.leaf("eps"), g.leaf("temp"), g.leaf("q_weight")
        q_nets = tuple(bind(g, n, f"Q{i}") for i, n in enumerate(q_critic.nets))
        a_rep, _, logp_rep = dist.reparam_sample(policy, mu, log_std, eps)
        soft_q = ad.mean(ad.sub(q_critic.value(s, a_rep, q_nets), ad.mul(logp_rep, temp)))

    data = dist.gaussian_log_density(a_pre, mu, log_std)
    if policy.squash:
        data = ad.sub(data, dist.squash_correction(a_pre))
    data_term = ad.mean(data)
    mu_r, log_std_r = ad.expand_dims(mu, 1), ad.expand_dims(log_std, 1)
    if mode == "unbiased_mcmc":
        # weighted score of improved-policy samples: sum_ij w_ij log pi(u_ij | s_i)
        u_mi, w_mi = g.leaf("u_mi"), g.leaf("w_mi")
        corr = ad.sum(ad.mul(w_mi, dist.gaussian_log_density(u_mi, mu_r, log_std_r)))
    elif mode == "reparam":
        eps_k, s_rep = g.leaf("eps_k"), g.leaf("s_rep")
        if share_energy and q_nets is not None:
            e_nets = q_nets
        else:
            e_nets = tuple(bind(g, n, f"E{i}") for i, n in enumerate(e_critic.nets))
        a_k, _, _ = dist.reparam_sample(policy, mu_r, log_std_r, eps_k)
        corr = normalizer(kind, e_critic.value(s_rep, a_k, e_nets), clamp)
    else:
        corr = None
    if no_ba:
        mi = ad.neg(corr) if corr is not None else ad.mul(data_term, 0.0)
    else:
        mi = data_term if corr is None else ad.sub(data_term, corr)
    weighted = ad.mul(mi, gamma2)
    if q_critic is not None:
        loss = ad.neg(ad.add(ad.mul(soft_q, q_weight), weighted))
        g.output("logp_rep", logp_rep)
        g.output("soft_q", soft_q)
    else:
        loss = ad.neg(weighted)
    g.output("loss", loss)
    mi = g.output("mi", mi)
    g.output("data_term", data_term)
    _GRAPHS[key] = (g, loss, mi)
    return _GRAPHS[key]


# ---------------------------------------------------------------------------
# building blocks


def _pi_samples(policy, s, eps):
    """Policy actions for ``eps`` of shape ``(B, k, da)``; states are broadcast."""
    mu, log_std = dist.head(policy, s)
    a, _, logp = dist.reparam_sample(policy, mu[:, None, :], log_std[:, None, :], eps)
    return a, logp


def bellman_target(state: TrainState, batch, eps_next) -> np.ndarray:
    """``r + discount * (1 - terminal) * (min target Q(s', a') - temp * log pi(a'|s'))``."""
    cfg = state.config
    mu, log_std = dist.head(state.policy, batch.s_next)
    a_next, _, logp_next = dist.reparam_sample(state.policy, mu, log_std, eps_next)
    q_next = state.q.target(batch.s_next, a_next)
    soft = q_next - state.temperature * logp_next
    y = batch.r + cfg.discount * (1.0 - batch.terminal) * soft
    if not np.all(np.isfinite(y)):
        bad = int(np.argmax(~np.isfinite(y)))
        raise NumericalAbort(
            "non-finite Bellman target",
            {"index": bad, "r": float(batch.r[bad]), "q_next": float(q_next[bad]),
             "logp_next": float(logp_next[bad]), "temperature": state.temperature},
        )
    return y


def conservative_penalty(q_samples, q_data, kind=BoundKind.MISA, clamp=EXP_CLAMP) -> float:
    """``normaliser(Q at samples) - mean Q(data)``; samples have shape ``(B, k)``."""
    kind = BoundKind(kind)
    return float(normalizer(kind, np.asarray(q_samples, dtype=np.float64), clamp)
                 - np.mean(np.asarray(q_data, dtype=np.float64)))


def _critic_inputs(state, batch, y, a_pi, gamma1, td_weight=1.0):
    inputs = state.q.online.named("Q")
    inputs.update(
        s=batch.s, a=batch.a, y=y, a_pi=a_pi,
        s_rep=np.broadcast_to(batch.s[:, None, :], (*a_pi.shape[:2], batch.s.shape[1])),
        gamma1=gamma1, td_weight=td_weight,
    )
    return inputs


def _critic_pass(state, batch, y, a_pi, gamma1, td_weight=1.0):
    cfg = state.config
    g, loss = _critic_graph(state.q.online, BoundKind(cfg.bound), cfg.clamp)
    out = ad.forward(g, _critic_inputs(state, batch, y, a_pi, gamma1, td_weight))
    grads = ad.backward(g, loss, wrt=list(state.q.online.named("Q")))
    return out, grads


def td_loss(state: TrainState, batch, rng=None):
    """TD loss of the twin critics and its gradient (target branch held fixed)."""
    rng = rng if rng is not None else state.rng
    eps_next = rng.standard_normal(batch.a.shape)
    y = bellman_target(state, batch, eps_next)
    dummy = np.zeros((len(batch.s), 1, batch.a.shape[1]))
    out, grads = _critic_pass(state, batch, y, dummy, 0.0)
    return float(out["td"]), grads


def q_regularizer(state, batch, rng=None, samples=None):
    """Conservative penalty and its critic gradient.

    ``state`` is a :class:`TrainState` (penalty averaged over the critic
    heads; the gradient is that of their sum, as it enters the critic loss) or any critic callable ``Q(s, a)`` (value only; the
    gradient entry is ``None``). ``samples`` optionally fixes the action
    samples, shape ``(B, k, da)``; by default ``k`` policy samples are drawn.
    """
    if not isinstance(state, TrainState):
        if samples is None:
            raise ValueError("samples are required when regularising a bare critic")
        s = np.asarray(batch.s if hasattr(batch, "s") else batch[0], dtype=np.float64)
        a = np.asarray(batch.a if hasattr(batch, "a") else batch[1], dtype=np.float64)
        q_samp = state(s[:, None, :], np.asarray(samples, dtype=np.float64))
        return conservative_penalty(q_samp, state(s, a)), None
    rng = rng if rng is not None else state.rng
    if samples is None:
        eps = rng.standard_normal((len(batch.s), state.config.k, batch.a.shape[1]))
        samples, _ = _pi_samples(state.policy, batch.s, eps)
    out, grads = _critic_pass(state, batch, np.zeros(len(batch.s)), samples, 1.0, td_weight=0.0)
    return float(out["penalty"]), grads


def lagrange_update(state: TrainState, penalty_value: float) -> float:
    """One dual-ascent step on ``gamma1 * (penalty - tau)``; returns the new ``gamma1``."""
    cfg = state.config
    if cfg.q_reg != "lagrange":
        raise ValueError("lagrange_update needs q_reg='lagrange'")
    sig = 1.0 / (1.0 + math.exp(-state.dual_raw))
    grad = sig * (penalty_value - cfg.tau)
    new = state.optimizers["dual"].step({"nu": np.array(state.dual_raw)}, {"nu": -np.array(grad)})
    state.dual_raw = float(new["nu"])
    return state.gamma1


def _state_weights(kind: BoundKind, q_samp, clamp):
    """Per-state weights of the improved-policy score term, shape ``(B,)``.

    They are the derivatives of the normaliser w.r.t. each state's
    ``log E_pi[exp(T)]``, estimated from ``q_samp`` of shape ``(B, k)``.
    """
    B = q_samp.shape[0]
    if kind == BoundKind.MISA:
        return np.full(B, 1.0 / B)
    lme = log_mean_exp(q_samp)
    if kind == BoundKind.MISA_DV:
        w = np.exp(lme - lme.max())
        return w / w.sum()
    t = q_samp if clamp is None else np.minimum(q_samp, clamp)
    return np.exp(t - 1.0).mean(axis=1) / B


def improved_samples(policy, energy, s, rng, hmc: HmcConfig, kind=BoundKind.MISA, eps_k=None,
                     clamp=EXP_CLAMP):
    """Samples ``(B, m, da)`` (pre-squash) and weights ``(B, m)`` of the score term.

    HMC supplies one improved-policy sample per state. If the chain fails
    (non-finite energy or no accepted proposal), self-normalised importance
    weights over the ``k`` policy samples in ``eps_k`` are used instead.
    Returns ``(u, w, acceptance_rate, fell_back)``.
    """
    kind = BoundKind(kind)
    B, da = s.shape[0], policy.action_dim
    if kind != BoundKind.MISA:
        if eps_k is None:
            raise ValueError("MISA_DV and MISA_F weights need policy samples eps_k")
        a_k, _ = _pi_samples(policy, s, eps_k)
        w_state = _state_weights(kind, energy(s[:, None, :], a_k), clamp)
    else:
        w_state = np.full(B, 1.0 / B)
    try:
        res = sample_improved_policy(policy, energy, s, hmc, rng)
        if res.acceptance_rate == 0.0:
            raise FloatingPointError("no proposal accepted")
        u = np.swapaxes(res.pre_squash, 0, 1).reshape(B, -1, da)
        return u, np.repeat(w_state[:, None], u.shape[1], axis=1) / u.shape[1], res.acceptance_rate, False
    except (ValueError, FloatingPointError) as exc:
        if eps_k is None:
            raise
        log.warning("HMC failed (%s); using importance weights", exc)
        mu, log_std = dist.head(policy, s)
        u = mu[:, None, :] + eps_k * np.exp(log_std)[:, None, :]
        a = np.tanh(u) if policy.squash else u
        q = energy(s[:, None, :], a)
        w = np.exp(q - q.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return u, w * w_state[:, None], float("nan"), True


def _mi_inputs(policy, energy, s, a, mode, rng, k, hmc, kind, clamp, margin, eps_k=None, active=True):
    """Leaves of the MI part of the actor graph, plus an info dict."""
    inputs = dict(policy.net.named("pi"))
    inputs.update(s=s, a_pre=dist.pre_squash(policy, a, margin))
    info = {"hmc_acceptance": float("nan"), "fell_back": False}
    da = policy.action_dim
    if mode == "unbiased_mcmc":
        if active:
            if eps_k is None:
                eps_k = rng.standard_normal((len(s), k, da))
            u, w, acc, fell = improved_samples(policy, energy, s, rng, hmc, kind, eps_k, clamp)
            info.update(hmc_acceptance=acc, fell_back=fell)
        else:
            u, w = np.zeros((len(s), 1, da)), np.zeros((len(s), 1))
        inputs.update(u_mi=u, w_mi=w)
    elif mode == "reparam":
        if eps_k is None:
            eps_k = rng.standard_normal((len(s), k, da))
        inputs.update(eps_k=eps_k, s_rep=np.broadcast_to(s[:, None, :], (*eps_k.shape[:2], s.shape[1])))
    return inputs, info


def misa_policy_gradient(policy, energy, s, a, mode="unbiased_mcmc", rng=None, k=50, hmc=None,
                         kind=BoundKind.MISA, no_ba=False, clamp=EXP_CLAMP, margin=1e-4, eps_k=None):
    """Ascent direction of the MI bound w.r.t. the policy parameters.

    ``energy`` is the critic used as ``T``; HMC needs it to expose gradients
    (a :class:`Critic`, or a function critic with ``grad``). The
    reparameterised mode needs a :class:`Critic`. Returns ``(grads, info)``.
    """
    if mode not in MI_GRAD_MODES:
        raise ValueError(f"mode must be one of {MI_GRAD_MODES}")
    rng = rng if rng is not None else np.random.default_rng()
    hmc = hmc or HmcConfig()
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    kind = BoundKind(kind)
    g, _, mi = _policy_graph(policy, None, energy if mode == "reparam" else None, kind, mode,
                             no_ba, clamp, share_energy=False)
    inputs, info = _mi_inputs(policy, energy, s, a, mode, rng, k, hmc, kind, clamp, margin, eps_k)
    inputs["gamma2"] = 1.0
    if mode == "reparam":
        inputs.update(energy.named("E"))
    out = ad.forward(g, inputs)
    info["mi_value"] = float(out["mi"])
    return ad.backward(g, mi, wrt=list(policy.net.named("pi"))), info


def mi_policy_gradient(state: TrainState, batch, rng=None):
    """``gamma2`` times the MI ascent direction for the state's policy.

    The estimator follows ``config.mi_grad``; under ``unbiased_mcmc`` the
    normaliser gradient is the score of improved-policy samples.
    """
    cfg = state.config
    rng = rng if rng is not None else state.rng
    grads, info = misa_policy_gradient(
        state.policy, state.mi_energy(), batch.s, batch.a, cfg.mi_grad, rng, cfg.k, cfg.hmc,
        cfg.bound, cfg.no_ba, cfg.clamp, cfg.action_margin)
    state.hmc_fallbacks += int(info["fell_back"])
    return {n: cfg.gamma2 * v for n, v in grads.items()}, info


def _actor_pass(state: TrainState, batch, eps, rng, eps_k=None, gamma2=None, mode=None):
    """Forward and backward of the full actor loss; returns ``(out, grads, info)``."""
    cfg = state.config
    mode = mode or cfg.mi_grad
    gamma2 = cfg.gamma2 if gamma2 is None else gamma2
    energy = state.mi_energy()
    g, loss, _ = _policy_graph(state.policy, state.q.online, energy, BoundKind(cfg.bound), mode,
                               cfg.no_ba, cfg.clamp, share_energy=not cfg.misa_t)
    inputs, info = _mi_inputs(state.policy, energy, batch.s, batch.a, mode, rng, cfg.k, cfg.hmc,
                              cfg.bound, cfg.clamp, cfg.action_margin, eps_k, active=gamma2 != 0.0)
    state.hmc_fallbacks += int(info["fell_back"])
    inputs.update(state.q.online.named("Q"))
    if cfg.misa_t and mode == "reparam":
        inputs.update(state.energy.named("E"))
    inputs.update(eps=eps, temp=state.temperature, gamma2=gamma2, q_weight=1.0)
    out = ad.forward(g, inputs)
    _check_finite("policy_loss", float(out["loss"]), state)
    return out, ad.backward(g, loss, wrt=list(state.policy.net.named("pi"))), info


def policy_loss_q_term(state: TrainState, batch, rng=None):
    """``-mean(min Q(s, a~pi) - temp * log pi(a|s))`` and its policy gradient."""
    rng = rng if rng is not None else state.rng
    eps = rng.standard_normal(batch.a.shape)
    out, grads, _ = _actor_pass(state, batch, eps, rng, gamma2=0.0, mode="data_term_only")
    return float(out["loss"]), grads


# ---------------------------------------------------------------------------
# training loop


def _check_finite(name, value, state):
    if not np.isfinite(value):
        raise NumericalAbort(f"non-finite {name} at step {state.step}", {"step": state.step, name: value})


def train_step(state: TrainState, dataset, rng=None):
    """One critic update, one actor update, target and temperature updates.

    Random numbers are drawn in a fixed order: batch indices, next-action
    noise, penalty-sample noise, actor noise, then MI sampling. Returns
    ``(state, metrics)``; ``state`` is updated in place.
    """
    cfg = state.config
    rng = rng if rng is not None else state.rng
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    batch = dataset.sample(rng, cfg.batch_size)
    B, da = batch.a.shape
    lr_scale = _lr_factor(cfg, state.step)
    for name in ("critic", "policy", "energy"):
        if name in state.optimizers:
            base = cfg.critic_lr if name != "policy" else cfg.policy_lr
            state.optimizers[name].lr = base * lr_scale

    # critic
    eps_next = rng.standard_normal((B, da))
    y = bellman_target(state, batch, eps_next)
    eps_k = rng.standard_normal((B, cfg.k, da))
    a_pi, _ = _pi_samples(state.policy, batch.s, eps_k)
    gamma1 = state.gamma1
    reg = 0.0 if cfg.misa_t else gamma1
    out, grads = _critic_pass(state, batch, y, a_pi, reg)
    td, penalty = float(out["td"]), float(out["penalty"])
    for name, v in (("td_loss", td), ("penalty", penalty)):
        _check_finite(name, v, state)
    q_names = state.q.online.named("Q")
    state.q.online = state.q.online.with_named(state.optimizers["critic"].step(q_names, grads), "Q")
    if cfg.q_reg == "lagrange" and not cfg.misa_t:
        lagrange_update(state, penalty)
    if cfg.misa_t:
        g_e, loss_e = _critic_graph(state.energy, BoundKind(cfg.bound), cfg.clamp, prefix="E")
        e_in = state.energy.named("E")
        e_in.update(_critic_inputs(state, batch, y, a_pi, 1.0, 0.0))
        for k_ in list(state.q.online.named("Q")):
            e_in.pop(k_)
        ad.forward(g_e, e_in)
        e_grads = ad.backward(g_e, loss_e, wrt=list(state.energy.named("E")))
        new_e = state.optimizers["energy"].step(state.energy.named("E"), e_grads)
        state.energy = state.energy.with_named(new_e, "E")

    # actor
    eps = rng.standard_normal((B, da))
    pout, pgrads, info = _actor_pass(state, batch, eps, rng, eps_k=eps_k)
    new_pi = state.optimizers["policy"].step(state.policy.net.named("pi"), pgrads)
    state.policy = state.policy.with_net(state.policy.net.replace_named("pi", new_pi))

    logp_rep = pout["logp_rep"]
    if cfg.temperature == "auto":
        # d/d(log_temp) of -log_temp * mean(log pi + target)
        gt = -float(np.mean(logp_rep + _entropy_target(state)))
        new_t = state.optimizers["temperature"].step({"t": np.array(state.log_temperature)}, {"t": np.array(gt)})
        state.log_temperature = float(new_t["t"])
    state.q.update_target(cfg.polyak_rate)
    state.step += 1

    q_data = float(out["q_data"])
    a_ood = rng.uniform(-1.0, 1.0, size=(B, da))
    metrics = {
        "step": state.step,
        "td_loss": td,
        "penalty": penalty,
        "gamma1": state.gamma1,
        "mi_estimate": float(pout["data_term"]) + q_data - float(out["lme"]),
        "policy_entropy": -float(np.mean(logp_rep)),
        "q_data_mean": q_data,
        "q_ood_mean": float(np.mean(state.q.online(batch.s, a_ood))),
        "temperature": state.temperature,
        "hmc_acceptance": info["hmc_acceptance"],
    }
    return state, metrics


def train(state: TrainState, dataset, steps=None, callback=None):
    """Run ``steps`` train steps (default ``config.steps``); returns the metric rows."""
    rows = []
    for _ in range(state.config.steps if steps is None else steps):
        state, m = train_step(state, dataset)
        rows.append(m)
        if callback is not None:
            callback(state, m)
    return rows


# ---------------------------------------------------------------------------
# checkpoints: JSON trainer header, then named float64 blocks


def _param_blocks(state: TrainState) -> dict:
    blocks = dict(state.policy.net.named("pi"))
    blocks.update(state.q.online.named("Q"))
    blocks.update({f"target.{k}": v for k, v in state.q.target.named("Q").items()})
    if state.energy is not None:
        blocks.update(state.energy.named("E"))
    for oname, opt in state.optimizers.items():
        for k, v in opt.m.items():
            blocks[f"adam.{oname}.m.{k}"] = v
            blocks[f"adam.{oname}.v.{k}"] = opt.v[k]
    return blocks


def save_checkpoint(state: TrainState, path) -> None:
    blocks = _param_blocks(state)
    header = {
        "kind": "trainer",
        "config": state.config.to_dict(),
        "step": state.step,
        "dual_raw": state.dual_raw,
        "log_temperature": state.log_temperature,
        "hmc_fallbacks": state.hmc_fallbacks,
        "adam_t": {k: o.t for k, o in state.optimizers.items()},
        "rng": state.rng.bit_generator.state,
        "shapes": {"state_dim": state.policy.state_dim, "action_dim": state.policy.action_dim},
        "blocks": list(blocks),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name, arr in blocks.items():
            dump_array(arr, fh, name=name)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "trainer":
            raise ValueError("not a trainer checkpoint")
        blocks = {}
        for name in header["blocks"]:
            arr, meta = load_array(fh)
            if meta["name"] != name:
                raise ValueError(f"checkpoint block order mismatch: {meta['name']} != {name}")
            blocks[name] = arr
    cfg = TrainConfig.from_dict(header["config"])
    state = init_train_state(cfg, header["shapes"]["state_dim"], header["shapes"]["action_dim"])
    state.policy = state.policy.with_net(state.policy.net.replace_named("pi", blocks))
    state.q.online = state.q.online.with_named(blocks, "Q")
    state.q.target = state.q.target.with_named({k[7:]: v for k, v in blocks.items() if k.startswith("target.")}, "Q")
    if state.energy is not None:
        state.energy = state.energy.with_named(blocks, "E")
    for oname, opt in state.optimizers.items():
        opt.t = header["adam_t"][oname]
        pre_m, pre_v = f"adam.{oname}.m.", f"adam.{oname}.v."
        opt.m = {k[len(pre_m):]: v for k, v in blocks.items() if k.startswith(pre_m)}
        opt.v = {k[len(pre_v):]: v for k, v in blocks.items() if k.startswith(pre_v)}
    state.step = header["step"]
    state.dual_raw = header["dual_raw"]
    state.log_temperature = header["log_temperature"]
    state.hmc_fallbacks = header["hmc_fallbacks"]
    state.rng.bit_generator.state = header["rng"]
    return state
