"""Command-line entry point: ``misa <command> [--config file] [--key value ...]``.

Every command resolves its configuration as defaults < JSON config file <
command-line flags, writes the resolved configuration into its run
directory before doing any work, and exits with 0 on success, 2 on usage
errors and 3 on a numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import agent as ag
from . import data as od
from . import distributions as dist
from .kernels import BACKEND
from .mcmc import HmcConfig
from .mi_estimators import (
    BOUND_ORDER,
    BoundKind,
    EstimatorConfig,
    EstimatorDivergence,
    GaussianJoint,
    train_estimator,
)

log = logging.getLogger("misa")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3

_TRAIN_DEFAULTS = {k: v for k, v in ag.TrainConfig().to_dict().items() if k not in ("hmc", "seed")}
_TRAIN_DEFAULTS.update(
    {f"hmc.{k}": v for k, v in ag.TrainConfig().to_dict()["hmc"].items()},
    steps=20_000,
    hidden=[64, 64],
    batch_size=256,
)

DEFAULTS = {
    "gen-data": {"env": "line-reach", "tier": "medium", "n": 20_000, "seed": 0, "out": None},
    "train": {
        "dataset": None, "variant": "MISA", "env": None, "seeds": [0], "eval_interval": 5_000,
        "eval_episodes": 10, "coverage_bins": 10, "out_dir": None, **_TRAIN_DEFAULTS,
    },
    "estimate-mi": {
        "joint": "gaussian", "rho": 0.5, "dataset": None, "steps": 800, "batch_size": 128, "k": 50,
        "lr": 3e-3, "hidden": [32, 32], "seed": 0, "out_dir": None,
    },
    "gradcheck": {
        "points": 20, "k": 10_000, "mi_grad": "unbiased_mcmc", "q": "mlp", "seed": 0,
        "hmc.burn_in": 5, "hmc.leapfrog_steps": 2, "hmc.step_size": 1.0, "out_dir": None,
    },
    "ablate": {
        "variants": ["BA", "MISA-f", "MISA-DV", "MISA"], "envs": ["line-reach"], "tier": "ood_gap",
        "n": 20_000, "seeds": [0, 1, 2, 3, 4], "eval_episodes": 10, "out_dir": None,
        **{k: v for k, v in _TRAIN_DEFAULTS.items()},
    },
}
REQUIRED = {"gen-data": ("out",), "train": ("dataset",)}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _parse_list(text, item):
    if isinstance(text, list):
        return text
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    return [item(p) for p in parts]


def _caster(default):
    if isinstance(default, bool):
        return lambda x: str(x).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, list):
        inner = type(default[0]) if default else str
        return lambda x: _parse_list(x, inner)
    return lambda x: None if x in ("none", "None", "null") else x


def _coerce(key, value, default):
    if default is None or value is None:
        return value
    try:
        return _caster(default)(value)
    except (TypeError, ValueError):
        raise UsageError(f"bad value for --{key}: {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, defaults in DEFAULTS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="JSON file with configuration values")
        for key in defaults:
            flags = {f"--{key}", f"--{key.replace('_', '-')}"}
            p.add_argument(*sorted(flags), dest=key, default=argparse.SUPPRESS)
    return parser


def resolve_config(command: str, args: dict, config_file=None) -> dict:
    """Merge defaults, the optional JSON file, and explicit flags."""
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if config_file:
        try:
            with open(config_file) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_file}: {exc}") from None
        for key, value in _flatten(loaded).items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} in {config_file}")
            cfg[key] = _coerce(key, value, defaults[key])
    for key, value in args.items():
        cfg[key] = _coerce(key, value, defaults[key])
    for key in REQUIRED.get(command, ()):
        if cfg.get(key) is None:
            raise UsageError(f"--{key} is required")
    return cfg


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict) and k == "hmc":
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def out_root(cfg) -> str:
    return cfg.get("out_dir") or os.environ.get("MISA_OUT_DIR") or "runs"


def run_dir(command, seed, cfg) -> str:
    path = os.path.join(out_root(cfg), f"{command}-{seed}-{config_hash(cfg)}")
    os.makedirs(path, exist_ok=True)
    return path


def echo_config(path, cfg) -> None:
    with open(os.path.join(path, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_meta(path, **fields) -> None:
    fields.setdefault("timestamp", time.strftime("%Y-%m-%dT%H:%M:%S"))
    fields.setdefault("backend", BACKEND)
    with open(os.path.join(path, "run_meta.json"), "w") as fh:
        json.dump(fields, fh, indent=2, sort_keys=True)


def train_config_from(cfg: dict, seed: int) -> ag.TrainConfig:
    fields = {k: cfg[k] for k in _TRAIN_DEFAULTS if not k.startswith("hmc.")}
    hmc = HmcConfig(**{k[4:]: cfg[k] for k in _TRAIN_DEFAULTS if k.startswith("hmc.")})
    try:
        return ag.variant_matrix(cfg.get("variant", "MISA"),
                                 ag.TrainConfig(hmc=hmc, seed=seed, **fields))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else x


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg) -> int:
    if cfg["tier"] not in od.TIERS:
        raise UsageError(f"invalid tier {cfg['tier']!r}; choose from {list(od.TIERS)}")
    try:
        env = od.make_env(cfg["env"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if int(cfg["n"]) < 1:
        raise UsageError("--n must be >= 1")
    out = cfg["out"]
    with open(f"{out}.json", "w") as fh:
        json.dump({"config": cfg}, fh, indent=2, sort_keys=True)
    ds = od.generate_dataset(env, cfg["tier"], int(cfg["n"]), int(cfg["seed"]))
    od.save_dataset(ds, out)
    with open(f"{out}.json", "w") as fh:
        json.dump({"config": cfg, "provenance": ds.provenance, "count": len(ds)}, fh, indent=2, sort_keys=True)
    print(f"wrote {len(ds)} transitions to {out}")
    return EXIT_OK


def _policy_coverage(ds, policy, bins):
    actions = dist.mean_action(policy, ds.s)
    return od.support_coverage(ds, actions, bins, ds.s)


def _train_one(cfg, ds, env, seed):
    tcfg = train_config_from(cfg, seed)
    path = run_dir("train", seed, {**cfg, "seeds": [seed]})
    echo_config(path, {**cfg, "seeds": [seed], "resolved_train_config": tcfg.to_dict()})
    write_meta(path, command="train", seed=seed)
    state = ag.init_train_state(tcfg, ds.state_dim, ds.action_dim)
    rows, evals = [], []
    interval = max(1, int(cfg["eval_interval"]))
    try:
        for _ in range(tcfg.steps):
            state, m = ag.train_step(state, ds)
            rows.append(m)
            if state.step % interval == 0 or state.step == tcfg.steps:
                ev = od.evaluate_policy(env, state.policy, int(cfg["eval_episodes"]), seed)
                evals.append({"step": state.step, "mean_return": ev["mean_return"],
                              "normalized_score": ev["normalized_score"]})
                log.info("seed %d step %d score %.1f", seed, state.step, ev["normalized_score"])
    except ag.NumericalAbort as exc:
        dump = os.path.join(path, "abort_state.bin")
        ag.save_checkpoint(state, dump)
        with open(os.path.join(path, "abort.json"), "w") as fh:
            json.dump({"error": str(exc), "diagnostics": exc.diagnostics, "state": dump}, fh,
                      indent=2, sort_keys=True, default=str)
        _write_csv(os.path.join(path, "metrics.csv"), rows, ag.METRIC_COLUMNS)
        print(f"numerical abort: {exc}; state dumped to {dump}", file=sys.stderr)
        return None, EXIT_NUMERICAL
    _write_csv(os.path.join(path, "metrics.csv"), rows, ag.METRIC_COLUMNS)
    _write_csv(os.path.join(path, "evals.csv"), evals, ("step", "mean_return", "normalized_score"))
    ag.save_checkpoint(state, os.path.join(path, "checkpoint.bin"))
    final = od.evaluate_policy(env, state.policy, int(cfg["eval_episodes"]), seed)
    result = {
        "mean_return": final["mean_return"],
        "normalized_score": final["normalized_score"],
        "support_coverage": _policy_coverage(ds, state.policy, int(cfg["coverage_bins"])),
    }
    with open(os.path.join(path, "eval.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    print(f"seed {seed}: normalized score {result['normalized_score']:.1f}, "
          f"coverage {result['support_coverage']:.3f} ({path})")
    return result, EXIT_OK


def _append_summary(path, row, columns):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(columns)
        w.writerow([_fmt(row.get(c)) for c in columns])


def cmd_train(cfg) -> int:
    try:
        ds = od.load_dataset(cfg["dataset"])
    except FileNotFoundError:
        raise UsageError(f"dataset {cfg['dataset']} not found") from None
    env_name = cfg["env"] or ds.provenance.get("env")
    if env_name is None:
        raise UsageError("--env is required when the dataset has no provenance env")
    try:
        env = od.make_env(env_name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seeds = [int(s) for s in cfg["seeds"]]
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    train_config_from(cfg, seeds[0])
    root = out_root(cfg)
    os.makedirs(root, exist_ok=True)
    scores = []
    columns = ("variant", "env", "seed", "normalized_score", "mean_return", "support_coverage")
    for seed in seeds:
        result, code = _train_one(cfg, ds, env, seed)
        if code != EXIT_OK:
            return code
        scores.append(result["normalized_score"])
        _append_summary(os.path.join(root, "summary.csv"),
                        {"variant": cfg["variant"], "env": env_name, "seed": seed, **result}, columns)
    if len(seeds) > 1:
        _append_summary(os.path.join(root, "summary.csv"),
                        {"variant": cfg["variant"], "env": env_name, "seed": "mean",
                         "normalized_score": float(np.mean(scores))}, columns)
    return EXIT_OK


def cmd_estimate_mi(cfg) -> int:
    seed = int(cfg["seed"])
    path = run_dir("estimate-mi", seed, cfg)
    echo_config(path, cfg)
    write_meta(path, command="estimate-mi", seed=seed)
    if cfg["dataset"]:
        ds = od.load_dataset(cfg["dataset"])
        state_dim, action_dim = ds.state_dim, ds.action_dim

        def sampler(rng, n):
            b = ds.sample(rng, n)
            return b.s, b.a

        marginal, analytic, mode = dist.fit_marginal(ds.a), None, "fitted"
    else:
        if cfg["joint"] != "gaussian":
            raise UsageError(f"unknown joint {cfg['joint']!r}; only 'gaussian' is available")
        rho = float(cfg["rho"])
        if not -1.0 < rho < 1.0:
            raise UsageError("--rho must lie in (-1, 1)")
        joint = GaussianJoint(rho)
        sampler, marginal, analytic, mode = joint.sample, joint.marginal, joint.mutual_information, "analytic"
        state_dim = action_dim = 1
    est_cfg = EstimatorConfig(batch_size=int(cfg["batch_size"]), k=int(cfg["k"]), lr=float(cfg["lr"]),
                              hidden=tuple(cfg["hidden"]), seed=seed, mi_hint=analytic)
    curve, finals = [], {}
    for kind in (BoundKind.BA, *BOUND_ORDER):
        try:
            res = train_estimator(sampler, kind, int(cfg["steps"]), est_cfg, marginal, state_dim, action_dim)
        except EstimatorDivergence as exc:
            print(f"estimator diverged: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        curve.extend(res.curve)
        finals[kind.value] = res.final
    _write_csv(os.path.join(path, "curve.csv"), curve,
               ("step", "kind", "value", "ba_term", "energy_term", "normalizer_term"))
    report = {"estimates": finals, "analytic": analytic, "marginal_mode": mode}
    with open(os.path.join(path, "estimates.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for kind, value in finals.items():
        print(f"{kind:8s} {value: .4f}")
    if analytic is not None:
        print(f"analytic {analytic: .4f}")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    from .gradcheck import run_gradcheck

    seed = int(cfg["seed"])
    if cfg["mi_grad"] not in ag.MI_GRAD_MODES:
        raise UsageError(f"--mi_grad must be one of {ag.MI_GRAD_MODES}")
    if cfg["q"] not in ("mlp", "quadratic", "peaked", "zero"):
        raise UsageError("--q must be one of mlp, quadratic, peaked, zero")
    path = run_dir("gradcheck", seed, cfg)
    echo_config(path, cfg)
    write_meta(path, command="gradcheck", seed=seed)
    hmc = HmcConfig(burn_in=int(cfg["hmc.burn_in"]), leapfrog_steps=int(cfg["hmc.leapfrog_steps"]),
                    step_size=float(cfg["hmc.step_size"]))
    report = run_gradcheck(int(cfg["points"]), int(cfg["k"]), cfg["mi_grad"], cfg["q"], seed, hmc)
    with open(os.path.join(path, "gradcheck.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"{verdict} mean cosine {report['mean_cosine']:.4f} min cosine {report['min_cosine']:.4f}")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_ablate(cfg) -> int:
    variants, envs = list(cfg["variants"]), list(cfg["envs"])
    if not variants:
        raise UsageError("--variants must name at least one variant")
    if not envs:
        raise UsageError("--envs must name at least one environment")
    for v in variants:
        if v not in ag.VARIANTS and v != "SAC":
            raise UsageError(f"unknown variant {v!r}")
    if cfg["tier"] not in od.TIERS:
        raise UsageError(f"invalid tier {cfg['tier']!r}")
    seeds = [int(s) for s in cfg["seeds"]]
    path = run_dir("ablate", seeds[0] if seeds else 0, cfg)
    echo_config(path, cfg)
    write_meta(path, command="ablate")
    order = [v for v in (*ag.VARIANTS, "SAC") if v in variants]
    rows = []
    for env_name in envs:
        try:
            env = od.make_env(env_name)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        ds = od.generate_dataset(env, cfg["tier"], int(cfg["n"]), 0)
        for variant in order:
            scores = []
            for seed in seeds:
                try:
                    tcfg = train_config_from({**cfg, "variant": variant}, seed)
                    state = ag.init_train_state(tcfg, ds.state_dim, ds.action_dim)
                    ag.train(state, ds)
                    scores.append(od.evaluate_policy(env, state.policy, int(cfg["eval_episodes"]), seed)
                                  ["normalized_score"])
                except (ag.NumericalAbort, FloatingPointError) as exc:
                    log.warning("run %s/%s/%d failed: %s", variant, env_name, seed, exc)
                    scores.append(float("nan"))
            arr = np.asarray(scores)
            ok = arr[np.isfinite(arr)]
            rows.append({
                "variant": variant, "env": env_name, "seeds": len(seeds),
                "mean_score": float(ok.mean()) if ok.size else float("nan"),
                "std_score": float(ok.std(ddof=1)) if ok.size > 1 else float("nan"),
                "failed": int((~np.isfinite(arr)).sum()),
            })
            print(f"{env_name:12s} {variant:12s} {rows[-1]['mean_score']:7.1f} +- {rows[-1]['std_score']:.1f}")
    _write_csv(os.path.join(path, "summary.csv"), rows,
               ("variant", "env", "seeds", "mean_score", "std_score", "failed"))
    for check in ablation_trend(rows):
        print(check)
    return EXIT_OK


def ablation_trend(rows) -> list[str]:
    """Soft checks of the expected ordering MISA >= MISA-DV >= MISA-f (per env)."""
    out = []
    by_env = {}
    for r in rows:
        by_env.setdefault(r["env"], {})[r["variant"]] = r
    for env_name, d in by_env.items():
        for hi, lo in (("MISA", "MISA-DV"), ("MISA-DV", "MISA-f"), ("MISA", "k=5")):
            if hi in d and lo in d:
                a, b = d[hi], d[lo]
                se = np.sqrt(np.nan_to_num(a["std_score"]) ** 2 / max(a["seeds"], 1)
                             + np.nan_to_num(b["std_score"]) ** 2 / max(b["seeds"], 1))
                ok = a["mean_score"] + se >= b["mean_score"]
                out.append(f"trend {env_name}: {hi} >= {lo}: {'ok' if ok else 'VIOLATED'} "
                           f"({a['mean_score']:.1f} vs {b['mean_score']:.1f}, se {se:.1f})")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "estimate-mi": cmd_estimate_mi,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve_config(ns.command, args, ns.config)
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"misa {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ag.NumericalAbort, FloatingPointError) as exc:
        print(f"misa {ns.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
