"""Batch studies shared by the CLI and the acceptance suite."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .evaluation import deviation_rule, exact_metrics, forward_sweep
from .fitting import fit_deterministic, fit_misspecified, fit_per_step, fit_stochastic
from .rng import derive_seed
from .scenarios import (
    make_random_tabular,
    make_rare_state_chain,
    make_windy_chain,
    posterior_greedy_validators,
    sample_datasets,
)
from .stopping import SelectivePolicy, StoppingRule
from .validators import NoRegretConfig, mle_policy

DEMO_COLUMNS = (
    "trial",
    "theta",
    "source_handoff_rate",
    "target_handoff_rate",
    "switched_cost",
    "learner_cost",
    "expert_cost",
    "mean_handoff_time",
)

DEFAULT_THETAS = (0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class DemoConfig:
    length: int = 6
    horizon: int = 12
    wind: float = 0.4
    class_size: int = 32
    m: int = 30
    n: int = 30
    trials: int = 20
    committee: int = 3
    thetas: tuple[float, ...] = DEFAULT_THETAS
    seed: int = 0


def map_ordered(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Map with optional process parallelism; results keep input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _demo_trial(args: tuple[DemoConfig, int]) -> list[dict]:
    cfg, trial = args
    bundle = make_windy_chain(cfg.length, cfg.horizon, cfg.wind, derive_seed(cfg.seed, "scenario", trial),
                              class_size=cfg.class_size)
    train, test = sample_datasets(bundle, cfg.m, cfg.n, derive_seed(cfg.seed, "data", trial))
    base = mle_policy(bundle.pclass, train)
    validators = posterior_greedy_validators(bundle.pclass, base, train, test, cfg.committee,
                                             derive_seed(cfg.seed, "selector", trial))
    rows = []
    for theta in cfg.thetas:
        sel = SelectivePolicy.from_class(bundle.pclass, StoppingRule(base, validators, theta))
        r = exact_metrics(bundle.M, bundle.N, sel, bundle.expert, bundle.pclass, with_tv=False)
        rows.append({
            "trial": trial,
            "theta": float(theta),
            "source_handoff_rate": r.alpha_M,
            "target_handoff_rate": r.alpha_N,
            "switched_cost": r.switched_cost_N,
            "learner_cost": r.learner_cost_N,
            "expert_cost": r.expert_cost_N,
            "mean_handoff_time": r.mean_handoff_time_N,
        })
    return rows


def run_demo(cfg: DemoConfig, jobs: int = 1) -> list[dict]:
    """Windy-chain threshold sweep with the posterior-sampling greedy selector."""
    per_trial = map_ordered(_demo_trial, [(cfg, t) for t in range(cfg.trials)], jobs)
    return [row for rows in per_trial for row in rows]


def summarize_demo(rows: Sequence[dict]) -> list[dict]:
    """Trial means per theta, in increasing theta."""
    thetas = sorted({r["theta"] for r in rows})
    out = []
    for th in thetas:
        sub = [r for r in rows if r["theta"] == th]
        out.append({"theta": th, **{k: float(np.mean([r[k] for r in sub])) for k in DEMO_COLUMNS[2:]}})
    return out


def check_demo(summary: Sequence[dict], tol: float = 1e-12) -> dict[str, bool]:
    """The qualitative properties expected of the threshold sweep."""
    src = [s["source_handoff_rate"] for s in summary]
    tgt = [s["target_handoff_rate"] for s in summary]
    hand = [s["mean_handoff_time"] for s in summary]
    best = min(summary, key=lambda s: s["switched_cost"])
    return {
        "source_nonincreasing": all(b <= a + tol for a, b in zip(src, src[1:])),
        "source_below_5pct_at_max_theta": src[-1] < 0.05,
        "target_exceeds_source": all(t > s for s, t in zip(src, tgt) if s < 0.5 and (t > 0 or s > 0)),
        "switched_between_expert_and_learner": best["expert_cost"] - tol <= best["switched_cost"] <= best["learner_cost"] + tol,
        "handoff_time_nondecreasing": all(b >= a - tol for a, b in zip(hand, hand[1:])),
    }


# ---------------------------------------------------------------- parameter sweeps

SWEEP_COLUMNS = (
    "trial", "param", "value", "algorithm", "committee_total", "alpha_M", "alpha_N", "stopped_regret_N",
    "switched_regret_N", "asymmetric_stopped_regret_N", "stopped_hellinger_sq", "learner_cost_N",
    "expert_cost_N", "switched_cost_N", "mean_handoff_time_N",
)


@dataclass(frozen=True)
class SweepConfig:
    param: str = "theta"  # theta | eta | K | lambda
    values: tuple[float, ...] = DEFAULT_THETAS
    trials: int = 5
    seed: int = 0
    m: int = 30
    n: int = 30
    eta: float = 0.4
    xi: float = 0.1
    delta: float = 0.2
    theta: float = 2.0
    lam: float = 3.0
    K: int = 3
    # scenario knobs
    length: int = 6
    horizon: int = 12
    wind: float = 0.4
    S: int = 3
    A: int = 2
    corruption: float = 0.05
    class_size: int = 16


def _sweep_point(args: tuple[SweepConfig, int, float]) -> dict:
    cfg, trial, value = args
    scen_seed = derive_seed(cfg.seed, "scenario", trial)
    data_seed = derive_seed(cfg.seed, "data", trial)
    fit_cfg = NoRegretConfig(rng_seed=derive_seed(cfg.seed, "fit", trial))
    if cfg.param in ("theta", "eta"):
        bundle = make_windy_chain(cfg.length, cfg.horizon, cfg.wind, scen_seed, class_size=cfg.class_size)
        train, test = sample_datasets(bundle, cfg.m, cfg.n, data_seed)
        theta = value if cfg.param == "theta" else cfg.theta
        eta = value if cfg.param == "eta" else cfg.eta
        rep = fit_stochastic(bundle.pclass, train, test, eta, cfg.delta, theta, cfg=fit_cfg)
        algo = "stochastic"
    elif cfg.param in ("K", "lambda"):
        bundle = make_random_tabular(cfg.S, cfg.A, cfg.horizon, cfg.class_size, cfg.corruption, False, scen_seed)
        train, test = sample_datasets(bundle, cfg.m, cfg.n, data_seed)
        K = int(value) if cfg.param == "K" else cfg.K
        lam = float(value) if cfg.param == "lambda" else cfg.lam
        rep = fit_misspecified(bundle.pclass, train, test, lam, K, cfg=fit_cfg)
        algo = "misspecified"
    else:
        raise ValueError(f"unknown sweep parameter {cfg.param!r}")
    r = exact_metrics(bundle.M, bundle.N, rep.selective, bundle.expert, bundle.pclass, with_tv=False)
    return {"trial": trial, "param": cfg.param, "value": value, "algorithm": algo,
            "committee_total": rep.committee_total, **{k: getattr(r, k) for k in SWEEP_COLUMNS[5:]}}


def run_sweep(cfg: SweepConfig, jobs: int = 1) -> list[dict]:
    points = [(cfg, t, v) for t in range(cfg.trials) for v in cfg.values]
    return map_ordered(_sweep_point, points, jobs)


# ---------------------------------------------------------------- per-step vs trajectory-level


def _alpha_M(bundle, sel) -> float:
    return forward_sweep(bundle.M, sel.base.probs, sel.compiled(bundle.pclass)).alpha


def per_step_comparison(
    horizons: Sequence[int] = (2, 4, 8),
    seeds: int = 10,
    rho: float = 0.34,
    xi: float = 0.1,
    delta: float = 0.5,
    m: int = 30,
    n: int = 30,
    seed: int = 0,
) -> list[dict]:
    """Source abstention of both constructions at the same trajectory-level coverage target.

    The trajectory-level game uses rho directly; the per-step games each use
    rho / H, so a union bound gives both the same target-side late-stop target.
    Reported late-stop is the measured target-side fraction against the expert.
    """
    rows = []
    for H in horizons:
        for s in range(seeds):
            bundle = make_rare_state_chain(H, derive_seed(seed, "scenario", H, s))
            train, test = sample_datasets(bundle, m, n, derive_seed(seed, "data", H, s))
            cfg = NoRegretConfig(rng_seed=derive_seed(seed, "fit", H, s))
            traj = fit_deterministic(bundle.pclass, train, test, 2 * rho, xi, delta, cfg)
            step = fit_per_step(bundle.pclass, train, test, rho / H, xi, delta, cfg)
            rows.append({
                "H": H,
                "seed": s,
                "alpha_M_trajectory": _alpha_M(bundle, traj.selective),
                "alpha_M_per_step": _alpha_M(bundle, step.selective),
                "validators_trajectory": traj.committee_total,
                "validators_per_step": step.committee_total,
                "late_stop_trajectory": _late_stop(bundle, traj.selective),
                "late_stop_per_step": _late_stop(bundle, step.selective),
            })
    return rows


def _late_stop(bundle, sel) -> float:
    """Pr_{N, expert}[tau > base's deviation time from the expert]."""
    dev = deviation_rule(sel.base, bundle.expert, sel.rule.theta)
    return forward_sweep(bundle.N, bundle.expert.probs, sel.compiled(bundle.pclass), other=dev).late_mass


def summarize_per_step(rows: Sequence[dict]) -> list[dict]:
    out = []
    for H in sorted({r["H"] for r in rows}):
        sub = [r for r in rows if r["H"] == H]
        a_t = float(np.mean([r["alpha_M_trajectory"] for r in sub]))
        a_s = float(np.mean([r["alpha_M_per_step"] for r in sub]))
        out.append({"H": H, "alpha_M_trajectory": a_t, "alpha_M_per_step": a_s, "gap": a_s - a_t,
                    "late_stop_trajectory": float(np.mean([r["late_stop_trajectory"] for r in sub])),
                    "late_stop_per_step": float(np.mean([r["late_stop_per_step"] for r in sub]))})
    return out
