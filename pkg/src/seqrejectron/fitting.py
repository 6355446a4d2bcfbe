"""End-to-end fitting procedures producing selective policies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, ValidationError
from .mdp import DETERMINISTIC, STOCHASTIC, PolicyClass, Trajectory
from .rng import substream
from .stopping import SelectivePolicy, StoppingRule, merge_step_rules
from .validators import (
    NoRegretConfig,
    ValidatorDistribution,
    committee_size_for,
    disagreement_rates,
    ensemble_size,
    exact_version_space,
    logloss_version_space,
    mle_policy,
    per_step_selectors,
    regularized_validator_dist,
    sparse_validator_dist,
)

HEDGE = "hedge"
FTPL = "ftpl"


@dataclass
class FitReport:
    algorithm: str
    selective: SelectivePolicy
    ensemble_draws: int
    committee_total: int
    params: dict
    certificates: dict = field(default_factory=dict)
    Z: float | None = None
    bounds: dict = field(default_factory=dict)
    certified: bool = True
    distribution: ValidatorDistribution | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def rule(self) -> StoppingRule:
        return self.selective.rule

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "selective_policy": self.selective.to_json(),
            "ensemble_draws": self.ensemble_draws,
            "committee_total": self.committee_total,
            "params": self.params,
            "certificates": self.certificates,
            "Z": self.Z,
            "bounds": self.bounds,
            "certified": self.certified,
            "validator_distribution": self.distribution.to_json() if self.distribution else None,
            "notes": self.notes,
        }


def _check_unit(name: str, x: float) -> None:
    if not 0 < x < 1:
        raise ValidationError(f"{name} must lie in (0, 1)")


def _game(space, base, test, rho, xi, delta, theta, cfg, pclass, engine):
    rng = substream(cfg.rng_seed, "game", 0)
    if engine == FTPL:
        from .ftpl import ftpl_engine

        T = cfg.rounds or 200
        return ftpl_engine(space, base, test, rho, T, rng, pclass, theta=theta)
    return sparse_validator_dist(space, base, test, rho, xi, delta, theta, cfg, pclass, rng=rng)


def _union_draws(dist: ValidatorDistribution, k: int, seed: int) -> tuple[int, ...]:
    draws = dist.sample_many(substream(seed, "ensemble", 0), k)
    return tuple(sorted({v for c in draws for v in c}))


def deterministic_complexity(k: int, eta: float, class_size: int, delta: float) -> float:
    """Z = (k * ceil(2/eta) + 1) log|Pi| + log(5/delta)."""
    return (k * math.ceil(2 / eta - 1e-12) + 1) * math.log(class_size) + math.log(5 / delta)


def fit_deterministic(
    pclass: PolicyClass,
    train: Sequence[Trajectory],
    test: Sequence[Trajectory],
    eta: float,
    xi: float,
    delta: float,
    cfg: NoRegretConfig | None = None,
    engine: str = HEDGE,
) -> FitReport:
    """Exact version space, smallest-id base, union of k committees, first-disagreement rule."""
    cfg = cfg or NoRegretConfig()
    _check_unit("eta", eta)
    _check_unit("delta", delta)
    if pclass.kind != DETERMINISTIC:
        raise ValidationError("fit_deterministic needs a deterministic class")
    if not test:
        raise EmptyInputError("empty test set")
    space = exact_version_space(pclass, train)
    base = space.member_ids[0]
    dist = _game(space, base, test, eta / 2, xi, delta / 5, None, cfg, pclass, engine)
    k = ensemble_size(delta, 5)
    validators = _union_draws(dist, k, cfg.rng_seed)
    rule = StoppingRule(base, validators)
    m, n = len(train), len(test)
    Z = deterministic_complexity(k, eta, len(pclass), delta)
    eps = eta + 2 * xi
    bounds = {
        "alpha_M": 2 * Z / m if m else math.inf,
        # multiply by C_max of the target environment
        "regret_N_over_cmax": eps + math.sqrt(2 * eps * Z / n) + 3 * Z / n,
    }
    return FitReport(
        "deterministic",
        SelectivePolicy.from_class(pclass, rule),
        k,
        len(validators),
        {"eta": eta, "xi": xi, "delta": delta, "rho": eta / 2, "engine": engine, "version_space_size": len(space)},
        dict(dist.certificates),
        Z,
        bounds,
        True,
        dist,
    )


def stochastic_complexity(k_ens: int, class_size: int, delta: float) -> float:
    return (k_ens + 1) * math.log(class_size) + math.log(4 / delta)


def default_gamma(class_size: int, delta: float, m: int) -> float:
    """gamma = (log|Pi| + log(8/delta)) / m, the balancing choice for the stochastic bound."""
    return (math.log(class_size) + math.log(8 / delta)) / m


def fit_stochastic(
    pclass: PolicyClass,
    train: Sequence[Trajectory],
    test: Sequence[Trajectory],
    eta: float,
    delta: float,
    theta: float,
    gamma: float | None = None,
    cfg: NoRegretConfig | None = None,
    xi: float | None = None,
    engine: str = HEDGE,
) -> FitReport:
    """MLE base, log-loss version space, cumulative-Hellinger rule with budget theta.

    ``xi`` defaults to eta / 2 (the game slack enters the bound through eta).
    """
    cfg = cfg or NoRegretConfig()
    _check_unit("eta", eta)
    _check_unit("delta", delta)
    if not theta > 0:
        raise ValidationError("theta must be > 0")
    if not test:
        raise EmptyInputError("empty test set")
    if pclass.kind != STOCHASTIC:
        pclass = pclass.as_stochastic()
    m, n = len(train), len(test)
    if gamma is None:
        gamma = default_gamma(len(pclass), delta, m)
    xi = eta / 2 if xi is None else xi
    base = mle_policy(pclass, train)
    space = logloss_version_space(pclass, train, gamma)
    dist = _game(space, base, test, eta / 2, xi, delta / 4, theta, cfg, pclass, engine)
    k = ensemble_size(delta, 4)
    validators = _union_draws(dist, k, cfg.rng_seed)
    rule = StoppingRule(base, validators, theta)
    k_ens = k * math.ceil(2 / eta - 1e-12)
    Z = stochastic_complexity(k_ens, len(pclass), delta)
    notes = []
    certified = True
    if n < 8 * Z / eta:
        certified = False
        notes.append(f"n={n} < 8Z/eta={8 * Z / eta:.1f}")
    if math.isfinite(gamma) and m * gamma < math.log(len(pclass)) + math.log(8 / delta):
        certified = False
        notes.append("m < (log|Pi| + log(8/delta)) / gamma")
    bounds = {
        "alpha_M": k_ens * (12 / theta + 48) * gamma,
        "stopped_hellinger_sq": 3 * (theta + eta),
    }
    return FitReport(
        "stochastic",
        SelectivePolicy.from_class(pclass, rule),
        k,
        len(validators),
        {"eta": eta, "xi": xi, "delta": delta, "theta": theta, "gamma": gamma, "rho": eta / 2,
         "engine": engine, "version_space_size": len(space), "K_ens": k_ens},
        dict(dist.certificates),
        Z,
        bounds,
        certified,
        dist,
        notes,
    )


def default_regularization(misspec_gap: float, eps_star: float) -> int:
    """K = Lambda = ceil((Delta^{1/2} + eps*)^{-1}), the balancing recipe for the misspecified rate."""
    denom = math.sqrt(max(misspec_gap, 0.0)) + eps_star
    if denom <= 0:
        raise ValidationError("need a positive misspecification gap or statistical term")
    return max(1, math.ceil(1 / denom - 1e-12))


def statistical_term(class_size: int, m: int, n: int, delta: float) -> float:
    """eps* = max((c0/m)^(1/5), (c0/n)^(1/3)) with c0 = log|Pi| + log(4/delta)."""
    c0 = math.log(class_size) + math.log(4 / delta)
    return max((c0 / max(m, 1)) ** 0.2, (c0 / max(n, 1)) ** (1 / 3))


def fit_misspecified(
    pclass: PolicyClass,
    train: Sequence[Trajectory],
    test: Sequence[Trajectory],
    lam: float,
    K: int,
    cfg: NoRegretConfig | None = None,
    xi: float = 0.1,
    delta: float = 0.1,
) -> FitReport:
    """Disagreement-minimizing base, regularized game, one sampled committee."""
    cfg = cfg or NoRegretConfig()
    if not lam > 0:
        raise ValidationError("lambda must be > 0")
    if K < 1:
        raise ValidationError("K must be >= 1")
    dis = disagreement_rates(pclass, train)
    base = int(np.argmin(dis))
    dist = regularized_validator_dist(
        pclass, base, train, test, lam, K, cfg, rng=substream(cfg.rng_seed, "game", 0), xi=xi, delta=delta
    )
    committee = dist.sample(substream(cfg.rng_seed, "ensemble", 0))
    rule = StoppingRule(base, committee)
    return FitReport(
        "misspecified",
        SelectivePolicy.from_class(pclass, rule),
        1,
        len(committee),
        {"lambda": lam, "K": K, "xi": xi, "delta": delta, "distinct_validators": len(rule.validators),
         "base_disagreement": float(dis[base])},
        dict(dist.certificates),
        None,
        {"reg_completeness": dist.diagnostics["completeness_bound"], "reg_soundness_sup": dist.diagnostics["soundness_bound"]},
        True,
        dist,
    )


def fit_per_step(
    pclass: PolicyClass,
    train: Sequence[Trajectory],
    test: Sequence[Trajectory],
    rho: float,
    xi: float,
    delta: float,
    cfg: NoRegretConfig | None = None,
) -> FitReport:
    """Per-step baseline: abstain at the first step whose own committee disagrees."""
    cfg = cfg or NoRegretConfig()
    _check_unit("rho", rho)
    _check_unit("delta", delta)
    rules = per_step_selectors(pclass, train, test, rho, xi, delta, cfg)
    rule = merge_step_rules(rules)
    H = pclass.horizon
    k = ensemble_size(delta, 5 * H)
    total = sum(len(v) for v in rule.step_validators)
    return FitReport(
        "per_step",
        SelectivePolicy.from_class(pclass, rule),
        k,
        total,
        {"rho": rho, "xi": xi, "delta": delta, "committee_size": committee_size_for(rho),
         "distinct_validators": len(rule.validators)},
        {},
        None,
        {},
        True,
        None,
    )
