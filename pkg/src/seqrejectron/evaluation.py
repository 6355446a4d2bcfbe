"""Completeness and soundness metrics, exactly (forward recursion) or by Monte Carlo."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EnumerationTooLarge
from .mdp import (
    DEFAULT_BUDGET,
    Policy,
    PolicyClass,
    TabularMDP,
    policy_values,
    state_occupancy,
    state_trajectory_distribution,
    total_variation,
)
from .rng import substream
from .stopping import CompiledRule, SelectivePolicy, _simulate, compile_policies

Z95 = 1.959963984540054

METRIC_FIELDS = (
    "alpha_M",
    "alpha_N",
    "stopped_regret_N",
    "switched_regret_N",
    "asymmetric_stopped_regret_N",
    "stopped_hellinger_sq",
    "expert_variance",
    "learner_cost_N",
    "expert_cost_N",
    "switched_cost_N",
    "learner_stopped_cost_N",
    "expert_stopped_cost_N",
    "mean_handoff_time_N",
    "mean_handoff_time_M",
    "expert_alpha_M",
    "expert_alpha_N",
    "state_tv_expert",
    "expert_late_stop_N",
)


@dataclass
class MetricsReport:
    method: str
    alpha_M: float
    alpha_N: float
    stopped_regret_N: float
    switched_regret_N: float
    asymmetric_stopped_regret_N: float
    stopped_hellinger_sq: float | None
    expert_variance: float
    learner_cost_N: float
    expert_cost_N: float
    switched_cost_N: float
    learner_stopped_cost_N: float
    expert_stopped_cost_N: float
    mean_handoff_time_N: float
    mean_handoff_time_M: float
    expert_alpha_M: float
    expert_alpha_N: float
    state_tv_expert: float | None
    expert_late_stop_N: float | None
    n_rollouts: int | None = None
    ci_halfwidths: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        if self.ci_halfwidths is None:
            out.pop("ci_halfwidths")
        if self.n_rollouts is None:
            out.pop("n_rollouts")
        return out

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def metrics_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=("method",) + METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({"method": r.method, **r.csv_row()})
    return buf.getvalue()


# ---------------------------------------------------------------- forward recursion


@dataclass
class Sweep:
    stop_mass: np.ndarray  # (H,) mass stopped at step h (1-based index h-1)
    survive_mass: float  # mass reaching the end without stopping
    prefix_cost: float  # expected cost accrued before tau
    total_cost: float  # expected cost including the handoff policy (if any)
    late_mass: float  # Pr(tau_rule > tau_other), when ``other`` is given

    @property
    def alpha(self) -> float:
        return float(self.stop_mass.sum())

    @property
    def mass(self) -> float:
        return float(self.stop_mass.sum()) + self.survive_mass

    def mean_handoff(self, horizon: int) -> float:
        """E[min(tau, H)] (never-stopping trajectories capped at H)."""
        steps = np.arange(1, horizon + 1)
        return float(self.stop_mass @ steps + horizon * self.survive_mass)


_DONE = "done"


def forward_sweep(
    mdp: TabularMDP,
    pre: np.ndarray,
    rule: CompiledRule | None,
    post: np.ndarray | None = None,
    other: CompiledRule | None = None,
    budget: int = DEFAULT_BUDGET,
) -> Sweep:
    """Propagate mass over (state, rule carry) nodes.

    ``pre`` and ``post`` are (H, S, A) nonnegative action weights (policies, or
    sqrt(pi * pi') rows for Hellinger affinities). Without ``post`` mass halts at
    the stopping time; with it, control passes to ``post``. Nodes whose carries
    coincide are merged, so first-disagreement rules cost O(H S^2 A).
    """
    H, S, A = mdp.costs.shape
    stop_mass = np.zeros(H)
    survive = 0.0
    prefix_cost = 0.0
    total_cost = 0.0
    late = 0.0
    start = rule.start() if rule is not None else None
    ostart = other.start() if other is not None else None
    nodes: dict = {}
    for s in range(S):
        if mdp.initial_dist[s] > 0:
            nodes[(s, start, ostart, False)] = float(mdp.initial_dist[s])
    for h0 in range(H):
        nxt: dict = {}
        for (s, carry, ocarry, switched), mass in nodes.items():
            if not switched:
                stop = False
                if rule is not None:
                    stop, carry = rule.check(h0, s, carry)
                if other is not None and ocarry != _DONE:
                    ostop, ocarry = other.check(h0, s, ocarry)
                    if ostop:
                        if not stop:
                            late += mass
                        ocarry = _DONE
                if stop:
                    stop_mass[h0] += mass
                    if post is None:
                        continue
                    switched = True
                    carry = None
                    ocarry = _DONE
            row = post[h0, s] if switched else pre[h0, s]
            for a in range(A):
                w = row[a]
                if w <= 0:
                    continue
                ma = mass * w
                c = ma * mdp.costs[h0, s, a]
                total_cost += c
                if not switched:
                    prefix_cost += c
                if h0 == H - 1:
                    if not switched:
                        survive += ma
                    continue
                kern = mdp.transitions[h0, s, a]
                for s2 in np.flatnonzero(kern > 0):
                    key = (int(s2), carry, ocarry, switched)
                    nxt[key] = nxt.get(key, 0.0) + ma * kern[s2]
        if len(nxt) > budget:
            raise EnumerationTooLarge(f"forward recursion exceeds budget of {budget} nodes")
        nodes = nxt
    return Sweep(stop_mass, float(survive), float(prefix_cost), float(total_cost), float(late))


def expert_variance(mdp: TabularMDP, expert: Policy) -> float:
    """sum_h E_{pi*}[(V_h(s_h) - Q_h(s_h, a_h))^2]."""
    V, Q = policy_values(mdp, expert)
    occ = state_occupancy(mdp, expert)
    gap = (V[:, :, None] - Q) ** 2
    val = float(np.einsum("hs,hsa,hsa->", occ, expert.probs, gap))
    assert val <= mdp.cost_cap**2 + 1e-9, "expert variance exceeds C_max^2"
    return val


def deviation_rule(base: Policy, expert: Policy, theta: float | None) -> CompiledRule:
    """tau_{base,{expert}}: the base's own first deviation from the expert."""
    return compile_policies(base, [expert], theta)


def exact_metrics(
    M: TabularMDP,
    N: TabularMDP,
    sel: SelectivePolicy,
    expert: Policy,
    pclass: PolicyClass,
    *,
    budget: int = DEFAULT_BUDGET,
    with_tv: bool = True,
) -> MetricsReport:
    """Every field computed exactly by forward recursion (and state-path enumeration for TV)."""
    M.check_shape(expert)
    N.check_shape(expert)
    rule = sel.compiled(pclass)
    H = N.horizon
    pi0 = sel.base.probs
    pis = expert.probs
    src = forward_sweep(M, pi0, rule, budget=budget)
    tgt = forward_sweep(N, pi0, rule, budget=budget)
    dev = deviation_rule(sel.base, expert, sel.rule.theta)
    exp_tgt = forward_sweep(N, pis, rule, other=dev, budget=budget)
    exp_src = forward_sweep(M, pis, rule, budget=budget)
    switched = forward_sweep(N, pi0, rule, post=pis, budget=budget)
    learner_full = forward_sweep(N, pi0, None, budget=budget).total_cost
    expert_full = forward_sweep(N, pis, None, budget=budget).total_cost
    aff = forward_sweep(N, np.sqrt(pi0 * pis), rule, budget=budget)
    hell = min(1.0, max(0.0, 1.0 - aff.mass))
    tv = None
    if with_tv:
        try:
            tv = total_variation(
                state_trajectory_distribution(M, expert, budget=budget),
                state_trajectory_distribution(N, expert, budget=budget),
            )
        except EnumerationTooLarge:
            tv = None
    return MetricsReport(
        method="exact",
        alpha_M=src.alpha,
        alpha_N=tgt.alpha,
        stopped_regret_N=tgt.prefix_cost - exp_tgt.prefix_cost,
        switched_regret_N=switched.total_cost - expert_full,
        asymmetric_stopped_regret_N=tgt.prefix_cost - expert_full,
        stopped_hellinger_sq=hell,
        expert_variance=expert_variance(N, expert),
        learner_cost_N=learner_full,
        expert_cost_N=expert_full,
        switched_cost_N=switched.total_cost,
        learner_stopped_cost_N=tgt.prefix_cost,
        expert_stopped_cost_N=exp_tgt.prefix_cost,
        mean_handoff_time_N=tgt.mean_handoff(H),
        mean_handoff_time_M=src.mean_handoff(H),
        expert_alpha_M=exp_src.alpha,
        expert_alpha_N=exp_tgt.alpha,
        state_tv_expert=tv,
        expert_late_stop_N=exp_tgt.late_mass,
    )


def _mean_ci(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    mean = float(np.mean(x))
    if n < 2:
        return mean, math.inf
    return mean, float(Z95 * np.std(x, ddof=1) / math.sqrt(n))


def monte_carlo_metrics(
    M: TabularMDP,
    N: TabularMDP,
    sel: SelectivePolicy,
    expert: Policy,
    pclass: PolicyClass,
    n_rollouts: int,
    rng_seed: int,
) -> MetricsReport:
    """Plug-in estimates with 95% normal-approximation half-widths.

    Rollout i of each estimator uses substream (seed, label, i), so results do
    not depend on how rollouts are scheduled.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rule = sel.compiled(pclass)
    dev = deviation_rule(sel.base, expert, sel.rule.theta)
    H = N.horizon
    fields: dict[str, list[float]] = {k: [] for k in (
        "alpha_M", "alpha_N", "learner_stopped", "expert_stopped", "switched", "learner_full", "expert_full",
        "handoff_N", "handoff_M", "expert_alpha_M", "expert_alpha_N", "expert_late")}
    never = CompiledRule(np.zeros((0, H, N.num_states)), None)
    for i in range(n_rollouts):
        states, _, _, _ = _simulate(M, sel.base, never, substream(rng_seed, "learner_M", i), None)
        tau = int(rule.stop_times(np.array(states)[None])[0])
        fields["alpha_M"].append(float(tau <= H))
        fields["handoff_M"].append(float(min(tau, H)))
        # tau reads states only, so one full rollout yields both the stopped and unstopped cost
        states, actions, _, full = _simulate(N, sel.base, never, substream(rng_seed, "learner_N", i), None)
        tau = int(rule.stop_times(np.array(states)[None])[0])
        fields["alpha_N"].append(float(tau <= H))
        fields["handoff_N"].append(float(min(tau, H)))
        fields["learner_stopped"].append(sum(float(N.costs[h0, states[h0], actions[h0]]) for h0 in range(tau - 1)))
        fields["learner_full"].append(full)
        states, actions, _, full = _simulate(N, expert, never, substream(rng_seed, "expert_N", i), None)
        st = np.array(states)[None]
        tau_e = int(rule.stop_times(st)[0])
        tau_dev = int(dev.stop_times(st)[0])
        fields["expert_full"].append(full)
        fields["expert_stopped"].append(sum(float(N.costs[h0, states[h0], actions[h0]]) for h0 in range(tau_e - 1)))
        fields["expert_alpha_N"].append(float(tau_e <= H))
        fields["expert_late"].append(float(tau_e > tau_dev))
        states, _, _, _ = _simulate(M, expert, never, substream(rng_seed, "expert_M", i), None)
        fields["expert_alpha_M"].append(float(int(rule.stop_times(np.array(states)[None])[0]) <= H))
        _, _, _, cost = _simulate(N, sel.base, rule, substream(rng_seed, "switched", i), expert)
        fields["switched"].append(cost)
    arr = {k: np.array(v) for k, v in fields.items()}
    est: dict[str, tuple[float, float]] = {k: _mean_ci(v) for k, v in arr.items()}
    # learner and expert rollouts are independent, so half-widths combine in quadrature
    def diff(a: str, b: str) -> tuple[float, float]:
        return est[a][0] - est[b][0], math.hypot(est[a][1], est[b][1])

    stopped_regret = diff("learner_stopped", "expert_stopped")
    switched_regret = diff("switched", "expert_full")
    asym = diff("learner_stopped", "expert_full")
    ci = {
        "alpha_M": est["alpha_M"][1],
        "alpha_N": est["alpha_N"][1],
        "stopped_regret_N": stopped_regret[1],
        "switched_regret_N": switched_regret[1],
        "asymmetric_stopped_regret_N": asym[1],
        "learner_cost_N": est["learner_full"][1],
        "expert_cost_N": est["expert_full"][1],
        "switched_cost_N": est["switched"][1],
        "learner_stopped_cost_N": est["learner_stopped"][1],
        "expert_stopped_cost_N": est["expert_stopped"][1],
        "mean_handoff_time_N": est["handoff_N"][1],
        "mean_handoff_time_M": est["handoff_M"][1],
        "expert_alpha_M": est["expert_alpha_M"][1],
        "expert_alpha_N": est["expert_alpha_N"][1],
        "expert_late_stop_N": est["expert_late"][1],
    }
    return MetricsReport(
        method="monte_carlo",
        alpha_M=est["alpha_M"][0],
        alpha_N=est["alpha_N"][0],
        stopped_regret_N=stopped_regret[0],
        switched_regret_N=switched_regret[0],
        asymmetric_stopped_regret_N=asym[0],
        stopped_hellinger_sq=None,
        expert_variance=expert_variance(N, expert),
        learner_cost_N=est["learner_full"][0],
        expert_cost_N=est["expert_full"][0],
        switched_cost_N=est["switched"][0],
        learner_stopped_cost_N=est["learner_stopped"][0],
        expert_stopped_cost_N=est["expert_stopped"][0],
        mean_handoff_time_N=est["handoff_N"][0],
        mean_handoff_time_M=est["handoff_M"][0],
        expert_alpha_M=est["expert_alpha_M"][0],
        expert_alpha_N=est["expert_alpha_N"][0],
        state_tv_expert=None,
        expert_late_stop_N=est["expert_late"][0],
        n_rollouts=n_rollouts,
        ci_halfwidths=ci,
    )
