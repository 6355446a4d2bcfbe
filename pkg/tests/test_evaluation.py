import math

import numpy as np
import pytest

from seqrejectron.evaluation import (
    METRIC_FIELDS,
    exact_metrics,
    expert_variance,
    metrics_csv,
    monte_carlo_metrics,
)
from seqrejectron.mdp import (
    Policy,
    PolicyClass,
    TabularMDP,
    enumerate_trajectory_distribution,
    outcome_cost,
    trajectory_hellinger_sq,
)
from seqrejectron.scenarios import make_windy_chain
from seqrejectron.stopping import SelectivePolicy, StoppingRule

from conftest import random_class, random_mdp, random_stochastic


def _oracle(M, N, sel, expert, pclass):
    """Every metric recomputed from enumerated trajectory laws."""
    rule = sel.compiled(pclass)
    H = N.horizon
    base = sel.base

    def stopped(key):
        return len(key[1]) < len(key[0])

    def handoff(key):
        return len(key[0]) if stopped(key) else H

    src = enumerate_trajectory_distribution(M, base, rule)
    tgt = enumerate_trajectory_distribution(N, base, rule)
    exp_tgt = enumerate_trajectory_distribution(N, expert, rule)
    sw = enumerate_trajectory_distribution(N, base, rule, handoff=expert)
    full_e = enumerate_trajectory_distribution(N, expert).expectation(lambda k: outcome_cost(N, k))
    full_l = enumerate_trajectory_distribution(N, base).expectation(lambda k: outcome_cost(N, k))
    pre_l = tgt.expectation(lambda k: outcome_cost(N, k))
    pre_e = exp_tgt.expectation(lambda k: outcome_cost(N, k))
    sw_cost = sw.expectation(lambda k: outcome_cost(N, k))
    return {
        "alpha_M": src.expectation(lambda k: float(stopped(k))),
        "alpha_N": tgt.expectation(lambda k: float(stopped(k))),
        "stopped_regret_N": pre_l - pre_e,
        "switched_regret_N": sw_cost - full_e,
        "asymmetric_stopped_regret_N": pre_l - full_e,
        "stopped_hellinger_sq": trajectory_hellinger_sq(tgt, exp_tgt),
        "learner_cost_N": full_l,
        "expert_cost_N": full_e,
        "switched_cost_N": sw_cost,
        "mean_handoff_time_N": tgt.expectation(handoff),
        "mean_handoff_time_M": src.expectation(handoff),
        "expert_alpha_N": exp_tgt.expectation(lambda k: float(stopped(k))),
    }


def _instance(rng, theta):
    S, A, H = 3, 2, 3
    M, N = random_mdp(rng, S, A, H), random_mdp(rng, S, A, H)
    pc = random_class(rng, S, A, H, 4, stochastic=theta is not None)
    expert = random_stochastic(rng, S, A, H) if theta is not None else random_class(rng, S, A, H, 1)[0]
    sel = SelectivePolicy.from_class(pc, StoppingRule(0, (1, 2, 3), theta))
    return M, N, sel, expert, pc


@pytest.mark.parametrize("theta", [None, 0.3, 1.0])
def test_exact_metrics_match_enumeration(theta):
    rng = np.random.default_rng(0 if theta is None else int(theta * 10))
    for _ in range(15):
        M, N, sel, expert, pc = _instance(rng, theta)
        rep = exact_metrics(M, N, sel, expert, pc)
        for key, val in _oracle(M, N, sel, expert, pc).items():
            assert getattr(rep, key) == pytest.approx(val, abs=1e-10), key


def test_immediate_stop_rule(desk, desk_policies):
    pc = PolicyClass((desk_policies["R"], desk_policies["L"]))
    sel = SelectivePolicy.from_class(pc, StoppingRule(0, (1,)))
    rep = exact_metrics(desk.M, desk.N, sel, desk.expert, pc)
    assert rep.alpha_M == 1.0 and rep.alpha_N == 1.0
    assert rep.stopped_regret_N == 0.0 and rep.switched_regret_N == 0.0
    assert rep.mean_handoff_time_N == 1.0


def test_never_stop_rule(desk, desk_policies):
    pc = PolicyClass((desk_policies["R"], desk_policies["L"]))
    sel = SelectivePolicy.from_class(pc, StoppingRule(0, ()))
    rep = exact_metrics(desk.M, desk.N, sel, desk.expert, pc)
    assert rep.alpha_M == 0.0 and rep.alpha_N == 0.0
    assert rep.mean_handoff_time_N == 2.0
    assert rep.switched_cost_N == rep.learner_cost_N


def test_reference_chain_pinned_values(desk, desk_policies):
    pc = PolicyClass((desk_policies["R"], desk_policies["L"], desk_policies["RL"]))
    sel = SelectivePolicy.from_class(pc, StoppingRule(0, (2,)))
    rep = exact_metrics(desk.M, desk.N, sel, desk.expert, pc)
    # R from state 0 stays put half the time in N, so the expert pays 1 or 2
    assert rep.expert_cost_N == pytest.approx(1.5)
    assert rep.state_tv_expert == pytest.approx(0.5)
    # RL deviates from R only at step 2, in state 0 or 1 alike
    assert rep.alpha_N == pytest.approx(1.0)
    assert rep.alpha_M == pytest.approx(1.0)


def test_consistent_committee_without_shift_has_zero_stopped_regret():
    rng = np.random.default_rng(7)
    for _ in range(10):
        mdp = random_mdp(rng, 3, 2, 3)
        pc = random_class(rng, 3, 2, 3, 4)
        sel = SelectivePolicy.from_class(pc, StoppingRule(0, (1, 2, 3)))
        # the expert is a committee member, so tau <= tau_dev and the prefixes coincide
        rep = exact_metrics(mdp, mdp, sel, pc[2], pc)
        assert rep.stopped_regret_N == pytest.approx(0.0, abs=1e-12)
        assert rep.expert_late_stop_N == pytest.approx(0.0, abs=1e-12)


def test_asymmetric_regret_bounded_by_switched_regret():
    rng = np.random.default_rng(8)
    for _ in range(20):
        M, N, sel, expert, pc = _instance(rng, None)
        rep = exact_metrics(M, N, sel, expert, pc)
        assert rep.asymmetric_stopped_regret_N <= rep.switched_regret_N + 1e-12


def test_expert_variance_examples():
    mdp = TabularMDP(np.array([1.0]), np.zeros((0, 1, 2, 1)), np.array([[[0.0, 1.0]]]), 1.0)
    assert expert_variance(mdp, Policy.stochastic(np.full((1, 1, 2), 0.5))) == pytest.approx(0.25)
    assert expert_variance(mdp, Policy.deterministic(np.zeros((1, 1), dtype=int), 2)) == 0.0


def _windy(seed=3):
    b = make_windy_chain(4, 5, 0.4, seed, class_size=8)
    sel = SelectivePolicy.from_class(b.pclass, StoppingRule(0, tuple(range(1, 8)), 0.5))
    return b, sel


def test_monte_carlo_agrees_with_exact():
    b, sel = _windy()
    exact = exact_metrics(b.M, b.N, sel, b.expert, b.pclass)
    mc = monte_carlo_metrics(b.M, b.N, sel, b.expert, b.pclass, 2000, 11)
    for key, hw in mc.ci_halfwidths.items():
        assert abs(getattr(mc, key) - getattr(exact, key)) <= 3 * hw + 1e-12, key


def test_monte_carlo_interval_shrinks_with_rollouts():
    b, sel = _windy()
    a = monte_carlo_metrics(b.M, b.N, sel, b.expert, b.pclass, 1000, 5)
    c = monte_carlo_metrics(b.M, b.N, sel, b.expert, b.pclass, 2000, 5)
    for key in ("learner_cost_N", "expert_cost_N", "switched_cost_N", "mean_handoff_time_N", "alpha_N"):
        ratio = c.ci_halfwidths[key] / a.ci_halfwidths[key]
        assert abs(ratio - 1 / math.sqrt(2)) <= 0.2 / math.sqrt(2), key


def test_monte_carlo_is_reproducible_and_validates():
    b, sel = _windy()
    a = monte_carlo_metrics(b.M, b.N, sel, b.expert, b.pclass, 50, 5)
    c = monte_carlo_metrics(b.M, b.N, sel, b.expert, b.pclass, 50, 5)
    assert a.to_json() == c.to_json()
    with pytest.raises(ValueError):
        monte_carlo_metrics(b.M, b.N, sel, b.expert, b.pclass, 0, 5)


def test_csv_has_every_metric(desk, desk_policies):
    pc = PolicyClass((desk_policies["R"], desk_policies["L"]))
    rep = exact_metrics(desk.M, desk.N, SelectivePolicy.from_class(pc, StoppingRule(0, (1,))), desk.expert, pc)
    header = metrics_csv([rep]).splitlines()[0].split(",")
    assert set(METRIC_FIELDS) <= set(header)
