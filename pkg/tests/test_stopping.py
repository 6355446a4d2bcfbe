import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqrejectron.errors import ConfigurationError, ValidationError
from seqrejectron.mdp import (
    PolicyClass,
    enumerate_trajectory_distribution,
    geometric_mixture_policy,
    hellinger_sq_rows,
    trajectory_hellinger_sq,
)
from seqrejectron.stopping import (
    SelectivePolicy,
    StoppingRule,
    always_stop_rule,
    compile_policies,
    merge_step_rules,
    run_selective,
    run_switched,
    stop_time,
)

from conftest import prefix_coupling_gap, random_class, random_mdp, random_stochastic


@pytest.fixture
def desk_class(desk_policies):
    return PolicyClass((desk_policies["R"], desk_policies["L"], desk_policies["RL"]))


def test_stop_time_examples(desk_class):
    H = 2
    for theta in (None, 0.5):
        assert stop_time(StoppingRule(0, (), theta), desk_class, [0, 1]) == H + 1
        assert stop_time(StoppingRule(0, (0,), theta), desk_class, [0, 1]) == H + 1
    assert stop_time(StoppingRule(0, (1,)), desk_class, [0, 1]) == 1
    assert stop_time(StoppingRule(0, (2,)), desk_class, [0, 1]) == 2
    with pytest.raises(ValidationError):
        stop_time(StoppingRule(0, (1,)), desk_class, [0])


def test_hellinger_budget_is_strict_and_per_validator():
    rng = np.random.default_rng(0)
    pc = random_class(rng, 2, 2, 3, 3, stochastic=True)
    # a validator whose cumulative divergence equals theta exactly does not trigger
    rule = StoppingRule(0, (1,), 1.0)
    compiled = rule.compile(pc)
    states = np.array([[0, 1, 0]])
    d = compiled.div[0, np.arange(3), states[0]]
    exact = StoppingRule(0, (1,), float(d.sum())) if d.sum() > 0 else None
    if exact is not None:
        assert stop_time(exact, pc, states[0]) == 4
    # budgets are not pooled: two validators each below theta never trigger
    tiny = float(max(compiled.div.max(), 1e-3)) * 10
    both = StoppingRule(0, (1, 2), tiny)
    assert stop_time(both, pc, [0, 1, 0]) == 4


def test_run_selective_and_switched_examples(desk, desk_policies):
    pc = PolicyClass((desk_policies["R"], desk_policies["L"]))
    sel = SelectivePolicy.from_class(pc, StoppingRule(0, (1,)))
    out = run_selective(desk.M, sel, pc, 0)
    assert out.tau == 1 and out.stopped_cost == 0.0 and out.prefix == ((0,), ())
    never = SelectivePolicy.from_class(pc, StoppingRule(0, ()))
    out = run_selective(desk.M, never, pc, 0)
    assert out.tau == 3 and out.stopped_cost == 1.0
    left_first = SelectivePolicy.from_class(pc, StoppingRule(1, (0,)))
    sw = run_switched(desk.M, left_first, desk_policies["R"], pc, 0)
    assert sw.tau == 1 and sw.full_cost == 1.0 and sw.traj.actions == (1, 1)


def test_switched_law_limits():
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng, 3, 2, 3)
    pi, expert = random_stochastic(rng, 3, 2, 3), random_stochastic(rng, 3, 2, 3)
    immediate = enumerate_trajectory_distribution(mdp, pi, always_stop_rule(3, 3), handoff=expert)
    plain = enumerate_trajectory_distribution(mdp, expert)
    assert trajectory_hellinger_sq(immediate, plain) == pytest.approx(0.0, abs=1e-12)
    never = compile_policies(pi, [], None)
    late = enumerate_trajectory_distribution(mdp, pi, never, handoff=expert)
    assert trajectory_hellinger_sq(late, enumerate_trajectory_distribution(mdp, pi)) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([None, 0.2, 0.7, 1.5]))
def test_monotone_in_validators(seed, theta):
    rng = np.random.default_rng(seed)
    pc = random_class(rng, 3, 2, 4, 5, stochastic=theta is not None)
    states = rng.integers(0, 3, size=(20, 4))
    a = StoppingRule(0, (1, 2), theta).compile(pc).stop_times(states)
    b = StoppingRule(0, (3, 4), theta).compile(pc).stop_times(states)
    ab = StoppingRule(0, (1, 2, 3, 4), theta).compile(pc).stop_times(states)
    assert np.array_equal(ab, np.minimum(a, b))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_in_theta(seed):
    rng = np.random.default_rng(seed)
    pc = random_class(rng, 3, 2, 4, 4, stochastic=True)
    states = rng.integers(0, 3, size=(20, 4))
    prev = None
    for theta in (0.05, 0.1, 0.3, 0.8, 2.0):
        t = StoppingRule(0, (1, 2, 3), theta).compile(pc).stop_times(states)
        if prev is not None:
            assert np.all(t >= prev)
        prev = t


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_mode_consistency_for_one_hot_policies(seed, theta):
    rng = np.random.default_rng(seed)
    pc = random_class(rng, 3, 3, 4, 5)
    states = rng.integers(0, 3, size=(30, 4))
    fd = StoppingRule(0, (1, 2, 3, 4)).compile(pc).stop_times(states)
    hb = StoppingRule(0, (1, 2, 3, 4), theta).compile(pc.as_stochastic()).stop_times(states)
    assert np.array_equal(fd, hb)


def test_prefix_coupling_small_sample():
    rng = np.random.default_rng(11)
    for _ in range(20):
        assert prefix_coupling_gap(rng) <= 1e-12


def test_hellinger_tensorization_and_collapse_small_sample():
    rng = np.random.default_rng(12)
    for _ in range(10):
        mdp = random_mdp(rng, 3, 2, 3)
        pi, other = random_stochastic(rng, 3, 2, 3), random_stochastic(rng, 3, 2, 3)
        lhs = 1 - trajectory_hellinger_sq(enumerate_trajectory_distribution(mdp, pi),
                                          enumerate_trajectory_distribution(mdp, other))
        z = 1 - hellinger_sq_rows(pi.probs, other.probs)  # (H, S)
        mix = enumerate_trajectory_distribution(mdp, geometric_mixture_policy(pi, other))
        rhs = mix.expectation(lambda k: float(np.prod([z[h, s] for h, s in enumerate(k[0])])))
        assert lhs == pytest.approx(rhs, abs=1e-10)

        rule = compile_policies(pi, [random_stochastic(rng, 3, 2, 3)], 0.3)
        sw = enumerate_trajectory_distribution(mdp, pi, rule, handoff=other)
        full = enumerate_trajectory_distribution(mdp, other)
        stopped_a = enumerate_trajectory_distribution(mdp, pi, rule)
        stopped_b = enumerate_trajectory_distribution(mdp, other, rule)
        assert trajectory_hellinger_sq(sw, full) == pytest.approx(
            trajectory_hellinger_sq(stopped_a, stopped_b), abs=1e-10)


def test_rule_json_roundtrip_and_errors(desk_class):
    for rule in (StoppingRule(0, (2, 1, 1)), StoppingRule(1, (0,), 0.5),
                 StoppingRule(0, step_validators=((1,), (2,)))):
        back = StoppingRule.from_json(rule.to_json())
        assert back == rule
    assert StoppingRule(0, (2, 1, 1)).validators == (1, 2)
    with pytest.raises(ConfigurationError):
        StoppingRule.from_json({"base_id": 0, "mode": "sideways"})
    with pytest.raises(ValidationError):
        StoppingRule(0, (1,), 0.0)
    with pytest.raises(ConfigurationError):
        StoppingRule(0, (7,)).compile(desk_class)


def test_step_rules_only_consult_their_step(desk_class):
    merged = merge_step_rules([StoppingRule(0, step_validators=((2,), ())),
                               StoppingRule(0, step_validators=((), (1,)))])
    assert merged.step_validators == ((2,), (1,))
    # RL agrees with R at step 1; L is only consulted at step 2
    assert stop_time(merged, desk_class, [0, 1]) == 2
    only_first = StoppingRule(0, step_validators=((2,), ()))
    assert stop_time(only_first, desk_class, [0, 1]) == 3
