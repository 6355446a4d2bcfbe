import itertools
import math

import numpy as np
import pytest

from seqrejectron.errors import EmptyInputError, MissingActionsError, NoSupportError, RealizabilityError, ValidationError
from seqrejectron.mdp import Policy, PolicyClass, Trajectory, class_log_losses
from seqrejectron.rng import substream
from seqrejectron.scenarios import make_random_tabular, sample_datasets
from seqrejectron.validators import (
    NoRegretConfig,
    VersionSpace,
    committee_late_stop_exact,
    committee_size_for,
    default_rounds,
    ensemble_size,
    empirical_disagreement_rate,
    exact_version_space,
    hedge_committee_game,
    late_stop_fraction,
    logloss_version_space,
    mle_policy,
    per_step_selectors,
    regularized_validator_dist,
    singleton_stop_matrix,
    sparse_validator_dist,
)

from conftest import R

EXPERT_RUN = Trajectory((0, 1), (R, R))


@pytest.fixture
def desk_class(desk_policies):
    return PolicyClass((desk_policies["R"], desk_policies["L"], desk_policies["RL"]))


@pytest.fixture
def bernoulli_class():
    high = Policy.stochastic(np.tile([0.1, 0.9], (2, 2, 1)))
    fair = Policy.stochastic(np.full((2, 2, 2), 0.5))
    return PolicyClass((high, fair))


def test_exact_version_space_examples(desk_class, desk_policies):
    assert exact_version_space(desk_class, []).member_ids == (0, 1, 2)
    assert exact_version_space(desk_class, [EXPERT_RUN]).member_ids == (0,)
    only = PolicyClass((desk_policies["R"],))
    assert exact_version_space(only, [EXPERT_RUN]).member_ids == (0,)
    with pytest.raises(RealizabilityError):
        exact_version_space(PolicyClass((desk_policies["L"],)), [EXPERT_RUN])
    with pytest.raises(MissingActionsError):
        exact_version_space(desk_class, [EXPERT_RUN.unlabeled()])


def test_mle_examples(bernoulli_class):
    data = [EXPERT_RUN] * 10
    assert mle_policy(bernoulli_class, data) == 0
    losses = class_log_losses(bernoulli_class, data)
    assert losses[0] == pytest.approx(-2 * math.log(0.9), abs=1e-12)
    assert losses[1] == pytest.approx(2 * math.log(2), abs=1e-12)
    twins = PolicyClass((bernoulli_class[1], bernoulli_class[1]))
    assert mle_policy(twins, data) == 0
    zero = PolicyClass((Policy.stochastic(np.tile([1.0, 0.0], (2, 2, 1))),))
    with pytest.raises(NoSupportError):
        mle_policy(zero, data)


def test_logloss_version_space_examples(bernoulli_class):
    data = [EXPERT_RUN] * 10
    losses = class_log_losses(bernoulli_class, data)
    gap = losses[1] - losses[0]  # 2 log 2 + 2 log 0.9, about 1.175
    assert logloss_version_space(bernoulli_class, data, 0.0).member_ids == (0,)
    assert logloss_version_space(bernoulli_class, data, math.inf).member_ids == (0, 1)
    expected = (0, 1) if gap <= 1.0 else (0,)
    assert logloss_version_space(bernoulli_class, data, 1.0).member_ids == expected
    assert logloss_version_space(bernoulli_class, data, gap + 1e-9).member_ids == (0, 1)
    with pytest.raises(ValidationError):
        logloss_version_space(bernoulli_class, data, -1.0)


def test_late_stop_fraction_examples(desk_class):
    test = [Trajectory((0, 1))]
    assert late_stop_fraction(0, (0,), 1, test, None, desk_class) == 1.0
    assert late_stop_fraction(0, (1, 2), 1, test, None, desk_class) == 0.0
    assert late_stop_fraction(0, (2,), 0, test, None, desk_class) == 0.0
    with pytest.raises(EmptyInputError):
        late_stop_fraction(0, (1,), 2, [], None, desk_class)


def test_empirical_disagreement_examples(desk_class):
    assert empirical_disagreement_rate(0, [EXPERT_RUN], desk_class) == 0.0
    assert empirical_disagreement_rate(1, [EXPERT_RUN], desk_class) == 1.0
    assert empirical_disagreement_rate(2, [EXPERT_RUN], desk_class) == 1.0


def test_committee_late_stop_exact_matches_bruteforce():
    rng = np.random.default_rng(0)
    for K in (1, 2, 3):
        support = rng.integers(1, 5, size=(3, 4))
        probs = rng.dirichlet(np.ones(3))
        brute = 0.0
        for combo in itertools.product(range(3), repeat=K):
            pc = np.prod(probs[list(combo)])
            tc = support[list(combo)].min(axis=0)
            for x in range(3):
                brute += pc * probs[x] * np.mean(tc > support[x])
        assert committee_late_stop_exact(support, probs, K) == pytest.approx(brute, abs=1e-12)
        assert committee_late_stop_exact(support, probs, K) <= 1 / (K + 1) + 1e-12


def test_default_rounds_is_smallest_meeting_target():
    for n, d, xi in ((8, 0.1, 0.1), (32, 0.02, 0.2), (2, 0.5, 0.05)):
        T = default_rounds(n, d, xi)
        slack = lambda t: math.sqrt(2 * math.log(n) / t) + math.sqrt(math.log(1 / d) / (2 * t))
        assert slack(T) <= xi < slack(T - 1)
    assert default_rounds(1000, 0.01, 1e-4, max_rounds=500) == 500


def test_committee_size():
    assert committee_size_for(0.34) == 3
    assert committee_size_for(0.5) == 2
    assert committee_size_for(0.25) == 4
    with pytest.raises(ValidationError):
        committee_size_for(1.0)


def test_hedge_regret_within_bound():
    rng = np.random.default_rng(5)
    stop_mat = rng.integers(1, 5, size=(6, 20))
    run = hedge_committee_game(stop_mat, 3, 400, substream(1, "g"))
    assert run.realized_regret <= math.sqrt(2 * 400 * math.log(6))
    assert len(run.committees) == 400 and all(len(c) == 3 for c in run.committees)


def _realizable(seed, class_size=8, n=50):
    b = make_random_tabular(3, 2, 3, class_size, 0.0, False, seed)
    train, test = sample_datasets(b, 40, n, seed)
    return b, train, test


def test_sparse_validator_dist_certificate_and_sparsity():
    b, train, test = _realizable(3)
    space = exact_version_space(b.pclass, train)
    base = space.member_ids[0]
    dist = sparse_validator_dist(space, base, test, 0.34, 0.1, 0.1, None, NoRegretConfig(rng_seed=4), b.pclass)
    assert all(len(ids) == 3 for ids, _ in dist.atoms)
    assert abs(sum(w for _, w in dist.atoms) - 1) < 1e-9
    assert dist.certificates["coverage_sup"] <= 0.34 + 0.1
    assert dist.diagnostics["realized_regret"] <= dist.diagnostics["regret_bound"]
    js = dist.to_json()
    assert set(js) >= {"atoms", "rho", "xi", "certificates"}


def test_sparse_validator_dist_degenerate_cases():
    b, train, test = _realizable(3)
    single = VersionSpace((0,), "exact")
    dist = sparse_validator_dist(single, 0, test, 0.34, 0.1, 0.1, None, NoRegretConfig(rounds=20), b.pclass)
    assert dist.atoms == (((0, 0, 0), 1.0),)
    assert dist.certificates["coverage_sup"] == 0.0
    with pytest.raises(ValidationError):
        sparse_validator_dist(single, 1, test, 0.34, 0.1, 0.1, None, NoRegretConfig(rounds=20), b.pclass)
    # identical stop times for every member: the certificate is zero
    stop_mat = np.full((4, 10), 3)
    space = VersionSpace((0, 1, 2, 3), "exact")
    dist = sparse_validator_dist(space, 0, test, 0.34, 0.1, 0.1, None, NoRegretConfig(rounds=30), b.pclass,
                                 stop_mat=stop_mat)
    assert dist.certificates["coverage_sup"] == 0.0


def test_regularized_game_certificates():
    b = make_random_tabular(3, 2, 3, 8, 0.05, False, 21)
    train, test = sample_datasets(b, 40, 40, 21)
    dis = np.array([empirical_disagreement_rate(i, train, b.pclass) for i in range(len(b.pclass))])
    base = int(np.argmin(dis))
    dist = regularized_validator_dist(b.pclass, base, train, test, 3.0, 3, NoRegretConfig(rng_seed=2),
                                      rng=substream(2, "game"))
    assert all(len(ids) == 3 for ids, _ in dist.atoms)
    T = dist.diagnostics["rounds"]
    slack = max(dist.diagnostics["realized_regret"], 0.0) / T + 0.02
    assert dist.certificates["reg_completeness"] <= dist.diagnostics["completeness_bound"] + slack
    assert dist.certificates["reg_soundness_sup"] <= dist.diagnostics["soundness_bound"] + slack
    with pytest.raises(ValidationError):
        regularized_validator_dist(b.pclass, base, train, test, 0.0, 3, NoRegretConfig())
    with pytest.raises(ValidationError):
        regularized_validator_dist(b.pclass, base, train, test, 1.0, 0, NoRegretConfig())


def test_per_step_single_step_matches_trajectory_level():
    b = make_random_tabular(4, 2, 1, 8, 0.0, False, 5)
    train, test = sample_datasets(b, 30, 30, 5)
    cfg = NoRegretConfig(rng_seed=9)
    rules = per_step_selectors(b.pclass, train, test, 0.34, 0.1, 0.1, cfg)
    space = exact_version_space(b.pclass, train)
    dist = sparse_validator_dist(space, space.member_ids[0], test, 0.34, 0.1, 0.1 / 5, None, cfg, b.pclass,
                                 rng=substream(9, "game", 0))
    draws = dist.sample_many(substream(9, "ensemble", 0), ensemble_size(0.1, 5))
    assert rules[0].validators == tuple(sorted({v for c in draws for v in c}))


def test_singleton_stop_matrix_shape(desk_class):
    sm = singleton_stop_matrix(desk_class, 0, [0, 1, 2], [Trajectory((0, 1)), Trajectory((0, 0))], None)
    assert sm.tolist() == [[3, 3], [1, 1], [2, 2]]
