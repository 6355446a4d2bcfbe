"""Version spaces and no-regret construction of sparse validator distributions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    EmptyInputError,
    MissingActionsError,
    NoSupportError,
    RealizabilityError,
    ValidationError,
)
from .mdp import DETERMINISTIC, PolicyClass, Trajectory, action_matrix, class_log_losses, state_matrix
from .rng import as_generator, draw_indices, substream
from .stopping import StoppingRule, divergence_table, stop_times_from_divergence

log = logging.getLogger(__name__)

EXACT = "exact"
LOGLOSS = "logloss"
DEFAULT_MAX_ROUNDS = 200_000


@dataclass(frozen=True)
class VersionSpace:
    member_ids: tuple[int, ...]
    kind: str = EXACT
    gamma: float | None = None
    base_loss: float | None = None

    def __contains__(self, i: int) -> bool:
        return i in self.member_ids

    def __len__(self) -> int:
        return len(self.member_ids)


@dataclass(frozen=True)
class NoRegretConfig:
    """Game settings. ``rounds=None`` picks the smallest T meeting the slack target."""

    rounds: int | None = None
    learning_rate: float | None = None
    committee_size: int | None = None
    rng_seed: int = 0
    max_rounds: int = DEFAULT_MAX_ROUNDS

    def __post_init__(self) -> None:
        if self.rounds is not None and self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if self.committee_size is not None and self.committee_size < 1:
            raise ValidationError("committee_size must be >= 1")


@dataclass(frozen=True)
class ValidatorDistribution:
    """Weighted committees. Each atom is a sorted tuple of policy ids (repeats kept)."""

    atoms: tuple[tuple[tuple[int, ...], float], ...]
    target_rho: float | None
    slack: float | None
    committee_size: int
    certificates: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = [wt for _, wt in self.atoms]
        if any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-9:
            raise ValidationError("atom weights must be nonnegative and sum to 1")

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    def sample(self, rng) -> tuple[int, ...]:
        rng = as_generator(rng)
        return self.atoms[int(draw_indices(rng, self.weights, 1)[0])][0]

    def sample_many(self, rng, k: int) -> list[tuple[int, ...]]:
        rng = as_generator(rng)
        idx = draw_indices(rng, self.weights, k)
        return [self.atoms[int(i)][0] for i in idx]

    def to_json(self) -> dict:
        return {
            "atoms": [{"ids": list(ids), "weight": w} for ids, w in self.atoms],
            "rho": self.target_rho,
            "xi": self.slack,
            "committee_size": self.committee_size,
            "certificates": {
                "coverage_sup": self.certificates.get("coverage_sup"),
                "reg_completeness": self.certificates.get("reg_completeness"),
                "reg_soundness_sup": self.certificates.get("reg_soundness_sup"),
            },
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------- version spaces


def _require_labeled(data: Sequence[Trajectory]) -> None:
    if any(t.actions is None for t in data):
        raise MissingActionsError("training data must be labeled")


def consistency_mask(pclass: PolicyClass, train: Sequence[Trajectory], steps: Sequence[int] | None = None) -> np.ndarray:
    """(|Pi|,) bool: agrees with every recorded action (optionally on a subset of steps)."""
    if pclass.kind != DETERMINISTIC:
        raise ValidationError("exact consistency needs a deterministic class")
    _require_labeled(train)
    if not train:
        return np.ones(len(pclass), dtype=bool)
    S = state_matrix(train, pclass.horizon)
    A = action_matrix(train)
    H = pclass.horizon
    cols = list(range(H)) if steps is None else list(steps)
    hh = np.broadcast_to(np.array(cols), (S.shape[0], len(cols)))
    pred = pclass.actions[:, hh, S[:, cols]]  # (P, m, |cols|)
    return np.all(pred == A[None, :, cols], axis=(1, 2))


def exact_version_space(pclass: PolicyClass, train: Sequence[Trajectory]) -> VersionSpace:
    ids = tuple(int(i) for i in np.flatnonzero(consistency_mask(pclass, train)))
    if not ids:
        raise RealizabilityError("no policy is consistent with the training data; use fit_misspecified")
    return VersionSpace(ids, EXACT)


def mle_policy(pclass: PolicyClass, train: Sequence[Trajectory]) -> int:
    _require_labeled(train)
    losses = class_log_losses(pclass, train)
    if not np.isfinite(losses).any():
        raise NoSupportError("every policy assigns zero likelihood to the training data")
    return int(np.argmin(losses))


def logloss_version_space(pclass: PolicyClass, train: Sequence[Trajectory], gamma: float) -> VersionSpace:
    """Policies within gamma of the MLE loss. gamma=inf returns the whole class."""
    if not gamma >= 0:
        raise ValidationError("gamma must be >= 0")
    _require_labeled(train)
    losses = class_log_losses(pclass, train)
    if not np.isfinite(losses).any():
        raise NoSupportError("every policy assigns zero likelihood to the training data")
    best = float(losses.min())
    if math.isinf(gamma):
        ids = tuple(pclass.ids)
    else:
        ids = tuple(int(i) for i in np.flatnonzero(np.isfinite(losses) & (losses <= best + gamma)))
    return VersionSpace(ids, LOGLOSS, float(gamma), best)


def disagreement_rates(pclass: PolicyClass, train: Sequence[Trajectory]) -> np.ndarray:
    """Per-policy fraction of training trajectories with some recorded-action mismatch."""
    if pclass.kind != DETERMINISTIC:
        raise ValidationError("disagreement rates need a deterministic class")
    if not train:
        raise EmptyInputError("empty training set")
    _require_labeled(train)
    S = state_matrix(train, pclass.horizon)
    A = action_matrix(train)
    hh = np.broadcast_to(np.arange(pclass.horizon), S.shape)
    pred = pclass.actions[:, hh, S]
    return np.any(pred != A[None], axis=2).mean(axis=1)


def empirical_disagreement_rate(policy: int, train: Sequence[Trajectory], pclass: PolicyClass) -> float:
    return float(disagreement_rates(pclass, train)[policy])


# ---------------------------------------------------------------- stop times and payoffs


def singleton_stop_matrix(
    pclass: PolicyClass, base: int, ids: Sequence[int], test: Sequence[Trajectory] | np.ndarray, theta: float | None
) -> np.ndarray:
    """(len(ids), n) matrix of tau_{base,{pi}}(T_j)."""
    states = test if isinstance(test, np.ndarray) else state_matrix(list(test), pclass.horizon)
    probs = pclass.probs[list(ids)]
    div = divergence_table(probs, pclass.probs[base][None], theta)
    return stop_times_from_divergence(div, states, theta)


def late_stop_fraction(
    base: int,
    committee: Sequence[int],
    comparator: int,
    test: Sequence[Trajectory],
    theta: float | None,
    pclass: PolicyClass,
) -> float:
    """(1/n) sum_j 1[tau_{base,committee}(T_j) > tau_{base,{comparator}}(T_j)]."""
    if not test:
        raise EmptyInputError("empty test set")
    states = state_matrix(list(test), pclass.horizon)
    H = pclass.horizon
    if committee:
        tc = singleton_stop_matrix(pclass, base, list(committee), states, theta).min(axis=0)
    else:
        tc = np.full(states.shape[0], H + 1)
    tp = singleton_stop_matrix(pclass, base, [comparator], states, theta)[0]
    return float(np.mean(tc > tp))


def committee_late_stop_exact(support: np.ndarray, probs: np.ndarray, K: int) -> float:
    """Expected late-stop fraction of a K-committee drawn i.i.d. from a law over stop-time vectors.

    support: (m, n) stop-time vectors; probs: (m,). The comparator is an
    independent draw from the same law. Per coordinate the committee minimum
    exceeds x with probability Pr(V > x)^K.
    """
    support = np.asarray(support)
    probs = np.asarray(probs, dtype=float)
    total = 0.0
    for j in range(support.shape[1]):
        col = support[:, j]
        greater = np.array([probs[col > x].sum() for x in col])
        total += float(probs @ greater**K)
    return total / support.shape[1]


# ---------------------------------------------------------------- Hedge game


def default_rounds(space_size: int, delta: float, xi: float, max_rounds: int = DEFAULT_MAX_ROUNDS) -> int:
    """Smallest T with sqrt(2 log N / T) + sqrt(log(1/delta) / (2T)) <= xi, capped."""
    if not xi > 0 or not 0 < delta < 1:
        raise ValidationError("need xi > 0 and delta in (0, 1)")
    c = math.sqrt(2 * math.log(max(space_size, 1))) + math.sqrt(math.log(1 / delta) / 2)
    T = max(1, math.ceil((c / xi) ** 2))
    # the closed form can be off by one through rounding; step to the exact smallest T
    while T > 1 and c / math.sqrt(T - 1) <= xi:
        T -= 1
    while c / math.sqrt(T) > xi:
        T += 1
    if T > max_rounds:
        log.warning("round count %d capped at %d; the slack target %.3g will not be met", T, max_rounds, xi)
        T = max_rounds
    return T


def committee_size_for(rho: float) -> int:
    if not 0 < rho < 1:
        raise ValidationError("rho must lie in (0, 1)")
    return max(1, math.ceil(1 / rho - 1e-12))


@dataclass
class GameRun:
    committees: list[tuple[int, ...]]  # per round, as indices into the strategy list
    cumulative_payoff: np.ndarray  # (N,) sum_t u^t
    expected_payoff: float  # sum_t E_{p^t} u^t
    rounds: int
    learning_rate: float

    @property
    def realized_regret(self) -> float:
        return float(self.cumulative_payoff.max() - self.expected_payoff)


def hedge_committee_game(
    stop_mat: np.ndarray,
    K: int,
    rounds: int,
    rng: np.random.Generator,
    learning_rate: float | None = None,
    penalty: np.ndarray | None = None,
) -> GameRun:
    """Hedge maximizer against committees of K i.i.d. draws from its own distribution.

    Reward of strategy i at round t: mean_j 1[min_{k} stop_mat[c_k, j] > stop_mat[i, j]]
    minus ``penalty[i]``. With a penalty of range L the rewards are mapped to
    [0, 1] via (r + L) / (1 + L) for the update; payoffs are recorded unscaled.
    """
    N = stop_mat.shape[0]
    pen = np.zeros(N) if penalty is None else np.asarray(penalty, dtype=float)
    span = float(pen.max()) if penalty is not None and len(pen) else 0.0
    span = max(span, 0.0)
    lr = learning_rate if learning_rate is not None else math.sqrt(8 * math.log(N) / rounds) if N > 1 else 0.0
    logw = np.zeros(N)
    cum = np.zeros(N)
    expected = 0.0
    committees: list[tuple[int, ...]] = []
    for _ in range(rounds):
        z = logw - logw.max()
        p = np.exp(z)
        p /= p.sum()
        idx = draw_indices(rng, p, K)
        committees.append(tuple(sorted(int(i) for i in idx)))
        tc = stop_mat[idx].min(axis=0)
        u = (tc[None, :] > stop_mat).mean(axis=1) - pen
        cum += u
        expected += float(p @ u)
        logw += lr * (u + span) / (1.0 + span)
    return GameRun(committees, cum, expected, rounds, lr)


def _empirical_atoms(committees: Sequence[tuple[int, ...]], ids: Sequence[int]) -> tuple[tuple[tuple[int, ...], float], ...]:
    counts: dict[tuple[int, ...], int] = {}
    for c in committees:
        key = tuple(sorted(ids[i] for i in c))
        counts[key] = counts.get(key, 0) + 1
    T = len(committees)
    return tuple((k, counts[k] / T) for k in sorted(counts))


def coverage_sup(atoms, stop_mat: np.ndarray, ids: Sequence[int]) -> float:
    """Exact sup over comparators of the expected late-stop fraction."""
    pos = {pid: i for i, pid in enumerate(ids)}
    expected = np.zeros(stop_mat.shape[0])
    for committee, w in atoms:
        tc = stop_mat[[pos[c] for c in committee]].min(axis=0)
        expected += w * (tc[None, :] > stop_mat).mean(axis=1)
    return float(expected.max())


def sparse_validator_dist(
    space: VersionSpace,
    base: int,
    test: Sequence[Trajectory],
    rho: float,
    xi: float,
    delta: float,
    theta: float | None,
    cfg: NoRegretConfig,
    pclass: PolicyClass,
    *,
    rng: np.random.Generator | None = None,
    stop_mat: np.ndarray | None = None,
) -> ValidatorDistribution:
    """Empirical distribution of Hedge-sampled committees of size ceil(1/rho).

    ``theta=None`` uses first-disagreement stop times, otherwise the
    cumulative-Hellinger rule with that budget. ``stop_mat`` lets callers
    supply precomputed singleton stop times (rows aligned with space members).
    """
    if base not in space:
        raise ValidationError("base policy must belong to the version space")
    if not test and stop_mat is None:
        raise EmptyInputError("empty test set")
    K = cfg.committee_size or committee_size_for(rho)
    ids = list(space.member_ids)
    if stop_mat is None:
        stop_mat = singleton_stop_matrix(pclass, base, ids, list(test), theta)
    T = cfg.rounds or default_rounds(len(ids), delta, xi, cfg.max_rounds)
    rng = rng if rng is not None else as_generator(cfg.rng_seed)
    run = hedge_committee_game(stop_mat, K, T, rng, cfg.learning_rate)
    atoms = _empirical_atoms(run.committees, ids)
    cert = coverage_sup(atoms, stop_mat, ids)
    N = len(ids)
    diag = {
        "rounds": T,
        "learning_rate": run.learning_rate,
        "realized_regret": run.realized_regret,
        "regret_bound": math.sqrt(2 * T * math.log(N)) if N > 1 else 0.0,
        "engine": "hedge",
    }
    return ValidatorDistribution(atoms, rho, xi, K, {"coverage_sup": cert}, diag)


def regularized_validator_dist(
    pclass: PolicyClass,
    base: int,
    train: Sequence[Trajectory],
    test: Sequence[Trajectory],
    lam: float,
    K: int,
    cfg: NoRegretConfig,
    *,
    rng: np.random.Generator | None = None,
    xi: float = 0.1,
    delta: float = 0.1,
) -> ValidatorDistribution:
    """Hedge over all of the class with reward late-stop minus lam * disagreement."""
    if not lam > 0:
        raise ValidationError("lambda must be > 0")
    if K < 1:
        raise ValidationError("K must be >= 1")
    if not test:
        raise EmptyInputError("empty test set")
    dis = disagreement_rates(pclass, train)
    if dis[base] != dis.min():
        raise ValidationError("base must minimize the empirical disagreement rate")
    ids = list(pclass.ids)
    stop_mat = singleton_stop_matrix(pclass, base, ids, list(test), None)
    T = cfg.rounds or default_rounds(len(ids), delta, xi, cfg.max_rounds)
    rng = rng if rng is not None else as_generator(cfg.rng_seed)
    run = hedge_committee_game(stop_mat, K, T, rng, cfg.learning_rate, penalty=lam * dis)
    atoms = _empirical_atoms(run.committees, ids)

    late = np.zeros(len(ids))
    completeness = 0.0
    for committee, w in atoms:
        tc = stop_mat[list(committee)].min(axis=0)
        late += w * (tc[None, :] > stop_mat).mean(axis=1)
        completeness += w * float(dis[list(committee)].sum())
    soundness = float((late - lam * (dis - dis[base])).max())
    N = len(ids)
    diag = {
        "rounds": T,
        "learning_rate": run.learning_rate,
        "realized_regret": run.realized_regret,
        "regret_bound": (1 + lam) * math.sqrt(2 * T * math.log(N)) if N > 1 else 0.0,
        "base_disagreement": float(dis[base]),
        "completeness_bound": K * float(dis[base]) + 1 / lam,
        "soundness_bound": 1 / K,
        "lambda": lam,
        "engine": "hedge",
    }
    certs = {"coverage_sup": float(late.max()), "reg_completeness": completeness, "reg_soundness_sup": soundness}
    return ValidatorDistribution(atoms, None, None, K, certs, diag)


# ---------------------------------------------------------------- per-step baseline


def step_stop_matrix(pclass: PolicyClass, base: int, ids: Sequence[int], states: np.ndarray, h0: int) -> np.ndarray:
    """Single-step problem at step h0: 1 where a member disagrees with the base, else 2."""
    acts = pclass.actions[list(ids)][:, h0, states[:, h0]]
    base_acts = pclass.actions[base, h0, states[:, h0]]
    return np.where(acts != base_acts[None, :], 1, 2).astype(np.int64)


def ensemble_size(delta: float, c: float) -> int:
    """k = ceil(log2(c / delta)) independent committee draws."""
    return max(1, math.ceil(math.log2(c / delta) - 1e-12))


def per_step_selectors(
    pclass: PolicyClass,
    train: Sequence[Trajectory],
    test: Sequence[Trajectory],
    rho: float,
    xi: float,
    delta: float,
    cfg: NoRegretConfig,
    *,
    base: int | None = None,
) -> list[StoppingRule]:
    """One single-step rule per step, each from its own step-h game and ensemble.

    Confidence is split across steps (delta / H per step) so with H = 1 the
    construction coincides with the trajectory-level one.
    """
    if not test:
        raise EmptyInputError("empty test set")
    H = pclass.horizon
    if base is None:
        base = exact_version_space(pclass, train).member_ids[0]
    states = state_matrix(list(test), H)
    K = cfg.committee_size or committee_size_for(rho)
    k = ensemble_size(delta, 5 * H)
    rules: list[StoppingRule] = []
    for h0 in range(H):
        mask = consistency_mask(pclass, train, steps=[h0])
        ids = [int(i) for i in np.flatnonzero(mask)]
        if not ids:
            raise RealizabilityError(f"no policy agrees with the recorded actions at step {h0 + 1}")
        if base not in ids:
            raise RealizabilityError("base policy is inconsistent at some step")
        space = VersionSpace(tuple(ids), EXACT)
        sm = step_stop_matrix(pclass, base, ids, states, h0)
        step_cfg = NoRegretConfig(cfg.rounds, cfg.learning_rate, K, cfg.rng_seed, cfg.max_rounds)
        dist = sparse_validator_dist(
            space, base, test, rho, xi, delta / (5 * H), None, step_cfg, pclass,
            rng=substream(cfg.rng_seed, "game", h0), stop_mat=sm,
        )
        draws = dist.sample_many(substream(cfg.rng_seed, "ensemble", h0), k)
        members = tuple(sorted({v for c in draws for v in c}))
        steps = tuple(members if j == h0 else () for j in range(H))
        rules.append(StoppingRule(base, step_validators=steps))
    return rules
