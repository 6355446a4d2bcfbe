"""Oracle-efficient validator game: cutoff matrix, perturbed leader, and the
weighted multiple-instance-learning (MIL) form of its best response.

Everything here works on first-disagreement stop times of deterministic
classes unless noted. The "oracle" is an exhaustive scan; the point is that
the direct and MIL objectives agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, ValidationError
from .mdp import DETERMINISTIC, PolicyClass, Trajectory, state_matrix
from .validators import (
    ValidatorDistribution,
    VersionSpace,
    _empirical_atoms,
    committee_size_for,
    coverage_sup,
    singleton_stop_matrix,
)


@dataclass(frozen=True)
class CutoffColumn:
    trajectory_index: int  # 0-based j
    cutoff: int  # c in 1..H


def _states(pclass: PolicyClass, test) -> np.ndarray:
    if isinstance(test, np.ndarray):
        return test
    if not test:
        raise EmptyInputError("empty test set")
    return state_matrix(list(test), pclass.horizon)


def cutoff_matrix(stop_mat: np.ndarray, horizon: int) -> np.ndarray:
    """Gamma[p, j, c-1] = 1[tau_p(T_j) <= c] for c = 1..H, as int (P, n, H)."""
    cs = np.arange(1, horizon + 1)
    return (stop_mat[:, :, None] <= cs[None, None, :]).astype(np.int64)


def cutoff_matrix_entry(pclass: PolicyClass, base: int, test, pi: int, col: CutoffColumn) -> int:
    states = _states(pclass, test)
    H = pclass.horizon
    if not (0 <= col.trajectory_index < states.shape[0] and 1 <= col.cutoff <= H):
        raise ValidationError("cutoff column out of range")
    tau = singleton_stop_matrix(pclass, base, [pi], states[[col.trajectory_index]], None)[0, 0]
    return int(tau <= col.cutoff)


def quotient(stop_mat: np.ndarray, ids: Sequence[int]) -> tuple[list[int], np.ndarray]:
    """Deduplicate stop-time vectors, keeping the smallest id per class."""
    seen: dict[bytes, int] = {}
    reps: list[int] = []
    rows: list[int] = []
    for r, pid in sorted(enumerate(ids), key=lambda t: t[1]):
        key = stop_mat[r].tobytes()
        if key not in seen:
            seen[key] = pid
            reps.append(pid)
            rows.append(r)
    order = np.argsort(reps, kind="stable")
    return [reps[i] for i in order], stop_mat[[rows[i] for i in order]]


def payoff(stop_vec: np.ndarray, cutoff_vec: np.ndarray) -> Fraction:
    """f(pi, h) = (1/n) sum_j 1[x_{pi,j} < h_j], exactly."""
    return Fraction(int(np.sum(stop_vec < cutoff_vec)), len(stop_vec))


def direct_objectives(
    stop_mat: np.ndarray,
    history: Sequence[np.ndarray],
    alpha: np.ndarray,
    horizon: int,
    exact: bool = True,
) -> list:
    """sum_s f(pi, h^s) + sum_{j,c} alpha_{j,c} Gamma_{pi,(j,c)} for every row of stop_mat."""
    gamma = cutoff_matrix(stop_mat, horizon)
    out = []
    for p in range(stop_mat.shape[0]):
        if exact:
            val = sum((payoff(stop_mat[p], h) for h in history), Fraction(0))
            val += sum((Fraction(alpha[j, c]) for j, c in zip(*np.nonzero(gamma[p]))), Fraction(0))
        else:
            n = stop_mat.shape[1]
            val = sum(float(np.sum(stop_mat[p] < h)) / n for h in history) + float((alpha * gamma[p]).sum())
        out.append(val)
    return out


def mil_weights(history: Sequence[np.ndarray], alpha: np.ndarray, n: int, horizon: int, exact: bool = True) -> np.ndarray:
    """w_{j,c} = #{s : h^s_j - 1 = c} + n * alpha_{j,c}, columns c = 1..H."""
    counts = np.zeros((n, horizon), dtype=np.int64)
    for h in history:
        c = np.asarray(h) - 1
        ok = c >= 1
        np.add.at(counts, (np.flatnonzero(ok), c[ok] - 1), 1)
    if exact:
        w = np.empty((n, horizon), dtype=object)
        for j in range(n):
            for c in range(horizon):
                w[j, c] = Fraction(int(counts[j, c])) + n * Fraction(alpha[j, c])
        return w
    return counts + n * np.asarray(alpha, dtype=float)


def prefix_bags(states: np.ndarray) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """B_{j,c}: the first c pre-action (step, state) pairs of trajectory j (steps 1-based)."""
    n, H = states.shape
    return {(j, c): [(h, int(states[j, h - 1])) for h in range(1, c + 1)] for j in range(n) for c in range(1, H + 1)}


def bag_positive_matrix(pclass: PolicyClass, base: int, ids: Sequence[int], states: np.ndarray) -> np.ndarray:
    """(P, n, H) bool: some instance of B_{j,c} has h_pi(h, s) = 1[pi_h(s) != base_h(s)]."""
    if pclass.kind != DETERMINISTIC:
        raise ValidationError("the MIL reduction is defined for deterministic classes")
    H = pclass.horizon
    hh = np.arange(H)[None, :]
    acts = pclass.actions[list(ids)][:, hh, states]  # (P, n, H)
    base_acts = pclass.actions[base][hh, states]
    dis = acts != base_acts[None]
    return np.logical_or.accumulate(dis, axis=2)


def augmented_bag_positive_matrix(pclass: PolicyClass, base: int, ids: Sequence[int], states: np.ndarray) -> np.ndarray:
    """Multi-class form: bags hold (h, s, a) for every a != base_h(s); positive iff pi_h(s) = a for one of them."""
    H = pclass.horizon
    A = pclass.shape[2]
    n = states.shape[0]
    out = np.zeros((len(ids), n, H), dtype=bool)
    for r, pid in enumerate(ids):
        for j in range(n):
            hit = False
            for h0 in range(H):
                s = states[j, h0]
                b = pclass.actions[base, h0, s]
                hit = hit or any(pclass.actions[pid, h0, s] == a for a in range(A) if a != b)
                out[r, j, h0] = hit
    return out


def mil_objectives(bags: np.ndarray, weights: np.ndarray) -> list:
    """sum_{j,c} w_{j,c} * 1[bag (j,c) positive] for each policy."""
    out = []
    for p in range(bags.shape[0]):
        pos = np.nonzero(bags[p])
        vals = weights[pos]
        out.append(sum(vals, Fraction(0)) if weights.dtype == object else float(vals.sum()))
    return out


def _argmax_smallest(ids: Sequence[int], values: Sequence) -> int:
    best = None
    for pid, v in sorted(zip(ids, values), key=lambda t: t[0]):
        if best is None or v > best[1]:
            best = (pid, v)
    return best[0]


def perturbed_best_response_direct(pclass, space: VersionSpace, base: int, test, history, alpha) -> int:
    if not len(space):
        raise EmptyInputError("empty version space")
    states = _states(pclass, test)
    ids = list(space.member_ids)
    sm = singleton_stop_matrix(pclass, base, ids, states, None)
    return _argmax_smallest(ids, direct_objectives(sm, history, np.asarray(alpha, dtype=object), pclass.horizon))


def perturbed_best_response_mil(pclass, space: VersionSpace, base: int, test, history, alpha) -> int:
    if not len(space):
        raise EmptyInputError("empty version space")
    states = _states(pclass, test)
    ids = list(space.member_ids)
    bags = bag_positive_matrix(pclass, base, ids, states)
    w = mil_weights(history, np.asarray(alpha, dtype=object), states.shape[0], pclass.horizon)
    return _argmax_smallest(ids, mil_objectives(bags, w))


def separating_column(x: np.ndarray, y: np.ndarray) -> CutoffColumn:
    """A column whose cutoff entries for the two stop vectors differ by exactly one.

    At a coordinate with x_j < y_j, the cutoff c = y_j - 1 has 1[x_j <= c] = 1
    and 1[y_j <= c] = 0 (and symmetrically).
    """
    diff = np.flatnonzero(np.asarray(x) != np.asarray(y))
    if not len(diff):
        raise ValidationError("stop vectors are identical")
    j = int(diff[0])
    return CutoffColumn(j, int(max(x[j], y[j]) - 1))


def synthetic_cutoff(n: int, col: CutoffColumn) -> np.ndarray:
    """y^{(j,c)}: entry j equals c + 1 and every other entry 1, so f(pi, y) = Gamma_{pi,(j,c)} / n."""
    y = np.ones(n, dtype=np.int64)
    y[col.trajectory_index] = col.cutoff + 1
    return y


def default_noise_scale(rounds: int, n: int, horizon: int) -> float:
    return 10 * math.sqrt(rounds) / (n * horizon)


def ftpl_engine(
    space: VersionSpace,
    base: int,
    test: Sequence[Trajectory],
    rho: float,
    rounds: int,
    rng: np.random.Generator,
    pclass: PolicyClass,
    *,
    theta: float | None = None,
    scale: float | None = None,
    committee_size: int | None = None,
) -> ValidatorDistribution:
    """Follow-the-perturbed-leader maximizer over the stop-time quotient of ``space``.

    Each round draws fresh uniform column noise on [0, scale] for the played
    action and for each of the K committee members (i.i.d. draws from the
    leader's play distribution), so the committee template matches the Hedge
    engine. Best responses use the MIL form (the cutoff matrix itself in
    Hellinger mode, where no bag form is defined).
    """
    if base not in space:
        raise ValidationError("base policy must belong to the version space")
    states = _states(pclass, test)
    n, H = states.shape
    ids_all = list(space.member_ids)
    sm_all = singleton_stop_matrix(pclass, base, ids_all, states, theta)
    ids, sm = quotient(sm_all, ids_all)
    K = committee_size or committee_size_for(rho)
    scale = default_noise_scale(rounds, n, H) if scale is None else scale
    if theta is None and pclass.kind == DETERMINISTIC:
        bags = bag_positive_matrix(pclass, base, ids, states).reshape(len(ids), -1).astype(float)
    else:
        bags = cutoff_matrix(sm, H).reshape(len(ids), -1).astype(float)
    counts = np.zeros(n * H)
    leader = np.zeros(len(ids))
    played_total = 0.0
    committees: list[tuple[int, ...]] = []
    plays = np.zeros(len(ids), dtype=np.int64)

    def best_response() -> int:
        alpha = rng.random(n * H) * scale
        score = bags @ (counts + n * alpha)
        return int(np.argmax(score))  # rows sorted by id, so ties go to the smallest id

    for _ in range(rounds):
        played = best_response()
        members = [best_response() for _ in range(K)]
        committees.append(tuple(sorted(members)))
        plays[played] += 1
        tc = sm[members].min(axis=0)
        u = (tc[None, :] > sm).mean(axis=1)
        leader += u
        played_total += float(u[played])
        c = tc - 1
        ok = c >= 1
        np.add.at(counts, np.flatnonzero(ok) * H + (c[ok] - 1), 1.0)
    atoms = _empirical_atoms(committees, ids)
    cert = coverage_sup(atoms, sm_all, ids_all)
    diag = {
        "rounds": rounds,
        "noise_scale": scale,
        "realized_regret": float(leader.max() - played_total),
        "quotient_size": len(ids),
        "distinct_plays": int(np.count_nonzero(plays)),
        "engine": "ftpl",
    }
    return ValidatorDistribution(atoms, rho, None, K, {"coverage_sup": cert}, diag)
