"""Finite-horizon tabular MDPs, policies, trajectories and exact enumeration.

Conventions: array step indices are 0-based (row ``h0`` holds step ``h0 + 1``);
stopping times are reported 1-based in ``1..H+1`` with ``H+1`` meaning the
rule never fired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Iterator, Protocol, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyInputError,
    EnumerationTooLarge,
    MissingActionsError,
    ValidationError,
)
from .rng import as_generator, draw_index

ROW_TOL = 1e-9
DEFAULT_BUDGET = 10**7

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_rows(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ConfigurationError(f"{what}: entries must be finite and nonnegative")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > ROW_TOL):
        raise ConfigurationError(f"{what}: rows must sum to 1 (worst deviation {np.max(np.abs(sums - 1.0)):.3g})")


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite-horizon environment (initial law, per-step kernels, per-step costs)."""

    initial_dist: np.ndarray  # (S,)
    transitions: np.ndarray  # (H-1, S, A, S)
    costs: np.ndarray  # (H, S, A)
    cost_cap: float

    def __post_init__(self) -> None:
        p0 = np.array(self.initial_dist, dtype=float)
        costs = np.array(self.costs, dtype=float)
        if p0.ndim != 1 or costs.ndim != 3:
            raise ConfigurationError("initial_dist must be 1-D and costs (H, S, A)")
        H, S, A = costs.shape
        if H < 1 or S < 1 or A < 1 or p0.shape[0] != S:
            raise ConfigurationError("inconsistent MDP dimensions")
        trans = np.array(self.transitions, dtype=float)
        if H == 1 and trans.size == 0:
            trans = np.zeros((0, S, A, S))
        if trans.shape != (H - 1, S, A, S):
            raise ConfigurationError(f"transitions must have shape {(H - 1, S, A, S)}, got {trans.shape}")
        _check_rows(p0, "initial_dist")
        if trans.size:
            _check_rows(trans, "transitions")
        if not np.all(np.isfinite(costs)) or np.any(costs < 0) or np.any(costs > 1):
            raise ConfigurationError("costs must lie in [0, 1]")
        object.__setattr__(self, "initial_dist", _freeze(p0))
        object.__setattr__(self, "transitions", _freeze(trans))
        object.__setattr__(self, "costs", _freeze(costs))
        object.__setattr__(self, "cost_cap", float(self.cost_cap))
        worst = self.max_trajectory_cost()
        if self.cost_cap < worst - 1e-9:
            raise ConfigurationError(f"cost_cap {self.cost_cap} is below the worst reachable trajectory cost {worst}")

    @property
    def horizon(self) -> int:
        return self.costs.shape[0]

    @property
    def num_states(self) -> int:
        return self.costs.shape[1]

    @property
    def num_actions(self) -> int:
        return self.costs.shape[2]

    def max_trajectory_cost(self) -> float:
        """Largest total cost over trajectories with positive probability under some policy."""
        H, S, _ = self.costs.shape
        reach = np.zeros((H, S), dtype=bool)
        reach[0] = self.initial_dist > 0
        for h0 in range(H - 1):
            nxt = (self.transitions[h0] > 0) & reach[h0][:, None, None]
            reach[h0 + 1] = nxt.any(axis=(0, 1))
        w = np.zeros(S)
        for h0 in range(H - 1, -1, -1):
            if h0 == H - 1:
                cont = np.zeros((S, self.num_actions))
            else:
                succ = self.transitions[h0] > 0
                cont = np.where(succ, w[None, None, :], -np.inf).max(axis=2)
            w = np.where(reach[h0], (self.costs[h0] + cont).max(axis=1), -np.inf)
        best = w[self.initial_dist > 0].max()
        return float(max(best, 0.0))

    def check_shape(self, policy: "Policy") -> None:
        if policy.shape != (self.horizon, self.num_states, self.num_actions):
            raise ConfigurationError(
                f"policy shape {policy.shape} does not match MDP (H, S, A) = "
                f"{(self.horizon, self.num_states, self.num_actions)}"
            )


@dataclass(frozen=True, eq=False)
class Policy:
    """Tabular nonstationary policy.

    Deterministic tables are (H, S) action indices; stochastic tables are
    (H, S, A) probability rows. ``probs`` always gives the (H, S, A) view.
    """

    kind: str
    table: np.ndarray
    num_actions: int

    def __post_init__(self) -> None:
        if self.kind == DETERMINISTIC:
            table = np.array(self.table, dtype=np.int64)
            if table.ndim != 2:
                raise ConfigurationError("deterministic table must be (H, S)")
            if np.any(table < 0) or np.any(table >= self.num_actions):
                raise ConfigurationError("deterministic actions out of range")
        elif self.kind == STOCHASTIC:
            table = np.array(self.table, dtype=float)
            if table.ndim != 3 or table.shape[2] != self.num_actions:
                raise ConfigurationError("stochastic table must be (H, S, A)")
            _check_rows(table, "policy")
        else:
            raise ConfigurationError(f"unknown policy kind {self.kind!r}")
        object.__setattr__(self, "table", _freeze(table))
        object.__setattr__(self, "num_actions", int(self.num_actions))

    @classmethod
    def deterministic(cls, table: Any, num_actions: int) -> "Policy":
        return cls(DETERMINISTIC, np.asarray(table), num_actions)

    @classmethod
    def stochastic(cls, table: Any) -> "Policy":
        table = np.asarray(table, dtype=float)
        return cls(STOCHASTIC, table, table.shape[-1])

    @property
    def is_deterministic(self) -> bool:
        return self.kind == DETERMINISTIC

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.table.shape[0], self.table.shape[1], self.num_actions)

    @cached_property
    def probs(self) -> np.ndarray:
        if self.kind == STOCHASTIC:
            return self.table
        H, S = self.table.shape
        out = np.zeros((H, S, self.num_actions))
        np.put_along_axis(out, self.table[..., None], 1.0, axis=2)
        return _freeze(out)

    def as_stochastic(self) -> "Policy":
        """One-hot embedding, so Hellinger code has a single path."""
        return Policy(STOCHASTIC, self.probs.copy(), self.num_actions)

    def row(self, h0: int, s: int) -> np.ndarray:
        return self.probs[h0, s]


@dataclass(frozen=True, eq=False)
class PolicyClass:
    policies: tuple[Policy, ...]

    def __post_init__(self) -> None:
        pols = tuple(self.policies)
        if not pols:
            raise ConfigurationError("policy class must be nonempty")
        kinds = {p.kind for p in pols}
        shapes = {p.shape for p in pols}
        if len(kinds) != 1 or len(shapes) != 1:
            raise ConfigurationError("policy class members must share kind and (H, S, A) shape")
        object.__setattr__(self, "policies", pols)

    def __len__(self) -> int:
        return len(self.policies)

    def __getitem__(self, i: int) -> Policy:
        return self.policies[i]

    @property
    def ids(self) -> range:
        return range(len(self.policies))

    @property
    def kind(self) -> str:
        return self.policies[0].kind

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.policies[0].shape

    @property
    def horizon(self) -> int:
        return self.shape[0]

    @cached_property
    def probs(self) -> np.ndarray:
        """Stacked (|Pi|, H, S, A) probability tables."""
        return _freeze(np.stack([p.probs for p in self.policies]))

    @cached_property
    def actions(self) -> np.ndarray:
        """Stacked (|Pi|, H, S) action tables (deterministic classes only)."""
        if self.kind != DETERMINISTIC:
            raise ValidationError("action tables exist only for deterministic classes")
        return _freeze(np.stack([p.table for p in self.policies]))

    def as_stochastic(self) -> "PolicyClass":
        return PolicyClass(tuple(p.as_stochastic() for p in self.policies))


@dataclass(frozen=True)
class Trajectory:
    states: tuple[int, ...]
    actions: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        if self.actions is not None:
            object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
            if len(self.actions) != len(self.states):
                raise ValidationError("states and actions must have equal length")

    @property
    def labeled(self) -> bool:
        return self.actions is not None

    def unlabeled(self) -> "Trajectory":
        return Trajectory(self.states)

    def __len__(self) -> int:
        return len(self.states)


def state_matrix(data: Sequence[Trajectory], horizon: int | None = None) -> np.ndarray:
    if not data:
        return np.zeros((0, horizon or 0), dtype=np.int64)
    out = np.array([t.states for t in data], dtype=np.int64)
    if horizon is not None and out.shape[1] != horizon:
        raise ValidationError(f"trajectories must have length {horizon}")
    return out


def action_matrix(data: Sequence[Trajectory]) -> np.ndarray:
    if any(t.actions is None for t in data):
        raise MissingActionsError("dataset contains unlabeled trajectories")
    return np.array([t.actions for t in data], dtype=np.int64)


# Outcome keys: (states, actions). A stopped prefix ending at s_tau has one
# fewer action than states, so prefixes of different lengths never collide.
OutcomeKey = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass(frozen=True, eq=False)
class TrajectoryDistribution:
    probs: dict

    def __post_init__(self) -> None:
        total = math.fsum(self.probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"distribution mass {total} != 1")

    def __len__(self) -> int:
        return len(self.probs)

    def __iter__(self) -> Iterator[tuple[Any, float]]:
        return iter(self.probs.items())

    def prob(self, key: Any) -> float:
        return self.probs.get(key, 0.0)

    def expectation(self, fn) -> float:
        return math.fsum(p * fn(k) for k, p in self.probs.items())


class StopCheck(Protocol):
    """Pre-action stopping rule over states; see ``stopping.CompiledRule``."""

    def start(self) -> Any: ...

    def check(self, h0: int, s: int, carry: Any) -> tuple[bool, Any]: ...


def sample_trajectory(mdp: TabularMDP, policy: Policy, rng_seed: int | np.random.Generator) -> Trajectory:
    """Draw one labeled trajectory. Deterministic policies consume no randomness for actions."""
    mdp.check_shape(policy)
    rng = as_generator(rng_seed)
    states: list[int] = []
    actions: list[int] = []
    s = draw_index(rng, mdp.initial_dist)
    for h0 in range(mdp.horizon):
        states.append(s)
        a = int(policy.table[h0, s]) if policy.is_deterministic else draw_index(rng, policy.table[h0, s])
        actions.append(a)
        if h0 < mdp.horizon - 1:
            s = draw_index(rng, mdp.transitions[h0, s, a])
    return Trajectory(tuple(states), tuple(actions))


def enumerate_trajectory_distribution(
    mdp: TabularMDP,
    policy: Policy,
    stop_rule: StopCheck | None = None,
    *,
    handoff: Policy | None = None,
    budget: int = DEFAULT_BUDGET,
) -> TrajectoryDistribution:
    """Exact law of (possibly stopped, possibly switched) trajectories.

    With ``stop_rule`` and no ``handoff`` the support is stopped prefixes; with
    ``handoff`` control passes to that policy at the stopping time and the
    support is full trajectories.
    """
    mdp.check_shape(policy)
    if handoff is not None:
        mdp.check_shape(handoff)
    H = mdp.horizon
    pre = policy.probs
    post = handoff.probs if handoff is not None else None
    out: dict[OutcomeKey, float] = {}

    def emit(key: OutcomeKey, p: float) -> None:
        out[key] = out.get(key, 0.0) + p
        if len(out) > budget:
            raise EnumerationTooLarge(f"support exceeds budget of {budget} outcomes")

    start_carry = stop_rule.start() if stop_rule is not None else None
    stack = [
        (0, (s,), (), float(p), start_carry, False)
        for s, p in reversed(list(enumerate(mdp.initial_dist)))
        if p > 0
    ]
    while stack:
        h0, states, actions, p, carry, switched = stack.pop()
        s = states[-1]
        if stop_rule is not None and not switched:
            stop, carry = stop_rule.check(h0, s, carry)
            if stop:
                if post is None:
                    emit((states, actions), p)
                    continue
                switched = True
        row = post[h0, s] if switched else pre[h0, s]
        for a in range(mdp.num_actions - 1, -1, -1):
            w = row[a]
            if w <= 0:
                continue
            pa = p * w
            acts = actions + (a,)
            if h0 == H - 1:
                emit((states, acts), pa)
                continue
            kern = mdp.transitions[h0, s, a]
            for s2 in range(mdp.num_states - 1, -1, -1):
                if kern[s2] > 0:
                    stack.append((h0 + 1, states + (s2,), acts, pa * kern[s2], carry, switched))
    return TrajectoryDistribution(out)


def state_trajectory_distribution(
    mdp: TabularMDP, policy: Policy, *, budget: int = DEFAULT_BUDGET
) -> dict[tuple[int, ...], float]:
    """Exact law of the state sequence (actions marginalized)."""
    mdp.check_shape(policy)
    H = mdp.horizon
    probs = policy.probs
    layer: dict[tuple[int, ...], float] = {(s,): float(p) for s, p in enumerate(mdp.initial_dist) if p > 0}
    for h0 in range(H - 1):
        kern = np.einsum("sa,sat->st", probs[h0], mdp.transitions[h0])
        nxt: dict[tuple[int, ...], float] = {}
        for path, p in layer.items():
            row = kern[path[-1]]
            for s2 in np.flatnonzero(row > 0):
                nxt[path + (int(s2),)] = p * row[s2]
        if len(nxt) > budget:
            raise EnumerationTooLarge(f"state-path support exceeds budget of {budget}")
        layer = nxt
    return layer


def total_variation(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return 0.5 * math.fsum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


def prefix_cost(mdp: TabularMDP, traj: Trajectory, tau: int) -> float:
    """Sum of c_h(s_h, a_h) over steps h < tau."""
    if traj.actions is None:
        raise MissingActionsError("prefix_cost needs a labeled trajectory")
    H = mdp.horizon
    if not 1 <= tau <= H + 1:
        raise ValidationError(f"tau must be in [1, {H + 1}]")
    return math.fsum(float(mdp.costs[h0, traj.states[h0], traj.actions[h0]]) for h0 in range(tau - 1))


def outcome_cost(mdp: TabularMDP, key: OutcomeKey) -> float:
    """Cost of an enumerated outcome (only steps with a recorded action count)."""
    states, actions = key
    return math.fsum(float(mdp.costs[h0, states[h0], a]) for h0, a in enumerate(actions))


def class_log_losses(pclass: PolicyClass, data: Sequence[Trajectory]) -> np.ndarray:
    """LogLoss of every class member; +inf where an observed action has probability 0."""
    if not data:
        raise EmptyInputError("log-loss needs a nonempty labeled dataset")
    S = state_matrix(data, pclass.horizon)
    A = action_matrix(data)
    H = pclass.horizon
    hh = np.broadcast_to(np.arange(H), S.shape)
    lik = pclass.probs[:, hh, S, A]  # (P, m, H)
    with np.errstate(divide="ignore"):
        ll = np.log(lik).reshape(lik.shape[0], -1).sum(axis=1)
    return -ll / len(data)


def log_loss(policy: Policy, dataset: Sequence[Trajectory]) -> float:
    return float(class_log_losses(PolicyClass((policy,)), dataset)[0])


def _check_prob_row(p: np.ndarray) -> None:
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > ROW_TOL:
        raise ValidationError("expected a probability row")


def hellinger_sq_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise d_H^2 along the last axis; exactly 0 on identical rows."""
    val = 1.0 - np.sqrt(p * q).sum(axis=-1)
    val = np.clip(val, 0.0, 1.0)
    same = np.all(p == q, axis=-1)
    return np.where(same, 0.0, val)


def action_hellinger_sq(p: Any, q: Any) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValidationError("rows must have the same length")
    _check_prob_row(p)
    _check_prob_row(q)
    return float(hellinger_sq_rows(p, q))


def trajectory_hellinger_sq(a: TrajectoryDistribution, b: TrajectoryDistribution) -> float:
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    aff = math.fsum(math.sqrt(p * big.prob(k)) for k, p in small)
    return min(1.0, max(0.0, 1.0 - aff))


def geometric_mixture_policy(pi: Policy, pi0: Policy) -> Policy:
    """Row-normalized sqrt(pi * pi0); rows with zero normalizer become uniform."""
    if pi.shape != pi0.shape:
        raise ValidationError("policies must share a shape")
    g = np.sqrt(pi.probs * pi0.probs)
    z = g.sum(axis=-1, keepdims=True)
    uniform = np.full_like(g, 1.0 / g.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(z > 0, g / np.where(z > 0, z, 1.0), uniform)
    return Policy.stochastic(out)


def policy_values(mdp: TabularMDP, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction: V (H, S) and Q (H, S, A) of the expected cost-to-go."""
    mdp.check_shape(policy)
    H, S, A = mdp.costs.shape
    V = np.zeros((H, S))
    Q = np.zeros((H, S, A))
    nxt = np.zeros(S)
    for h0 in range(H - 1, -1, -1):
        Q[h0] = mdp.costs[h0]
        if h0 < H - 1:
            Q[h0] += mdp.transitions[h0] @ nxt
        V[h0] = (policy.probs[h0] * Q[h0]).sum(axis=1)
        nxt = V[h0]
    return V, Q


def state_occupancy(mdp: TabularMDP, policy: Policy) -> np.ndarray:
    """Marginal state laws d_h (H, S) under the policy."""
    mdp.check_shape(policy)
    H, S, _ = mdp.costs.shape
    occ = np.zeros((H, S))
    occ[0] = mdp.initial_dist
    for h0 in range(H - 1):
        occ[h0 + 1] = np.einsum("s,sa,sat->t", occ[h0], policy.probs[h0], mdp.transitions[h0])
    return occ


def expected_cost(mdp: TabularMDP, policy: Policy) -> float:
    V, _ = policy_values(mdp, policy)
    return float(mdp.initial_dist @ V[0])
