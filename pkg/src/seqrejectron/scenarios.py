"""Environment and policy-class generators."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError
from .evaluation import forward_sweep
from .mdp import Policy, PolicyClass, TabularMDP, Trajectory, class_log_losses, sample_trajectory, state_matrix
from .rng import derive_seed, draw_indices, substream
from .stopping import compile_policies, divergence_table

log = logging.getLogger(__name__)

WINDY_CHAIN = "windy_chain"
RANDOM_TABULAR = "random_tabular"
PQ_LOWER_BOUND = "pq_lower_bound"
RARE_STATE_CHAIN = "rare_state_chain"


@dataclass
class ScenarioBundle:
    """Everything needed to generate data and evaluate a fit.

    ``train_policy`` labels the source rollouts and ``test_policy`` generates
    the target rollouts; both equal ``expert`` except in off-policy bundles.
    """

    family: str
    params: dict
    M: TabularMDP
    N: TabularMDP
    expert: Policy
    pclass: PolicyClass
    train_policy: Policy
    test_policy: Policy
    info: dict = field(default_factory=dict)

    def recipe(self) -> dict:
        return {"family": self.family, "params": self.params}


def sample_datasets(bundle: ScenarioBundle, m: int, n: int, seed: int) -> tuple[list[Trajectory], list[Trajectory]]:
    """Labeled source rollouts of the train policy in M, state-only target rollouts in N."""
    train = [sample_trajectory(bundle.M, bundle.train_policy, substream(seed, "train", i)) for i in range(m)]
    test = [sample_trajectory(bundle.N, bundle.test_policy, substream(seed, "test", i)).unlabeled() for i in range(n)]
    return train, test


# ---------------------------------------------------------------- windy chain


def _chain_kernels(length: int, H: int, wind: float) -> np.ndarray:
    """(H-1, L, 2, L): action 0 steps back, action 1 steps forward; the goal is absorbing."""
    L = length
    T = np.zeros((max(H - 1, 0), L, 2, L))
    for s in range(L):
        if s == L - 1:
            T[:, s, :, s] = 1.0
            continue
        T[:, s, 0, max(s - 1, 0)] += 1.0
        T[:, s, 1, s + 1] += 1.0 - wind
        T[:, s, 1, max(s - 1, 0)] += wind
    return T


def make_windy_chain(
    length: int,
    H: int,
    wind: float,
    seed: int,
    *,
    class_size: int = 32,
    forward_prob: float = 0.9,
    perturb_levels: Sequence[float] = (0.5, 0.2, 0.05),
    max_blocks: int = 2,
) -> ScenarioBundle:
    """Chain with a goal at the right end; in N forward moves are blown back with probability ``wind``.

    Cost at step h is the normalized distance to the goal, (L-1-s)/((L-1)H),
    so an episode costs at most 1. The expert moves forward with probability
    ``forward_prob``. Class members lower the forward probability at a state
    over a run of steps (one or more such blocks); the expert's position in
    the class is random.
    """
    if length < 2 or H < 1:
        raise ValidationError("need length >= 2 and H >= 1")
    if not 0 <= wind <= 1:
        raise ValidationError("wind must lie in [0, 1]")
    L = length
    cost_row = (L - 1 - np.arange(L)) / ((L - 1) * H)
    costs = np.repeat(cost_row[None, :, None], 2, axis=2).repeat(H, axis=0)
    p0 = np.zeros(L)
    p0[0] = 1.0
    M = TabularMDP(p0, _chain_kernels(L, H, 0.0), costs, 1.0)
    N = TabularMDP(p0, _chain_kernels(L, H, wind), costs, 1.0)
    expert_tab = np.zeros((H, L, 2))
    expert_tab[..., 1] = forward_prob
    expert_tab[..., 0] = 1 - forward_prob
    rng = substream(seed, WINDY_CHAIN, "class")
    tables = [expert_tab]
    seen = {expert_tab.tobytes()}
    attempts = 0
    while len(tables) < class_size:
        attempts += 1
        if attempts > 100 * class_size:
            raise ConfigurationError("could not generate enough distinct class members")
        tab = expert_tab.copy()
        # each block slows the policy down at one state over a run of steps
        for _ in range(int(rng.integers(1, max_blocks + 1))):
            s = int(rng.integers(L - 1))  # the goal state is left untouched
            h_lo = int(rng.integers(H))
            h_hi = int(rng.integers(h_lo, H)) + 1
            f = float(perturb_levels[int(rng.integers(len(perturb_levels)))])
            tab[h_lo:h_hi, s] = (1 - f, f)
        key = tab.tobytes()
        if key not in seen:
            seen.add(key)
            tables.append(tab)
    order = rng.permutation(class_size)
    members = [Policy.stochastic(tables[i]) for i in order]
    expert_id = int(np.flatnonzero(order == 0)[0])
    pclass = PolicyClass(tuple(members))
    expert = pclass[expert_id]
    params = {"length": length, "H": H, "wind": wind, "seed": seed, "class_size": class_size,
              "forward_prob": forward_prob}
    return ScenarioBundle(WINDY_CHAIN, params, M, N, expert, pclass, expert, expert, {"expert_id": expert_id})


DESK_CHAIN = "desk_chain"


def make_desk_chain(wind: float = 0.5) -> ScenarioBundle:
    """Two-state reference chain: stuck at state 0 costs 1 per step, R from 0 reaches state 1.

    In N a move R from state 0 stays at 0 with probability ``wind``. The class
    is {always-R, always-L} and the expert is always-R (id 0).
    """
    if not 0 <= wind <= 1:
        raise ValidationError("wind must lie in [0, 1]")
    H, S, A = 2, 2, 2
    p0 = np.array([1.0, 0.0])

    def kernel(w: float) -> np.ndarray:
        T = np.zeros((H - 1, S, A, S))
        T[:, 0, 0, 0] = 1.0
        T[:, 0, 1, 1] = 1.0 - w
        T[:, 0, 1, 0] = w
        T[:, 1, :, 1] = 1.0
        return T

    costs = np.zeros((H, S, A))
    costs[:, 0, :] = 1.0
    M = TabularMDP(p0, kernel(0.0), costs, 2.0)
    N = TabularMDP(p0, kernel(wind), costs, 2.0)
    right = Policy.deterministic(np.ones((H, S), dtype=np.int64), A)
    left = Policy.deterministic(np.zeros((H, S), dtype=np.int64), A)
    pclass = PolicyClass((right, left))
    return ScenarioBundle(DESK_CHAIN, {"wind": wind}, M, N, right, pclass, right, right, {"expert_id": 0})


# ---------------------------------------------------------------- rare-state chain (per-step comparison)


def make_rare_state_chain(
    H: int,
    seed: int,
    *,
    common: int = 4,
    rare: int = 8,
    rare_mass_source: float = 0.04,
    rare_mass_target: float = 0.5,
) -> ScenarioBundle:
    """H-step chain whose per-step state is drawn afresh (independently of the action).

    Source steps land on one of ``rare`` states with total probability
    ``rare_mass_source``; target steps do so with ``rare_mass_target``. The class is
    the deterministic expert plus every single-entry deviation from it, and
    costs are sparse: 1/H for a non-expert action on a rare state.
    """
    if H < 1 or common < 1 or rare < 1:
        raise ValidationError("need H, common, rare >= 1")
    S = common + rare
    A = 2

    def law(mass: float) -> np.ndarray:
        p = np.empty(S)
        p[:common] = (1 - mass) / common
        p[common:] = mass / rare
        return p

    pm, pn = law(rare_mass_source), law(rare_mass_target)
    rng = substream(seed, RARE_STATE_CHAIN)
    expert_tab = rng.integers(0, A, size=(H, S))
    costs = np.zeros((H, S, A))
    for h0 in range(H):
        for s in range(common, S):
            costs[h0, s, 1 - expert_tab[h0, s]] = 1.0 / H
    trans_m = np.broadcast_to(pm, (max(H - 1, 0), S, A, S)).copy()
    trans_n = np.broadcast_to(pn, (max(H - 1, 0), S, A, S)).copy()
    M = TabularMDP(pm, trans_m, costs, 1.0)
    N = TabularMDP(pn, trans_n, costs, 1.0)
    tables = [expert_tab]
    for h0 in range(H):
        for s in range(S):
            t = expert_tab.copy()
            t[h0, s] = 1 - t[h0, s]
            tables.append(t)
    pclass = PolicyClass(tuple(Policy.deterministic(t, A) for t in tables))
    expert = pclass[0]
    params = {"H": H, "seed": seed, "common": common, "rare": rare, "rare_mass_source": rare_mass_source,
              "rare_mass_target": rare_mass_target}
    return ScenarioBundle(RARE_STATE_CHAIN, params, M, N, expert, pclass, expert, expert, {"expert_id": 0})


# ---------------------------------------------------------------- random tabular suites


def _dirichlet_rows(rng: np.random.Generator, shape: tuple[int, ...], k: int, conc: float) -> np.ndarray:
    return rng.dirichlet(np.full(k, conc), size=shape)


def _flip_entries(rng: np.random.Generator, table: np.ndarray, A: int, fraction: float) -> np.ndarray:
    """Replace a fraction of (h, s) actions with a different action."""
    out = table.copy()
    H, S = table.shape
    count = int(round(fraction * H * S))
    if count == 0:
        return out
    flat = rng.choice(H * S, size=count, replace=False)
    for f in flat:
        h0, s = divmod(int(f), S)
        shift = int(rng.integers(1, A))
        out[h0, s] = (out[h0, s] + shift) % A
    return out


def disagreement_probability(mdp: TabularMDP, demonstrator: Policy, policy: Policy) -> float:
    """Pr_{mdp, demonstrator}(policy differs from the demonstrator somewhere on the path)."""
    rule = compile_policies(demonstrator, [policy], None)
    return forward_sweep(mdp, demonstrator.probs, rule).alpha


def misspecification_gap(
    pclass: PolicyClass, M: TabularMDP, N: TabularMDP, train_policy: Policy, test_policy: Policy
) -> tuple[float, int]:
    """min over the class of max{d_M^tr(pi), d_N^te(pi)}, and the minimizing id."""
    best, arg = math.inf, -1
    for i, p in enumerate(pclass.policies):
        v = max(disagreement_probability(M, train_policy, p), disagreement_probability(N, test_policy, p))
        if v < best:
            best, arg = v, i
    return best, arg


def make_random_tabular(
    S: int,
    A: int,
    H: int,
    class_size: int,
    corruption: float,
    offpolicy: bool,
    seed: int,
    *,
    shift: float = 0.5,
    test_shift: float = 0.1,
    max_perturbed_entries: int = 3,
    transition_concentration: float = 0.5,
) -> ScenarioBundle:
    """Random dynamics for M and N, a deterministic expert and a class around it.

    N mixes M's kernels with fresh random rows (weight ``shift``). With
    ``corruption > 0`` the demonstrator is the expert with that fraction of its
    (h, s) entries flipped (so it usually lies outside the class). In off-policy
    mode a second, independently flipped copy (rate ``test_shift``) generates
    the target rollouts. The misspecification gap is computed exactly.
    """
    if min(S, A, H, class_size) < 1:
        raise ValidationError("S, A, H and class_size must be >= 1")
    if not 0 <= corruption <= 1:
        raise ValidationError("corruption must lie in [0, 1]")
    rng = substream(seed, RANDOM_TABULAR)
    p0 = rng.dirichlet(np.ones(S))
    tm = _dirichlet_rows(rng, (max(H - 1, 0), S, A), S, transition_concentration)
    tr = _dirichlet_rows(rng, (max(H - 1, 0), S, A), S, transition_concentration)
    tn = (1 - shift) * tm + shift * tr
    tn /= tn.sum(axis=-1, keepdims=True) if tn.size else 1.0
    costs = rng.random((H, S, A))
    M0 = TabularMDP(p0, tm, costs, H)
    N0 = TabularMDP(p0, tn, costs, H)
    M = TabularMDP(p0, tm, costs, M0.max_trajectory_cost())
    N = TabularMDP(p0, tn, costs, N0.max_trajectory_cost())
    expert_tab = rng.integers(0, A, size=(H, S))
    tables = [expert_tab]
    seen = {expert_tab.tobytes()}
    possible = A ** (H * S)
    target = min(class_size, possible)
    while len(tables) < target:
        t = expert_tab.copy()
        for _ in range(int(rng.integers(1, max_perturbed_entries + 1))):
            h0, s = int(rng.integers(H)), int(rng.integers(S))
            t[h0, s] = int(rng.integers(A))
        if t.tobytes() not in seen:
            seen.add(t.tobytes())
            tables.append(t)
    order = rng.permutation(len(tables))
    pclass = PolicyClass(tuple(Policy.deterministic(tables[i], A) for i in order))
    expert_id = int(np.flatnonzero(order == 0)[0])
    clean = pclass[expert_id]
    train_policy = Policy.deterministic(_flip_entries(rng, expert_tab, A, corruption), A) if A > 1 else clean
    test_policy = train_policy
    if offpolicy and A > 1:
        test_policy = Policy.deterministic(_flip_entries(rng, expert_tab, A, max(test_shift, corruption)), A)
    gap, arg = misspecification_gap(pclass, M, N, train_policy, test_policy)
    info = {"expert_id": expert_id, "misspecification_gap": gap, "gap_minimizer": arg,
            "offpolicy": bool(offpolicy)}
    params = {"S": S, "A": A, "H": H, "class_size": class_size, "corruption": corruption,
              "offpolicy": bool(offpolicy), "seed": seed, "shift": shift, "test_shift": test_shift}
    return ScenarioBundle(RANDOM_TABULAR, params, M, N, train_policy, pclass, train_policy, test_policy, info)


def make_random_stochastic(
    S: int, A: int, H: int, class_size: int, seed: int, *, shift: float = 0.5, concentration: float = 1.0
) -> ScenarioBundle:
    """Realizable stochastic suite: Dirichlet-random policies, the expert drawn from the class."""
    rng = substream(seed, "random_stochastic")
    p0 = rng.dirichlet(np.ones(S))
    tm = _dirichlet_rows(rng, (max(H - 1, 0), S, A), S, 0.5)
    tr = _dirichlet_rows(rng, (max(H - 1, 0), S, A), S, 0.5)
    tn = (1 - shift) * tm + shift * tr
    costs = rng.random((H, S, A))
    M = TabularMDP(p0, tm, costs, H)
    N = TabularMDP(p0, tn, costs, H)
    members = [Policy.stochastic(_dirichlet_rows(rng, (H, S), A, concentration)) for _ in range(class_size)]
    pclass = PolicyClass(tuple(members))
    expert_id = int(rng.integers(class_size))
    expert = pclass[expert_id]
    params = {"S": S, "A": A, "H": H, "class_size": class_size, "seed": seed, "shift": shift}
    return ScenarioBundle("random_stochastic", params, M, N, expert, pclass, expert, expert, {"expert_id": expert_id})


# ---------------------------------------------------------------- single-step lower-bound family


@dataclass
class LowerBoundInstance:
    P: TabularMDP
    Q: TabularMDP
    pclass: PolicyClass
    signs: np.ndarray  # (|class|, d) entries in {-1, +1}
    costs: np.ndarray  # (|class|, N, 2) cost table c_sigma
    d: int
    epsilon: float
    delta_gap: float
    num_states: int

    def mdp_for(self, index: int, which: str = "Q") -> TabularMDP:
        """The environment paired with the cost function of class member ``index``."""
        base = self.Q if which == "Q" else self.P
        return TabularMDP(base.initial_dist, base.transitions, self.costs[index][None], 1.0)


def make_pq_lower_bound(d: int, epsilon: float, Delta: float | None, seed: int, *, max_enumerated: int = 16) -> LowerBoundInstance:
    """Single-step family: P uniform on N = d/(2 eps) states, Q uniform on the first d.

    Member sigma takes action 1 with probability 1/2 + sigma_x Delta on the first
    d states (1/2 elsewhere); its cost is c_sigma(x, 1) = 1{sigma_x = -1},
    c_sigma(x, 0) = 1{sigma_x = 1} on those states and 0 elsewhere. Delta
    defaults to 4 eps. For d above ``max_enumerated`` a seeded subsample of
    2^max_enumerated sign vectors is used.
    """
    if d < 1:
        raise ValidationError("d must be >= 1")
    if not 0 < epsilon <= 1 / 16:
        raise ValidationError("epsilon must lie in (0, 1/16]")
    Delta = 4 * epsilon if Delta is None else Delta
    if not 0 <= Delta <= 0.5:
        raise ValidationError("Delta must lie in [0, 1/2]")
    n_states = d / (2 * epsilon)
    if abs(n_states - round(n_states)) > 1e-9:
        raise ValidationError("d / (2 epsilon) must be an integer")
    n_states = int(round(n_states))
    if d <= max_enumerated:
        signs = np.array(list(itertools.product([1, -1], repeat=d)), dtype=np.int64)
    else:
        log.warning("d=%d: sampling %d sign vectors instead of enumerating 2^d", d, 2**max_enumerated)
        rng = substream(seed, PQ_LOWER_BOUND)
        signs = rng.choice([1, -1], size=(2**max_enumerated, d))
    P0 = np.full(n_states, 1.0 / n_states)
    Q0 = np.zeros(n_states)
    Q0[:d] = 1.0 / d
    no_cost = np.zeros((1, n_states, 2))
    P = TabularMDP(P0, np.zeros((0, n_states, 2, n_states)), no_cost, 1.0)
    Q = TabularMDP(Q0, np.zeros((0, n_states, 2, n_states)), no_cost, 1.0)
    members = []
    costs = np.zeros((len(signs), n_states, 2))
    for i, sg in enumerate(signs):
        tab = np.full((1, n_states, 2), 0.5)
        tab[0, :d, 1] = 0.5 + sg * Delta
        tab[0, :d, 0] = 0.5 - sg * Delta
        members.append(Policy.stochastic(tab))
        costs[i, :d, 1] = sg == -1
        costs[i, :d, 0] = sg == 1
    return LowerBoundInstance(P, Q, PolicyClass(tuple(members)), signs, costs, d, epsilon, Delta, n_states)


# ---------------------------------------------------------------- posterior-sampling heuristic


def posterior_greedy_validators(
    pclass: PolicyClass,
    base: int,
    train: Sequence[Trajectory],
    test: Sequence[Trajectory],
    K: int,
    seed: int,
    *,
    pool_size: int = 16,
    temperature: float = 1.0,
) -> tuple[int, ...]:
    """Heuristic validator set (no certificate).

    Draws a candidate pool from the posterior proportional to
    exp(-m * LogLoss / temperature) under a uniform prior, then repeatedly takes
    the remaining candidate with the largest cumulative squared Hellinger
    disagreement with the base over the test trajectories.
    """
    losses = class_log_losses(pclass, train)
    m = len(train)
    logpost = np.where(np.isfinite(losses), -m * losses / temperature, -np.inf)
    logpost -= logpost.max()
    post = np.exp(logpost)
    post /= post.sum()
    rng = substream(seed, "posterior_pool")
    pool = sorted(set(int(i) for i in draw_indices(rng, post, pool_size)) - {base})
    if not pool:
        return ()
    states = state_matrix(list(test), pclass.horizon)
    div = divergence_table(pclass.probs[pool], pclass.probs[base][None], theta=1.0)
    H = pclass.horizon
    score = div[:, np.arange(H)[None, :], states].sum(axis=(1, 2))
    chosen: list[int] = []
    remaining = list(range(len(pool)))
    for _ in range(min(K, len(pool))):
        best = max(remaining, key=lambda r: (score[r], -pool[r]))
        chosen.append(pool[best])
        remaining.remove(best)
    return tuple(sorted(chosen))


def bundle_seed(seed: int, trial: int) -> int:
    return derive_seed(seed, "trial", trial)


_BUILDERS = {
    WINDY_CHAIN: lambda p: make_windy_chain(**p),
    RANDOM_TABULAR: lambda p: make_random_tabular(**p),
    "random_stochastic": lambda p: make_random_stochastic(**p),
    RARE_STATE_CHAIN: lambda p: make_rare_state_chain(**p),
    DESK_CHAIN: lambda p: make_desk_chain(**p),
}


def build_scenario(family: str, params: dict) -> ScenarioBundle:
    """Construct a bundle from a family name and JSON parameters; unknown families or keys are configuration errors."""
    if family not in _BUILDERS:
        raise ConfigurationError(f"unknown scenario family {family!r}; choose from {sorted(_BUILDERS)}")
    try:
        return _BUILDERS[family](dict(params))
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {family}: {exc}") from exc
