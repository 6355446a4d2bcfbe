"""Validator-induced stopping times and selective rollouts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError
from .mdp import Policy, PolicyClass, TabularMDP, Trajectory, hellinger_sq_rows
from .rng import as_generator, draw_index

FIRST_DISAGREEMENT = "first_disagreement"
HELLINGER = "hellinger"


def divergence_table(probs: np.ndarray, base_probs: np.ndarray, theta: float | None) -> np.ndarray:
    """Per-(h, s) divergence of each row stack against the base.

    ``probs`` is (..., H, S, A). First-disagreement uses the exact row
    inequality indicator; the Hellinger mode uses d_H^2 (exactly 0 on equal rows).
    """
    if theta is None:
        return np.any(probs != base_probs, axis=-1).astype(float)
    return hellinger_sq_rows(probs, np.broadcast_to(base_probs, probs.shape))


def stop_times_from_divergence(div: np.ndarray, states: np.ndarray, theta: float | None) -> np.ndarray:
    """Singleton stop times.

    div: (P, H, S) per-validator divergence tables; states: (n, H).
    Returns (P, n) ints in 1..H+1, the first step at which each validator
    alone triggers.
    """
    P, H, _ = div.shape
    n = states.shape[0]
    if n == 0:
        return np.zeros((P, 0), dtype=np.int64)
    d = div[:, np.arange(H)[None, :], states]  # (P, n, H)
    if theta is None:
        hit = d > 0
    else:
        hit = np.cumsum(d, axis=2) > theta
    any_hit = hit.any(axis=2)
    first = hit.argmax(axis=2) + 1
    return np.where(any_hit, first, H + 1).astype(np.int64)


class CompiledRule:
    """A stopping rule reduced to per-validator divergence tables.

    ``check(h0, s, carry)`` is called before the step-``h0`` action and returns
    ``(stop, new_carry)``; the carry holds each validator's own cumulative
    Hellinger budget (unused for first-disagreement).
    """

    def __init__(self, div: np.ndarray, theta: float | None):
        self.div = np.asarray(div, dtype=float)
        self.theta = theta
        self.horizon = self.div.shape[1] if self.div.ndim == 3 else 0
        if theta is None:
            self.stop_table = self.div.max(axis=0) > 0 if len(self.div) else None

    @property
    def num_validators(self) -> int:
        return self.div.shape[0]

    def start(self) -> Any:
        return None if self.theta is None else (0.0,) * self.num_validators

    def check(self, h0: int, s: int, carry: Any) -> tuple[bool, Any]:
        if self.theta is None:
            if self.stop_table is None:
                return False, None
            return bool(self.stop_table[h0, s]), None
        new = tuple(c + float(d) for c, d in zip(carry, self.div[:, h0, s]))
        return any(x > self.theta for x in new), new

    def stop_times(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        if self.num_validators == 0:
            return np.full(states.shape[0], states.shape[1] + 1, dtype=np.int64)
        return stop_times_from_divergence(self.div, states, self.theta).min(axis=0)


def compile_policies(
    base: Policy,
    validators: Sequence[Policy],
    theta: float | None,
    step_masks: np.ndarray | None = None,
) -> CompiledRule:
    """Compile a rule from explicit policies (they need not share a class)."""
    H, S, A = base.shape
    if validators:
        probs = np.stack([v.probs for v in validators])
        if probs.shape[1:] != (H, S, A):
            raise ConfigurationError("validator shapes must match the base policy")
        div = divergence_table(probs, base.probs[None], theta)
    else:
        div = np.zeros((0, H, S))
    if step_masks is not None:
        div = div * np.asarray(step_masks, dtype=float)[:, :, None]
    return CompiledRule(div, theta)


@dataclass(frozen=True)
class StoppingRule:
    """Base id, validator ids and mode.

    ``theta=None`` is first-disagreement; a positive ``theta`` is the
    cumulative-Hellinger budget. ``step_validators`` (optional, one tuple per
    step) restricts which validators are consulted at each step; it is used by
    the per-step baseline.
    """

    base: int
    validators: tuple[int, ...] = ()
    theta: float | None = None
    step_validators: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "base", int(self.base))
        if self.theta is not None:
            if not self.theta > 0:
                raise ValidationError("theta must be > 0 in Hellinger mode")
            object.__setattr__(self, "theta", float(self.theta))
        if self.step_validators is not None:
            steps = tuple(tuple(sorted({int(v) for v in vs})) for vs in self.step_validators)
            object.__setattr__(self, "step_validators", steps)
            union = sorted({v for vs in steps for v in vs})
            object.__setattr__(self, "validators", tuple(union))
        else:
            object.__setattr__(self, "validators", tuple(sorted({int(v) for v in self.validators})))

    @property
    def mode(self) -> str:
        return FIRST_DISAGREEMENT if self.theta is None else HELLINGER

    def compile(self, pclass: PolicyClass) -> CompiledRule:
        ids = list(self.validators)
        for i in ids + [self.base]:
            if not 0 <= i < len(pclass):
                raise ConfigurationError(f"policy id {i} outside class of size {len(pclass)}")
        masks = None
        if self.step_validators is not None:
            H = pclass.horizon
            if len(self.step_validators) != H:
                raise ConfigurationError("step_validators needs one entry per step")
            masks = np.array([[v in self.step_validators[h0] for h0 in range(H)] for v in ids], dtype=bool)
            masks = masks.reshape(len(ids), H)
        probs = pclass.probs[ids] if ids else np.zeros((0,) + pclass.shape)
        div = divergence_table(probs, pclass.probs[self.base][None], self.theta) if ids else np.zeros((0,) + pclass.shape[:2])
        if masks is not None:
            div = div * masks[:, :, None]
        return CompiledRule(div, self.theta)

    def to_json(self) -> dict:
        out: dict = {
            "base_id": self.base,
            "validator_ids": list(self.validators),
            "mode": FIRST_DISAGREEMENT if self.theta is None else {HELLINGER: self.theta},
        }
        if self.step_validators is not None:
            out["step_validator_ids"] = [list(vs) for vs in self.step_validators]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "StoppingRule":
        try:
            mode = obj["mode"]
            if mode == FIRST_DISAGREEMENT:
                theta = None
            elif isinstance(mode, dict) and HELLINGER in mode:
                theta = float(mode[HELLINGER])
            else:
                raise ConfigurationError(f"unknown stopping mode {mode!r}")
            steps = obj.get("step_validator_ids")
            return cls(
                base=int(obj["base_id"]),
                validators=tuple(obj.get("validator_ids", ())),
                theta=theta,
                step_validators=tuple(tuple(v) for v in steps) if steps is not None else None,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed stopping rule: {exc}") from exc


def merge_step_rules(rules: Sequence[StoppingRule]) -> StoppingRule:
    """Union of per-step rules sharing a base (step h takes its validators from rules[h])."""
    if not rules:
        raise ValidationError("no rules to merge")
    base = rules[0].base
    if any(r.base != base for r in rules):
        raise ValidationError("per-step rules must share the base policy")
    H = len(rules)
    steps = []
    for h0, r in enumerate(rules):
        if r.step_validators is not None:
            steps.append(r.step_validators[h0] if len(r.step_validators) == H else ())
        else:
            steps.append(r.validators)
    return StoppingRule(base, theta=rules[0].theta, step_validators=tuple(steps))


@dataclass(frozen=True, eq=False)
class SelectivePolicy:
    base: Policy
    rule: StoppingRule

    @classmethod
    def from_class(cls, pclass: PolicyClass, rule: StoppingRule) -> "SelectivePolicy":
        return cls(pclass[rule.base], rule)

    def compiled(self, pclass: PolicyClass) -> CompiledRule:
        if pclass[self.rule.base] is not self.base and not np.array_equal(pclass[self.rule.base].probs, self.base.probs):
            raise ConfigurationError("selective policy base does not match rule.base in the class")
        return self.rule.compile(pclass)

    def to_json(self) -> dict:
        return self.rule.to_json()


def stop_time(rule: StoppingRule | CompiledRule, pclass: PolicyClass | None, state_traj: Sequence[int]) -> int:
    compiled = rule if isinstance(rule, CompiledRule) else rule.compile(pclass)
    states = np.asarray(state_traj, dtype=np.int64)
    H = pclass.horizon if pclass is not None else compiled.horizon
    if states.ndim != 1 or states.shape[0] != H:
        raise ValidationError(f"state trajectory must have length {H}")
    return int(compiled.stop_times(states[None])[0])


class SelectiveOutcome(NamedTuple):
    prefix: tuple[tuple[int, ...], tuple[int, ...]]
    tau: int
    stopped_cost: float


class SwitchedOutcome(NamedTuple):
    traj: Trajectory
    tau: int
    full_cost: float


def _simulate(mdp: TabularMDP, pre: Policy, rule: CompiledRule, rng, post: Policy | None):
    H = mdp.horizon
    states: list[int] = []
    actions: list[int] = []
    cost = 0.0
    tau = H + 1
    carry = rule.start()
    s = draw_index(rng, mdp.initial_dist)
    for h0 in range(H):
        states.append(s)
        if tau == H + 1:
            stop, carry = rule.check(h0, s, carry)
            if stop:
                tau = h0 + 1
                if post is None:
                    break
        pol = post if tau <= h0 + 1 and post is not None else pre
        a = int(pol.table[h0, s]) if pol.is_deterministic else draw_index(rng, pol.table[h0, s])
        actions.append(a)
        cost += float(mdp.costs[h0, s, a])
        if h0 < H - 1:
            s = draw_index(rng, mdp.transitions[h0, s, a])
    return states, actions, tau, cost


def run_selective(
    mdp: TabularMDP,
    sel: SelectivePolicy,
    pclass: PolicyClass,
    rng_seed,
    compiled: CompiledRule | None = None,
) -> SelectiveOutcome:
    """Run the base policy until the rule fires; cost accrues only before tau."""
    mdp.check_shape(sel.base)
    rule = compiled if compiled is not None else sel.compiled(pclass)
    states, actions, tau, cost = _simulate(mdp, sel.base, rule, as_generator(rng_seed), None)
    return SelectiveOutcome((tuple(states), tuple(actions)), tau, cost)


def run_switched(
    mdp: TabularMDP,
    sel: SelectivePolicy,
    expert: Policy,
    pclass: PolicyClass,
    rng_seed,
    compiled: CompiledRule | None = None,
) -> SwitchedOutcome:
    """Base policy before tau, expert from tau on; full-horizon cost."""
    mdp.check_shape(sel.base)
    mdp.check_shape(expert)
    rule = compiled if compiled is not None else sel.compiled(pclass)
    states, actions, tau, cost = _simulate(mdp, sel.base, rule, as_generator(rng_seed), expert)
    return SwitchedOutcome(Trajectory(tuple(states), tuple(actions)), tau, cost)


def always_stop_rule(horizon: int, num_states: int) -> CompiledRule:
    """Rule with tau = 1 on every trajectory (used in tests and diagnostics)."""
    div = np.zeros((1, horizon, num_states))
    div[0, 0, :] = 1.0
    return CompiledRule(div, None)
