"""JSON / JSONL / CSV file formats for environments, classes, datasets and reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError
from .mdp import DETERMINISTIC, Policy, PolicyClass, TabularMDP, Trajectory
from .stopping import SelectivePolicy, StoppingRule


def _to_builtin(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_builtin(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_builtin(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def dumps(obj: Any) -> str:
    """Canonical JSON text (sorted keys, fixed float repr) for byte-stable artifacts."""
    return json.dumps(_to_builtin(obj), sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(obj))


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"missing file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON in {path}: {exc}") from exc


def mdp_to_json(mdp: TabularMDP) -> dict:
    return {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "horizon": mdp.horizon,
        "initial_dist": mdp.initial_dist,
        "transitions": mdp.transitions,
        "costs": mdp.costs,
        "cost_cap": mdp.cost_cap,
    }


def mdp_from_json(obj: dict) -> TabularMDP:
    try:
        S, A, H = int(obj["num_states"]), int(obj["num_actions"]), int(obj["horizon"])
        trans = np.array(obj["transitions"], dtype=float)
        if H == 1:
            trans = trans.reshape(0, S, A, S)
        mdp = TabularMDP(np.array(obj["initial_dist"], dtype=float), trans, np.array(obj["costs"], dtype=float), obj["cost_cap"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"malformed MDP: {exc}") from exc
    if (mdp.num_states, mdp.num_actions, mdp.horizon) != (S, A, H):
        raise ConfigurationError("MDP header does not match its tables")
    return mdp


def policy_to_json(policy: Policy) -> dict:
    return {"kind": policy.kind, "num_actions": policy.num_actions, "table": policy.table}


def policy_from_json(obj: dict) -> Policy:
    try:
        return Policy(obj["kind"], np.array(obj["table"]), int(obj["num_actions"]))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed policy: {exc}") from exc


def class_to_json(pclass: PolicyClass) -> dict:
    return {
        "kind": pclass.kind,
        "num_actions": pclass.shape[2],
        "policies": [p.table for p in pclass.policies],
    }


def class_from_json(obj: dict) -> PolicyClass:
    try:
        kind = obj["kind"]
        A = int(obj["num_actions"])
        return PolicyClass(tuple(Policy(kind, np.array(t, dtype=np.int64 if kind == DETERMINISTIC else float), A) for t in obj["policies"]))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed policy class: {exc}") from exc


def write_dataset(path: str | Path, data: Iterable[Trajectory]) -> None:
    lines = []
    for t in data:
        row: dict = {"states": list(t.states)}
        if t.actions is not None:
            row["actions"] = list(t.actions)
        lines.append(json.dumps(row))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_dataset(path: str | Path) -> list[Trajectory]:
    out = []
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ConfigurationError(f"missing file: {path}") from exc
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            out.append(Trajectory(tuple(row["states"]), tuple(row["actions"]) if "actions" in row else None))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"{path}:{i + 1}: bad trajectory line ({exc})") from exc
    return out


def selective_to_json(sel: SelectivePolicy) -> dict:
    return sel.rule.to_json()


def selective_from_json(obj: dict, pclass: PolicyClass) -> SelectivePolicy:
    return SelectivePolicy.from_class(pclass, StoppingRule.from_json(obj))


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v: Any) -> Any:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


BUNDLE_FILES = ("scenario.json", "M.json", "N.json", "expert.json", "class.json", "train.jsonl", "test.jsonl")


def write_bundle(directory: str | Path, bundle, train: Sequence[Trajectory], test: Sequence[Trajectory]) -> None:
    """Write a scenario bundle and its sampled datasets into ``directory``."""
    d = Path(directory)
    write_json(d / "scenario.json", {"family": bundle.family, "params": bundle.params, "info": bundle.info,
                                     "train_policy": policy_to_json(bundle.train_policy),
                                     "test_policy": policy_to_json(bundle.test_policy)})
    write_json(d / "M.json", mdp_to_json(bundle.M))
    write_json(d / "N.json", mdp_to_json(bundle.N))
    write_json(d / "expert.json", policy_to_json(bundle.expert))
    write_json(d / "class.json", class_to_json(bundle.pclass))
    write_dataset(d / "train.jsonl", train)
    write_dataset(d / "test.jsonl", test)


def read_bundle(directory: str | Path):
    """Inverse of :func:`write_bundle`: returns (bundle, train, test)."""
    from .scenarios import ScenarioBundle

    d = Path(directory)
    meta = read_json(d / "scenario.json")
    bundle = ScenarioBundle(
        meta.get("family", "custom"),
        meta.get("params", {}),
        mdp_from_json(read_json(d / "M.json")),
        mdp_from_json(read_json(d / "N.json")),
        policy_from_json(read_json(d / "expert.json")),
        class_from_json(read_json(d / "class.json")),
        policy_from_json(meta["train_policy"]) if "train_policy" in meta else None,
        policy_from_json(meta["test_policy"]) if "test_policy" in meta else None,
        meta.get("info", {}),
    )
    if bundle.train_policy is None:
        bundle.train_policy = bundle.expert
    if bundle.test_policy is None:
        bundle.test_policy = bundle.expert
    return bundle, read_dataset(d / "train.jsonl"), read_dataset(d / "test.jsonl")
