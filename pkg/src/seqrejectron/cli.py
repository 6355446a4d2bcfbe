"""Batch driver: gen-data, fit, eval, sweep, demo.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys are the
long flag names with underscores); explicit flags override config values.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import experiments as ex
from .errors import ConfigurationError, SeqRejectronError, ValidationError
from .evaluation import exact_metrics, monte_carlo_metrics
from .fitting import fit_deterministic, fit_misspecified, fit_per_step, fit_stochastic
from .io import read_bundle, read_json, selective_from_json, write_bundle, write_csv, write_json
from .rng import derive_seed
from .scenarios import build_scenario, sample_datasets
from .validators import NoRegretConfig

log = logging.getLogger("seqrejectron")

ALGORITHMS = ("deterministic", "stochastic", "misspecified", "per_step")

# per-subcommand defaults, applied after config file and flags
DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-data": {"scenario": "windy_chain", "params": {}, "m": 30, "n": 30, "seed": 0},
    "fit": {"algo": "deterministic", "eta": 0.4, "xi": 0.1, "delta": 0.2, "theta": 2.0, "gamma": None,
            "lam": 3.0, "K": 3, "rho": 0.34, "engine": "hedge", "rounds": None, "seed": 0},
    "eval": {"method": "exact", "rollouts": 1000, "seed": 0},
    "sweep": {"param": "theta", "values": list(ex.DEFAULT_THETAS), "trials": 5, "seed": 0, "jobs": 1},
    "demo": {"trials": 20, "m": 30, "n": 30, "committee": 3, "thetas": list(ex.DEFAULT_THETAS), "seed": 0,
             "jobs": 1, "length": 6, "horizon": 12, "wind": 0.4},
}


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqrejectron", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate a scenario bundle and datasets")
    common(g)
    g.add_argument("--scenario", help="windy_chain | random_tabular | random_stochastic | rare_state_chain | desk_chain")
    g.add_argument("--params", help="JSON object of scenario parameters")
    g.add_argument("--m", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--out", required=False)

    f = sub.add_parser("fit", help="fit a selective policy on a bundle")
    common(f)
    f.add_argument("--bundle")
    f.add_argument("--algo", choices=ALGORITHMS)
    for name in ("eta", "xi", "delta", "theta", "gamma", "lam", "rho"):
        f.add_argument(f"--{name}", type=float)
    f.add_argument("--K", type=int)
    f.add_argument("--engine", choices=("hedge", "ftpl"))
    f.add_argument("--rounds", type=int)
    f.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a fitted selective policy")
    common(e)
    e.add_argument("--bundle")
    e.add_argument("--policy", help="selective policy JSON written by fit")
    e.add_argument("--method", choices=("exact", "monte_carlo"))
    e.add_argument("--rollouts", type=int)
    e.add_argument("--out")

    s = sub.add_parser("sweep", help="grid over theta, eta, K or lambda times trials")
    common(s)
    s.add_argument("--param", choices=("theta", "eta", "K", "lambda"))
    s.add_argument("--values", type=_floats)
    s.add_argument("--trials", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--out")

    d = sub.add_parser("demo", help="windy-chain threshold sweep")
    common(d)
    d.add_argument("--trials", type=int)
    d.add_argument("--m", type=int)
    d.add_argument("--n", type=int)
    d.add_argument("--committee", type=int)
    d.add_argument("--thetas", type=_floats)
    d.add_argument("--jobs", type=int)
    d.add_argument("--out")
    return p


def _resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    cfg = dict(DEFAULTS[command])
    if args.config:
        loaded = read_json(args.config)
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a JSON object")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k not in ("command", "config") and v is not None:
            cfg[k] = v
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigurationError("missing required setting(s): " + ", ".join("--" + k for k in missing))


def cmd_gen_data(cfg: dict) -> None:
    _require(cfg, "out")
    params = cfg["params"]
    if isinstance(params, str):
        try:
            params = json.loads(params)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"--params is not valid JSON: {exc}") from exc
    params = dict(params)
    if cfg["scenario"] not in ("desk_chain",):
        params.setdefault("seed", derive_seed(cfg["seed"], "scenario"))
    bundle = build_scenario(cfg["scenario"], params)
    train, test = sample_datasets(bundle, int(cfg["m"]), int(cfg["n"]), derive_seed(cfg["seed"], "data"))
    write_bundle(cfg["out"], bundle, train, test)
    log.info("wrote bundle to %s", cfg["out"])


def cmd_fit(cfg: dict) -> None:
    _require(cfg, "bundle", "out")
    bundle, train, test = read_bundle(cfg["bundle"])
    nr = NoRegretConfig(rounds=cfg["rounds"], rng_seed=derive_seed(cfg["seed"], "fit"))
    algo = cfg["algo"]
    if algo == "deterministic":
        rep = fit_deterministic(bundle.pclass, train, test, cfg["eta"], cfg["xi"], cfg["delta"], nr, cfg["engine"])
    elif algo == "stochastic":
        rep = fit_stochastic(bundle.pclass, train, test, cfg["eta"], cfg["delta"], cfg["theta"], cfg["gamma"], nr,
                             engine=cfg["engine"])
    elif algo == "misspecified":
        rep = fit_misspecified(bundle.pclass, train, test, cfg["lam"], int(cfg["K"]), nr, cfg["xi"], cfg["delta"])
    elif algo == "per_step":
        rep = fit_per_step(bundle.pclass, train, test, cfg["rho"], cfg["xi"], cfg["delta"], nr)
    else:
        raise ConfigurationError(f"unknown algorithm {algo!r}")
    out = Path(cfg["out"])
    write_json(out / "fit_report.json", rep.to_json())
    write_json(out / "selective_policy.json", rep.selective.to_json())
    if not rep.certified:
        log.warning("bound preconditions not met: %s", "; ".join(rep.notes))


def cmd_eval(cfg: dict) -> None:
    _require(cfg, "bundle", "policy", "out")
    bundle, _, _ = read_bundle(cfg["bundle"])
    pclass = bundle.pclass
    obj = read_json(cfg["policy"])
    if pclass.kind != "stochastic" and isinstance(obj.get("mode"), dict):
        pclass = pclass.as_stochastic()
    sel = selective_from_json(obj, pclass)
    if cfg["method"] == "exact":
        rep = exact_metrics(bundle.M, bundle.N, sel, bundle.expert, pclass)
    else:
        rep = monte_carlo_metrics(bundle.M, bundle.N, sel, bundle.expert, pclass, int(cfg["rollouts"]),
                                  derive_seed(cfg["seed"], "eval"))
    write_json(cfg["out"], rep.to_json())


def cmd_sweep(cfg: dict) -> None:
    _require(cfg, "out")
    known = set(ex.SweepConfig.__dataclass_fields__)
    extra = {k: v for k, v in cfg.items() if k in known and k not in ("param", "values", "trials", "seed")}
    sc = ex.SweepConfig(param=cfg["param"], values=tuple(float(v) for v in cfg["values"]), trials=int(cfg["trials"]),
                        seed=int(cfg["seed"]), **extra)
    rows = ex.run_sweep(sc, int(cfg["jobs"]))
    write_csv(Path(cfg["out"]) / "sweep.csv", rows, ex.SWEEP_COLUMNS)


def cmd_demo(cfg: dict) -> None:
    _require(cfg, "out")
    dc = ex.DemoConfig(length=int(cfg["length"]), horizon=int(cfg["horizon"]), wind=float(cfg["wind"]),
                       m=int(cfg["m"]), n=int(cfg["n"]), trials=int(cfg["trials"]), committee=int(cfg["committee"]),
                       thetas=tuple(float(t) for t in cfg["thetas"]), seed=int(cfg["seed"]))
    rows = ex.run_demo(dc, int(cfg["jobs"]))
    out = Path(cfg["out"])
    write_csv(out / "demo.csv", rows, ex.DEMO_COLUMNS)
    summary = ex.summarize_demo(rows)
    write_json(out / "demo_summary.json", {"summary": summary, "checks": ex.check_demo(summary)})


COMMANDS = {"gen-data": cmd_gen_data, "fit": cmd_fit, "eval": cmd_eval, "sweep": cmd_sweep, "demo": cmd_demo}


def main(argv: Sequence[str] | None = None) -> int:
    level = getattr(logging, os.environ.get("SEQREJ_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](_resolve(args.command, args))
    except (ConfigurationError, ValidationError) as exc:
        log.error("%s", exc)
        return 2
    except (SeqRejectronError, OSError, ArithmeticError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 0


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
