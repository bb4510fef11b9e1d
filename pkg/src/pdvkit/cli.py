"""Batch front-end: ``pdvkit {simulate,verify,constants} CONFIG``.

A run is described by one JSON file::

    {
      "model": {"pdv2": {"beta0": 0.08, "beta1": -0.08, "beta2": 0.5,
                         "lambda1": 62, "lambda2": 40,
                         "initial_state": "default"}},
      "functional": {"kind": "gl-affine-sqrt"},
      "sim": {"dt": 1e-4, "horizon": 0.25, "paths": 10000, "seed": 0},
      "checks": ["nonexplosion", {"name": "moment_bound", "t": 0.001, "dt": 1e-5}],
      "output": {"directory": "out", "formats": ["csv", "json"]}
    }

Unknown keys are errors.  Exit codes: 0 ok, 2 config error, 3 runtime
failure, 4 a check failed, 5 a check was inconclusive.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import mc
from .model import (
    GL_AFFINE_SQRT,
    ConfigError,
    ModelError,
    Pdv2Params,
    Pdv4Params,
    SimConfig,
    State2,
    State4,
    default_initial_state,
    effective_rates,
    sigma_of_state,
    validate_params,
)
from .reporting import FAIL, INCONCLUSIVE, PASS, combine, dumps, trajectory_csv
from .theory import (
    InapplicableConstruction,
    InfeasibleTemplate,
    counterexample_4f,
    gronwall_constants_2f,
    gronwall_constants_4f,
    growth_constants,
    positivity_condition,
    tilted_bound_constants,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_FAIL, EXIT_INCONCLUSIVE = 0, 2, 3, 4, 5

TOP_KEYS = ("model", "functional", "sim", "checks", "output")
MODEL_KEYS = {
    "pdv2": ("beta0", "beta1", "beta2", "lambda1", "lambda2"),
    "pdv4": ("beta0", "beta1", "beta2", "lambda1j", "lambda2j", "theta1", "theta2"),
}
# config name -> SimConfig field
SIM_KEYS = {
    "dt": "dt",
    "horizon": "horizon",
    "scheme": "scheme",
    "driver": "driver",
    "seed": "seed",
    "paths": "paths",
    "C": "stop_floor_C",
    "ladder": "explosion_ladder",
    "system": "system",
    "x0": "x0",
    "antithetic": "antithetic",
}
CHECK_OPTIONS = {
    "nonexplosion": (),
    "moment_bound": ("t",),
    "positivity": (),
    "positivity_failure_4f": ("beta0", "r1_neg", "r1_target", "times"),
    "martingale": ("ladder_horizon", "ladder_paths", "max_rel_halfwidth"),
    "tilted_drift_bound": ("times", "stop_level"),
    "convergence": ("dt_ladder", "dt_ref"),
}
FORMATS = ("csv", "json")


def _fail(key, msg):
    raise ConfigError(f"{key}: {msg}")


def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        _fail(where, "must be an object")
    for k in d:
        if k not in allowed:
            _fail(f"{where}.{k}" if where else k, "unknown key")


def _number(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(key, f"must be a number (got {v!r})")
    if not math.isfinite(v):
        _fail(key, f"must be finite (got {v!r})")
    return float(v)


def _integer(v, key):
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(key, f"must be an integer (got {v!r})")
    return v


def _numbers(v, key, length=None):
    if not isinstance(v, list) or not v:
        _fail(key, "must be a non-empty list of numbers")
    if length is not None and len(v) != length:
        _fail(key, f"must have {length} entries (got {len(v)})")
    return [_number(x, f"{key}[{i}]") for i, x in enumerate(v)]


def _parse_model(block):
    _reject_unknown(block, MODEL_KEYS, "model")
    if len(block) != 1:
        _fail("model", "exactly one of pdv2, pdv4 is required")
    kind, body = next(iter(block.items()))
    where = f"model.{kind}"
    keys = MODEL_KEYS[kind]
    _reject_unknown(body, keys + ("initial_state",), where)
    for k in keys:
        if k not in body:
            _fail(f"{where}.{k}", "missing")
    if kind == "pdv2":
        p = Pdv2Params(*(_number(body[k], f"{where}.{k}") for k in keys))
    else:
        vals = {}
        for k in keys:
            if k in ("lambda1j", "lambda2j"):
                vals[k] = tuple(_numbers(body[k], f"{where}.{k}", 2))
            else:
                vals[k] = _number(body[k], f"{where}.{k}")
        p = Pdv4Params(**vals)
    problems = validate_params(p)
    if problems:
        raise ConfigError("; ".join(f"{where}.{msg}" for msg in problems))

    init = body.get("initial_state", "default")
    skey = f"{where}.initial_state"
    if init == "default":
        state = default_initial_state(p)
    elif kind == "pdv2":
        _reject_unknown(init, ("r1", "r2"), skey)
        for k in ("r1", "r2"):
            if k not in init:
                _fail(f"{skey}.{k}", "missing")
        state = State2(_number(init["r1"], f"{skey}.r1"), _number(init["r2"], f"{skey}.r2"))
    else:
        _reject_unknown(init, ("r1j", "r2j"), skey)
        for k in ("r1j", "r2j"):
            if k not in init:
                _fail(f"{skey}.{k}", "missing")
        state = State4(
            tuple(_numbers(init["r1j"], f"{skey}.r1j", 2)),
            tuple(_numbers(init["r2j"], f"{skey}.r2j", 2)),
        )
    r2 = (state.r2,) if kind == "pdv2" else state.r2j
    if not all(v > 0 for v in r2):
        _fail(f"{skey}", "R2 components must be > 0")
    return kind, p, state


def _sim_values(d, where, base=None):
    """Parse sim keys of ``d`` into SimConfig keyword arguments."""
    out = {}
    for key, field_name in SIM_KEYS.items():
        if key not in d:
            continue
        v, k = d[key], f"{where}.{key}"
        if key == "dt":
            out[field_name] = None if v is None else _number(v, k)
        elif key in ("horizon", "x0", "C"):
            out[field_name] = _number(v, k)
        elif key in ("seed", "paths"):
            out[field_name] = _integer(v, k)
        elif key == "ladder":
            out[field_name] = tuple(_numbers(v, k))
        elif key == "antithetic":
            if not isinstance(v, bool):
                _fail(k, "must be true or false")
            out[field_name] = v
        else:
            if not isinstance(v, str):
                _fail(k, "must be a string")
            out[field_name] = v
    cfg = replace(base or SimConfig(), **out)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}")
    return cfg


def _sim_to_dict(cfg: SimConfig) -> dict:
    return {
        key: list(getattr(cfg, f)) if key == "ladder" else getattr(cfg, f)
        for key, f in SIM_KEYS.items()
    }


def _parse_check(entry, i):
    where = f"checks[{i}]"
    if isinstance(entry, str):
        entry = {"name": entry}
    if not isinstance(entry, dict) or "name" not in entry:
        _fail(where, "must be a check name or an object with a name")
    name = entry["name"]
    if name not in CHECK_OPTIONS:
        _fail(f"{where}.name", f"unknown check {name!r} (known: {', '.join(CHECK_OPTIONS)})")
    _reject_unknown(entry, ("name",) + tuple(SIM_KEYS) + CHECK_OPTIONS[name], where)
    opts = {}
    for k in CHECK_OPTIONS[name]:
        if k not in entry:
            continue
        key = f"{where}.{k}"
        if k in ("times", "dt_ladder"):
            opts[k] = _numbers(entry[k], key)
        elif k == "ladder_paths":
            opts[k] = _integer(entry[k], key)
        else:
            opts[k] = _number(entry[k], key)
    sim = {k: entry[k] for k in SIM_KEYS if k in entry}
    return name, sim, opts


def load_config(source) -> dict:
    """Parse and validate a config (path or dict) into a resolved run description."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    _reject_unknown(raw, TOP_KEYS, "")
    if "model" not in raw:
        _fail("model", "missing")
    kind, p, state = _parse_model(raw["model"])

    func = raw.get("functional", {"kind": "gl-affine-sqrt"})
    _reject_unknown(func, ("kind",), "functional")
    if func.get("kind", "gl-affine-sqrt") != "gl-affine-sqrt":
        _fail("functional.kind", f"only gl-affine-sqrt can be configured from a file (got {func.get('kind')!r})")

    sim_raw = raw.get("sim", {})
    _reject_unknown(sim_raw, tuple(SIM_KEYS), "sim")
    sim = _sim_values(sim_raw, "sim")

    checks_raw = raw.get("checks", [])
    if not isinstance(checks_raw, list):
        _fail("checks", "must be a list")
    checks = []
    for i, entry in enumerate(checks_raw):
        name, sim_over, opts = _parse_check(entry, i)
        cfg = _sim_values(sim_over, f"checks[{i}]", sim)
        checks.append((name, cfg, opts))

    out_raw = raw.get("output", {})
    _reject_unknown(out_raw, ("directory", "formats"), "output")
    directory = out_raw.get("directory", "pdvkit-out")
    if not isinstance(directory, str) or not directory:
        _fail("output.directory", "must be a non-empty string")
    formats = out_raw.get("formats", list(FORMATS))
    if not isinstance(formats, list) or any(f not in FORMATS for f in formats):
        _fail("output.formats", f"must be a list drawn from {list(FORMATS)}")

    if kind == "pdv2":
        model_dict = {k: getattr(p, k) for k in MODEL_KEYS[kind]}
        model_dict["initial_state"] = {"r1": state.r1, "r2": state.r2}
    else:
        model_dict = {
            k: list(v) if isinstance(v, tuple) else v
            for k, v in ((k, getattr(p, k)) for k in MODEL_KEYS[kind])
        }
        model_dict["initial_state"] = {"r1j": list(state.r1j), "r2j": list(state.r2j)}
    resolved = {
        "model": {kind: model_dict},
        "functional": {"kind": "gl-affine-sqrt"},
        "sim": _sim_to_dict(sim),
        "checks": [
            {"name": name, **{k: v for k, v in _sim_to_dict(cfg).items()}, **opts}
            for name, cfg, opts in checks
        ],
        "output": {"directory": directory, "formats": list(formats)},
    }
    return {
        "params": p,
        "state": state,
        "sim": sim,
        "checks": checks,
        "directory": directory,
        "formats": formats,
        "resolved": resolved,
    }


def _output_dir(run, override):
    d = Path(override if override is not None else run["directory"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write(path: Path, text: str):
    path.write_bytes(text.encode("utf-8"))


def simulate(run, out_dir=None, workers=None) -> int:
    p, state, cfg = run["params"], run["state"], run["sim"]
    d = _output_dir(run, out_dir)
    write_csv = "csv" in run["formats"]
    dt, n_steps = cfg.grid(p)
    times = np.arange(n_steps + 1) * dt

    def on_block(res):
        if not write_csv:
            return
        tr = res.trajectories
        for col, idx in enumerate(res.indices):
            text = trajectory_csv(
                times,
                tr["r1"][:, col, :],
                tr["r2"][:, col, :],
                tr["sigma"][:, col],
                tr["y"][:, col] if "y" in tr else None,
                tr["x"][:, col],
            )
            _write(d / f"path_{int(idx):05d}.csv", text)

    ens = mc.run_ensemble(
        p, GL_AFFINE_SQRT, cfg, state, dt=dt, n_steps=n_steps, record=write_csv, workers=workers, on_block=on_block
    )
    if "json" in run["formats"]:
        summary = {"config": run["resolved"], "dt": dt, "n_steps": n_steps, "summary": ens.summary}
        _write(d / "summary.json", dumps(summary))
    print(f"simulated {ens.n} paths, {n_steps} steps of dt={dt:g}; exploded: {ens.summary['exploded']}")
    return EXIT_OK


def _refused(name, reason) -> dict:
    return {
        "name": name,
        "estimate": None,
        "stderr": 0.0,
        "n": 0,
        "reference": None,
        "verdict": INCONCLUSIVE,
        "measurements": [
            {
                "name": "precondition",
                "estimate": None,
                "stderr": 0.0,
                "n": 0,
                "reference": None,
                "rule": "equal",
                "verdict": INCONCLUSIVE,
                "note": reason,
            }
        ],
        "notes": [f"refused: {reason}"],
    }


def run_check(name, p, state, cfg, opts, workers=None):
    f = GL_AFFINE_SQRT
    if name == "nonexplosion":
        return mc.check_nonexplosion(p, f, cfg, state, workers=workers)
    if name == "moment_bound":
        return mc.check_moment_bound(p, f, cfg, state, workers=workers, **opts)
    if name == "positivity":
        return mc.check_positivity(p, f, cfg, state, workers=workers)
    if name == "positivity_failure_4f":
        if not isinstance(p, Pdv4Params):
            raise mc.PreconditionError("the counterexample needs a 4-factor template")
        build = {k: opts[k] for k in ("beta0", "r1_neg", "r1_target") if k in opts}
        try:
            ce = counterexample_4f(p, **build)
        except InfeasibleTemplate as exc:
            raise mc.PreconditionError(f"counterexample construction failed: {exc}")
        kw = {"times": opts["times"]} if "times" in opts else {}
        return mc.check_positivity_failure_4f(ce, cfg, f=f, workers=workers, **kw)
    if name == "martingale":
        return mc.check_martingale(p, f, cfg, state, workers=workers, **opts)
    if name == "tilted_drift_bound":
        if not isinstance(p, Pdv2Params):
            raise mc.PreconditionError("tilted drift bound needs the 2-factor model")
        return mc.check_tilted_drift_bound(p, cfg, state, f=f, workers=workers, **opts)
    if name == "convergence":
        return mc.convergence_study(p, f, cfg, state=state, workers=workers, **opts)
    raise ConfigError(f"unknown check {name!r}")


def verify(run, out_dir=None, workers=None) -> int:
    p, state = run["params"], run["state"]
    results = []
    for name, cfg, opts in run["checks"]:
        try:
            rec = run_check(name, p, state, cfg, opts, workers).to_dict()
        except mc.PreconditionError as exc:
            rec = _refused(name, str(exc))
        results.append(rec)
        est = rec["estimate"]
        est_txt = "n/a" if est is None else f"{est:.6g} (se {rec['stderr']:.3g}, n {rec['n']})"
        print(f"{name}: {rec['verdict']} {est_txt}")
    overall = combine(r["verdict"] for r in results)
    d = _output_dir(run, out_dir)
    report = {"config": run["resolved"], "verdict": overall, "checks": results}
    _write(d / "report.json", dumps(report))
    return {PASS: EXIT_OK, FAIL: EXIT_FAIL, INCONCLUSIVE: EXIT_INCONCLUSIVE}[overall]


def constants_report(p, state) -> dict:
    """All closed-form constants for a model, as a JSON-ready dict."""
    out = {"sigma0": float(sigma_of_state(p, state))}
    pv = positivity_condition(p, state)
    out["positivity"] = {
        "condition": "lambda2 < 2 lambda1" if isinstance(p, Pdv2Params) else "lambda2_bar < 2 lambda1_bar",
        "holds": pv.holds,
        "lhs": pv.lhs,
        "rhs": pv.rhs,
        "sufficient": pv.sufficient,
        "verdict": pv.text,
    }
    if isinstance(p, Pdv2Params):
        g = gronwall_constants_2f(p, state)
        out["gronwall"] = {
            "bound": "E(R1_t^2 + R2_t) <= (c1 + c2 t) exp(c3 t)",
            "c1_1": {"value": g.c1_1, "formula": "R1_0^2"},
            "c1_2": {"value": g.c1_2, "formula": "3 lambda1^2 beta0^2"},
            "c1_3": {"value": g.c1_3, "formula": "max(3 lambda1^2 beta2^2, 3 lambda1^2 beta1^2 - 2 lambda1)"},
            "c2_1": {"value": g.c2_1, "formula": "R2_0"},
            "c2_2": {"value": g.c2_2, "formula": "3 lambda2 beta0^2"},
            "c2_3": {"value": g.c2_3, "formula": "lambda2 max(3 beta1^2, 3 beta2^2 - 1)"},
            "c1": {"value": g.c1, "formula": "c1_1 + c2_1"},
            "c2": {"value": g.c2, "formula": "c1_2 + c2_2"},
            "c3": {"value": g.c3, "formula": "c1_3 + c2_3"},
        }
        try:
            tb = tilted_bound_constants(p, state)
        except InapplicableConstruction as exc:
            out["tilted"] = {"applicable": False, "reason": str(exc)}
        else:
            out["tilted"] = {
                "applicable": True,
                "beta2_hat": {"value": tb.beta2_hat, "formula": "-beta1 lambda1 / (2 lambda2)"},
                "beta2_bar": {"value": tb.beta2_bar, "formula": "beta2^2 / (4 beta2_hat)"},
                "alpha": {"value": tb.alpha, "formula": "beta1 lambda1 + beta2_hat lambda2"},
                "A": {"value": tb.A, "formula": "alpha beta2^2 - lambda2 beta2_hat"},
                "A_prime": {"value": tb.A_prime, "formula": "quadratic coefficient in R1"},
                "B_prime": {"value": tb.B_prime, "formula": "linear coefficient in R1"},
                "C_prime": {"value": tb.C_prime, "formula": "constant term"},
                "L": {"value": tb.L, "formula": "C' - B'^2 / (4 A')"},
                "K0": {"value": tb.K0, "formula": "beta0 + beta2_bar + beta1 R1_0 + beta2_hat R2_0"},
                "K1": {"value": tb.K1, "formula": "|L|"},
            }
    else:
        g = gronwall_constants_4f(p, state)
        out["gronwall"] = {
            "bound": "E(sum_j R1_j,t^2 + sum_j R2_j,t) <= c0(t) exp(c1 t)",
            "blocks": [
                {"label": b.label, "intercept": b.intercept, "slope": b.slope, "coeffs": list(b.coeffs)}
                for b in g.blocks
            ],
            "c0_intercept": g.c0_intercept,
            "c0_slope": g.c0_slope,
            "column_rates": list(g.column_rates),
            "c1": g.c1,
        }
        lb1, lb2, rb1, rb2 = effective_rates(p, state)
        out["effective"] = {"lambda1_bar": lb1, "lambda2_bar": lb2, "r1_bar": rb1, "r2_bar": rb2}
        out["tilted"] = {"applicable": False, "reason": "no tilted bound construction for the 4-factor model"}
        try:
            ce = counterexample_4f(p)
        except InfeasibleTemplate as exc:
            out["counterexample"] = {"feasible": False, "reason": str(exc)}
        else:
            out["counterexample"] = {
                "feasible": True,
                "beta0": ce.params.beta0,
                "beta1": ce.params.beta1,
                "beta2": ce.params.beta2,
                "r1j": list(ce.state.r1j),
                "r2j": list(ce.state.r2j),
                "r1_mixed": ce.r1_mixed,
                "r1_bar": ce.r1_bar,
                "r2_mixed": ce.r2_mixed,
                "r2_bar": ce.r2_bar,
                "sigma0": ce.sigma0,
                "initial_drift": ce.drift,
                "initial_drift_beta0_zero": ce.drift_at_zero_beta0,
            }
    gr = growth_constants(GL_AFFINE_SQRT, p)
    out["growth"] = {
        "K1": gr.K1,
        "K2": gr.K2,
        "L0": gr.L0,
        "L1": gr.L1,
        "L2": gr.L2,
        "L": gr.L,
        "samples": gr.samples,
        "violations": gr.violations,
    }
    return out


def constants(run, out_dir=None, workers=None) -> int:
    report = {"config": run["resolved"], "constants": constants_report(run["params"], run["state"])}
    d = _output_dir(run, out_dir)
    _write(d / "constants.json", dumps(report))
    print(f"positivity: {report['constants']['positivity']['verdict']}")
    return EXIT_OK


COMMANDS = {"simulate": simulate, "verify": verify, "constants": constants}


def _workers(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("must be a positive integer")
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdvkit", description="Path-dependent volatility simulation and verification")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate paths; writes path_*.csv and summary.json",
        "verify": "run the configured checks; writes report.json",
        "constants": "closed-form constants; writes constants.json",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("-o", "--output", help="output directory (overrides output.directory)")
        sp.add_argument("--workers", type=_workers, help=f"worker processes (default: ${mc.WORKERS_ENV} or one per core)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = load_config(args.config)
        workers = args.workers if args.workers is not None else mc.worker_count()
    except ModelError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](run, args.output, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
