"""Ensemble runs and the statistical verification checks.

Paths are simulated in fixed-size blocks; a block's content depends only on
its path indices, so serial and multi-process runs produce identical arrays.
Statistical checks use a 3-standard-error policy; a probability with zero
observed events is "consistent with 0", a nonzero one below ``3/sqrt(n)`` is
inconclusive.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .engine import BlockResult, check_run_inputs, comparison_tolerance, simulate_block
from .model import (
    GL_AFFINE_SQRT,
    ConfigError,
    ModelError,
    Params,
    Pdv2Params,
    SimConfig,
    State,
    VolFunctional,
    default_initial_state,
    sigma_of_state,
)
from .reporting import CheckReport, Measurement
from .theory import (
    CounterexampleSpec,
    InapplicableConstruction,
    gronwall_constants_2f,
    gronwall_constants_4f,
    tilted_bound_constants,
)

WORKERS_ENV = "PDVKIT_WORKERS"
BLOCK_SIZE = 2048


class PreconditionError(ModelError):
    """A check was refused because one of its preconditions does not hold."""


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be a positive integer (got {raw!r})")
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be a positive integer (got {raw!r})")
        return n
    return os.cpu_count() or 1


@dataclass
class Ensemble:
    params: Params
    config: SimConfig
    state: State
    dt: float
    n_steps: int
    result: BlockResult
    summary: dict

    @property
    def n(self) -> int:
        return len(self.result.indices)


def _run_task(args):
    p, f, cfg, indices, state, kw = args
    return simulate_block(p, f, cfg, indices, state, **kw)


def _summarize(res: BlockResult, ladder) -> dict:
    def hit_counts(hits):
        return {format(m, "g"): int(np.isfinite(hits[:, i]).sum()) for i, m in enumerate(ladder)}

    return {
        "paths": int(len(res.indices)),
        "exploded": int(res.exploded.sum()),
        "r1_min": [float(v) for v in np.nanmin(res.r1_min, axis=0)],
        "r1_max": [float(v) for v in np.nanmax(res.r1_max, axis=0)],
        "r2_min": [float(v) for v in np.nanmin(res.r2_min, axis=0)],
        "r2_max": [float(v) for v in np.nanmax(res.r2_max, axis=0)],
        "sigma_min": float(np.nanmin(res.sigma_min)),
        "sigma_max": float(np.nanmax(res.sigma_max)),
        "factor_hits": hit_counts(res.factor_hits),
        "sigma_hits": hit_counts(res.sigma_hits),
        "vol_hits": hit_counts(res.vol_hits),
        "tau_C_hits": int(np.isfinite(res.tau_C).sum()),
    }


def _steps_for(times, dt, n_steps):
    steps = []
    for t in times:
        s = int(round(t / dt))
        if abs(s * dt - t) > 1e-9 * max(t, dt) or s > n_steps:
            raise ConfigError(f"observation time {t} is not a grid point of dt={dt} within the horizon")
        steps.append(s)
    return steps


def run_ensemble(
    p: Params,
    f: VolFunctional = GL_AFFINE_SQRT,
    config: SimConfig = SimConfig(),
    state: Optional[State] = None,
    *,
    dt: Optional[float] = None,
    n_steps: Optional[int] = None,
    substeps: int = 1,
    observe_times: Sequence[float] = (),
    stop_level: Optional[float] = None,
    record: bool = False,
    workers: Optional[int] = None,
    on_block=None,
) -> Ensemble:
    """Simulate ``config.paths`` paths and aggregate per-path monitors.

    With ``config.antithetic`` odd paths replay the preceding even path's
    increments negated.  ``on_block`` is called with every block result in
    path order; recorded trajectories are dropped after the call.
    """
    if state is None:
        state = default_initial_state(p)
    check_run_inputs(p, config, state)
    if dt is None or n_steps is None:
        dt, n_steps = config.grid(p)
    kw = dict(
        dt=dt,
        n_steps=n_steps,
        substeps=substeps,
        observe_steps=_steps_for(observe_times, dt, n_steps),
        stop_level=stop_level,
        record=record,
    )
    blocks = [
        np.arange(lo, min(lo + BLOCK_SIZE, config.paths))
        for lo in range(0, config.paths, BLOCK_SIZE)
    ]
    tasks = [(p, f, config, b, state, kw) for b in blocks]
    workers = worker_count() if workers is None else workers
    parts = []

    def collect(results):
        for part in results:
            if on_block is not None:
                on_block(part)
                part.trajectories = None
            parts.append(part)

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            collect(pool.map(_run_task, tasks))
    else:
        collect(_run_task(t) for t in tasks)
    res = BlockResult.concat(parts)
    return Ensemble(p, config, state, dt, n_steps, res, _summarize(res, config.explosion_ladder))


def _proportion(hits: np.ndarray):
    n = len(hits)
    p = float(np.count_nonzero(hits)) / n
    return p, math.sqrt(p * (1 - p) / n), n


def _mean(values: np.ndarray, antithetic: bool = False):
    """Mean and standard error; antithetic pairs are averaged before the variance."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if antithetic and n >= 4 and n % 2 == 0:
        samples = 0.5 * (values[0::2] + values[1::2])
    else:
        samples = values
    m = float(np.mean(values))
    se = float(np.std(samples, ddof=1) / math.sqrt(len(samples))) if len(samples) > 1 else math.inf
    return m, se, n


def _ladder_measurements(hits, ladder, horizon, strict, label):
    """Hit probabilities per threshold plus a monotonicity measurement."""
    out = []
    probs = []
    for i, M in enumerate(ladder):
        t = hits[:, i]
        event = t < horizon if strict else t <= horizon
        p, se, n = _proportion(event)
        probs.append(p)
        rule = "zero_hits" if i == len(ladder) - 1 else "info"
        out.append(Measurement(f"{label}[M={M:g}]", p, rule, 0.0, se, n))
    increase = max((b - a for a, b in zip(probs, probs[1:])), default=0.0)
    out.append(
        Measurement(
            f"{label}_monotone",
            increase,
            "at_most",
            0.0,
            note="largest increase of the hit probability along the ladder",
        )
    )
    return out


def check_nonexplosion(
    p: Params, f: VolFunctional = GL_AFFINE_SQRT, config: SimConfig = SimConfig(), state=None, workers=None
) -> CheckReport:
    """Finite paths and vanishing hit probabilities of large volatility levels."""
    ladder = config.explosion_ladder
    if len(ladder) < 3:
        raise PreconditionError("explosion ladder needs at least 3 thresholds")
    ens = run_ensemble(p, f, config, state, workers=workers)
    res = ens.result
    T = ens.dt * ens.n_steps
    ms = [Measurement("exploded_paths", int(res.exploded.sum()), "equal", 0, n=ens.n)]
    ms += _ladder_measurements(res.sigma_hits, ladder, T, False, "P(sup|sigma|>=M)")
    for m in _ladder_measurements(res.factor_hits, ladder, T, False, "P(sup|R|>=M)"):
        m.rule, m.verdict = "info", "pass"
        m.note = "factor-magnitude ladder, reported for information"
        ms.append(m)
    ms.append(
        Measurement(
            "r2_nonpositive_observations",
            int(res.r2_nonpos.sum()),
            "equal",
            0,
            n=ens.n * res.n_grid * res.r2_min.shape[1],
        )
    )
    return CheckReport(
        "nonexplosion",
        ms,
        headline=f"P(sup|sigma|>=M)[M={ladder[-1]:g}]",
        details={"summary": ens.summary},
    )


def check_moment_bound(
    p: Params,
    f: VolFunctional = GL_AFFINE_SQRT,
    config: SimConfig = SimConfig(),
    state=None,
    t: float = 0.001,
    workers=None,
) -> CheckReport:
    """Monte Carlo moment functional against the Gronwall bound at time ``t``."""
    if state is None:
        state = default_initial_state(p)
    if isinstance(p, Pdv2Params):
        g = gronwall_constants_2f(p, state)
    else:
        g = gronwall_constants_4f(p, state)
    notes = []
    dt = config.dt if config.dt is not None else config.grid(replace(config, horizon=t))[0]
    t_eff = t
    if not math.isfinite(g.bound(t)):
        t_max = g.max_finite_time(t)
        t_eff = math.floor(t_max / dt) * dt
        notes.append(f"bound overflows at t={t:g}; checked at t={t_eff:.17g} instead")
    n_steps = int(round(t_eff / dt))
    if n_steps < 1 or abs(n_steps * dt - t_eff) > 1e-9 * t_eff:
        raise ConfigError(f"moment time {t_eff} is not a multiple of dt {dt}")
    cfg = replace(config, horizon=n_steps * dt, dt=dt)
    ens = run_ensemble(p, f, cfg, state, dt=dt, n_steps=n_steps, observe_times=[n_steps * dt], workers=workers)
    obs = ens.result.observed
    U = (obs["r1"][:, 0, :] ** 2).sum(axis=1) + obs["r2"][:, 0, :].sum(axis=1)
    est, se, n = _mean(U, cfg.antithetic)
    bound = g.bound(t_eff)
    ms = [
        Measurement("moment_functional", est, "upper_bound", bound, se, n, note=f"t={t_eff:.17g}"),
        Measurement("bound_at_zero", g.bound(0.0), "info"),
    ]
    return CheckReport("moment_bound", ms, headline="moment_functional", notes=notes)


def check_positivity(
    p: Pdv2Params,
    f: VolFunctional = GL_AFFINE_SQRT,
    config: SimConfig = SimConfig(),
    state=None,
    workers=None,
) -> CheckReport:
    """Positive volatility and the comparison ``sigma >= Y`` at ``dt`` and ``dt/2``.

    Both runs share one Brownian path: the coarse run sums pairs of the fine
    run's increments.
    """
    if not isinstance(p, Pdv2Params):
        raise PreconditionError("positivity check needs the 2-factor model")
    if state is None:
        state = default_initial_state(p)
    if config.system != "original":
        raise PreconditionError("positivity check runs the original system")
    if not p.lambda2 < 2 * p.lambda1:
        raise PreconditionError(f"lambda2 < 2 lambda1 fails ({p.lambda2:g} >= {2 * p.lambda1:g})")
    sigma0 = float(sigma_of_state(p, state, f))
    if not sigma0 > 0:
        raise PreconditionError(f"sigma0 > 0 fails (sigma0 = {sigma0:g})")
    dt, n_steps = config.grid(p)
    coarse = run_ensemble(p, f, config, state, dt=dt, n_steps=n_steps, substeps=2, workers=workers)
    fine = run_ensemble(p, f, config, state, dt=dt / 2, n_steps=2 * n_steps, workers=workers)
    ms = []
    fracs = {}
    for label, ens, h in (("dt", coarse, dt), ("dt/2", fine, dt / 2)):
        res = ens.result
        total = ens.n * res.n_grid
        ms.append(Measurement(f"sigma_nonpositive[{label}]", int(res.sigma_nonpos.sum()), "equal", 0, n=total))
        frac = float(res.cmp_violations.sum()) / total
        fracs[label] = frac
        ms.append(
            Measurement(
                f"comparison_violation_fraction[{label}]",
                frac,
                "info",
                n=total,
                note=f"sigma < Y (1 - tol), tol = {comparison_tolerance(p, h):.17g}",
            )
        )
        ms.append(
            Measurement(
                f"raw_comparison_violation_fraction[{label}]",
                float(res.cmp_violations_raw.sum()) / total,
                "info",
                n=total,
                note="sigma < Y without tolerance",
            )
        )
    ms.append(
        Measurement(
            "comparison_refinement",
            fracs["dt/2"] - fracs["dt"],
            "at_most",
            0.0,
            note="violation fraction at dt/2 minus that at dt",
        )
    )
    return CheckReport(
        "positivity",
        ms,
        headline="sigma_nonpositive[dt]",
        details={"sigma_min": min(coarse.summary["sigma_min"], fine.summary["sigma_min"])},
    )


DEFAULT_FAILURE_TIMES = (0.001, 0.0025, 0.005, 0.01)


def check_positivity_failure_4f(
    ce: CounterexampleSpec,
    config: SimConfig = SimConfig(),
    times: Sequence[float] = DEFAULT_FAILURE_TIMES,
    f: VolFunctional = GL_AFFINE_SQRT,
    workers=None,
) -> CheckReport:
    """Estimate ``P(min_{s<=t} sigma_s < 0)`` for a counterexample instance."""
    p = ce.params
    dt, n_steps = config.grid(p)
    T = dt * n_steps
    times = [t for t in times if t <= T + 1e-12]
    if not times:
        raise PreconditionError("no observation time within the horizon")
    ens = run_ensemble(p, f, config, ce.state, dt=dt, n_steps=n_steps, observe_times=times, workers=workers)
    runmin = ens.result.observed["sigma_runmin"]
    ms = []
    best = None
    for i, t in enumerate(times):
        est, se, n = _proportion(runmin[:, i] < 0)
        ms.append(Measurement(f"P(min sigma<0)[t={t:g}]", est, "info", 0.0, se, n))
        if best is None or est - 3 * se > best[0] - 3 * best[1]:
            best = (est, se, n, t)
    est, se, n, t = best
    ms.append(Measurement("P(min sigma<0)[best]", est, "positive", 0.0, se, n, note=f"t={t:g}"))
    ms.append(Measurement("sigma0", ce.sigma0, "info"))
    ms.append(Measurement("initial_drift", ce.drift, "below", 0.0))
    zcfg = replace(config, driver="zero", paths=1, antithetic=False)
    zero = run_ensemble(p, f, zcfg, ce.state, dt=dt, n_steps=n_steps, observe_times=times, workers=1)
    ms.append(
        Measurement(
            "zero_driver_min_sigma",
            float(zero.result.observed["sigma_runmin"][0, -1]),
            "below",
            0.0,
            note=f"t={times[-1]:g}",
        )
    )
    return CheckReport("positivity_failure_4f", ms, headline="P(min sigma<0)[best]")


def check_martingale(
    p: Pdv2Params,
    f: VolFunctional = GL_AFFINE_SQRT,
    config: SimConfig = SimConfig(),
    state=None,
    ladder_horizon: float = 0.1,
    ladder_paths: Optional[int] = None,
    max_rel_halfwidth: float = 0.05,
    workers=None,
) -> CheckReport:
    """Direct ``E[X_T] = x0`` test plus the tilted-system explosion ladder.

    The ladder runs the tilted system up to ``ladder_horizon`` with
    ``ladder_paths`` plain (non-antithetic) paths, default ``config.paths``.
    The direct test is inconclusive when
    its 3-SE half-width exceeds ``max_rel_halfwidth * x0``.
    """
    if not isinstance(p, Pdv2Params):
        raise PreconditionError("martingale check needs the 2-factor model")
    if config.system != "original":
        raise PreconditionError("direct martingale test runs the original system")
    direct = run_ensemble(p, f, config, state, workers=workers)
    est, se, n = _mean(direct.result.final_x, config.antithetic)
    x0 = config.x0
    ms = [
        Measurement(
            "E[X_T]",
            est,
            "two_sided",
            x0,
            se,
            n,
            max_halfwidth=max_rel_halfwidth * x0,
            note=f"T={direct.dt * direct.n_steps:.17g}",
        ),
        Measurement("exploded_paths", int(direct.result.exploded.sum()), "equal", 0, n=n),
    ]
    lcfg = replace(
        config,
        system="tilted",
        antithetic=False,
        horizon=ladder_horizon,
        paths=ladder_paths if ladder_paths is not None else config.paths,
    )
    tilted = run_ensemble(p, f, lcfg, state, workers=workers)
    T = tilted.dt * tilted.n_steps
    ms += _ladder_measurements(tilted.result.vol_hits, lcfg.explosion_ladder, T, True, "tilted P(T_M<t)")
    return CheckReport(
        "martingale",
        ms,
        headline="E[X_T]",
        details={"tilted_summary": tilted.summary},
    )


DEFAULT_DRIFT_TIMES = (0.05, 0.1, 0.25)


def check_tilted_drift_bound(
    p: Pdv2Params,
    config: SimConfig = SimConfig(),
    state=None,
    times: Sequence[float] = DEFAULT_DRIFT_TIMES,
    stop_level: Optional[float] = None,
    f: VolFunctional = GL_AFFINE_SQRT,
    workers=None,
) -> CheckReport:
    """``E[sigma_{t ^ S_M}] <= K0 + K1 t`` under the tilted dynamics on a time grid."""
    if state is None:
        state = default_initial_state(p)
    try:
        tb = tilted_bound_constants(p, state)
    except InapplicableConstruction as exc:
        raise PreconditionError(f"tilted bound inapplicable: {exc}")
    M = stop_level if stop_level is not None else config.explosion_ladder[-1]
    cfg = replace(config, system="tilted", horizon=max(times))
    dt, n_steps = cfg.grid(p)
    ens = run_ensemble(p, f, cfg, state, dt=dt, n_steps=n_steps, observe_times=times, stop_level=M, workers=workers)
    stopped = ens.result.observed["sigma_stopped"]
    sigma0 = float(sigma_of_state(p, state, f))
    ms = [Measurement("E[sigma_0]", sigma0, "at_most", tb.K0, note="t=0")]
    for i, t in enumerate(times):
        est, se, n = _mean(stopped[:, i], cfg.antithetic)
        ms.append(Measurement(f"E[sigma_(t^S_M)][t={t:g}]", est, "upper_bound", tb.bound(t), se, n, note=f"M={M:g}"))
    return CheckReport(
        "tilted_drift_bound",
        ms,
        headline=f"E[sigma_(t^S_M)][t={times[-1]:g}]",
        details={"K0": tb.K0, "K1": tb.K1},
    )


DEFAULT_DT_LADDER = (4e-4, 2e-4, 1e-4)


def convergence_study(
    p: Params,
    f: VolFunctional = GL_AFFINE_SQRT,
    config: SimConfig = SimConfig(),
    dt_ladder: Sequence[float] = DEFAULT_DT_LADDER,
    dt_ref: float = 2.5e-5,
    state=None,
    order_range=(0.3, 1.2),
    workers=None,
) -> CheckReport:
    """Strong errors at the horizon against a fine reference on the same Brownian path.

    The error of a rung is the mean Euclidean distance of the factor vector to
    the reference.  Pass: errors strictly decrease along the (decreasing)
    ``dt_ladder`` and the fitted order lies in ``order_range``.
    """
    dts = sorted(dt_ladder, reverse=True)
    if len(dts) < 2:
        raise PreconditionError("dt ladder needs at least 2 step sizes")
    q = [a / b for a, b in zip(dts, dts[1:])]
    if any(abs(r - q[0]) > 1e-9 * q[0] for r in q):
        raise PreconditionError("dt ladder must be a geometric sequence")
    ratios = [dt / dt_ref for dt in dts]
    if any(abs(r - round(r)) > 1e-9 * r or round(r) < 1 for r in ratios):
        raise PreconditionError("every dt must be an integer multiple of dt_ref")
    T = config.horizon
    n_ref = int(round(T / dt_ref))
    if abs(n_ref * dt_ref - T) > 1e-9 * T:
        raise ConfigError(f"horizon {T} is not a multiple of dt_ref {dt_ref}")
    ref = run_ensemble(p, f, config, state, dt=dt_ref, n_steps=n_ref, workers=workers)
    ref_state = np.concatenate([ref.result.final_r1, ref.result.final_r2], axis=1)
    errors, ses = [], []
    ms = []
    for dt, r in zip(dts, ratios):
        sub = int(round(r))
        if n_ref % sub:
            raise ConfigError(f"horizon {T} is not a multiple of dt {dt}")
        run = run_ensemble(p, f, config, state, dt=dt, n_steps=n_ref // sub, substeps=sub, workers=workers)
        st = np.concatenate([run.result.final_r1, run.result.final_r2], axis=1)
        err = np.sqrt(((st - ref_state) ** 2).sum(axis=1))
        e, se, n = _mean(err)
        errors.append(e)
        ses.append(se)
        ms.append(Measurement(f"strong_error[dt={dt:g}]", e, "info", None, se, n))
    steps = [b - a for a, b in zip(errors, errors[1:])]
    ms.append(
        Measurement("error_monotone", max(steps) if steps else -math.inf, "below", 0.0,
                    note="largest change of the error when dt is halved")
    )
    if all(e > 0 for e in errors):
        order = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
        ratio = float(np.exp(np.mean([np.log(a / b) for a, b in zip(errors, errors[1:])])))
    else:
        order = ratio = math.nan
    ms.append(Measurement("fitted_order", order, "interval", list(order_range)))
    ms.append(Measurement("mean_error_ratio", ratio, "info", note="geometric mean over ladder steps"))
    return CheckReport("convergence", ms, headline="fitted_order", details={"dt_ref": dt_ref})
