"""Time stepping for the factor systems and the processes driven alongside them.

All updates are explicit: volatility is frozen at the left end of each step.
All processes share one Brownian increment per step.

The 2-factor model is stepped as a one-component instance of the 4-factor
kernel, which is what makes degenerate 4-factor mixes reproduce 2-factor runs
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .model import (
    GL_AFFINE_SQRT,
    ConfigError,
    Params,
    Pdv2Params,
    SimConfig,
    State,
    VolFunctional,
    _mix,
    default_initial_state,
    layout,
    state_arrays,
    state_from_arrays,
    validate_params,
)
from .noise import NoiseStream, block_increments


@dataclass(frozen=True)
class _Kernel:
    scheme: str
    system: str
    lam1: np.ndarray
    lam2: np.ndarray
    lam1_dt: np.ndarray
    lam2_dt: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    one_minus_e1: np.ndarray
    one_minus_e2: np.ndarray


def _kernel(p: Params, dt: float, scheme: str, system: str, ndim: int) -> _Kernel:
    lay = layout(p)
    shape = (lay.k,) + (1,) * (ndim - 1)

    def col(values):
        return np.asarray(values, dtype=float).reshape(shape)

    # math.exp per component: identical bits regardless of the model's arity
    e1 = [math.exp(-lam * dt) for lam in lay.lam1]
    e2 = [math.exp(-lam * dt) for lam in lay.lam2]
    return _Kernel(
        scheme,
        system,
        col(lay.lam1),
        col(lay.lam2),
        col([lam * dt for lam in lay.lam1]),
        col([lam * dt for lam in lay.lam2]),
        col(e1),
        col(e2),
        col([1.0 - e for e in e1]),
        col([1.0 - e for e in e2]),
    )


def _advance(kern: _Kernel, r1, r2, sigma, dW):
    sig2 = sigma * sigma
    noise = kern.lam1 * sigma * dW
    if kern.scheme == "euler":
        if kern.system == "tilted":
            r1n = r1 + noise + kern.lam1_dt * (sig2 - r1)
        else:
            r1n = r1 + noise - kern.lam1_dt * r1
        r2n = r2 + kern.lam2_dt * (sig2 - r2)
    else:
        r1n = r1 * kern.e1 + noise
        if kern.system == "tilted":
            r1n = r1n + sig2 * kern.one_minus_e1
        r2n = r2 * kern.e2 + sig2 * kern.one_minus_e2
    return r1n, r2n


def _step(p, s, sigma, dW, dt, system, scheme):
    if system not in ("original", "tilted"):
        raise ValueError(f"unknown system {system!r}")
    r1, r2 = state_arrays(s)
    sigma = np.asarray(sigma, dtype=float)
    ndim = 1 + max(np.ndim(sigma), np.ndim(dW), r1.ndim - 1)
    if r1.ndim < ndim:
        r1 = r1.reshape(r1.shape + (1,) * (ndim - r1.ndim))
        r2 = r2.reshape(r2.shape + (1,) * (ndim - r2.ndim))
    kern = _kernel(p, dt, scheme, system, ndim)
    with np.errstate(over="ignore", invalid="ignore"):
        r1n, r2n = _advance(kern, r1, r2, sigma, dW)
    if ndim == 1:
        r1n, r2n = r1n.reshape(-1), r2n.reshape(-1)
    return state_from_arrays(r1n, r2n, s)


def step_euler(p: Params, s: State, sigma, dW, dt: float, system: str = "original") -> State:
    """One Euler-Maruyama step of the original or tilted factor system.

    Non-finite output is returned as is; callers flag the path as exploded.
    """
    return _step(p, s, sigma, dW, dt, system, "euler")


def step_exponential(
    p: Params, s: State, sigma, dW, dt: float, system: str = "original"
) -> State:
    """One exponential-integrator step with ``sigma`` frozen over the step.

    The variance factor is updated exactly,
    ``R2 <- R2 * exp(-lam2 dt) + sigma**2 * (1 - exp(-lam2 dt))``, which keeps
    it strictly positive for any step size.  The return factor decays
    exactly and takes the noise term ``lam1 * sigma * dW`` as in Euler.
    """
    return _step(p, s, sigma, dW, dt, system, "exponential")


def _y_coeffs(p: Pdv2Params, dt: float):
    a = p.beta1 * p.lambda1
    b = -(p.lambda1 + 0.5 * a * a) * dt
    return a, b


def y_step(p: Pdv2Params, y, dW, dt: float):
    """Exact update of the stochastic exponential bounding volatility from below."""
    a, b = _y_coeffs(p, dt)
    return y * np.exp(a * dW + b)


def x_step(nu, x, dW, dt: float):
    """Log-Euler update of ``dX = nu X dW``; exact for ``nu`` frozen on the step."""
    return x * np.exp(nu * dW - 0.5 * nu * nu * dt)


@dataclass
class PathRecord:
    """One simulated trajectory.

    ``r1``/``r2`` have shape ``(len(times), k)`` with ``k`` factor components.
    ``factor_hits[m]`` is the first grid time at which some ``|R1_j| >= M`` or
    ``R2_j >= M**2`` (``M = ladder[m]``), ``sigma_hits[m]`` the first time
    ``|sigma| >= M`` and ``vol_hits[m]`` the first time ``|nu| >= M`` for the
    price volatility ``nu`` stopped below ``-C``; all are ``inf`` when never
    reached.  Arrays stop at the last finite grid point of an exploded path.
    """

    times: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    sigma: np.ndarray
    y: Optional[np.ndarray]
    x: np.ndarray
    ladder: tuple
    factor_hits: tuple
    sigma_hits: tuple
    vol_hits: tuple
    tau_C: float
    exploded: bool
    last_finite_time: float


@dataclass
class BlockResult:
    """Per-path outputs of a block run; leading axis of every array is the path."""

    indices: np.ndarray
    exploded: np.ndarray
    last_finite_time: np.ndarray
    factor_hits: np.ndarray  # (n, len(ladder))
    sigma_hits: np.ndarray  # (n, len(ladder))
    vol_hits: np.ndarray  # (n, len(ladder))
    tau_C: np.ndarray
    r1_min: np.ndarray  # (n, k)
    r1_max: np.ndarray
    r2_min: np.ndarray
    r2_max: np.ndarray
    sigma_min: np.ndarray
    sigma_max: np.ndarray
    sigma_nonpos: np.ndarray  # grid points with sigma <= 0
    r2_nonpos: np.ndarray  # grid points x components with R2 <= 0
    cmp_violations: Optional[np.ndarray]  # sigma < Y (1 - tol)
    cmp_violations_raw: Optional[np.ndarray]  # sigma < Y
    n_grid: int
    final_r1: np.ndarray  # (n, k)
    final_r2: np.ndarray
    final_sigma: np.ndarray
    final_x: np.ndarray
    final_y: Optional[np.ndarray]
    observed: dict = field(default_factory=dict)  # name -> (n, n_obs[, k])
    trajectories: Optional[dict] = None  # name -> (n_steps + 1, n[, k])

    _CONCAT = (
        "indices exploded last_finite_time factor_hits sigma_hits vol_hits tau_C r1_min r1_max "
        "r2_min r2_max sigma_min sigma_max sigma_nonpos r2_nonpos cmp_violations "
        "cmp_violations_raw final_r1 final_r2 final_sigma final_x final_y"
    ).split()

    @classmethod
    def concat(cls, parts: Sequence["BlockResult"]) -> "BlockResult":
        first = parts[0]
        kw = {}
        for name in cls._CONCAT:
            vals = [getattr(b, name) for b in parts]
            kw[name] = None if vals[0] is None else np.concatenate(vals, axis=0)
        kw["n_grid"] = first.n_grid
        kw["observed"] = {
            key: np.concatenate([b.observed[key] for b in parts], axis=0)
            for key in first.observed
        }
        if first.trajectories is not None:
            kw["trajectories"] = {
                key: np.concatenate([b.trajectories[key] for b in parts], axis=1)
                for key in first.trajectories
            }
        return cls(**kw)


def comparison_tolerance(p: Pdv2Params, dt: float) -> float:
    return 10.0 * math.sqrt(dt) * p.lambda1 * max(abs(p.beta1), 1.0)


def check_run_inputs(p: Params, cfg: SimConfig, state: State) -> None:
    problems = validate_params(p)
    if problems:
        raise ConfigError("invalid parameters: " + "; ".join(problems))
    cfg.validate()
    _, r2 = state_arrays(state)
    if not np.all(r2 > 0):
        raise ConfigError("initial R2 components must be > 0")


def simulate_block(
    p: Params,
    f: VolFunctional,
    cfg: SimConfig,
    indices: Sequence[int],
    state: Optional[State] = None,
    *,
    dt: Optional[float] = None,
    n_steps: Optional[int] = None,
    substeps: int = 1,
    observe_steps: Sequence[int] = (),
    stop_level: Optional[float] = None,
    record: bool = False,
) -> BlockResult:
    """Simulate the paths ``indices`` side by side.

    ``dt``/``n_steps`` override the grid of ``cfg``; ``substeps`` draws each
    increment as a sum of that many finer normals (same Brownian path as a run
    at ``dt / substeps``).  ``observe_steps`` selects grid indices at which
    per-path snapshots are stored (see ``BlockResult.observed``).
    ``stop_level`` freezes the ``sigma_stopped`` observation at the first
    grid time with ``|sigma| >= stop_level``.
    """
    if state is None:
        state = default_initial_state(p)
    if dt is None or n_steps is None:
        dt, n_steps = cfg.grid(p)
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indices)
    ladder = np.asarray(cfg.explosion_ladder, dtype=float)
    n_lad = len(ladder)
    kern = _kernel(p, dt, cfg.scheme, cfg.system, 2)
    lay = layout(p)
    k = lay.k
    C = float(cfg.stop_floor_C)

    inc = block_increments(
        cfg.seed, indices, n_steps, dt, substeps, cfg.driver, cfg.antithetic
    )

    r1_0, r2_0 = state_arrays(state)
    r1 = np.repeat(r1_0.reshape(k, 1), n, axis=1)
    r2 = np.repeat(r2_0.reshape(k, 1), n, axis=1)

    def sigma_of(r1, r2):
        return f.evaluate(p, _mix(lay.w1, r1), _mix(lay.w2, r2))

    has_y = isinstance(p, Pdv2Params) and cfg.system == "original"
    sig = sigma_of(r1, r2)
    y = sig.copy() if has_y else None
    x = np.full(n, float(cfg.x0))
    if has_y:
        ya, yb = _y_coeffs(p, dt)
        cmp_factor = 1.0 - comparison_tolerance(p, dt)
        cmp_v = np.zeros(n, dtype=np.int64)
        cmp_raw = np.zeros(n, dtype=np.int64)

    exploded = np.zeros(n, dtype=bool)
    last_finite = np.full(n, dt * n_steps)
    f_hits = np.full((n, n_lad), np.inf)
    s_hits = np.full((n, n_lad), np.inf)
    v_hits = np.full((n, n_lad), np.inf)
    tau = np.full(n, np.inf)
    stopped = np.zeros(n, dtype=bool)
    r1_min, r1_max = r1.copy(), r1.copy()
    r2_min, r2_max = r2.copy(), r2.copy()
    s_min, s_max = sig.copy(), sig.copy()
    s_nonpos = np.zeros(n, dtype=np.int64)
    r2_nonpos = np.zeros(n, dtype=np.int64)
    run_min = sig.copy()
    if stop_level is not None:
        sm_hit = np.zeros(n, dtype=bool)
        sm_val = np.zeros(n)

    obs_index = {int(s): i for i, s in enumerate(observe_steps)}
    if any(s < 0 or s > n_steps for s in obs_index):
        raise ConfigError("observation time outside the simulated horizon")
    n_obs = len(observe_steps)
    observed = {}
    if n_obs:
        observed = {
            "r1": np.empty((n, n_obs, k)),
            "r2": np.empty((n, n_obs, k)),
            "sigma": np.empty((n, n_obs)),
            "sigma_runmin": np.empty((n, n_obs)),
            "x": np.empty((n, n_obs)),
        }
        if stop_level is not None:
            observed["sigma_stopped"] = np.empty((n, n_obs))
    traj = None
    if record:
        traj = {
            "r1": np.empty((n_steps + 1, n, k)),
            "r2": np.empty((n_steps + 1, n, k)),
            "sigma": np.empty((n_steps + 1, n)),
            "x": np.empty((n_steps + 1, n)),
        }
        if has_y:
            traj["y"] = np.empty((n_steps + 1, n))

    lad_min = ladder[0] if n_lad else np.inf
    lad_min_sq = lad_min * lad_min
    ladder_sq = ladder * ladder

    def monitor(step, t, nu):
        nonlocal run_min
        ok = np.isfinite(sig) & np.isfinite(r1).all(axis=0) & np.isfinite(r2).all(axis=0)
        if not ok.all():
            newly = ~ok & ~exploded
            if newly.any():
                exploded[newly] = True
                last_finite[newly] = t - dt
                for hits in (f_hits, s_hits, v_hits):
                    for m in range(n_lad):
                        col = hits[:, m]
                        col[newly & np.isinf(col)] = t
        if n_lad:
            a1 = np.abs(r1).max(axis=0)
            a2 = r2.max(axis=0)
            cand = (a1 >= lad_min) | (a2 >= lad_min_sq)
            if cand.any():
                for m in range(n_lad):
                    hit = (a1 >= ladder[m]) | (a2 >= ladder_sq[m])
                    col = f_hits[:, m]
                    col[hit & np.isinf(col)] = t
            for hits, level in ((s_hits, np.abs(sig)), (v_hits, np.abs(nu))):
                if (level >= lad_min).any():
                    for m in range(n_lad):
                        col = hits[:, m]
                        col[(level >= ladder[m]) & np.isinf(col)] = t
        np.fmin(r1_min, r1, out=r1_min)
        np.fmax(r1_max, r1, out=r1_max)
        np.fmin(r2_min, r2, out=r2_min)
        np.fmax(r2_max, r2, out=r2_max)
        np.fmin(s_min, sig, out=s_min)
        np.fmax(s_max, sig, out=s_max)
        s_nonpos[:] += sig <= 0
        r2_nonpos[:] += (r2 <= 0).sum(axis=0)
        run_min = np.fmin(run_min, sig)
        if has_y:
            cmp_v[:] += sig < y * cmp_factor
            cmp_raw[:] += sig < y
        if stop_level is not None:
            newly = (np.abs(sig) >= stop_level) & ~sm_hit
            if newly.any():
                sm_val[newly] = sig[newly]
                sm_hit[newly] = True
        if step in obs_index:
            j = obs_index[step]
            observed["r1"][:, j, :] = r1.T
            observed["r2"][:, j, :] = r2.T
            observed["sigma"][:, j] = sig
            observed["sigma_runmin"][:, j] = run_min
            observed["x"][:, j] = x
            if stop_level is not None:
                observed["sigma_stopped"][:, j] = np.where(sm_hit, sm_val, sig)
        if traj is not None:
            traj["r1"][step] = r1.T
            traj["r2"][step] = r2.T
            traj["sigma"][step] = sig
            traj["x"][step] = x
            if has_y:
                traj["y"][step] = y

    def volatility_for_price(t):
        newly = ~stopped & (sig < -C)
        if newly.any():
            stopped[newly] = True
            tau[newly] = t
        if stopped.any():
            return np.where(stopped, -C, sig)
        return sig

    with np.errstate(over="ignore", invalid="ignore"):
        nu = volatility_for_price(0.0)
        monitor(0, 0.0, nu)
        for step in range(n_steps):
            dW = inc[step]
            r1, r2 = _advance(kern, r1, r2, sig, dW)
            if has_y:
                y = y * np.exp(ya * dW + yb)
            x = x * np.exp(nu * dW - 0.5 * nu * nu * dt)
            sig = sigma_of(r1, r2)
            t = (step + 1) * dt
            nu = volatility_for_price(t)
            monitor(step + 1, t, nu)

    return BlockResult(
        indices=indices,
        exploded=exploded,
        last_finite_time=last_finite,
        factor_hits=f_hits,
        sigma_hits=s_hits,
        vol_hits=v_hits,
        tau_C=tau,
        r1_min=r1_min.T.copy(),
        r1_max=r1_max.T.copy(),
        r2_min=r2_min.T.copy(),
        r2_max=r2_max.T.copy(),
        sigma_min=s_min,
        sigma_max=s_max,
        sigma_nonpos=s_nonpos,
        r2_nonpos=r2_nonpos,
        cmp_violations=cmp_v if has_y else None,
        cmp_violations_raw=cmp_raw if has_y else None,
        n_grid=n_steps + 1,
        final_r1=r1.T.copy(),
        final_r2=r2.T.copy(),
        final_sigma=sig,
        final_x=x,
        final_y=y,
        observed=observed,
        trajectories=traj,
    )


def simulate_path(
    p: Params,
    f: VolFunctional = GL_AFFINE_SQRT,
    config: SimConfig = SimConfig(),
    noise: Optional[NoiseStream] = None,
    state: Optional[State] = None,
) -> PathRecord:
    """Simulate one path to the horizon (or to its last finite grid point).

    ``noise`` supplies seed, path index, driver and antithetic flag; the
    corresponding fields of ``config`` are overridden by it.
    """
    if state is None:
        state = default_initial_state(p)
    if noise is not None:
        config = replace(
            config,
            seed=noise.seed,
            driver=noise.driver,
            antithetic=noise.antithetic,
        )
        index = noise.path_index
    else:
        index = 0
    check_run_inputs(p, config, state)
    dt, n_steps = config.grid(p)
    res = simulate_block(p, f, config, [index], state, dt=dt, n_steps=n_steps, record=True)
    tr = res.trajectories
    times = np.arange(n_steps + 1) * dt
    keep = n_steps + 1
    if res.exploded[0]:
        keep = int(round(res.last_finite_time[0] / dt)) + 1
    return PathRecord(
        times=times[:keep],
        r1=tr["r1"][:keep, 0, :],
        r2=tr["r2"][:keep, 0, :],
        sigma=tr["sigma"][:keep, 0],
        y=tr["y"][:keep, 0] if "y" in tr else None,
        x=tr["x"][:keep, 0],
        ladder=config.explosion_ladder,
        factor_hits=tuple(float(v) for v in res.factor_hits[0]),
        sigma_hits=tuple(float(v) for v in res.sigma_hits[0]),
        vol_hits=tuple(float(v) for v in res.vol_hits[0]),
        tau_C=float(res.tau_C[0]),
        exploded=bool(res.exploded[0]),
        last_finite_time=float(res.last_finite_time[0]),
    )
