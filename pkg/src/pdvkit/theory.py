"""Closed-form constants that the Monte Carlo checks compare against.

Everything here is cheap scalar arithmetic; nothing is simulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    GL_AFFINE_SQRT,
    ModelError,
    Params,
    Pdv2Params,
    Pdv4Params,
    State2,
    State4,
    VolFunctional,
    default_initial_state,
    effective_rates,
    sigma_of_state,
)


class InapplicableConstruction(ModelError):
    """The tilted-drift bound cannot be built for these parameters."""


class InfeasibleTemplate(ModelError):
    """No positivity counterexample exists for the given rates and weights."""


def _exp_bound(prefactor: float, rate: float, t: float) -> float:
    try:
        return prefactor * math.exp(rate * t)
    except OverflowError:
        return math.inf


def _largest_finite_time(bound, t_hi: float) -> float:
    """Largest ``t <= t_hi`` with a finite ``bound(t)`` (bisection)."""
    if math.isfinite(bound(t_hi)):
        return t_hi
    lo, hi = 0.0, t_hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if math.isfinite(bound(mid)):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class Gronwall2:
    """Constants of the moment bound ``E(R1_t**2 + R2_t) <= (c1 + c2 t) exp(c3 t)``."""

    c1_1: float
    c1_2: float
    c1_3: float
    c2_1: float
    c2_2: float
    c2_3: float

    @property
    def c1(self) -> float:
        return self.c1_1 + self.c2_1

    @property
    def c2(self) -> float:
        return self.c1_2 + self.c2_2

    @property
    def c3(self) -> float:
        return self.c1_3 + self.c2_3

    @property
    def rate(self) -> float:
        return max(self.c3, 0.0)

    def bound(self, t: float) -> float:
        return _exp_bound(self.c1 + self.c2 * t, self.rate, t)

    def max_finite_time(self, t_hi: float) -> float:
        return _largest_finite_time(self.bound, t_hi)


def gronwall_constants_2f(p: Pdv2Params, s: Optional[State2] = None) -> Gronwall2:
    if s is None:
        s = default_initial_state(p)
    b0, b1, b2 = p.beta0, p.beta1, p.beta2
    lam1, lam2 = p.lambda1, p.lambda2
    return Gronwall2(
        c1_1=s.r1**2,
        c1_2=3 * lam1**2 * b0**2,
        c1_3=max(3 * lam1**2 * b2**2, 3 * lam1**2 * b1**2 - 2 * lam1),
        c2_1=s.r2,
        c2_2=3 * lam2 * b0**2,
        c2_3=lam2 * max(3 * b1**2, 3 * b2**2 - 1),
    )


U_COMPONENTS = ("r1_0^2", "r1_1^2", "r2_0", "r2_1")


@dataclass(frozen=True)
class GronwallBlock:
    """One inequality of the 4-factor argument.

    ``E(V_t) <= intercept + slope t + sum_i coeffs[i] int_0^t E(U_i)`` where
    ``V`` is the block's own quantity and ``U = (R1_0**2, R1_1**2, R2_0, R2_1)``.
    """

    label: str
    intercept: float
    slope: float
    coeffs: tuple

    @property
    def rate(self) -> float:
        return max(self.coeffs)


@dataclass(frozen=True)
class Gronwall4:
    """Moment bound ``E(sum_j R1_j**2 + sum_j R2_j) <= c0(t) exp(c1 t)``."""

    blocks: tuple

    @property
    def c0_intercept(self) -> float:
        return sum(b.intercept for b in self.blocks)

    @property
    def c0_slope(self) -> float:
        return sum(b.slope for b in self.blocks)

    @property
    def column_rates(self) -> tuple:
        return tuple(sum(b.coeffs[i] for b in self.blocks) for i in range(4))

    @property
    def c1_raw(self) -> float:
        return max(self.column_rates)

    @property
    def c1(self) -> float:
        return max(self.c1_raw, 0.0)

    def c0(self, t: float) -> float:
        return self.c0_intercept + self.c0_slope * t

    def bound(self, t: float) -> float:
        return _exp_bound(self.c0(t), self.c1, t)

    def max_finite_time(self, t_hi: float) -> float:
        return _largest_finite_time(self.bound, t_hi)

    def block(self, label: str) -> GronwallBlock:
        return next(b for b in self.blocks if b.label == label)


def gronwall_constants_4f(
    p: Pdv4Params, s: Optional[State4] = None, convexity: str = "weighted"
) -> Gronwall4:
    """Per-block constants of the 4-factor moment bound.

    ``convexity="weighted"`` bounds ``R1**2 <= (1-theta1) R1_0**2 + theta1 R1_1**2``
    and uses ``R2 = (1-theta2) R2_0 + theta2 R2_1`` exactly; ``"unit"`` drops the
    weights (``R1**2 <= R1_0**2 + R1_1**2``, ``R2 <= R2_0 + R2_1``).  Both are
    valid; the weighted form collapses to the 2-factor constants when
    ``theta`` is 0 or 1.
    """
    if s is None:
        s = default_initial_state(p)
    if convexity == "weighted":
        a1 = (1.0 - p.theta1, p.theta1)
        a2 = (1.0 - p.theta2, p.theta2)
    elif convexity == "unit":
        a1 = a2 = (1.0, 1.0)
    else:
        raise ValueError(f"unknown convexity {convexity!r}")
    b0, b1, b2 = p.beta0, p.beta1, p.beta2
    blocks = []
    for j in (0, 1):
        lam = p.lambda1j[j]
        coeffs = [0.0] * 4
        for i in (0, 1):
            own = 2 * lam if i == j else 0.0
            coeffs[i] = 3 * lam**2 * b1**2 * a1[i] - own
            coeffs[2 + i] = 3 * lam**2 * b2**2 * a2[i]
        blocks.append(
            GronwallBlock(f"r1_{j}", s.r1j[j] ** 2, 3 * lam**2 * b0**2, tuple(coeffs))
        )
    for j in (0, 1):
        lam = p.lambda2j[j]
        coeffs = [0.0] * 4
        for i in (0, 1):
            own = 1.0 if i == j else 0.0
            coeffs[i] = lam * (3 * b1**2 * a1[i])
            coeffs[2 + i] = lam * (3 * b2**2 * a2[i] - own)
        blocks.append(GronwallBlock(f"r2_{j}", s.r2j[j], 3 * lam * b0**2, tuple(coeffs)))
    return Gronwall4(tuple(blocks))


@dataclass(frozen=True)
class PositivityVerdict:
    holds: bool
    lhs: float
    rhs: float
    sufficient: bool
    sigma0: Optional[float] = None
    text: str = ""


def positivity_condition(p, s=None, f: VolFunctional = GL_AFFINE_SQRT) -> PositivityVerdict:
    """Check ``lambda2 < 2 lambda1`` (2-factor) or its rate-averaged analogue.

    The 4-factor comparison is reported with ``sufficient=False``: it does not
    guarantee positive volatility there.
    """
    sigma0 = None if s is None else float(sigma_of_state(p, s, f))
    if isinstance(p, Pdv2Params):
        lhs, rhs = p.lambda2, 2 * p.lambda1
        ok = lhs < rhs
        holds = ok and (sigma0 is None or sigma0 > 0)
        text = f"{'holds' if ok else 'fails'} ({lhs:g} {'<' if ok else '>='} {rhs:g})"
        if sigma0 is not None and sigma0 <= 0:
            text += f"; sigma0 = {sigma0:g} is not positive"
        return PositivityVerdict(holds, lhs, rhs, True, sigma0, text)
    lam1_bar, lam2_bar, _, _ = effective_rates(p)
    lhs, rhs = lam2_bar, 2 * lam1_bar
    ok = lhs < rhs
    text = (
        f"lambda2_bar = {lhs:g} {'<' if ok else '>='} 2 lambda1_bar = {rhs:g}; "
        "not sufficient for positivity in the 4-factor model"
    )
    return PositivityVerdict(ok, lhs, rhs, False, sigma0, text)


@dataclass(frozen=True)
class TiltedBounds:
    """Constants of the affine bound ``E(sigma_{t ^ S_M}) <= K0 + K1 t`` under the tilted dynamics."""

    beta2_hat: float
    beta2_bar: float
    alpha: float
    A: float
    A_prime: float
    B_prime: float
    C_prime: float
    L: float
    K0: float
    K1: float

    def bound(self, t: float) -> float:
        return self.K0 + self.K1 * t


def tilted_bound_constants(
    p: Pdv2Params, s: Optional[State2] = None, beta2_hat: Optional[float] = None
) -> TiltedBounds:
    """Build the constants of the tilted-drift bound.

    ``beta2_hat`` defaults to half the critical value, ``-beta1 lambda1 / (2 lambda2)``,
    and ``beta2_bar = beta2**2 / (4 beta2_hat)`` is the smallest constant with
    ``beta2 sqrt(x) <= beta2_bar + beta2_hat x`` on ``x >= 0``.
    """
    if not isinstance(p, Pdv2Params):
        raise InapplicableConstruction("tilted bound constants exist for the 2-factor model only")
    if s is None:
        s = default_initial_state(p)
    b0, b1, b2 = p.beta0, p.beta1, p.beta2
    lam1, lam2 = p.lambda1, p.lambda2
    if b1 * lam1 >= 0:
        raise InapplicableConstruction(
            f"beta1 * lambda1 = {b1 * lam1:g} >= 0: no beta2_hat > 0 makes alpha negative"
        )
    if beta2_hat is None:
        beta2_hat = -b1 * lam1 / (2 * lam2) if lam2 > 0 else 1.0
    if beta2_hat <= 0:
        raise InapplicableConstruction("beta2_hat must be positive")
    alpha = b1 * lam1 + beta2_hat * lam2
    if alpha >= 0:
        raise InapplicableConstruction(f"beta2_hat={beta2_hat:g} too large: alpha={alpha:g} >= 0")
    beta2_bar = b2**2 / (4 * beta2_hat)
    A = alpha * b2**2 - lam2 * beta2_hat
    den = lam2 * beta2_hat - alpha * b2**2
    if b2 == 0:
        extra_c = extra_b = extra_a = 0.0
    else:
        extra_c = alpha**2 * b0**2 * b2**2 / den
        extra_b = 2 * alpha**2 * b2**2 * b0 * b1 / den
        extra_a = alpha**2 * b1**2 * b2**2 / den
    C_prime = alpha * b0**2 + extra_c
    B_prime = 2 * alpha * b0 * b1 - lam1 * b1 + extra_b
    A_prime = alpha * b1**2 + extra_a
    L = C_prime - B_prime**2 / (4 * A_prime)
    K0 = b0 + beta2_bar + b1 * s.r1 + beta2_hat * s.r2
    out = TiltedBounds(beta2_hat, beta2_bar, alpha, A, A_prime, B_prime, C_prime, L, K0, abs(L))
    # A may vanish only when beta2 = 0 and lambda2 = 0, where the sqrt term is absent
    if not (alpha < 0 and A_prime < 0 and (A < 0 or (b2 == 0 and lam2 == 0))):
        raise InapplicableConstruction(f"sign conditions failed: {out}")
    return out


@dataclass(frozen=True)
class CounterexampleSpec:
    """A 4-factor instance with positive initial volatility and negative initial drift."""

    params: Pdv4Params
    state: State4
    r1_mixed: float
    r1_bar: float
    r2_mixed: float
    r2_bar: float
    sigma0: float
    drift: float
    drift_at_zero_beta0: float


def sigma_drift_4f(p: Pdv4Params, s: State4, sigma: Optional[float] = None) -> float:
    """Drift of volatility in the 4-factor model at state ``s``."""
    lam1_bar, lam2_bar, r1_bar, r2_bar = effective_rates(p, s)
    _, r2 = s.mixed(p)
    if sigma is None:
        sigma = float(sigma_of_state(p, s))
    return -p.beta1 * lam1_bar * r1_bar + 0.5 * lam2_bar * p.beta2 * (sigma**2 - r2_bar) / math.sqrt(r2)


def counterexample_4f(
    template: Pdv4Params,
    beta0: float = 0.001,
    r1_neg: float = -1.0,
    r1_target: float = 0.25,
) -> CounterexampleSpec:
    """Initial data with ``sigma0 = beta0 > 0`` whose volatility drifts downward at once.

    The faster return component starts at ``r1_neg < 0`` and the slower one is
    solved so that the plain mix equals ``r1_target > 0``; the rate-weighted
    mix is then negative whenever the rate gap is large enough (otherwise
    ``r1_neg`` is scaled up until it is).  With ``beta1 = -1`` and the
    template's ``beta2``, both variance components are set so that
    ``beta1 R1 + beta2 sqrt(R2) = 0``.
    """
    th = template.theta1
    lam = template.lambda1j
    if not 0 < th < 1:
        raise InfeasibleTemplate(f"theta1={th} must lie strictly inside (0, 1)")
    if lam[0] == lam[1]:
        raise InfeasibleTemplate("lambda1j rates coincide: both mixes share a sign")
    if template.beta2 <= 0:
        raise InfeasibleTemplate("beta2 must be positive to cancel the return factor")
    if not (beta0 > 0 and r1_neg < 0 and r1_target > 0):
        raise InfeasibleTemplate("need beta0 > 0, r1_neg < 0 and r1_target > 0")
    w = (1.0 - th, th)
    fast = 0 if lam[0] > lam[1] else 1
    slow = 1 - fast
    # weighted numerator as a function of the fast value a (slow value solves the plain mix)
    # n(a) = w_f a (lam_f - lam_s) + lam_s r1_target
    need = lam[slow] * r1_target / (w[fast] * (lam[fast] - lam[slow]))
    a = r1_neg if -r1_neg > need else -2.0 * need
    b = (r1_target - w[fast] * a) / w[slow]
    r1j = [0.0, 0.0]
    r1j[fast], r1j[slow] = a, b
    r2 = (r1_target / template.beta2) ** 2
    params = Pdv4Params(
        beta0=beta0,
        beta1=-1.0,
        beta2=template.beta2,
        lambda1j=template.lambda1j,
        lambda2j=template.lambda2j,
        theta1=template.theta1,
        theta2=template.theta2,
    )
    state = State4(tuple(r1j), (r2, r2))
    r1_mixed, r2_mixed = state.mixed(params)
    lam1_bar, lam2_bar, r1_bar, r2_bar = effective_rates(params, state)
    sigma0 = float(sigma_of_state(params, state))
    drift = sigma_drift_4f(params, state, sigma0)
    drift0 = -params.beta1 * lam1_bar * r1_bar - 0.5 * lam2_bar * params.beta2 * r2_bar / math.sqrt(r2_mixed)
    if not (r1_mixed > 0 and r1_bar < 0 and drift < 0):
        raise InfeasibleTemplate(
            f"construction failed: R1={r1_mixed:g}, R1_bar={r1_bar:g}, drift={drift:g}"
        )
    return CounterexampleSpec(
        params, state, r1_mixed, r1_bar, r2_mixed, r2_bar, sigma0, drift, drift0
    )


@dataclass
class GrowthReport:
    K1: float
    K2: float
    L0: Optional[float] = None
    L1: Optional[float] = None
    L2: Optional[float] = None
    L: Optional[float] = None
    samples: int = 0
    violations: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())


def growth_constants(
    f: VolFunctional, p: Params, samples: int = 200_000, seed: int = 0
) -> GrowthReport:
    """Growth constants of ``f`` plus a randomized check of the declared inequalities.

    Checked on ``x in [-1e3, 1e3]``, ``y in [0, 1e6]``:
    ``f**2 <= K1 (x**2 + y) + K2`` and, when the linear constants are known,
    ``f <= L0 + L1 x + L2 y`` and
    ``(L1 lam1 + L2 lam2) f**2 - lam1 L1 x - lam2 L2 y <= L`` (2-factor only).
    Violations are counted, never raised.
    """
    if f.kind == "gl-affine-sqrt":
        K1 = 3 * max(p.beta1**2, p.beta2**2)
        K2 = 3 * p.beta0**2
        L0 = L1 = L2 = L = None
        if isinstance(p, Pdv2Params):
            try:
                tb = tilted_bound_constants(p, State2(0.0, 1.0))
            except InapplicableConstruction:
                pass
            else:
                L0, L1, L2, L = p.beta0 + tb.beta2_bar, p.beta1, tb.beta2_hat, tb.L
    else:
        K1, K2, L0, L1, L2, L = f.K1, f.K2, f.L0, f.L1, f.L2, f.L
    rep = GrowthReport(K1, K2, L0, L1, L2, L, samples=samples)

    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(-1e3, 1e3, samples), [-1e3, 0.0, 1e3]])
    # log-spread y so that small values are sampled as densely as large ones
    y = np.concatenate([10.0 ** rng.uniform(-12, 6, samples), [0.0, 1e6, 1e6]])
    val = np.asarray(f.evaluate(p, x, y), dtype=float)

    def count(lhs, rhs):
        slack = 1e-12 * (np.abs(lhs) + np.abs(rhs) + 1.0)
        return int(np.count_nonzero(lhs > rhs + slack))

    rep.violations["quadratic_growth"] = count(val**2, K1 * (x**2 + y) + K2)
    if None not in (L0, L1, L2):
        rep.violations["linear_majorant"] = count(val, L0 + L1 * x + L2 * y)
        if L is not None and isinstance(p, Pdv2Params):
            lam1, lam2 = p.lambda1, p.lambda2
            lhs = (L1 * lam1 + L2 * lam2) * val**2 - lam1 * L1 * x - lam2 * L2 * y
            rep.violations["tilted_drift"] = count(lhs, np.full_like(lhs, L))
    return rep
