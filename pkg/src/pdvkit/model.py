"""Model definitions for the PDV family: parameter sets and the volatility functional.

Two model families are supported:

* the 2-factor model, with one return factor ``R1`` (an Ornstein-Uhlenbeck
  process driven by ``sigma dW``) and one variance factor ``R2`` (an
  exponential moving average of ``sigma**2``);
* the 4-factor model, where ``R1`` and ``R2`` are convex mixtures of a fast
  and a slow copy of each factor.

Volatility is ``sigma = beta0 + beta1 * R1 + beta2 * sqrt(R2)`` unless a
user-supplied functional is plugged in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

R2_CLAMP_TOL = 1e-12

SCHEMES = ("exponential", "euler")
DRIVERS = ("gaussian", "zero")
SYSTEMS = ("original", "tilted")


class ModelError(ValueError):
    """Base class for model-level errors."""


class DomainError(ModelError):
    """A variance factor went negative beyond the clamp tolerance."""


class DegenerateRateError(ModelError):
    """An effective rate vanished where a division by it was required."""


class NoDefaultStateError(ModelError):
    """The zero-noise fixed point does not exist (beta2 >= 1)."""


class ConfigError(ModelError):
    """Invalid simulation configuration."""


@dataclass(frozen=True)
class Pdv2Params:
    beta0: float
    beta1: float
    beta2: float
    lambda1: float
    lambda2: float

    @property
    def n_factors(self) -> int:
        return 2


@dataclass(frozen=True)
class Pdv4Params:
    beta0: float
    beta1: float
    beta2: float
    lambda1j: tuple[float, float]
    lambda2j: tuple[float, float]
    theta1: float
    theta2: float

    def __post_init__(self):
        object.__setattr__(self, "lambda1j", tuple(float(v) for v in self.lambda1j))
        object.__setattr__(self, "lambda2j", tuple(float(v) for v in self.lambda2j))

    @property
    def n_factors(self) -> int:
        return 4


Params = Union[Pdv2Params, Pdv4Params]


@dataclass(frozen=True)
class State2:
    r1: float
    r2: float


@dataclass(frozen=True)
class State4:
    r1j: tuple
    r2j: tuple

    def mixed(self, p: Pdv4Params):
        """Return the convex mixtures ``(R1, R2)``."""
        r1 = _mix((1.0 - p.theta1, p.theta1), self.r1j)
        r2 = _mix((1.0 - p.theta2, p.theta2), self.r2j)
        return r1, r2


State = Union[State2, State4]


def _mix(weights, values):
    # Left-to-right accumulation so that weights (1, 0) reproduce values[0]
    # bit for bit.
    acc = weights[0] * values[0]
    for w, v in zip(weights[1:], values[1:]):
        acc = acc + w * v
    return acc


@dataclass(frozen=True)
class VolFunctional:
    """Maps ``(R1, R2)`` to volatility.

    ``kind="gl-affine-sqrt"`` is the affine-in-``sqrt(R2)`` functional and
    derives its growth constants from the parameters.  A user-supplied
    functional passes ``func(r1, r2)`` (vectorized over numpy arrays) and must
    declare ``K1`` and ``K2`` such that ``f(x, y)**2 <= K1 * (x**2 + y) + K2``.
    ``L0, L1, L2, L`` are the optional constants of the linear majorization
    used by the measure-change argument.
    """

    kind: str = "gl-affine-sqrt"
    func: Optional[Callable] = field(default=None, compare=False)
    K1: Optional[float] = None
    K2: Optional[float] = None
    L0: Optional[float] = None
    L1: Optional[float] = None
    L2: Optional[float] = None
    L: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        if self.kind == "gl-affine-sqrt":
            return
        if self.kind != "user-supplied":
            raise ModelError(f"unknown functional kind {self.kind!r}")
        if self.func is None:
            raise ModelError("user-supplied functional requires func")
        if self.K1 is None or self.K2 is None:
            raise ModelError("user-supplied functional must declare K1 and K2")

    def evaluate(self, p: Params, r1, r2):
        r2c = clamp_r2(r2)
        if self.kind == "gl-affine-sqrt":
            return p.beta0 + p.beta1 * r1 + p.beta2 * np.sqrt(r2c)
        return self.func(r1, r2c)


GL_AFFINE_SQRT = VolFunctional()


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``dt=None`` resolves to ``min(1e-3, 0.1 / max rate)`` with the step then
    shrunk so that it divides the horizon.  ``stop_floor_C`` is the level
    below which the price-process volatility is frozen, ``explosion_ladder``
    the thresholds ``M`` for the first-hit monitors.
    """

    dt: Optional[float] = None
    horizon: float = 1.0
    scheme: str = "exponential"
    driver: str = "gaussian"
    seed: int = 0
    stop_floor_C: float = 0.0
    explosion_ladder: tuple = (5.0, 10.0, 20.0)
    paths: int = 1
    system: str = "original"
    x0: float = 1.0
    antithetic: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "explosion_ladder", tuple(float(m) for m in self.explosion_ladder)
        )

    def validate(self) -> None:
        if self.dt is not None and not (math.isfinite(self.dt) and self.dt > 0):
            raise ConfigError(f"dt must be a positive finite number (got {self.dt})")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigError(f"horizon must be positive (got {self.horizon})")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES} (got {self.scheme!r})")
        if self.driver not in DRIVERS:
            raise ConfigError(f"driver must be one of {DRIVERS} (got {self.driver!r})")
        if self.system not in SYSTEMS:
            raise ConfigError(f"system must be one of {SYSTEMS} (got {self.system!r})")
        if not (isinstance(self.paths, (int, np.integer)) and self.paths >= 1):
            raise ConfigError(f"paths must be an integer >= 1 (got {self.paths})")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError(f"seed must fit in 64 bits (got {self.seed})")
        if not (math.isfinite(self.stop_floor_C) and self.stop_floor_C >= 0):
            raise ConfigError(f"stop_floor_C must be >= 0 (got {self.stop_floor_C})")
        if not (math.isfinite(self.x0) and self.x0 > 0):
            raise ConfigError(f"x0 must be positive (got {self.x0})")
        ladder = self.explosion_ladder
        if any(not (math.isfinite(m) and m > 0) for m in ladder):
            raise ConfigError("explosion_ladder entries must be positive and finite")
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("explosion_ladder must be strictly increasing")

    def grid(self, p: Params) -> tuple[float, int]:
        """Return ``(dt, n_steps)`` with ``n_steps * dt == horizon``."""
        if self.dt is None:
            dt0 = min(1e-3, 0.1 / max(max_rate(p), 1e-300))
            n = max(1, math.ceil(self.horizon / dt0 - 1e-9))
            return self.horizon / n, n
        n = round(self.horizon / self.dt)
        if n < 1 or abs(n * self.dt - self.horizon) > 1e-9 * self.horizon:
            raise ConfigError(
                f"horizon {self.horizon} is not a multiple of dt {self.dt}"
            )
        return self.dt, n


def max_rate(p: Params) -> float:
    if isinstance(p, Pdv2Params):
        return max(p.lambda1, p.lambda2)
    return max(p.lambda1j + p.lambda2j)


def validate_params(p: Params) -> list[str]:
    """Return the list of violated constraints; empty means the parameters are ok.

    Never raises: malformed values (NaN, wrong arity) are reported as
    violations.
    """
    problems = []

    def check(name, value, ok, rule):
        try:
            good = math.isfinite(value) and ok(value)
        except TypeError:
            good = False
        if not good:
            problems.append(f"{name}: must satisfy {rule} (got {value!r})")

    check("beta0", p.beta0, lambda v: v >= 0, ">= 0")
    check("beta1", p.beta1, lambda v: v <= 0, "<= 0")
    check("beta2", p.beta2, lambda v: v >= 0, ">= 0")
    if isinstance(p, Pdv2Params):
        check("lambda1", p.lambda1, lambda v: v >= 0, ">= 0")
        check("lambda2", p.lambda2, lambda v: v >= 0, ">= 0")
    else:
        for name in ("lambda1j", "lambda2j"):
            values = getattr(p, name)
            if len(values) != 2:
                problems.append(f"{name}: must have two entries (got {len(values)})")
                continue
            for j, v in enumerate(values):
                check(f"{name}[{j}]", v, lambda v: v >= 0, ">= 0")
        check("theta1", p.theta1, lambda v: 0 <= v <= 1, "0 <= theta1 <= 1")
        check("theta2", p.theta2, lambda v: 0 <= v <= 1, "0 <= theta2 <= 1")
    return problems


def clamp_r2(r2):
    """``max(r2, 0)``, raising :class:`DomainError` below ``-1e-12``."""
    arr = np.asarray(r2)
    if np.any(arr < -R2_CLAMP_TOL):
        raise DomainError(f"variance factor went negative: min {np.nanmin(arr)!r}")
    if arr.ndim == 0:
        return max(float(arr), 0.0) if math.isfinite(float(arr)) else float(arr)
    return np.maximum(arr, 0.0)


def mixed_factors(p: Params, s: State):
    if isinstance(s, State2):
        return s.r1, s.r2
    if not isinstance(p, Pdv4Params):
        raise ModelError("4-factor state requires 4-factor parameters")
    return s.mixed(p)


def sigma_of_state(p: Params, s: State, f: VolFunctional = GL_AFFINE_SQRT):
    r1, r2 = mixed_factors(p, s)
    return f.evaluate(p, r1, r2)


def effective_rates(p: Pdv4Params, s: Optional[State4] = None):
    """Rate-weighted mixes ``(lam1_bar, lam2_bar, R1_bar, R2_bar)``.

    ``R*_bar`` are ``None`` when no state is given.
    """
    out = []
    for i, theta in ((1, p.theta1), (2, p.theta2)):
        lam = getattr(p, f"lambda{i}j")
        lam_bar = (1.0 - theta) * lam[0] + theta * lam[1]
        out.append(lam_bar)
    if s is None:
        return out[0], out[1], None, None
    bars = []
    for i, theta, lam_bar, r in (
        (1, p.theta1, out[0], s.r1j),
        (2, p.theta2, out[1], s.r2j),
    ):
        lam = getattr(p, f"lambda{i}j")
        num = (1.0 - theta) * lam[0] * r[0] + theta * lam[1] * r[1]
        if lam_bar == 0:
            if num != 0:
                raise DegenerateRateError(f"effective rate lambda{i}_bar is zero")
            bars.append(_mix((1.0 - theta, theta), r))
        else:
            bars.append(num / lam_bar)
    return out[0], out[1], bars[0], bars[1]


def default_initial_state(p: Params) -> State:
    """Zero-noise fixed point: ``R1 = 0`` and ``R2 = (beta0 / (1 - beta2))**2``."""
    if not p.beta2 < 1:
        raise NoDefaultStateError(
            f"beta2={p.beta2} >= 1 has no fixed point; supply an explicit state"
        )
    r2 = (p.beta0 / (1.0 - p.beta2)) ** 2
    if isinstance(p, Pdv2Params):
        return State2(0.0, r2)
    return State4((0.0, 0.0), (r2, r2))


@dataclass(frozen=True)
class Layout:
    """Per-component rates and mixing weights; the 2-factor model has one component."""

    lam1: tuple
    lam2: tuple
    w1: tuple
    w2: tuple

    @property
    def k(self) -> int:
        return len(self.lam1)


def layout(p: Params) -> Layout:
    if isinstance(p, Pdv2Params):
        return Layout((float(p.lambda1),), (float(p.lambda2),), (1.0,), (1.0,))
    return Layout(
        p.lambda1j,
        p.lambda2j,
        (1.0 - p.theta1, p.theta1),
        (1.0 - p.theta2, p.theta2),
    )


def state_arrays(s: State) -> tuple[np.ndarray, np.ndarray]:
    """Stack a state into ``(k, ...)`` arrays."""
    if isinstance(s, State2):
        return np.asarray([s.r1], dtype=float), np.asarray([s.r2], dtype=float)
    return np.asarray(s.r1j, dtype=float), np.asarray(s.r2j, dtype=float)


def state_from_arrays(r1: np.ndarray, r2: np.ndarray, like: State) -> State:
    if isinstance(like, State2):
        return State2(_unwrap(r1[0]), _unwrap(r2[0]))
    return State4(tuple(_unwrap(v) for v in r1), tuple(_unwrap(v) for v in r2))


def _unwrap(v):
    return float(v) if np.ndim(v) == 0 else v


def params_from_dict(d: dict) -> Params:
    if "lambda1j" in d:
        return Pdv4Params(**d)
    return Pdv2Params(**d)


def state_for(p: Params, r1: Sequence[float], r2: Sequence[float]) -> State:
    if isinstance(p, Pdv2Params):
        return State2(float(r1[0]), float(r2[0]))
    return State4(tuple(map(float, r1)), tuple(map(float, r2)))


# calibrated parameter sets used as defaults in tests and examples
REFERENCE_2F = Pdv2Params(beta0=0.08, beta1=-0.08, beta2=0.5, lambda1=62.0, lambda2=40.0)
REFERENCE_4F = Pdv4Params(
    beta0=0.04,
    beta1=-0.13,
    beta2=0.65,
    lambda1j=(55.0, 10.0),
    lambda2j=(20.0, 3.0),
    theta1=0.25,
    theta2=0.5,
)
