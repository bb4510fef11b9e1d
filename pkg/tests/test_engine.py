import math

import numpy as np
import pytest

from pdvkit.engine import (
    comparison_tolerance,
    simulate_block,
    simulate_path,
    step_euler,
    step_exponential,
    x_step,
    y_step,
)
from pdvkit.mc import run_ensemble
from pdvkit.model import (
    GL_AFFINE_SQRT,
    REFERENCE_2F,
    REFERENCE_4F,
    ConfigError,
    Pdv2Params,
    SimConfig,
    State2,
    State4,
)
from pdvkit.noise import NoiseStream
from pdvkit.theory import counterexample_4f

F = GL_AFFINE_SQRT


def _sigma(p, r1, r2):
    return p.beta0 + p.beta1 * r1 + p.beta2 * math.sqrt(r2)


def test_exponential_step_by_hand():
    s = State2(0.1, 0.04)
    sig = _sigma(REFERENCE_2F, 0.1, 0.04)
    dW, dt = 0.01, 1e-3
    out = step_exponential(REFERENCE_2F, s, sig, dW, dt)
    assert out.r1 == pytest.approx(0.1 * math.exp(-0.062) + 62 * sig * dW, rel=1e-14)
    assert out.r2 == pytest.approx(0.04 * math.exp(-0.04) + sig**2 * (1 - math.exp(-0.04)), rel=1e-14)


def test_euler_step_by_hand():
    s = State2(0.1, 0.04)
    sig = _sigma(REFERENCE_2F, 0.1, 0.04)
    out = step_euler(REFERENCE_2F, s, sig, 0.01, 1e-3)
    assert out.r1 == pytest.approx(0.1 + 62 * sig * 0.01 - 62e-3 * 0.1, rel=1e-14)
    assert out.r2 == pytest.approx(0.04 + 40e-3 * (sig**2 - 0.04), rel=1e-14)


def test_tilted_steps_add_sigma_squared_drift():
    s = State2(0.1, 0.04)
    sig = 0.2
    orig = step_exponential(REFERENCE_2F, s, sig, 0.0, 1e-3)
    tilt = step_exponential(REFERENCE_2F, s, sig, 0.0, 1e-3, system="tilted")
    assert tilt.r1 - orig.r1 == pytest.approx(sig**2 * (1 - math.exp(-0.062)), rel=1e-12)
    assert tilt.r2 == orig.r2
    e_tilt = step_euler(REFERENCE_2F, s, sig, 0.0, 1e-3, system="tilted")
    assert e_tilt.r1 == pytest.approx(0.1 + 62e-3 * (sig**2 - 0.1), rel=1e-14)


def test_4f_step_componentwise():
    s = State4((0.1, -0.2), (0.02, 0.05))
    out = step_exponential(REFERENCE_4F, s, 0.15, 0.02, 1e-3)
    for j in range(2):
        l1, l2 = REFERENCE_4F.lambda1j[j], REFERENCE_4F.lambda2j[j]
        assert out.r1j[j] == pytest.approx(s.r1j[j] * math.exp(-l1 * 1e-3) + l1 * 0.15 * 0.02)
        assert out.r2j[j] == pytest.approx(s.r2j[j] * math.exp(-l2 * 1e-3) + 0.0225 * (1 - math.exp(-l2 * 1e-3)))


def test_exponential_step_keeps_r2_positive_for_huge_steps():
    out = step_exponential(REFERENCE_2F, State2(0.0, 1e-8), 0.0, 0.0, 10.0)
    assert out.r2 > 0


def test_step_vectorized_matches_scalar():
    r1 = np.array([0.1, -0.3])
    r2 = np.array([0.04, 0.01])
    sig = np.array([0.2, 0.1])
    dW = np.array([0.01, -0.02])
    vec = step_exponential(REFERENCE_2F, State2(r1, r2), sig, dW, 1e-3)
    for i in range(2):
        sc = step_exponential(REFERENCE_2F, State2(r1[i], r2[i]), sig[i], dW[i], 1e-3)
        assert vec.r1[i] == sc.r1 and vec.r2[i] == sc.r2


def test_y_and_x_steps():
    y = y_step(REFERENCE_2F, 0.16, 0.01, 1e-3)
    a = -0.08 * 62
    assert y == pytest.approx(0.16 * math.exp(a * 0.01 - 62e-3 - 0.5 * a * a * 1e-3), rel=1e-14)
    assert x_step(0.0, 1.3, 0.5, 1e-3) == 1.3
    assert x_step(0.2, 1.0, 0.01, 1e-3) == pytest.approx(math.exp(0.002 - 0.02e-3), rel=1e-14)


def _rk4(p, r1, r2, t_end, n):
    """Zero-noise ODE: dR1 = -lam1 R1, dR2 = lam2 (sigma^2 - R2)."""

    def rhs(x):
        s = _sigma(p, x[0], x[1])
        return np.array([-p.lambda1 * x[0], p.lambda2 * (s * s - x[1])])

    x = np.array([r1, r2])
    h = t_end / n
    for _ in range(n):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def test_zero_driver_matches_ode():
    s = State2(0.5, 0.09)
    cfg = SimConfig(dt=1e-5, horizon=0.05, driver="zero")
    rec = simulate_path(REFERENCE_2F, F, cfg, state=s)
    ref = _rk4(REFERENCE_2F, 0.5, 0.09, 0.05, 2000)
    assert rec.r1[-1, 0] == pytest.approx(ref[0], rel=1e-10)  # R1 decays exactly
    assert rec.r2[-1, 0] == pytest.approx(ref[1], rel=1e-3)
    # no noise: X = exp(-1/2 sum sigma^2 dt) over the left endpoints
    assert rec.x[-1] == pytest.approx(math.exp(-0.5 * 1e-5 * float(np.sum(rec.sigma[:-1] ** 2))), rel=1e-12)


def test_zero_driver_fixed_point_is_stationary():
    rec = simulate_path(REFERENCE_2F, F, SimConfig(dt=1e-3, horizon=0.1, driver="zero"))
    assert np.all(rec.r1 == 0.0)
    np.testing.assert_allclose(rec.r2[:, 0], 0.0256, rtol=1e-14)
    np.testing.assert_allclose(rec.sigma, 0.16, rtol=1e-14)


def test_y_deterministic_when_beta1_zero():
    p = Pdv2Params(0.08, 0.0, 0.5, 62.0, 40.0)
    rec = simulate_path(p, F, SimConfig(dt=1e-3, horizon=0.05, seed=3))
    np.testing.assert_allclose(rec.y, 0.16 * np.exp(-62 * rec.times), rtol=1e-12)
    assert np.all(rec.sigma >= rec.y)


def test_comparison_tolerance_formula():
    assert comparison_tolerance(REFERENCE_2F, 1e-4) == pytest.approx(10 * 1e-2 * 62 * 1.0)


def test_simulate_path_matches_ensemble_row():
    cfg = SimConfig(dt=1e-3, horizon=0.05, seed=5, paths=4)
    rec = simulate_path(REFERENCE_2F, F, cfg, NoiseStream(5, 2))
    block = simulate_block(REFERENCE_2F, F, cfg, [0, 1, 2, 3], record=True)
    np.testing.assert_array_equal(rec.sigma, block.trajectories["sigma"][:, 2])
    np.testing.assert_array_equal(rec.r1, block.trajectories["r1"][:, 2, :])
    one = run_ensemble(REFERENCE_2F, F, SimConfig(dt=1e-3, horizon=0.05, seed=5, paths=1, driver="zero"))
    z = simulate_path(REFERENCE_2F, F, SimConfig(dt=1e-3, horizon=0.05, driver="zero"))
    assert one.result.final_sigma[0] == z.sigma[-1]


def test_explosion_is_detected_and_path_truncated():
    # Euler with lam1 * dt = 200 multiplies R1 by -199 per step
    p = Pdv2Params(0.1, -0.1, 0.5, 2e5, 1.0)
    cfg = SimConfig(dt=1e-3, horizon=1.0, scheme="euler", driver="zero", explosion_ladder=(5, 10, 20))
    rec = simulate_path(p, F, cfg, state=State2(1.0, 0.04))
    assert rec.exploded
    assert np.isfinite(rec.r1).all() and np.isfinite(rec.sigma).all()
    assert rec.times[-1] == pytest.approx(rec.last_finite_time)
    assert len(rec.times) < 1001
    assert rec.factor_hits[0] == pytest.approx(1e-3)  # |R1| = 199 after one step
    assert all(np.isfinite(rec.sigma_hits))
    assert list(rec.sigma_hits) == sorted(rec.sigma_hits)


def test_ladder_hit_times():
    cfg = SimConfig(dt=1e-3, horizon=0.01, driver="zero", explosion_ladder=(0.1, 0.15, 0.2))
    rec = simulate_path(REFERENCE_2F, F, cfg)
    # constant sigma = 0.16: first two thresholds hit at t=0, the last never
    assert rec.sigma_hits[0] == 0.0 and rec.sigma_hits[1] == 0.0
    assert math.isinf(rec.sigma_hits[2])


def test_price_volatility_frozen_after_stop_time():
    ce = counterexample_4f(REFERENCE_4F)
    cfg = SimConfig(dt=1e-4, horizon=0.01, driver="gaussian", seed=1, stop_floor_C=0.0)
    rec = simulate_path(ce.params, F, cfg, state=ce.state)
    assert math.isfinite(rec.tau_C)
    k = int(round(rec.tau_C / 1e-4))
    assert rec.sigma[k] < 0 and np.all(rec.sigma[:k] >= 0)
    # nu = -C = 0 after the stop: X no longer moves
    assert np.all(rec.x[k:] == rec.x[k])


def test_observations_and_stop_level():
    cfg = SimConfig(dt=1e-3, horizon=0.05, seed=2, paths=8)
    res = simulate_block(REFERENCE_2F, F, cfg, range(8), observe_steps=[10, 50], stop_level=0.17, record=True)
    tr = res.trajectories
    np.testing.assert_array_equal(res.observed["sigma"][:, 1], tr["sigma"][50])
    np.testing.assert_array_equal(res.observed["r1"][:, 0, :], tr["r1"][10])
    np.testing.assert_array_equal(res.observed["sigma_runmin"][:, 1], tr["sigma"].min(axis=0))
    for i in range(8):
        path = tr["sigma"][:51, i]
        hit = np.nonzero(np.abs(path) >= 0.17)[0]
        expect = path[hit[0]] if len(hit) else path[-1]
        assert res.observed["sigma_stopped"][i, 1] == expect


def test_observation_outside_horizon():
    with pytest.raises(ConfigError):
        simulate_block(REFERENCE_2F, F, SimConfig(dt=1e-3, horizon=0.01), [0], observe_steps=[11])


def test_invalid_inputs_rejected():
    with pytest.raises(ConfigError):
        simulate_path(Pdv2Params(0.1, 0.1, 0.5, 1.0, 1.0), F, SimConfig(dt=1e-3, horizon=0.01))
    with pytest.raises(ConfigError):
        simulate_path(REFERENCE_2F, F, SimConfig(dt=1e-3, horizon=0.01), state=State2(0.0, 0.0))
