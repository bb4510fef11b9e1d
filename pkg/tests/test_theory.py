import math

import numpy as np
import pytest

from pdvkit.model import (
    GL_AFFINE_SQRT,
    REFERENCE_2F,
    REFERENCE_4F,
    Pdv2Params,
    Pdv4Params,
    State2,
    State4,
    VolFunctional,
    default_initial_state,
)
from pdvkit.theory import (
    InapplicableConstruction,
    InfeasibleTemplate,
    counterexample_4f,
    gronwall_constants_2f,
    gronwall_constants_4f,
    growth_constants,
    positivity_condition,
    sigma_drift_4f,
    tilted_bound_constants,
)


def test_gronwall_2f_ref_2f():
    s = State2(0.3, 0.05)
    g = gronwall_constants_2f(REFERENCE_2F, s)
    assert g.c1_1 == pytest.approx(0.09)
    assert g.c1_2 == pytest.approx(3 * 62**2 * 0.08**2)
    assert g.c1_3 == pytest.approx(2883, rel=1e-12)
    assert g.c2_1 == 0.05
    assert g.c2_2 == pytest.approx(3 * 40 * 0.0064)
    assert g.c2_3 == pytest.approx(0.768, rel=1e-12)
    assert g.c3 == pytest.approx(2883.768, rel=1e-12)
    t = 0.001
    assert g.bound(t) == pytest.approx((0.14 + (73.8048 + 0.768) * t) * math.exp(2.883768), rel=1e-12)


def test_gronwall_2f_picks_other_branch():
    # 3 lam1^2 beta1^2 - 2 lam1 wins when beta1 is large
    p = Pdv2Params(0.0, -1.0, 0.1, 10.0, 5.0)
    g = gronwall_constants_2f(p, State2(0.0, 1.0))
    assert g.c1_3 == pytest.approx(300 - 20)
    assert g.c2_3 == pytest.approx(5 * max(3.0, 0.03 - 1))


def test_gronwall_bound_overflow():
    g = gronwall_constants_2f(REFERENCE_2F, default_initial_state(REFERENCE_2F))
    assert math.isinf(g.bound(1.0))
    t_max = g.max_finite_time(1.0)
    assert math.isfinite(g.bound(t_max))
    assert t_max == pytest.approx(709.78 / 2883.768, rel=1e-2)


def test_gronwall_2f_constant_case():
    p = Pdv2Params(0.0, 0.0, 0.0, 5.0, 5.0)
    g = gronwall_constants_2f(p, State2(0.2, 0.3))
    # zero coefficients: bound at t=0 equals the initial moment
    assert g.bound(0.0) == pytest.approx(0.04 + 0.3)


@pytest.mark.parametrize("theta, comp", [((0.0, 0.0), (0, 0)), ((1.0, 1.0), (1, 1))])
def test_gronwall_4f_reduces_to_2f(theta, comp):
    p4 = Pdv4Params(0.04, -0.13, 0.65, (55.0, 10.0), (20.0, 3.0), *theta)
    s4 = State4((0.1, -0.2), (0.02, 0.03))
    g4 = gronwall_constants_4f(p4, s4)
    i, j = comp
    p2 = Pdv2Params(0.04, -0.13, 0.65, p4.lambda1j[i], p4.lambda2j[j])
    g2 = gronwall_constants_2f(p2, State2(s4.r1j[i], s4.r2j[j]))
    b1 = g4.block(f"r1_{i}")
    b2 = g4.block(f"r2_{j}")
    assert b1.intercept == g2.c1_1 and b1.slope == pytest.approx(g2.c1_2)
    assert b2.intercept == g2.c2_1 and b2.slope == pytest.approx(g2.c2_2)
    assert b1.coeffs[i] == pytest.approx(3 * p2.lambda1**2 * 0.13**2 - 2 * p2.lambda1)
    assert b1.coeffs[2 + j] == pytest.approx(3 * p2.lambda1**2 * 0.65**2)
    assert max(b1.coeffs) == pytest.approx(g2.c1_3)
    assert max(b2.coeffs) == pytest.approx(g2.c2_3)


def test_gronwall_4f_ref_4f():
    s = default_initial_state(REFERENCE_4F)
    g = gronwall_constants_4f(REFERENCE_4F, s)
    r2 = (0.04 / 0.35) ** 2
    assert g.c0_intercept == pytest.approx(2 * r2)
    assert g.c0_slope == pytest.approx(3 * 0.04**2 * (55**2 + 10**2 + 20 + 3))
    # column of R2_0: lam1j^2 terms weighted by 1 - theta2 plus the R2 blocks
    col = 3 * 0.65**2 * 0.5 * (55**2 + 10**2) + 20 * (3 * 0.65**2 * 0.5 - 1) + 3 * (3 * 0.65**2 * 0.5)
    assert g.column_rates[2] == pytest.approx(col)
    assert g.c1 == pytest.approx(max(g.column_rates))
    unit = gronwall_constants_4f(REFERENCE_4F, s, convexity="unit")
    assert unit.c1 >= g.c1


def test_positivity_condition_texts():
    v = positivity_condition(REFERENCE_2F, default_initial_state(REFERENCE_2F))
    assert v.holds and v.sufficient and v.text == "holds (40 < 124)"
    assert v.sigma0 == pytest.approx(0.16)
    bad = positivity_condition(Pdv2Params(0.1, -0.1, 0.5, 10.0, 30.0))
    assert not bad.holds and bad.text.startswith("fails")
    v4 = positivity_condition(REFERENCE_4F)
    assert v4.holds and not v4.sufficient and "not sufficient" in v4.text
    assert (v4.lhs, v4.rhs) == (11.5, 87.5)


def test_tilted_constants_ref_2f():
    s = default_initial_state(REFERENCE_2F)
    tb = tilted_bound_constants(REFERENCE_2F, s)
    assert tb.beta2_hat == pytest.approx(0.062, rel=1e-12)
    assert tb.beta2_bar == pytest.approx(0.25 / (4 * 0.062), rel=1e-12)
    assert tb.alpha == pytest.approx(-2.48, rel=1e-12)
    assert tb.A == pytest.approx(-3.1, rel=1e-12)
    assert tb.A_prime == pytest.approx(-0.0126976, rel=1e-12)
    den = 3.1
    c_prime = -2.48 * 0.0064 + 2.48**2 * 0.0064 * 0.25 / den
    b_prime = 2 * -2.48 * 0.08 * -0.08 - 62 * -0.08 + 2 * 2.48**2 * 0.25 * 0.08 * -0.08 / den
    assert tb.C_prime == pytest.approx(c_prime, rel=1e-12)
    assert tb.B_prime == pytest.approx(b_prime, rel=1e-12)
    assert tb.L == pytest.approx(c_prime - b_prime**2 / (4 * -0.0126976), rel=1e-12)
    assert tb.K0 == pytest.approx(0.08 + 0.25 / 0.248 + 0.062 * 0.0256, rel=1e-12)
    assert tb.K1 == abs(tb.L)
    # initial-point majorization
    assert 0.16 <= tb.K0


def test_tilted_majorization_dense_grid():
    tb = tilted_bound_constants(REFERENCE_2F)
    x = np.linspace(0, 1e6, 2_000_001)
    assert np.all(0.5 * np.sqrt(x) <= tb.beta2_bar + tb.beta2_hat * x + 1e-12)
    # equality at the tangent point x = (beta2 / (2 beta2_hat))^2
    x0 = (0.5 / (2 * tb.beta2_hat)) ** 2
    assert 0.5 * math.sqrt(x0) == pytest.approx(tb.beta2_bar + tb.beta2_hat * x0, rel=1e-12)


def test_tilted_inapplicable():
    with pytest.raises(InapplicableConstruction):
        tilted_bound_constants(Pdv2Params(0.08, 0.0, 0.5, 62.0, 40.0))
    with pytest.raises(InapplicableConstruction):
        tilted_bound_constants(REFERENCE_2F, beta2_hat=10.0)
    with pytest.raises(InapplicableConstruction):
        tilted_bound_constants(REFERENCE_4F)


def test_counterexample_ref_4f():
    ce = counterexample_4f(REFERENCE_4F)
    p, s = ce.params, ce.state
    assert (p.beta0, p.beta1, p.beta2) == (0.001, -1.0, 0.65)
    assert s.r1j == (-1.0, 4.0)
    assert ce.r1_mixed == pytest.approx(0.25)
    assert ce.r1_bar == pytest.approx((0.75 * 55 * -1 + 0.25 * 10 * 4) / 43.75)
    assert s.r2j[0] == s.r2j[1] == pytest.approx((0.25 / 0.65) ** 2)
    assert ce.sigma0 == pytest.approx(0.001, rel=1e-12)
    # drift = lam1_bar R1_bar + beta2 lam2_bar (sigma^2 - R2) / (2 sqrt R2)
    r2 = (0.25 / 0.65) ** 2
    expect = -31.25 + 0.65 * 11.5 * (1e-6 - r2) / (2 * math.sqrt(r2))
    assert ce.drift == pytest.approx(expect, rel=1e-12)
    assert ce.drift_at_zero_beta0 == pytest.approx(-32.6875, rel=1e-12)
    assert sigma_drift_4f(p, s) == pytest.approx(expect, rel=1e-12)


def test_counterexample_scales_fast_component():
    # small rate gap: r1_neg = -1 is not enough, the construction enlarges it
    t = Pdv4Params(0.04, -0.13, 0.65, (12.0, 10.0), (20.0, 3.0), 0.25, 0.5)
    ce = counterexample_4f(t)
    assert ce.state.r1j[0] < -1.0
    assert ce.r1_bar < 0 < ce.r1_mixed and ce.drift < 0


@pytest.mark.parametrize(
    "template",
    [
        Pdv4Params(0.04, -0.13, 0.65, (55.0, 10.0), (20.0, 3.0), 0.0, 0.5),
        Pdv4Params(0.04, -0.13, 0.65, (55.0, 10.0), (20.0, 3.0), 1.0, 0.5),
        Pdv4Params(0.04, -0.13, 0.65, (10.0, 10.0), (20.0, 3.0), 0.25, 0.5),
        Pdv4Params(0.04, -0.13, 0.0, (55.0, 10.0), (20.0, 3.0), 0.25, 0.5),
    ],
)
def test_counterexample_infeasible(template):
    with pytest.raises(InfeasibleTemplate):
        counterexample_4f(template)


def test_growth_constants_gl():
    rep = growth_constants(GL_AFFINE_SQRT, REFERENCE_2F, samples=50_000)
    assert rep.K1 == pytest.approx(3 * 0.25)
    assert rep.K2 == pytest.approx(3 * 0.0064)
    assert rep.L1 == -0.08 and rep.L2 == pytest.approx(0.062)
    assert rep.ok, rep.violations
    rep4 = growth_constants(GL_AFFINE_SQRT, REFERENCE_4F, samples=50_000)
    assert rep4.ok and rep4.L is None


def test_growth_constants_flags_wrong_declaration():
    f = VolFunctional("user-supplied", func=lambda x, y: 1.0 + x, K1=0.1, K2=0.1)
    rep = growth_constants(f, REFERENCE_2F, samples=10_000)
    assert rep.violations["quadratic_growth"] > 0 and not rep.ok
