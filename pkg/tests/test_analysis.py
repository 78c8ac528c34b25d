import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from agestruct import (BracketError, EnvelopeError, NumericalError, find_equilibria,
                       net_reproduction_rate, solve_malthusian, upper_reproduction_rate,
                       weighted_reproduction_rate)
from agestruct.analysis import equilibrium_residual, write_equilibria_csv
from agestruct.functions import AgeFunction, SeparableRate
from agestruct.model import Fertility

from builders import (allee_dict, build, constant_rate_dict, early_dict, logistic_dict,
                      tent_dict, with_scale_for_r0)


def closed_form_R(b, m, P, a_dagger):
    return b * (1.0 - math.exp(-(m + P) * a_dagger)) / (m + P)


def test_constant_rates_give_closed_form_r0():
    spec = build(constant_rate_dict(b=1.0, m=1.0, a_dagger=50.0))
    assert abs(net_reproduction_rate(spec) - (1.0 - math.exp(-50.0))) <= 1e-6


def test_zero_fertility_gives_zero_r0_and_no_malthusian_root():
    d = tent_dict()
    d["beta"] = {"kind": "zero", "beta_plus": 0.0}
    spec = build(d)
    assert net_reproduction_rate(spec) == 0.0
    with pytest.raises(BracketError):
        solve_malthusian(spec)


def test_r0_is_linear_in_fertility():
    spec = build(logistic_dict())
    assert net_reproduction_rate(spec.with_fertility_scale(2.0)) == pytest.approx(
        2.0 * net_reproduction_rate(spec), rel=1e-13)


@pytest.mark.parametrize("make", [logistic_dict, allee_dict, early_dict])
def test_weighted_rate_at_origin_is_r0(make):
    spec = build(make())
    assert weighted_reproduction_rate(spec, 0.0, 0.0) == net_reproduction_rate(spec)


@pytest.mark.parametrize("P", [0.0, 0.3, 1.0, 4.5])
def test_weighted_rate_closed_form_for_constant_rates(P):
    spec = build(constant_rate_dict(b=2.0, m=1.0, a_dagger=50.0))
    expected = closed_form_R(2.0, 1.0, P, 50.0)
    # Simpson error bound h^4 / 180 * (m + P)^4 relative to the integral
    h = 50.0 / 2**14
    assert weighted_reproduction_rate(spec, P, 0.0) == pytest.approx(
        expected, rel=max(1e-12, 2 * h**4 / 180 * (1.0 + P) ** 4))


def test_weighted_rate_rejects_negative_sizes():
    with pytest.raises(ValueError):
        weighted_reproduction_rate(build(logistic_dict()), -1.0, 0.0)


@settings(max_examples=20, deadline=None)
@given(slope=st.floats(0.0, 3.0), Q=st.floats(0.0, 50.0))
def test_monotone_mortality_makes_rate_non_increasing_in_P(slope, Q):
    spec = build(logistic_dict(slope=slope))
    Ps = np.linspace(0.0, 20.0, 41)
    R = [weighted_reproduction_rate(spec, P, Q) for P in Ps]
    assert np.all(np.diff(R) <= 1e-14)


def test_upper_rate_with_constant_envelopes():
    spec = build(constant_rate_dict(b=2.0, m=1.0, a_dagger=50.0))
    val = upper_reproduction_rate(spec, AgeFunction.constant(1.0), AgeFunction.constant(2.0))
    assert val == pytest.approx(closed_form_R(2.0, 1.0, 0.0, 50.0), rel=1e-10)
    assert val == pytest.approx(net_reproduction_rate(spec), rel=1e-10)
    doubled = upper_reproduction_rate(spec, AgeFunction.constant(1.0),
                                      AgeFunction.constant(4.0))
    assert doubled == pytest.approx(2.0 * val, rel=1e-12)
    assert "extinction-guaranteed" not in spec.metadata.get("tags", [])


def test_upper_rate_below_one_tags_the_model():
    spec = build(constant_rate_dict(b=0.5, m=1.0, a_dagger=50.0))
    val = upper_reproduction_rate(spec, AgeFunction.constant(1.0), AgeFunction.constant(0.5))
    assert val < 1.0
    assert "extinction-guaranteed" in spec.metadata["tags"]


def test_upper_rate_refuses_violated_envelopes():
    spec = build(constant_rate_dict(b=2.0, m=1.0, a_dagger=50.0))
    with pytest.raises(EnvelopeError, match="mortality"):
        upper_reproduction_rate(spec, AgeFunction.constant(1.5), AgeFunction.constant(2.0))
    with pytest.raises(EnvelopeError, match="fertility") as info:
        upper_reproduction_rate(spec, AgeFunction.constant(1.0), AgeFunction.constant(1.0))
    assert info.value.witness is not None


def test_malthusian_root_is_zero_at_unit_r0():
    m, a_d = 1.0, 50.0
    b = m / (1.0 - math.exp(-m * a_d))
    spec = build(constant_rate_dict(b=b, m=m, a_dagger=a_d))
    assert abs(solve_malthusian(spec, tol=1e-12)) <= 1e-10


@pytest.mark.parametrize("b", [0.5, 1.5, 3.0])
def test_malthusian_root_matches_closed_form(b):
    m, a_d = 1.0, 50.0
    spec = build(constant_rate_dict(b=b, m=m, a_dagger=a_d))
    oracle = brentq(lambda lam: closed_form_R(b, m, lam, a_d) - 1.0, -m + 1e-6, 10.0,
                    xtol=1e-14)
    assert solve_malthusian(spec) == pytest.approx(oracle, abs=1e-9)


def _narrow_band_spec(target_r0, half_width):
    d = tent_dict(lo=1.0 - half_width, peak=1.0, hi=1.0 + half_width)
    d["mu0"] = {"kind": "rational-blowup", "params": {"k": 1e-3}}
    spec = build(d)
    return spec.with_fertility_scale(target_r0 / net_reproduction_rate(spec))


def _lotka_oracle(spec, lo, hi):
    beta = lambda a: float(spec.fertility(a, 0.0))  # noqa: E731
    surv = lambda a: float(spec.baseline.survival(a))  # noqa: E731

    def lotka(lam):
        val, _ = quad(lambda a: beta(a) * surv(a) * math.exp(-lam * a), lo, hi,
                      points=[1.0], epsabs=1e-14, epsrel=1e-13)
        return val - 1.0

    return brentq(lotka, 0.0, 2.0, xtol=1e-13)


def test_narrow_band_at_age_one_doubles_per_generation():
    # knots on even analysis nodes (1/128 is 32 nodes at a_dagger = 4)
    w = 1.0 / 128
    spec = _narrow_band_spec(2.0, w)
    assert net_reproduction_rate(spec) == pytest.approx(2.0, rel=1e-12)
    lam = solve_malthusian(spec)
    assert lam == pytest.approx(_lotka_oracle(spec, 1.0 - w, 1.0 + w), abs=1e-9)
    assert abs(lam - math.log(2.0)) < 1e-3


def test_off_grid_kinks_still_give_generation_rate():
    # kinks between nodes cost accuracy (second order locally) but not the answer
    spec = _narrow_band_spec(2.0, 0.01)
    lam = solve_malthusian(spec)
    assert lam == pytest.approx(_lotka_oracle(spec, 0.99, 1.01), abs=1e-3)
    assert abs(lam - math.log(2.0)) < 1e-3


def _tilted(spec, c):
    fert = spec.fertility
    g0 = fert.rate.g
    g = AgeFunction(lambda a: g0(a) * np.exp(c * np.asarray(a)), g0.support, g0.breakpoints)
    new = Fertility(SeparableRate(g), fert.a1, fert.a2, fert.b1, fert.b2, fert.delta,
                    fert.beta_plus * math.exp(c * fert.a2))
    return dataclasses.replace(spec, fertility=new)


@pytest.mark.parametrize("c", [-0.2, 0.05, 0.3])
def test_exponential_tilt_shifts_growth_rate(c):
    spec = build(tent_dict(scale=1.2))
    assert solve_malthusian(_tilted(spec, c)) - solve_malthusian(spec) == pytest.approx(
        c, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(0.05, 20.0))
def test_growth_rate_sign_and_monotonicity(scale):
    spec = build(tent_dict(scale=scale))
    r0 = net_reproduction_rate(spec)
    lam = solve_malthusian(spec, tol=1e-12)
    if abs(r0 - 1.0) > 1e-9:
        assert math.copysign(1.0, lam) == math.copysign(1.0, r0 - 1.0)
    assert solve_malthusian(spec.with_fertility_scale(0.5)) < lam
    # plugging the root back into the defining integral
    from agestruct.analysis import quadrature_for

    qd = quadrature_for(spec)
    assert abs(float(qd.wbS0 @ np.exp(-lam * qd.nodes)) - 1.0) <= 2e-12


def test_subcritical_monotone_model_has_only_trivial_equilibrium():
    spec = with_scale_for_r0(early_dict, 0.8)
    eqs = find_equilibria(spec, P_max=100.0)
    assert len(eqs) == 1 and eqs[0].trivial


def test_constant_rate_equilibrium_matches_scalar_root():
    b, m, a_d = 2.0, 1.0, 50.0
    spec = build(constant_rate_dict(b=b, m=m, a_dagger=a_d))
    eqs = find_equilibria(spec, P_max=10.0)
    assert [e.trivial for e in eqs] == [True, False]
    oracle = brentq(lambda P: closed_form_R(b, m, P, a_d) - 1.0, 0.0, 10.0, xtol=1e-15)
    assert eqs[1].P == pytest.approx(oracle, abs=1e-9)


@pytest.mark.parametrize("make", [logistic_dict, allee_dict])
def test_equal_weights_give_unit_gamma(make):
    for e in find_equilibria(build(make()), P_max=50.0):
        assert e.gamma == pytest.approx(1.0, rel=1e-14)
        assert e.Q == pytest.approx(e.P, rel=1e-14)


def test_equilibrium_points_satisfy_their_equations():
    spec = build(allee_dict())
    eqs = find_equilibria(spec, P_max=50.0, tol=1e-12)
    assert len(eqs) == 3
    for e in eqs:
        assert e.P >= 0 and e.Q >= 0 and e.rho >= 0
        assert abs(e.Q - e.P * e.gamma) <= 1e-12 * max(1.0, e.Q)
        if not e.trivial:
            assert abs(float(equilibrium_residual(spec, e.P))) <= 1e-12
            assert abs(e.residual) <= 1e-12


def test_zero_weight_is_reported_by_name():
    d = logistic_dict()
    d["p"] = {"kind": "zero"}
    with pytest.raises(NumericalError, match="p"):
        find_equilibria(build(d), P_max=10.0)


def test_pmax_required_without_minorant():
    spec = build(tent_dict())
    with pytest.raises(ValueError):
        find_equilibria(spec)
    with pytest.raises(ValueError):
        find_equilibria(spec, P_max=-1.0)


def test_default_pmax_finds_bistable_equilibria():
    eqs = find_equilibria(build(allee_dict()))
    assert len(eqs) == 3


@settings(max_examples=4, deadline=None)
@given(target=st.floats(1.05, 6.0))
def test_supercritical_monotone_model_has_nontrivial_equilibrium(target):
    spec = with_scale_for_r0(early_dict, target)
    eqs = find_equilibria(spec, P_max=500.0)
    assert any(not e.trivial for e in eqs)


def test_equilibria_csv_layout(tmp_path):
    eqs = find_equilibria(build(logistic_dict()), P_max=50.0)
    path = tmp_path / "eq.csv"
    write_equilibria_csv(eqs, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["P_star", "Q_star", "rho_star", "residual"]
    assert float(rows[2][0]) == eqs[1].P
