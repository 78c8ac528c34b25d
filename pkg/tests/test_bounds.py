import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from agestruct import (BracketError, GridSpec, NumericalError, Trajectory, allee_threshold,
                       check_extinction_trigger, compute_bound, model_from_dict, psi_inverse,
                       simulate, weighted_reproduction_rate)
from agestruct.bounds import AlleeThreshold, extinction_trigger_time, window_sups
from agestruct.functions import XFunction

from builders import allee_dict, build, early_dict, logistic_dict, tent_dict, with_scale_for_r0


def test_identity_inverse():
    psi = XFunction.linear(1.0)
    for x in (0.0, 0.5, 3.0, 1234.5):
        assert psi_inverse(psi, x) == pytest.approx(x, rel=1e-12, abs=1e-13)


def test_flat_part_returns_right_edge():
    psi = XFunction(lambda x: np.maximum(0.0, np.asarray(x) - 1.0))
    assert psi_inverse(psi, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_square_inverse():
    assert psi_inverse(XFunction.power(1.0, 2.0), 4.0) == pytest.approx(2.0, rel=1e-12)


def test_inverse_below_range_and_bounded_minorant():
    with pytest.raises(ValueError):
        psi_inverse(XFunction.linear(1.0, intercept=1.0), 0.5)
    with pytest.raises(BracketError):
        psi_inverse(XFunction(lambda x: 1.0 - np.exp(-np.asarray(x))), 2.0)


def unit_dict():
    """psi(x) = x with beta = p = 1 on the fertile window, so c = 1."""
    return logistic_dict(b=1.0, slope=1.0)


def test_identity_minorant_with_unit_constant_gives_m_minus_one():
    cert = compute_bound(build(unit_dict()))
    assert cert.c == 1.0 and cert.gamma == 1.0
    assert cert.B == pytest.approx(cert.M - 1.0, abs=1e-9)
    assert cert.k_max == pytest.approx(cert.M - 1.0, rel=1e-12)


def test_zero_initial_newborns_pick_first_branch():
    spec = build(logistic_dict())
    cert = compute_bound(spec, rho0=0.0)
    fert = spec.fertility
    assert cert.M == fert.beta_plus * (cert.gamma + spec.a_dagger)
    assert cert.warning is None


def test_certificate_invariants():
    spec = build(allee_dict())
    cert = compute_bound(spec)
    psi = spec.density_mortality.psi
    assert all(math.isfinite(v) for v in (cert.gamma, cert.M, cert.B))
    assert cert.B > 0 and cert.rho0 > 0
    assert float(psi(cert.k_limit / cert.c)) == pytest.approx(cert.M - cert.gamma, rel=1e-9)
    assert "B=" in cert.record()


def test_margin_condition_warning():
    spec = build(logistic_dict())
    # fertility branch dominates: M = beta_plus (gamma + a_dagger) exceeds 1 + psi(rho0 / c)
    assert compute_bound(spec, rho0=1.0).warning is None
    # initial-data branch dominates with psi(0) = 0: M equals 1 + psi(rho0 / c), not above it
    assert compute_bound(spec, rho0=1e6).warning is not None
    # psi(0) far above one
    d = logistic_dict()
    d["M"]["psi"] = {"kind": "linear", "params": {"slope": 0.5, "intercept": 100.0}}
    assert compute_bound(build(d), rho0=0.0).warning is not None


def test_bound_needs_minorant():
    with pytest.raises(ValueError):
        compute_bound(build(tent_dict()))


@settings(max_examples=12, deadline=None)
@given(b=st.floats(0.5, 8.0), slope=st.floats(0.05, 3.0), f0=st.floats(0.0, 30.0))
def test_simulated_newborns_never_exceed_certificate(b, slope, f0):
    d = logistic_dict(b=b, slope=slope)
    d["f"]["scale"] = f0
    spec = model_from_dict(d)
    cert = compute_bound(spec)
    tr = simulate(spec, GridSpec(0.04, 40.0))
    assert tr.rho.max() <= cert.B * (1 + 1e-9)
    # once the initial cohort is gone every individual was born with rate <= B
    pmax = float(np.max(spec.weight_p(tr.ages)))
    late = tr.t >= spec.a_dagger
    assert tr.P[late].max() <= pmax * cert.B * spec.a_dagger * (1 + 1e-9)


def test_monotone_subcritical_box_reaches_cap():
    spec = with_scale_for_r0(early_dict, 0.8)
    thr = allee_threshold(spec, search_cap=5.0)
    assert thr.P_star == 5.0 and thr.Q_star == 5.0 and thr.capped
    assert thr.R1 < 1.0


@pytest.fixture(scope="module")
def bistable():
    spec = build(allee_dict())
    return spec, allee_threshold(spec, search_cap=10.0)


def test_bistable_box_stops_at_reproduction_crossing(bistable):
    spec, thr = bistable
    surv = spec.baseline.survival

    def R(P):
        # fertility 3 on (1, 2); size-dependent mortality P^2 - 2P for every age
        val, _ = quad(lambda a: 3.0 * float(surv(a)) * math.exp(-(P * P - 2 * P) * a),
                      1.0, 2.0, epsabs=1e-13, epsrel=1e-12)
        return val - 1.0

    oracle = brentq(R, 0.0, 1.0, xtol=1e-14)
    assert thr.P_star == pytest.approx(oracle, rel=1e-6)
    assert thr.P_star <= oracle * (1 + 1e-9)
    assert not thr.capped


def test_threshold_invariants(bistable):
    spec, thr = bistable
    eps = 1e-9
    for P in np.linspace(0.0, thr.P_star - eps, 16):
        for Q in (0.0, thr.Q_star - eps):
            assert weighted_reproduction_rate(spec, P, Q) < 1.0
    assert thr.rho_star < thr.P_star / thr.int_p
    assert thr.rho_star < thr.Q_star / thr.int_q
    assert thr.rho_star == pytest.approx(0.9 * min(thr.P_star / thr.int_p,
                                                   thr.Q_star / thr.int_q), rel=1e-12)
    assert 0 < thr.R1 < 1


def test_no_sub_reproduction_region():
    with pytest.raises(NumericalError):
        allee_threshold(build(logistic_dict()), 10.0)


def _flat(value, n=801, h=0.01):
    t = np.arange(n) * h
    z = np.full(n, value)
    return Trajectory(h, 4.0, t, z, z.copy(), z.copy(), np.zeros(n, int), np.arange(401) * h)


def _thr(rho_star):
    return AlleeThreshold(1.0, 1.0, rho_star, 0.5, 0.5, 0.5, 4.0, 4.0, False)


def test_trigger_on_flat_trajectories():
    assert check_extinction_trigger(_flat(0.0), _thr(0.1))
    assert extinction_trigger_time(_flat(0.0), _thr(0.1)) == pytest.approx(4.0)
    assert not check_extinction_trigger(_flat(0.2), _thr(0.1))


def test_trigger_needs_one_lifespan():
    with pytest.raises(ValueError):
        check_extinction_trigger(_flat(0.0, n=100), _thr(0.1))


def test_bistable_run_below_threshold_dies_out(bistable):
    spec, thr = bistable
    low = spec.with_initial(spec.initial.scaled(0.05))
    tr = simulate(low, GridSpec(0.01, 20 * spec.a_dagger))
    t_star = extinction_trigger_time(tr, thr)
    assert t_star is not None
    assert tr.rho[-1] < 1e-6
    assert tr.rho[-1] < tr.rho[int(round(t_star / tr.h))]
    sups = window_sups(tr, t_star)
    assert all(b < a for a, b in zip(sups, sups[1:]))
