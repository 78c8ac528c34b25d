"""A priori bound on the newborn rate and the low-density extinction threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .analysis import DEFAULT_RESOLUTION, quadrature_for
from .exceptions import BracketError, NumericalError
from .model import ModelSpec, ProbeGrid, estimate_A1_constant

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def psi_inverse(psi, x: float, tol: float = 1e-13, cap: float = 1e15) -> float:
    """Largest ``y >= 0`` with ``psi(y) = x`` for a non-decreasing ``psi``.

    When ``psi`` is flat at level ``x`` the right end of the flat part is
    returned.
    """
    f = lambda y: float(psi(y))  # noqa: E731
    if x < f(0.0):
        raise ValueError(f"x = {x!r} is below psi(0) = {f(0.0)!r}")
    lo, hi = 0.0, 1.0
    while f(hi) <= x:
        lo, hi = hi, 2.0 * hi
        if hi > cap:
            raise BracketError(f"psi stays <= {x!r} up to {cap:g}")
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) <= x:
            lo = mid
        else:
            hi = mid
    return lo


def _golden_max(fn, lo: float, hi: float, iters: int = 80):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    return (c, fc) if fc >= fd else (d, fd)


@dataclass(frozen=True)
class BoundCertificate:
    c: float
    gamma: float
    M: float
    B: float
    k_max: float
    k_limit: float
    rho0: float
    warning: Optional[str] = None

    def record(self) -> str:
        w = "" if self.warning is None else f" warning={self.warning!r}"
        return (f"c={self.c!r} gamma={self.gamma!r} M={self.M!r} B={self.B!r} "
                f"k_max={self.k_max!r} k_limit={self.k_limit!r} rho0={self.rho0!r}{w}")


def initial_newborns(spec: ModelSpec, n: int = DEFAULT_RESOLUTION) -> float:
    """``rho(0) = int beta(a, Q(0)) f(a) da`` on the analysis grid."""
    qd = quadrature_for(spec, n)
    f = qd.grid.sample(spec.initial, spec.initial.breakpoints)
    Q0 = float(qd.w @ (qd.q * f))
    return float(qd.w @ (np.asarray(qd.beta(Q0)) * f))


def compute_bound(spec: ModelSpec, rho0: Optional[float] = None, c: Optional[float] = None,
                  n_scan: int = 4096, probe: ProbeGrid = ProbeGrid()) -> BoundCertificate:
    """Certificate ``B`` with ``rho(t) <= B`` for all ``t``.

    ``c`` defaults to the probe-grid estimate of the domination constant and
    ``rho0`` to the newborn rate produced by the initial data.
    """
    psi = spec.density_mortality.psi
    if psi is None:
        raise ValueError("compute_bound needs the minorant psi of M")
    if c is None:
        c = estimate_A1_constant(spec, probe)
        if c is None:
            raise ValueError("fertility is positive where p vanishes; no domination constant")
    if not c > 0:
        raise ValueError("domination constant c must be positive")
    if rho0 is None:
        rho0 = initial_newborns(spec)
    if rho0 < 0:
        raise ValueError("rho0 must be non-negative")

    P = lambda y: float(psi(y))  # noqa: E731
    gamma = 1.0 - P(0.0)
    beta_max = spec.fertility.beta_plus
    M = max(beta_max * (gamma + spec.a_dagger), gamma + P(rho0 / c))
    warning = None
    if not M > 1.0 + P(rho0 / c):
        warning = f"M = {M!r} does not exceed 1 + psi(rho0/c) = {1.0 + P(rho0 / c)!r}"

    k_limit = c * psi_inverse(psi, M - gamma)
    ratio = lambda k: k / (P(k / c) + gamma)  # noqa: E731
    if k_limit <= 0:
        return BoundCertificate(c, gamma, M, 0.0, 0.0, k_limit, rho0, warning)
    ks = np.linspace(0.0, k_limit, n_scan + 1)[1:]
    vals = ks / (np.asarray(psi(ks / c), dtype=float) + gamma)
    i = int(np.argmax(vals))
    k_best, v_best = float(ks[i]), float(vals[i])
    if 0 < i < ks.size - 1:
        k, v = _golden_max(ratio, float(ks[i - 1]), float(ks[i + 1]))
        if v > v_best:
            k_best, v_best = k, v
    elif i == 0:
        k, v = _golden_max(ratio, 0.0, float(ks[1]))
        if v > v_best:
            k_best, v_best = k, v
    return BoundCertificate(c, gamma, M, M * v_best, k_best, k_limit, rho0, warning)


# --------------------------------------------------------------------------
# low-density extinction threshold

@dataclass(frozen=True)
class AlleeThreshold:
    P_star: float
    Q_star: float
    rho_star: float
    R1: float
    delta_P: float
    delta_Q: float
    int_p: float
    int_q: float
    capped: bool

    def record(self) -> str:
        return (f"P_star={self.P_star!r} Q_star={self.Q_star!r} rho_star={self.rho_star!r} "
                f"R1={self.R1!r} capped={self.capped}")


def _R_grid(qd, Ps, Qs):
    """``R(P_i, Q_j)`` for all pairs."""
    S = qd.survival(np.asarray(Ps, dtype=float))
    B = np.asarray(qd.beta(np.asarray(Qs, dtype=float)))
    return (S * qd.w) @ B.T


def allee_threshold(spec: ModelSpec, search_cap: float, n_check: int = 64,
                    growth: float = 1.1, safety: float = 0.9,
                    n: int = DEFAULT_RESOLUTION) -> AlleeThreshold:
    """Largest box ``[0, P*) x [0, Q*)`` (up to ``search_cap``) with ``R < 1``.

    The box grows alternately along each axis by ``growth``; an axis stops at
    the first edge where ``R >= 1`` after locating the crossing by bisection.
    """
    if not search_cap > 0:
        raise ValueError("search_cap must be positive")
    qd = quadrature_for(spec, n)
    start = 1e-3 * search_cap
    if float(_R_grid(qd, [start], [start]).max()) >= 1.0 or \
            float(_R_grid(qd, [0.0], [0.0]).max()) >= 1.0:
        raise NumericalError("no sub-reproduction region near the origin")

    def ok_box(P0, P1, Q0, Q1, nP, nQ):
        Ps = np.linspace(P0, P1, nP)
        Qs = np.linspace(Q0, Q1, nQ)
        return float(_R_grid(qd, Ps, Qs).max()) < 1.0

    def grow(lo, hi, test):
        """Largest value in ``[lo, hi]`` passing ``test`` (``test(lo)`` holds)."""
        if test(hi):
            return hi, False
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if test(mid):
                lo = mid
            else:
                hi = mid
        return lo, True

    Ps, Qs = start, start
    done_P = done_Q = False
    while not (done_P and done_Q):
        if not done_P:
            target = min(Ps * growth, search_cap)
            Ps, hit = grow(Ps, target, lambda v: ok_box(Ps, v, 0.0, Qs, 8, n_check))
            done_P = hit or Ps >= search_cap
        if not done_Q:
            target = min(Qs * growth, search_cap)
            Qs, hit = grow(Qs, target, lambda v: ok_box(0.0, Ps, Qs, v, n_check, 8))
            done_Q = hit or Qs >= search_cap

    # final check on the half-open box
    shrink = 1.0 - 1e-9
    while not ok_box(0.0, Ps * shrink, 0.0, Qs * shrink, n_check, n_check):
        Ps *= 0.99
        Qs *= 0.99
    capped = Ps >= search_cap and Qs >= search_cap

    int_p = float(qd.w @ qd.p)
    int_q = float(qd.w @ qd.q)
    limits = [v for v in (Ps / int_p if int_p > 0 else math.inf,
                          Qs / int_q if int_q > 0 else math.inf) if math.isfinite(v)]
    if not limits:
        raise NumericalError("weights p and q both integrate to zero")
    rho_star = safety * min(limits)
    dP = 1.0 - rho_star * int_p / (2.0 * Ps)
    dQ = 1.0 - rho_star * int_q / (2.0 * Qs)
    R1 = float(_R_grid(qd, np.linspace(0.0, dP * Ps, n_check),
                       np.linspace(0.0, dQ * Qs, n_check)).max())
    return AlleeThreshold(Ps, Qs, rho_star, R1, dP, dQ, int_p, int_q, capped)


def _window_steps(traj, a_dagger):
    a_dagger = traj.a_dagger if a_dagger is None else a_dagger
    L = int(round(a_dagger / traj.h))
    if traj.t.size < L + 1:
        raise ValueError("trajectory shorter than one lifespan")
    return L


def extinction_trigger_time(traj, thr: AlleeThreshold, a_dagger: Optional[float] = None):
    """End time of the first lifespan-long window with ``sup rho < rho*`` (or None)."""
    L = _window_steps(traj, a_dagger)
    sups = sliding_window_view(traj.rho, L + 1).max(axis=1)
    hits = np.nonzero(sups < thr.rho_star)[0]
    if hits.size == 0:
        return None
    return float(traj.t[hits[0] + L])


def check_extinction_trigger(traj, thr: AlleeThreshold, a_dagger: Optional[float] = None) -> bool:
    return extinction_trigger_time(traj, thr, a_dagger) is not None


def window_sups(traj, t_start: float, a_dagger: Optional[float] = None) -> List[float]:
    """Sup of ``rho`` over consecutive full lifespans starting at ``t_start``."""
    L = _window_steps(traj, a_dagger)
    k0 = int(round(t_start / traj.h))
    out = []
    while k0 + L < traj.t.size:
        out.append(float(traj.rho[k0:k0 + L + 1].max()))
        k0 += L
    return out
