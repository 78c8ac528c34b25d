"""Reproduction numbers, the Malthusian parameter and nontrivial equilibria."""

from __future__ import annotations

import csv
import weakref
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .exceptions import BracketError, EnvelopeError, NumericalError
from .functions import AgeFunction
from .model import ModelSpec, ProbeGrid
from .quadrature import AgeGrid, node_sampler

DEFAULT_RESOLUTION = 2 ** 14

_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


class ModelQuadrature:
    """Model rules sampled once on a fine uniform age grid (Simpson weights)."""

    def __init__(self, spec: ModelSpec, n: int = DEFAULT_RESOLUTION):
        if n % 2:
            n += 1
        self.spec = spec
        self.grid = g = AgeGrid(spec.a_dagger, n)
        self.w = g.simpson_weights()
        H0 = spec.baseline.cumulative(g.nodes)
        self.S0 = np.where(np.isinf(H0), 0.0, np.exp(-np.where(np.isinf(H0), 0.0, H0)))
        fert = spec.fertility
        self.beta = node_sampler(fert, g, fert.breakpoints)
        M = spec.density_mortality
        self.M = node_sampler(M, g, M.breakpoints)
        self.p = g.sample(spec.weight_p, spec.weight_p.breakpoints)
        self.q = g.sample(spec.weight_q, spec.weight_q.breakpoints)
        self.beta0 = np.asarray(self.beta(0.0))
        self.wbS0 = self.w * self.beta0 * self.S0

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes

    def cum_M(self, P):
        """``int_0^a M(v, P) dv`` at every node; rows follow ``P`` when it is an array."""
        if not self.M.depends_on_x:
            P = np.asarray(P, dtype=float)
            base = self.grid.cumulative(np.asarray(self.M(0.0)))
            return base if P.ndim == 0 else np.broadcast_to(base, P.shape + base.shape)
        return self.grid.cumulative(np.asarray(self.M(P)))

    def survival(self, P):
        return self.S0 * np.exp(-self.cum_M(P))

    def reproduction(self, P, Q):
        P = np.asarray(P, dtype=float)
        Q = np.asarray(Q, dtype=float)
        S = self.survival(P)
        B = np.asarray(self.beta(Q))
        return (B * S) @ self.w


def quadrature_for(spec: ModelSpec, n: int = DEFAULT_RESOLUTION) -> ModelQuadrature:
    per = _CACHE.setdefault(spec, {})
    if n not in per:
        per[n] = ModelQuadrature(spec, n)
    return per[n]


def bisect(fn: Callable[[float], float], lo: float, hi: float,
           max_iter: int = 200) -> float:
    """Root of ``fn`` on a sign-change bracket, refined to machine resolution."""
    flo, fhi = fn(lo), fn(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        raise BracketError(f"no sign change on [{lo!r}, {hi!r}]")
    best, fbest = (lo, flo) if abs(flo) < abs(fhi) else (hi, fhi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = fn(mid)
        if abs(fm) < abs(fbest):
            best, fbest = mid, fm
        if fm == 0.0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return best


def root_of_decreasing(F: Callable[[float], float], cap: float = 1e3) -> float:
    """Root of a strictly decreasing ``F`` found by doubling brackets from 0."""
    f0 = F(0.0)
    if f0 == 0.0:
        return 0.0
    if f0 > 0:
        lo, hi = 0.0, 1.0
        while F(hi) > 0:
            lo, hi = hi, 2 * hi
            if hi > cap:
                raise BracketError(f"root exceeds cap {cap}")
    else:
        lo, hi = -1.0, 0.0
        while F(lo) < 0:
            lo, hi = 2 * lo, lo
            if -lo > cap:
                raise BracketError(f"root below -{cap}")
    return bisect(F, lo, hi)


# --------------------------------------------------------------------------
# reproduction numbers

def net_reproduction_rate(spec: ModelSpec, n: int = DEFAULT_RESOLUTION) -> float:
    return float(quadrature_for(spec, n).reproduction(0.0, 0.0))


def weighted_reproduction_rate(spec: ModelSpec, Pc: float, Qc: float,
                               n: int = DEFAULT_RESOLUTION) -> float:
    if Pc < 0 or Qc < 0:
        raise ValueError("weighted sizes must be non-negative")
    return float(quadrature_for(spec, n).reproduction(Pc, Qc))


def upper_reproduction_rate(spec: ModelSpec, mu_minus: AgeFunction,
                            beta_plus_fn: AgeFunction,
                            probe: ProbeGrid = ProbeGrid(),
                            n: int = DEFAULT_RESOLUTION) -> float:
    """Reproduction number for a lower mortality and an upper fertility envelope.

    The envelopes are checked on the probe grid.  A value below one adds the
    tag ``"extinction-guaranteed"`` to ``spec.metadata["tags"]``.
    """
    ages = probe.ages(spec.a_dagger)
    xs = probe.densities()
    A, X = ages[None, :], xs[:, None]
    B = np.asarray(spec.fertility(A, X), dtype=float)
    bp = np.asarray(beta_plus_fn(ages), dtype=float)
    over = B > bp[None, :] * (1 + 1e-12) + 1e-12
    if over.any():
        i, j = np.argwhere(over)[0]
        raise EnvelopeError("fertility", (float(ages[j]), float(xs[i])))

    # baseline rate from forward differences of the cumulative hazard
    d = 1e-7 * spec.a_dagger
    a_in = ages[ages + d < spec.a_dagger]
    mu0 = (spec.baseline.cumulative(a_in + d) - spec.baseline.cumulative(a_in)) / d
    mu = mu0[None, :] + np.asarray(spec.density_mortality(a_in[None, :], X), dtype=float)
    mm = np.asarray(mu_minus(a_in), dtype=float)
    under = mu < mm[None, :] - 1e-6 * np.maximum(1.0, np.abs(mm[None, :]))
    if under.any():
        i, j = np.argwhere(under)[0]
        raise EnvelopeError("mortality", (float(a_in[j]), float(xs[i])))

    g = AgeGrid(spec.a_dagger, n + (n % 2))
    cm = g.cumulative(g.sample(mu_minus, mu_minus.breakpoints))
    bv = g.sample(beta_plus_fn, beta_plus_fn.breakpoints)
    value = float(g.simpson_weights() @ (bv * np.exp(-cm)))
    if value < 1.0:
        tags = spec.metadata.setdefault("tags", [])
        if "extinction-guaranteed" not in tags:
            tags.append("extinction-guaranteed")
    return value


def solve_malthusian(spec: ModelSpec, tol: float = 1e-12, lam_cap: float = 1e3,
                     n: int = DEFAULT_RESOLUTION) -> float:
    """Real root of ``int beta(a,0) S(a,0) exp(-lam a) da = 1``."""
    qd = quadrature_for(spec, n)
    a = qd.nodes
    c = qd.wbS0
    if not np.any(c > 0):
        raise BracketError("R0 = 0: the characteristic equation has no real root")

    def F(lam):
        with np.errstate(over="ignore"):
            return float(c @ np.exp(-lam * a)) - 1.0

    lam = root_of_decreasing(F, lam_cap)
    if abs(F(lam)) > tol:
        raise NumericalError(f"Malthusian residual {F(lam):.3e} exceeds tol {tol:.1e}")
    return lam


# --------------------------------------------------------------------------
# equilibria

@dataclass(frozen=True)
class EquilibriumPoint:
    P: float
    Q: float
    rho: float
    residual: float
    gamma: float

    @property
    def trivial(self) -> bool:
        return self.P == 0.0 and self.Q == 0.0 and self.rho == 0.0


def _gamma(qd: ModelQuadrature, P):
    S = qd.survival(P)
    den = (qd.p * S) @ qd.w
    if np.any(den <= 0):
        raise NumericalError("weight p: integral of p times survival vanishes")
    return (qd.q * S) @ qd.w / den, den


def equilibrium_residual(spec: ModelSpec, P, n: int = DEFAULT_RESOLUTION):
    """``g(P) = R(P, P * Gamma(P)) - 1`` (vectorised in ``P``)."""
    qd = quadrature_for(spec, n)
    P = np.asarray(P, dtype=float)
    gam, _ = _gamma(qd, P)
    S = qd.survival(P)
    B = np.asarray(qd.beta(P * gam))
    return (B * S) @ qd.w - 1.0


def default_pmax(spec: ModelSpec) -> float:
    """Ten times an a priori bound on ``P`` from the boundedness certificate."""
    from .bounds import compute_bound

    if spec.density_mortality.psi is None:
        raise ValueError("P_max is required when the model has no psi minorant")
    cert = compute_bound(spec)
    qd = quadrature_for(spec)
    return 10.0 * float(np.max(qd.p)) * spec.a_dagger * cert.B


def find_equilibria(spec: ModelSpec, P_max: Optional[float] = None, tol: float = 1e-12,
                    n_scan: int = 1024, n: int = DEFAULT_RESOLUTION) -> List[EquilibriumPoint]:
    """Trivial equilibrium plus every sign change of ``g`` on ``[0, P_max]``."""
    if P_max is None:
        P_max = default_pmax(spec)
    if not P_max > 0:
        raise ValueError("P_max must be positive")
    qd = quadrature_for(spec, n)
    gam0, _ = _gamma(qd, 0.0)
    out = [EquilibriumPoint(0.0, 0.0, 0.0, 0.0, float(gam0))]

    # uniform scan plus a geometric one so roots near zero are not skipped
    Ps = np.union1d(np.linspace(0.0, P_max, n_scan),
                    np.geomspace(P_max * 1e-6, P_max, n_scan))
    n_scan = Ps.size
    gs = np.concatenate([equilibrium_residual(spec, chunk, n)
                         for chunk in np.array_split(Ps, max(1, n_scan // 64))])

    def g(P):
        return float(equilibrium_residual(spec, P, n))

    roots = []
    for i in range(n_scan - 1):
        if i > 0 and gs[i] == 0.0:
            roots.append(Ps[i])
        elif gs[i] * gs[i + 1] < 0:
            roots.append(bisect(g, Ps[i], Ps[i + 1]))
    if gs[-1] == 0.0:
        roots.append(Ps[-1])

    for P in roots:
        gam, den = _gamma(qd, P)
        res = g(P)
        if abs(res) > tol:
            raise NumericalError(f"equilibrium residual {res:.3e} at P={P!r} exceeds tol")
        out.append(EquilibriumPoint(float(P), float(P * gam), float(P / den),
                                    float(res), float(gam)))
    return out


def equilibrium_profile(spec: ModelSpec, eq: EquilibriumPoint,
                        n: int = DEFAULT_RESOLUTION) -> AgeFunction:
    """Stationary age density ``rho* S(a, P*)`` as an age function."""
    qd = quadrature_for(spec, n)
    nodes = qd.nodes
    cm = np.asarray(qd.cum_M(eq.P))
    baseline = spec.baseline
    rho = eq.rho

    def rule(a):
        a = np.asarray(a, dtype=float)
        H = baseline.cumulative(a)
        with np.errstate(invalid="ignore"):
            v = rho * np.exp(-H - np.interp(a, nodes, cm))
        return np.where(np.isinf(H), 0.0, v)

    return AgeFunction(rule, (0.0, spec.a_dagger), spec.density_mortality.breakpoints,
                       "equilibrium")


def write_equilibria_csv(points, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["P_star", "Q_star", "rho_star", "residual"])
        for e in points:
            w.writerow([repr(e.P), repr(e.Q), repr(e.rho), repr(e.residual)])
