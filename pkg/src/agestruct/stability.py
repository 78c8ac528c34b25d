"""Linear stability of equilibria through the 3x3 characteristic determinant.

Roots are counted with the argument principle on rectangles in the upper
half plane (plus a thin strip below the real axis so real roots are
interior), isolated by recursive splitting and polished by Newton steps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import lfilter

from .analysis import (
    DEFAULT_RESOLUTION,
    EquilibriumPoint,
    quadrature_for,
    root_of_decreasing,
)
from .exceptions import InconclusiveError, NumericalError
from .functions import central_difference
from .model import ModelSpec

KERNELS = ("derived", "printed")


def _x_derivative(rule, a, x, allow_fd, label):
    d = rule.dx(a, x)
    if d is not None:
        return np.asarray(d, dtype=float)
    if not allow_fd:
        raise NumericalError(f"{label}: no x-derivative rule and finite differences disabled")
    return np.asarray(central_difference(rule, a, x), dtype=float)


@dataclass
class CharacteristicSystem:
    """The integrals entering the characteristic determinant at one equilibrium.

    ``A1`` is a real constant; the other six are evaluated by
    :meth:`terms` for arrays of complex ``lam``.
    """

    spec: ModelSpec
    eq: EquilibriumPoint
    kernel: str
    resolution: int
    A1: float
    nodes: np.ndarray
    profile: np.ndarray            # rho* S(a, P*) on nodes
    _wbS: np.ndarray = field(repr=False)   # Simpson weight * beta(a, Q*) * S(a, P*)
    _wpS: np.ndarray = field(repr=False)
    _wqS: np.ndarray = field(repr=False)
    _muP: np.ndarray = field(repr=False)   # x-derivative of M at P*
    _printed: Optional[tuple] = field(default=None, repr=False)

    @property
    def h(self) -> float:
        return self.nodes[1] - self.nodes[0]

    @property
    def coupled(self) -> bool:
        """False when the C2 column vanishes (zero profile or M flat in P)."""
        return self.eq.rho != 0.0 and bool(np.any(self._muP != 0.0))

    def _exp(self, lam):
        with np.errstate(over="ignore", invalid="ignore"):
            return np.exp(-np.multiply.outer(lam, self.nodes))

    def _convolved(self, lam: complex, x: np.ndarray) -> np.ndarray:
        """``K_j = int_0^{a_j} x(s) exp(-lam (a_j - s)) ds`` by the trapezoid rule."""
        with np.errstate(over="ignore", invalid="ignore"):
            r = np.exp(-lam * self.h)
            c = np.empty(x.size, dtype=complex)
            c[0] = 0.0
            c[1:] = 0.5 * self.h * (r * x[:-1] + x[1:])
            return lfilter([1.0], [1.0, -r], c)

    def terms(self, lam):
        """Return ``(A2, ..., A7)`` for scalar or array ``lam``."""
        lam = np.asarray(lam, dtype=complex)
        E = self._exp(lam)
        with np.errstate(over="ignore", invalid="ignore"):
            A3 = E @ self._wbS
            A5 = E @ self._wpS
            A7 = E @ self._wqS
        if not self.coupled:
            z = np.zeros_like(A3)
            return z, A3, z, A5, z, A7
        if self.kernel == "printed":
            sw, W = self._printed
            with np.errstate(over="ignore", invalid="ignore"):
                Es = np.exp(-np.multiply.outer(lam, sw))
                A2, A4, A6 = (Es @ W[i] for i in range(3))
            return A2, A3, A4, A5, A6, A7
        flat = np.atleast_1d(lam)
        K = np.array([self._convolved(l, self._muP) for l in flat])
        scale = -self.eq.rho
        with np.errstate(over="ignore", invalid="ignore"):
            A2 = scale * (K @ self._wbS)
            A4 = scale * (K @ self._wpS)
            A6 = scale * (K @ self._wqS)
        shape = lam.shape
        return A2.reshape(shape), A3, A4.reshape(shape), A5, A6.reshape(shape), A7

    def abs_terms(self, gamma: float):
        """Upper bounds for ``|A2|..|A7|`` valid on ``Re lam >= gamma``."""
        E = np.exp(-gamma * self.nodes)
        b3 = float(E @ np.abs(self._wbS))
        b5 = float(E @ np.abs(self._wpS))
        b7 = float(E @ np.abs(self._wqS))
        if not self.coupled:
            return 0.0, b3, 0.0, b5, 0.0, b7
        if self.kernel == "printed":
            sw, W = self._printed
            Es = np.exp(-gamma * sw)
            b2, b4, b6 = (float(Es @ np.abs(W[i])) for i in range(3))
            return b2, b3, b4, b5, b6, b7
        K = np.abs(self._convolved(gamma, np.abs(self._muP)))
        s = abs(self.eq.rho)
        return (s * float(K @ np.abs(self._wbS)), b3, s * float(K @ np.abs(self._wpS)), b5,
                s * float(K @ np.abs(self._wqS)), b7)

    def tail_bound(self, gamma: float) -> float:
        """Bound on ``|det + 1|`` over ``Re lam >= gamma``; below 1 excludes roots there."""
        b2, b3, b4, b5, b6, b7 = self.abs_terms(gamma)
        a1 = abs(self.A1)
        return b3 + b4 + b3 * b4 + b2 * b5 + a1 * b5 * b6 + a1 * b4 * b7 + a1 * b7


def build_characteristic(spec: ModelSpec, eq: EquilibriumPoint, kernel: str = "derived",
                         allow_fd: bool = True, n: int = DEFAULT_RESOLUTION,
                         printed_nodes: int = 1024) -> CharacteristicSystem:
    """Assemble the characteristic integrals at ``eq``.

    ``kernel="derived"`` uses the memory kernel that follows from solving the
    linearised transport equation with an integrating factor; ``"printed"``
    uses the alternative kernel with the survival window ``(a - s, a)``.
    """
    if kernel not in KERNELS:
        raise ValueError(f"kernel must be one of {KERNELS}")
    qd = quadrature_for(spec, n)
    a = qd.nodes
    w = qd.w
    S = qd.survival(eq.P)
    beta = np.asarray(qd.beta(eq.Q))
    profile = eq.rho * S
    fert = spec.fertility
    M = spec.density_mortality
    trivial = eq.rho == 0.0

    if trivial:
        A1 = 0.0
        muP = np.zeros_like(a)
    else:
        bQ = qd.grid.sample(
            lambda aa: np.broadcast_to(_x_derivative(fert, aa, eq.Q, allow_fd, "beta"),
                                       np.shape(aa)), fert.breakpoints)
        A1 = float(w @ (bQ * profile))
        muP = qd.grid.sample(
            lambda aa: np.broadcast_to(_x_derivative(M, aa, eq.P, allow_fd, "M"),
                                       np.shape(aa)), M.breakpoints)

    sys = CharacteristicSystem(spec, eq, kernel, qd.grid.n, A1, a, profile,
                               w * beta * S, w * qd.p * S, w * qd.q * S, muP)
    if kernel == "printed" and sys.coupled:
        sys._printed = _printed_kernel(qd, beta, S, muP, eq, printed_nodes)
    return sys


def _printed_kernel(qd, beta, S, muP, eq, m):
    """Lambda-independent weights for the printed memory kernel on a coarse grid."""
    n = qd.grid.n
    step = max(1, n // m)
    while n % step or (n // step) % 2:
        step -= 1
    idx = np.arange(0, n + 1, step)
    sw = qd.nodes[idx]
    from .quadrature import AgeGrid
    cg = AgeGrid(qd.grid.a_dagger, idx.size - 1)
    wc = cg.simpson_weights()
    with np.errstate(divide="ignore"):
        H = -np.log(S[idx])                    # total cumulative mortality at P*
    prof = eq.rho * S[idx]
    outer = (beta[idx], qd.p[idx], qd.q[idx])
    m1 = idx.size
    W = np.zeros((3, m1))
    for i in range(m1):
        j = np.arange(i, m1)
        with np.errstate(invalid="ignore"):
            d = H[j] - H[j - i]
        ker = np.where(np.isfinite(d), np.exp(-np.where(np.isfinite(d), d, 0.0)), 0.0)
        for r in range(3):
            W[r, i] = float(np.sum(wc[j] * outer[r][j] * ker))
    W *= -(muP[idx] * prof)[None, :] * wc[None, :]
    return sw, W


def char_det(sys: CharacteristicSystem, lam):
    """Determinant of the characteristic matrix (vectorised in ``lam``)."""
    A2, A3, A4, A5, A6, A7 = sys.terms(lam)
    A1 = sys.A1
    with np.errstate(over="ignore", invalid="ignore"):
        return -(A3 - 1) * (A4 - 1) + A2 * A5 + A1 * A5 * A6 - A1 * (A4 - 1) * A7


def trivial_dominant_root(spec: ModelSpec, tol: float = 1e-12, cap: float = 1e3,
                          n: int = DEFAULT_RESOLUTION) -> float:
    """Real ``gamma`` with ``Re A3(gamma) = 1`` at the zero equilibrium."""
    sys = build_characteristic(spec, EquilibriumPoint(0.0, 0.0, 0.0, 0.0, 1.0), n=n)
    if not np.any(sys._wbS > 0):
        raise NumericalError("R0 = 0: no real root")

    def F(g):
        return float(np.real(sys.terms(complex(g))[1])) - 1.0

    g = root_of_decreasing(F, cap)
    if abs(F(g)) > tol:
        raise NumericalError(f"residual {F(g):.3e} exceeds tol")
    return g


# --------------------------------------------------------------------------
# root location

@dataclass(frozen=True)
class Rect:
    re0: float
    re1: float
    im0: float
    im1: float

    def __post_init__(self):
        if not (self.re1 > self.re0 and self.im1 > self.im0):
            raise ValueError("rectangle must have positive area")

    @property
    def corners(self):
        return (complex(self.re0, self.im0), complex(self.re1, self.im0),
                complex(self.re1, self.im1), complex(self.re0, self.im1))

    @property
    def size(self) -> float:
        return max(self.re1 - self.re0, self.im1 - self.im0)

    def contains(self, z: complex, slack: float = 0.0) -> bool:
        return (self.re0 - slack <= z.real <= self.re1 + slack
                and self.im0 - slack <= z.imag <= self.im1 + slack)

    def split(self, frac: float = 0.5 + 0.0137):
        if self.re1 - self.re0 >= self.im1 - self.im0:
            m = self.re0 + frac * (self.re1 - self.re0)
            return Rect(self.re0, m, self.im0, self.im1), Rect(m, self.re1, self.im0, self.im1)
        m = self.im0 + frac * (self.im1 - self.im0)
        return Rect(self.re0, self.re1, self.im0, m), Rect(self.re0, self.re1, m, self.im1)


@dataclass(frozen=True)
class Root:
    value: complex
    residual: float
    multiplicity: int


@dataclass
class StabilityReport:
    rect: Rect
    roots: List[Root]
    classification: str
    dominant: Optional[complex]
    winding: int
    right_count: int
    cap: float
    tail_bound: float
    leaves: List[Tuple[Rect, int, int]] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["re", "im", "residual", "multiplicity"])
            for r in self.roots:
                w.writerow([repr(r.value.real), repr(r.value.imag), repr(r.residual),
                            r.multiplicity])

    def classification_record(self) -> str:
        d = "none" if self.dominant is None else f"{self.dominant.real!r}{self.dominant.imag:+}j"
        r = self.rect
        return (f"classification={self.classification} dominant={d} "
                f"region=[{r.re0!r},{r.re1!r}]x[{r.im0!r},{r.im1!r}] "
                f"right_count={self.right_count} tail_bound={self.tail_bound!r}")


class _Counter:
    """Argument-principle counts with cached determinant evaluations."""

    def __init__(self, sys, max_points=200_000, zero_tol=1e-13):
        self.sys = sys
        self.cache = {}
        self.max_points = max_points
        self.zero_tol = zero_tol

    def values(self, zs):
        zs = [complex(z) for z in zs]
        todo = [z for z in zs if z not in self.cache]
        if todo:
            vals = char_det(self.sys, np.array(todo))
            for z, v in zip(todo, np.atleast_1d(vals)):
                self.cache[z] = complex(v)
        return np.array([self.cache[z] for z in zs])

    def edge_phase(self, p: complex, q: complex, n0: int = 64) -> Optional[float]:
        """Total argument change of det along the segment ``p -> q``."""
        flip = (p.real, p.imag) > (q.real, q.imag)
        a, b = (q, p) if flip else (p, q)
        ts = list(np.linspace(0.0, 1.0, n0 + 1))
        length = abs(b - a)
        for _ in range(60):
            zs = [a + t * (b - a) for t in ts]
            v = self.values(zs)
            if np.min(np.abs(v)) < self.zero_tol:
                return None
            d = np.angle(v[1:] / v[:-1])
            bad = np.nonzero(np.abs(d) >= 0.5 * math.pi)[0]
            if bad.size == 0:
                total = float(np.sum(d))
                return -total if flip else total
            if len(ts) > self.max_points:
                return None
            new = []
            badset = set(bad.tolist())
            for i, t in enumerate(ts[:-1]):
                new.append(t)
                if i in badset:
                    if (ts[i + 1] - t) * length < 1e-13 * max(1.0, length):
                        return None
                    new.append(0.5 * (t + ts[i + 1]))
            new.append(ts[-1])
            ts = new
        return None

    def count(self, rect: Rect) -> Optional[int]:
        c = rect.corners
        total = 0.0
        for i in range(4):
            ph = self.edge_phase(c[i], c[(i + 1) % 4])
            if ph is None:
                return None
            total += ph
        w = total / (2 * math.pi)
        k = int(round(w))
        if abs(w - k) > 1e-3:
            return None
        return k


def _newton(sys, z0: complex, tol: float, max_iter: int = 60) -> Tuple[complex, float]:
    z = complex(z0)
    f = complex(char_det(sys, z))
    for _ in range(max_iter):
        hstep = 1e-6 * max(1.0, abs(z))
        df = (complex(char_det(sys, z + hstep)) - complex(char_det(sys, z - hstep))) / (2 * hstep)
        if df == 0:
            break
        dz = -f / df
        t = 1.0
        for _ in range(30):
            zn = z + t * dz
            fn = complex(char_det(sys, zn))
            if abs(fn) < abs(f) or abs(fn) <= tol * 1e-3:
                break
            t *= 0.5
        else:
            break
        z, f = zn, fn
        if abs(t * dz) <= 1e-14 * max(1.0, abs(z)):
            break
    return z, abs(f)


def _perturbed(rect: Rect, k: int) -> Rect:
    d = 1e-4 * (k + 1) * rect.size * (1 + 0.3 * k)
    return Rect(rect.re0 - d, rect.re1 + 0.7 * d, rect.im0 - 0.3 * d, rect.im1 + 0.9 * d)


def _count_robust(counter, rect):
    for k in range(6):
        r = rect if k == 0 else _perturbed(rect, k)
        c = counter.count(r)
        if c is not None:
            return r, c
    raise InconclusiveError(f"winding number did not stabilise on {rect}")


def _isolate(counter, sys, rect, count, tol, out, leaves, depth=0):
    if count == 0:
        return
    size = rect.size
    if count == 1 or size < 1e-7 * max(1.0, abs(complex(rect.re0, rect.im0))):
        z0 = complex(0.5 * (rect.re0 + rect.re1), 0.5 * (rect.im0 + rect.im1))
        z, res = _newton(sys, z0, tol)
        if rect.contains(z, 1e-12 * max(1.0, abs(z))) and res <= tol:
            out.append(Root(z, res, count))
            leaves.append((rect, count, count))
            return
        if depth > 80:
            raise InconclusiveError(f"Newton refinement failed in {rect}")
    for frac in (0.5 + 0.0137, 0.5 - 0.0411, 0.5 + 0.0829):
        a, b = rect.split(frac)
        ca, cb = counter.count(a), counter.count(b)
        if ca is not None and cb is not None and ca + cb == count:
            break
    else:
        raise InconclusiveError(f"could not split {rect} consistently")
    _isolate(counter, sys, a, ca, tol, out, leaves, depth + 1)
    _isolate(counter, sys, b, cb, tol, out, leaves, depth + 1)


def default_rectangle(sys: CharacteristicSystem) -> Tuple[Rect, float]:
    """Search region and the real root of ``A3 = 1`` it is centred on."""
    a_d = sys.spec.a_dagger

    def F(g):
        return float(np.real(sys.terms(complex(g))[1])) - 1.0

    try:
        gstar = root_of_decreasing(F, 1e3) if np.any(sys._wbS > 0) else -1.0
    except NumericalError:
        gstar = -1.0
    lam_min = min(-5.0 * math.log(10.0) / a_d, gstar - 1.0)
    lam_cap = max(1.0, 2.0 * abs(gstar))
    a1 = sys.spec.fertility.a1
    if not a1 > 0:
        a1 = sys.spec.fertility.b1 if sys.spec.fertility.b1 > 0 else 0.1 * a_d
    im_max = 8.0 * math.pi / a1
    return Rect(lam_min, lam_cap, -0.01 * im_max, im_max), gstar


def locate_roots(sys: CharacteristicSystem, rect: Optional[Rect] = None, tol: float = 1e-10,
                 margin: float = 1e-8, max_cap: float = 1e4) -> StabilityReport:
    """Count, isolate and refine the zeros of the determinant inside ``rect``.

    The right edge is pushed out until the tail bound certifies that no root
    lies beyond it.  Roots are mirrored to close the list under conjugation.
    """
    if rect is None:
        rect, _ = default_rectangle(sys)
    cap = rect.re1
    bound = sys.tail_bound(cap)
    while bound >= 1.0 and cap < max_cap:
        cap *= 2.0
        bound = sys.tail_bound(cap)
    if cap != rect.re1:
        rect = Rect(rect.re0, cap, rect.im0, rect.im1)

    counter = _Counter(sys)
    rect, total = _count_robust(counter, rect)
    found: List[Root] = []
    leaves: List[Tuple[Rect, int, int]] = []
    _isolate(counter, sys, rect, total, tol, found, leaves)
    refined = sum(r.multiplicity for r in found)
    if refined != total:
        raise InconclusiveError(f"winding count {total} but {refined} refined roots")

    snap = 1e-9
    roots: List[Root] = []
    for r in found:
        z = r.value
        if abs(z.imag) <= snap * max(1.0, abs(z)):
            z = complex(z.real, 0.0)
            roots.append(Root(z, r.residual, r.multiplicity))
        elif z.imag > 0:
            roots.append(Root(z, r.residual, r.multiplicity))
            roots.append(Root(z.conjugate(), r.residual, r.multiplicity))
        else:
            # lower strip: keep only if its mirror image was not found
            if not any(abs(o.value - z.conjugate()) <= 1e-8 * max(1.0, abs(z)) for o in found):
                roots.append(Root(z.conjugate(), r.residual, r.multiplicity))
                roots.append(Root(z, r.residual, r.multiplicity))
    roots.sort(key=lambda r: (r.value.real, r.value.imag))

    right = Rect(max(rect.re0, 0.0), rect.re1, rect.im0, rect.im1) if rect.re1 > 0 else None
    right_count = 0
    if right is not None and right.re1 > right.re0:
        right, right_count = _count_robust(counter, right)

    dominant = max((r.value for r in roots), key=lambda z: (z.real, -abs(z.imag)), default=None)
    if any(r.value.real > margin for r in roots):
        cls = "unstable"
    elif (right_count == 0 and bound < 1.0
          and (dominant is None or dominant.real < -margin)):
        cls = "stable"
    else:
        cls = "inconclusive"
    return StabilityReport(rect, roots, cls, dominant, total, right_count, cap, bound, leaves)


def stability_of(spec: ModelSpec, eq: EquilibriumPoint, kernel: str = "derived",
                 tol: float = 1e-10, allow_fd: bool = True,
                 n: int = DEFAULT_RESOLUTION) -> StabilityReport:
    sys = build_characteristic(spec, eq, kernel=kernel, allow_fd=allow_fd, n=n)
    return locate_roots(sys, tol=tol)
