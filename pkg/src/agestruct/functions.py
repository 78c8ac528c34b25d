"""Rule objects for vital rates, weights and initial data.

Everything here is vectorised over age.  Density arguments ``x`` may be
scalars or arrays that broadcast against the age array.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ModelLoadError


class AgeFunction:
    """A non-negative function of age, zero outside its declared support.

    Parameters
    ----------
    rule : callable
        Vectorised ``a -> value``.
    support : (float, float)
        Closed interval outside which the function is zero.
    breakpoints : sequence of float
        Ages where the rule is not smooth.  Quadrature averages one-sided
        limits at these points.
    """

    def __init__(self, rule: Callable, support=(0.0, math.inf),
                 breakpoints: Sequence[float] = (), name: str = ""):
        lo, hi = float(support[0]), float(support[1])
        if hi < lo:
            raise ValueError(f"empty support {support!r}")
        self.rule = rule
        self.support = (lo, hi)
        bps = {float(b) for b in breakpoints}
        bps.update(b for b in (lo, hi) if math.isfinite(b))
        self.breakpoints = tuple(sorted(bps))
        self.name = name

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        lo, hi = self.support
        inside = (a >= lo) & (a <= hi)
        vals = np.asarray(self.rule(a), dtype=float)
        vals = np.broadcast_to(vals, a.shape)
        return np.where(inside, vals, 0.0)

    def scaled(self, factor: float) -> "AgeFunction":
        rule = self.rule
        return AgeFunction(lambda a: factor * np.asarray(rule(a), dtype=float),
                           self.support, self.breakpoints, self.name)

    @classmethod
    def constant(cls, value: float, support=(0.0, math.inf), name=""):
        v = float(value)
        return cls(lambda a: np.full(np.shape(a), v), support, (), name)

    @classmethod
    def piecewise_linear(cls, ages, values, name=""):
        """Linear interpolation through ``(ages, values)``, zero outside."""
        ages = np.asarray(ages, dtype=float)
        values = np.asarray(values, dtype=float)
        if ages.ndim != 1 or ages.shape != values.shape or ages.size < 2:
            raise ValueError("piecewise-linear needs >= 2 matching knots")
        if np.any(np.diff(ages) <= 0):
            raise ValueError("knot ages must be strictly increasing")
        return cls(lambda a: np.interp(a, ages, values),
                   (ages[0], ages[-1]), tuple(ages), name)

    @classmethod
    def zero(cls, name=""):
        return cls.constant(0.0, name=name)

    def __repr__(self):
        return f"AgeFunction({self.name or self.rule!r}, support={self.support})"


class XFunction:
    """Scalar dependence ``x -> h(x)`` on a weighted population size.

    ``floor`` clamps the value from below; the derivative is zero where the
    clamp is active.
    """

    def __init__(self, fn: Callable, dfn: Optional[Callable] = None,
                 floor: Optional[float] = None, name: str = ""):
        self.fn = fn
        self.dfn = dfn
        self.floor = floor
        self.name = name

    def __call__(self, x):
        v = np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)
        if self.floor is not None:
            v = np.maximum(v, self.floor)
        return v

    @property
    def differentiable(self) -> bool:
        return self.dfn is not None

    def derivative(self, x):
        if self.dfn is None:
            return None
        x = np.asarray(x, dtype=float)
        d = np.asarray(self.dfn(x), dtype=float)
        if self.floor is not None:
            d = np.where(np.asarray(self.fn(x)) < self.floor, 0.0, d)
        return d

    @classmethod
    def constant(cls, value: float, floor=None):
        v = float(value)
        return cls(lambda x: np.full(np.shape(x), v),
                   lambda x: np.zeros(np.shape(x)), floor, f"const({v})")

    @classmethod
    def linear(cls, slope: float = 1.0, intercept: float = 0.0, floor=None):
        s, c = float(slope), float(intercept)
        return cls(lambda x: c + s * x, lambda x: np.full(np.shape(x), s),
                   floor, f"{c}+{s}x")

    @classmethod
    def polynomial(cls, coeffs, floor=None):
        """``sum(coeffs[k] * x**k)``, lowest order first."""
        poly = np.polynomial.Polynomial(np.asarray(coeffs, dtype=float))
        dpoly = poly.deriv()
        return cls(poly, dpoly, floor, f"poly{list(coeffs)}")

    @classmethod
    def power(cls, coef: float, exponent: float, floor=None, shift: float = 0.0,
              offset: float = 0.0):
        """``coef * max(x - shift, 0)**exponent + offset``."""
        c, e, s, o = float(coef), float(exponent), float(shift), float(offset)
        if e < 1:
            raise ValueError("power exponent must be >= 1 for Lipschitz continuity")
        return cls(lambda x: c * np.power(np.maximum(x - s, 0.0), e) + o,
                   lambda x: c * e * np.power(np.maximum(x - s, 0.0), e - 1),
                   floor, f"{c}(x-{s})^{e}+{o}")

    @classmethod
    def exp_decay(cls, rate: float, coef: float = 1.0, floor=None):
        """``coef * exp(-rate * x)``."""
        r, c = float(rate), float(coef)
        return cls(lambda x: c * np.exp(-r * x),
                   lambda x: -r * c * np.exp(-r * x), floor, f"{c}exp(-{r}x)")

    @classmethod
    def table(cls, xs, values, floor=None):
        xs = np.asarray(xs, dtype=float)
        vs = np.asarray(values, dtype=float)
        slopes = np.diff(vs) / np.diff(xs)

        def dfn(x):
            i = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, slopes.size - 1)
            d = slopes[i]
            return np.where((x < xs[0]) | (x > xs[-1]), 0.0, d)

        return cls(lambda x: np.interp(x, xs, vs), dfn, floor, "table")


class Rate:
    """A rate depending on age and a weighted size, ``(a, x) -> r(a, x)``."""

    depends_on_x = True
    breakpoints: tuple = ()

    def __call__(self, a, x):
        raise NotImplementedError

    def dx(self, a, x):
        """Partial derivative in ``x``; ``None`` when no closed form exists."""
        return None

    def scaled(self, factor: float) -> "Rate":
        base = self
        dfn = None
        if base.dx(np.zeros(1), 0.0) is not None:
            dfn = lambda a, x: factor * base.dx(a, x)  # noqa: E731
        return CallableRate(lambda a, x: factor * base(a, x), dfn,
                            base.depends_on_x, base.breakpoints)


class SeparableRate(Rate):
    """``g(a) * h(x)``; ``h=None`` means the rate ignores ``x``."""

    def __init__(self, g: AgeFunction, h: Optional[XFunction] = None, name: str = ""):
        self.g = g
        self.h = h
        self.name = name
        self.depends_on_x = h is not None
        self.breakpoints = g.breakpoints

    def __call__(self, a, x):
        ga = self.g(a)
        if self.h is None:
            return np.broadcast_to(ga, np.broadcast(ga, np.asarray(x)).shape).copy()
        return ga * self.h(x)

    def dx(self, a, x):
        if self.h is None:
            return np.zeros(np.broadcast(np.asarray(a), np.asarray(x)).shape)
        d = self.h.derivative(x)
        if d is None:
            return None
        return self.g(a) * d

    def scaled(self, factor: float) -> "SeparableRate":
        return SeparableRate(self.g.scaled(factor), self.h, self.name)

    def __repr__(self):
        return f"SeparableRate({self.g!r}, {self.h.name if self.h else None})"


class CallableRate(Rate):
    """Wrap arbitrary vectorised callables ``fn(a, x)`` and optional ``dfn(a, x)``."""

    def __init__(self, fn: Callable, dfn: Optional[Callable] = None,
                 depends_on_x: bool = True, breakpoints=(), name: str = ""):
        # Wrapped callables are not inspected, so breakpoints must be declared.
        self.fn = fn
        self.dfn = dfn
        self.depends_on_x = depends_on_x
        self.breakpoints = tuple(float(b) for b in breakpoints)
        self.name = name

    def __call__(self, a, x):
        return np.asarray(self.fn(np.asarray(a, dtype=float), np.asarray(x, dtype=float)),
                          dtype=float)

    def dx(self, a, x):
        if self.dfn is None:
            return None
        return np.asarray(self.dfn(np.asarray(a, dtype=float), np.asarray(x, dtype=float)),
                          dtype=float)


def zero_rate() -> SeparableRate:
    return SeparableRate(AgeFunction.zero(), None, "zero")


def central_difference(rate: Rate, a, x, rel_step: float = 1e-6):
    """Central difference in ``x`` with step ``rel_step * max(1, x)``.

    At ``x`` closer to zero than the step, a one-sided difference is used so
    the rule is never probed at negative sizes.
    """
    x = float(x)
    step = rel_step * max(1.0, abs(x))
    if x - step < 0.0:
        return (rate(a, x + step) - rate(a, x)) / step
    return (rate(a, x + step) - rate(a, x - step)) / (2.0 * step)


class BaselineHazard:
    """Baseline mortality stored as a cumulative hazard ``H(a)``.

    ``H`` is finite on ``[0, a_dagger)`` and infinite from ``a_dagger`` on,
    so survival ``exp(-H)`` is exactly zero at the maximal age.
    """

    def __init__(self, a_dagger: float, cumulative_rule: Callable,
                 breakpoints=(), name: str = ""):
        if not a_dagger > 0:
            raise ValueError("a_dagger must be positive")
        self.a_dagger = float(a_dagger)
        self.rule = cumulative_rule
        self.breakpoints = tuple(float(b) for b in breakpoints)
        self.name = name

    def cumulative(self, a):
        a = np.asarray(a, dtype=float)
        inside = a < self.a_dagger
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.asarray(self.rule(np.where(inside, a, 0.0)), dtype=float)
        return np.where(inside, np.broadcast_to(vals, a.shape), np.inf)

    def survival(self, a):
        return np.exp(-self.cumulative(a))

    @classmethod
    def constant(cls, a_dagger: float, rate: float = 0.0):
        """Constant rate ``rate`` on ``[0, a_dagger)``, blow-up at ``a_dagger``."""
        m = float(rate)
        return cls(a_dagger, lambda a: m * a, (), f"constant({m})")

    @classmethod
    def rational_blowup(cls, a_dagger: float, k: float, rate: float = 0.0):
        """``H(a) = rate*a + k*a/(a_dagger - a)``."""
        ad, kk, m = float(a_dagger), float(k), float(rate)
        return cls(a_dagger, lambda a: m * a + kk * a / (ad - a), (),
                   f"rational({kk},{m})")

    @classmethod
    def table(cls, a_dagger: float, ages, values):
        """Piecewise-linear cumulative hazard through the given knots."""
        ages = np.asarray(ages, dtype=float)
        values = np.asarray(values, dtype=float)
        if np.any(np.diff(values) < 0):
            raise ValueError("cumulative hazard knots must be non-decreasing")
        slope = (values[-1] - values[-2]) / (ages[-1] - ages[-2]) if ages.size > 1 else 0.0

        def rule(a):
            out = np.interp(a, ages, values)
            return np.where(a > ages[-1], values[-1] + slope * (a - ages[-1]), out)

        return cls(a_dagger, rule, tuple(ages), "table")

    def __repr__(self):
        return f"BaselineHazard({self.name}, a_dagger={self.a_dagger})"


# --------------------------------------------------------------------------
# model-file builders

def _params(d: dict, field: str) -> dict:
    p = d.get("params", {})
    if not isinstance(p, dict):
        raise ModelLoadError(f"{field}: params must be a mapping")
    return p


def _need(p: dict, key: str, field: str):
    try:
        return p[key]
    except KeyError:
        raise ModelLoadError(f"{field}: missing parameter {key!r}") from None


def age_function_from_dict(d: dict, field: str) -> AgeFunction:
    if not isinstance(d, dict) or "kind" not in d:
        raise ModelLoadError(f"{field}: expected a mapping with a 'kind'")
    kind = d["kind"]
    p = _params(d, field)
    try:
        if kind == "zero":
            fn = AgeFunction.zero(field)
        elif kind == "constant":
            support = p.get("support", [0.0, math.inf])
            lo = float(support[0])
            hi = math.inf if support[1] is None else float(support[1])
            fn = AgeFunction.constant(_need(p, "value", field), (lo, hi), field)
        elif kind == "piecewise-linear":
            knots = np.asarray(_need(p, "knots", field), dtype=float)
            fn = AgeFunction.piecewise_linear(knots[:, 0], knots[:, 1], field)
        elif kind == "table":
            fn = AgeFunction.piecewise_linear(_need(p, "ages", field),
                                              _need(p, "values", field), field)
        else:
            raise ModelLoadError(f"{field}: unknown kind {kind!r}")
    except (ValueError, TypeError, IndexError) as exc:
        raise ModelLoadError(f"{field}: {exc}") from exc
    scale = float(d.get("scale", 1.0))
    return fn if scale == 1.0 else fn.scaled(scale)


def xfunction_from_dict(d: dict, field: str) -> XFunction:
    if not isinstance(d, dict) or "kind" not in d:
        raise ModelLoadError(f"{field}: expected a mapping with a 'kind'")
    kind = d["kind"]
    p = _params(d, field)
    floor = d.get("floor")
    floor = None if floor is None else float(floor)
    try:
        if kind == "constant":
            return XFunction.constant(_need(p, "value", field), floor)
        if kind == "linear":
            return XFunction.linear(p.get("slope", 1.0), p.get("intercept", 0.0), floor)
        if kind == "polynomial":
            return XFunction.polynomial(_need(p, "coeffs", field), floor)
        if kind == "power":
            return XFunction.power(p.get("coef", 1.0), _need(p, "exponent", field), floor,
                                   p.get("shift", 0.0), p.get("offset", 0.0))
        if kind == "exp":
            return XFunction.exp_decay(_need(p, "rate", field), p.get("coef", 1.0), floor)
        if kind in ("table", "piecewise-linear"):
            if "knots" in p:
                knots = np.asarray(p["knots"], dtype=float)
                return XFunction.table(knots[:, 0], knots[:, 1], floor)
            return XFunction.table(_need(p, "xs", field), _need(p, "values", field), floor)
    except (ValueError, TypeError, IndexError) as exc:
        raise ModelLoadError(f"{field}: {exc}") from exc
    raise ModelLoadError(f"{field}: unknown kind {kind!r}")


def rate_from_dict(d: dict, field: str) -> SeparableRate:
    """Build ``M`` or ``beta`` from a model-file entry."""
    if not isinstance(d, dict) or "kind" not in d:
        raise ModelLoadError(f"{field}: expected a mapping with a 'kind'")
    kind = d["kind"]
    p = _params(d, field)
    if kind == "zero":
        rate = zero_rate()
    elif kind == "separable":
        g = age_function_from_dict(_need(p, "g", field), f"{field}.g")
        h = xfunction_from_dict(_need(p, "h", field), f"{field}.h")
        rate = SeparableRate(g, h, field)
    elif kind in ("constant", "piecewise-linear", "table"):
        g = age_function_from_dict({"kind": kind, "params": p}, field)
        rate = SeparableRate(g, None, field)
    else:
        raise ModelLoadError(f"{field}: unknown kind {kind!r}")
    scale = float(d.get("scale", 1.0))
    return rate if scale == 1.0 else rate.scaled(scale)


def hazard_from_dict(d: dict, a_dagger: float, field: str = "mu0") -> BaselineHazard:
    if not isinstance(d, dict) or "kind" not in d:
        raise ModelLoadError(f"{field}: expected a mapping with a 'kind'")
    kind = d["kind"]
    p = _params(d, field)
    try:
        if kind == "zero":
            return BaselineHazard.constant(a_dagger, 0.0)
        if kind == "constant":
            return BaselineHazard.constant(a_dagger, p.get("rate", p.get("value", 0.0)))
        if kind == "rational-blowup":
            return BaselineHazard.rational_blowup(a_dagger, _need(p, "k", field),
                                                  p.get("rate", 0.0))
        if kind == "piecewise-linear":
            knots = np.asarray(_need(p, "knots", field), dtype=float)
            return BaselineHazard.table(a_dagger, knots[:, 0], knots[:, 1])
        if kind == "table":
            return BaselineHazard.table(a_dagger, _need(p, "ages", field),
                                        _need(p, "values", field))
    except (ValueError, TypeError, IndexError) as exc:
        raise ModelLoadError(f"{field}: {exc}") from exc
    raise ModelLoadError(f"{field}: unknown kind {kind!r}")
