"""Model specification, model files and hypothesis checks on probe grids."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from .exceptions import EvaluationError, ModelLoadError
from .functions import (
    AgeFunction,
    BaselineHazard,
    Rate,
    XFunction,
    age_function_from_dict,
    hazard_from_dict,
    rate_from_dict,
    xfunction_from_dict,
)


class DensityMortality:
    """Density-dependent extra mortality ``M(a, x)`` with optional floor ``psi``."""

    def __init__(self, rate: Rate, psi: Optional[XFunction] = None):
        self.rate = rate
        self.psi = psi

    def __call__(self, a, x):
        return self.rate(a, x)

    def dx(self, a, x):
        return self.rate.dx(a, x)

    @property
    def depends_on_x(self) -> bool:
        return self.rate.depends_on_x

    @property
    def breakpoints(self):
        return self.rate.breakpoints


class Fertility:
    """Birth rate ``beta(a, x)``, forced to zero outside ``(a1, a2)``.

    ``(b1, b2)`` and ``delta`` describe the window where fertility is
    bounded below; ``beta_plus`` is the global cap.
    """

    def __init__(self, rate: Rate, a1: float, a2: float, b1: float, b2: float,
                 delta: float, beta_plus: float):
        self.rate = rate
        self.a1, self.a2 = float(a1), float(a2)
        self.b1, self.b2 = float(b1), float(b2)
        self.delta = float(delta)
        self.beta_plus = float(beta_plus)

    def _mask(self, a):
        a = np.asarray(a, dtype=float)
        return (a > self.a1) & (a < self.a2)

    def __call__(self, a, x):
        v = self.rate(a, x)
        return np.where(self._mask(a), v, 0.0)

    def dx(self, a, x):
        d = self.rate.dx(a, x)
        if d is None:
            return None
        return np.where(self._mask(a), d, 0.0)

    @property
    def depends_on_x(self) -> bool:
        return self.rate.depends_on_x

    @property
    def breakpoints(self):
        return tuple(sorted(set(self.rate.breakpoints) | {self.a1, self.a2}))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Complete parameterisation of one model instance.

    Instances are immutable and hashed by identity, so derived quantities
    can be cached per instance.
    """

    baseline: BaselineHazard
    density_mortality: DensityMortality
    fertility: Fertility
    weight_p: AgeFunction
    weight_q: AgeFunction
    initial: AgeFunction
    p_interval: Optional[tuple] = None
    name: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def a_dagger(self) -> float:
        return self.baseline.a_dagger

    def mu(self, a, x):
        """Total mortality rate excluding the baseline (which is cumulative)."""
        return self.density_mortality(a, x)

    def with_initial(self, initial: AgeFunction) -> "ModelSpec":
        return ModelSpec(self.baseline, self.density_mortality, self.fertility,
                         self.weight_p, self.weight_q, initial, self.p_interval,
                         self.name, dict(self.metadata))

    def with_fertility_scale(self, factor: float) -> "ModelSpec":
        fert = self.fertility
        rate = fert.rate.scaled(factor)
        new = Fertility(rate, fert.a1, fert.a2, fert.b1, fert.b2,
                        fert.delta * factor, fert.beta_plus * factor)
        return ModelSpec(self.baseline, self.density_mortality, new, self.weight_p,
                         self.weight_q, self.initial, self.p_interval, self.name,
                         dict(self.metadata))


# --------------------------------------------------------------------------
# model files

def model_from_dict(d: dict) -> ModelSpec:
    """Build a :class:`ModelSpec` from the JSON-compatible model-file layout."""
    if not isinstance(d, dict):
        raise ModelLoadError("model: expected a mapping")
    try:
        a_dagger = float(d["a_dagger"])
    except (KeyError, TypeError, ValueError):
        raise ModelLoadError("a_dagger: missing or not a number") from None
    if not a_dagger > 0:
        raise ModelLoadError("a_dagger: must be positive")
    for key in ("mu0", "M", "beta", "p", "q", "f"):
        if key not in d:
            raise ModelLoadError(f"{key}: missing field")

    baseline = hazard_from_dict(d["mu0"], a_dagger, "mu0")
    m = d["M"]
    psi = xfunction_from_dict(m["psi"], "M.psi") if isinstance(m, dict) and m.get("psi") else None
    mortality = DensityMortality(rate_from_dict(m, "M"), psi)

    b = d["beta"]
    try:
        a1, a2 = float(b.get("a1", 0.0)), float(b.get("a2", a_dagger))
        b1, b2 = float(b.get("b1", a1)), float(b.get("b2", a2))
        delta = float(b.get("delta", 0.0))
        beta_plus = float(b["beta_plus"])
    except KeyError:
        raise ModelLoadError("beta: missing 'beta_plus'") from None
    except (TypeError, ValueError, AttributeError) as exc:
        raise ModelLoadError(f"beta: {exc}") from exc
    scale = float(b.get("scale", 1.0))
    fert = Fertility(rate_from_dict({k: v for k, v in b.items() if k != "scale"}, "beta"),
                     a1, a2, b1, b2, delta, beta_plus)
    if scale != 1.0:
        fert = Fertility(fert.rate.scaled(scale), a1, a2, b1, b2, delta * scale,
                         beta_plus * scale)

    p = age_function_from_dict(d["p"], "p")
    p_interval = None
    if "p1" in d["p"] and "p2" in d["p"]:
        p_interval = (float(d["p"]["p1"]), float(d["p"]["p2"]))
    q = age_function_from_dict(d["q"], "q")
    f = age_function_from_dict(d["f"], "f")
    return ModelSpec(baseline, mortality, fert, p, q, f, p_interval,
                     str(d.get("name", "")), dict(d.get("metadata", {})))


def load_model(path) -> ModelSpec:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"{path}: {exc}") from exc
    return model_from_dict(d)


# --------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class ProbeGrid:
    """Sample points used to falsify function-space hypotheses."""

    n_ages: int = 512
    n_densities: int = 16
    x_max: float = 100.0
    psi_threshold: float = 10.0

    def __post_init__(self):
        if self.n_ages < 2 or self.n_densities < 2:
            raise ValueError("probe grid needs >= 2 ages and >= 2 density values")
        if not self.x_max > 0:
            raise ValueError("x_max must be positive")

    def ages(self, a_dagger: float) -> np.ndarray:
        return np.linspace(0.0, a_dagger, self.n_ages, endpoint=False)

    def densities(self) -> np.ndarray:
        tail = np.geomspace(self.x_max * 1e-4, self.x_max, self.n_densities - 1)
        return np.concatenate([[0.0], tail])


@dataclass(frozen=True)
class Check:
    name: str
    status: str  # "pass", "fail" or "not-checked"
    witness: Optional[tuple] = None
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def ok(self) -> bool:
        """True when every checked H-hypothesis passed."""
        return not any(c.status == "fail" and c.name.startswith("H") for c in self.checks)

    def failed(self):
        return [c for c in self.checks if c.status == "fail"]

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self):
        for c in self.checks:
            w = "" if c.witness is None else f" witness={c.witness}"
            d = f" ({c.detail})" if c.detail else ""
            yield f"{c.name}: {c.status}{w}{d}"

    def __str__(self):
        return "\n".join(self.lines())


def _eval_rate(name, fn, ages, xs):
    """Evaluate ``fn`` on the ages x densities grid; locate failing points."""
    A = ages[None, :]
    X = xs[:, None]
    try:
        with np.errstate(all="ignore"):
            vals = np.asarray(fn(A, X), dtype=float)
        vals = np.broadcast_to(vals, (xs.size, ages.size))
        bad = ~np.isfinite(vals)
        if not bad.any():
            return np.array(vals)
        i, j = np.argwhere(bad)[0]
        raise EvaluationError(name, float(ages[j]), float(xs[i]), "non-finite value")
    except EvaluationError:
        raise
    except Exception as exc:
        for x in xs:
            for a in ages:
                try:
                    v = float(np.asarray(fn(np.array([a]), x)).ravel()[0])
                except Exception as inner:
                    raise EvaluationError(name, float(a), float(x), inner) from inner
                if not math.isfinite(v):
                    raise EvaluationError(name, float(a), float(x), "non-finite value")
        raise EvaluationError(name, None, None, exc) from exc


def _eval_age(name, fn, ages):
    return _eval_rate(name, lambda a, x: fn(a) + 0.0 * x, ages, np.zeros(1))[0]


def _lipschitz(vals, xs):
    dx = np.diff(xs)[:, None]
    return float(np.max(np.abs(np.diff(vals, axis=0)) / dx))


def _first(mask, ages, xs=None):
    if xs is None:
        j = int(np.argmax(mask))
        return (float(ages[j]),)
    i, j = np.argwhere(mask)[0]
    return (float(ages[j]), float(xs[i]))


def validate(spec: ModelSpec, probe: ProbeGrid = ProbeGrid()) -> ValidationReport:
    """Check H1-H4 (and A1/A2 when derivable) on the probe grid."""
    ages = probe.ages(spec.a_dagger)
    xs = probe.densities()
    checks = []
    tiny = 1e-12

    # H1: baseline hazard and density mortality
    H = spec.baseline.cumulative(ages)
    if not np.all(np.isfinite(H)):
        checks.append(Check("H1.baseline_finite", "fail", _first(~np.isfinite(H), ages)))
    else:
        checks.append(Check("H1.baseline_finite", "pass"))
    dH = np.diff(H)
    if H[0] < -tiny or np.any(dH < -tiny):
        w = (float(ages[0]),) if H[0] < -tiny else _first(np.r_[False, dH < -tiny], ages)
        checks.append(Check("H1.baseline_monotone", "fail", w))
    else:
        checks.append(Check("H1.baseline_monotone", "pass"))
    s_end = float(spec.baseline.survival(np.array([spec.a_dagger]))[0])
    checks.append(Check("H1.baseline_blowup", "pass" if s_end == 0.0 else "fail",
                        None if s_end == 0.0 else (spec.a_dagger,),
                        f"survival at a_dagger = {s_end}"))

    M = _eval_rate("M", spec.density_mortality, ages, xs)
    bad0 = np.abs(M[0]) > tiny
    checks.append(Check("H1.M_zero_at_0", "fail" if bad0.any() else "pass",
                        (_first(bad0, ages)[0], 0.0) if bad0.any() else None))
    psi = spec.density_mortality.psi
    if psi is not None:
        checks.append(Check("H1.M_nonnegative", "not-checked", detail="replaced by A2"))
    else:
        neg = M < -tiny
        checks.append(Check("H1.M_nonnegative", "fail" if neg.any() else "pass",
                            _first(neg, ages, xs) if neg.any() else None))
    checks.append(Check("H1.M_lipschitz", "pass",
                        detail=f"H(x_max) >= {_lipschitz(M, xs):.6g}"))

    # H2: fertility
    fert = spec.fertility
    B = _eval_rate("beta", fert, ages, xs)
    neg = B < -tiny
    over = B > fert.beta_plus * (1 + 1e-12) + tiny
    if neg.any():
        checks.append(Check("H2.beta_bounds", "fail", _first(neg, ages, xs), "beta < 0"))
    elif over.any():
        idx = np.argwhere(over)
        i, j = idx[np.argmax(idx[:, 0])]
        checks.append(Check("H2.beta_bounds", "fail", (float(ages[j]), float(xs[i])),
                            f"beta > beta_plus={fert.beta_plus}"))
    else:
        checks.append(Check("H2.beta_bounds", "pass"))
    order_ok = 0 < fert.a1 < fert.b1 < fert.b2 < fert.a2 <= spec.a_dagger and fert.delta > 0
    outside = (ages <= fert.a1) | (ages >= fert.a2)
    leak = (np.abs(B) > tiny) & outside[None, :]
    if not order_ok:
        checks.append(Check("H2.beta_support", "fail",
                            detail="need 0 < a1 < b1 < b2 < a2 <= a_dagger and delta > 0"))
    elif leak.any():
        checks.append(Check("H2.beta_support", "fail", _first(leak, ages, xs)))
    else:
        checks.append(Check("H2.beta_support", "pass"))
    window = (ages > fert.b1) & (ages < fert.b2)
    low = (B <= fert.delta) & window[None, :]
    if not window.any():
        checks.append(Check("H2.beta_floor", "not-checked", detail="no probe age in (b1, b2)"))
    else:
        checks.append(Check("H2.beta_floor", "fail" if low.any() else "pass",
                            _first(low, ages, xs) if low.any() else None))
    checks.append(Check("H2.beta_lipschitz", "pass",
                        detail=f"H(x_max) >= {_lipschitz(B, xs):.6g}"))

    # H3: weights
    for label, w in (("p", spec.weight_p), ("q", spec.weight_q)):
        vals = _eval_age(label, w, ages)
        neg = vals < -tiny
        checks.append(Check(f"H3.{label}_nonnegative", "fail" if neg.any() else "pass",
                            _first(neg, ages) if neg.any() else None,
                            f"sup = {float(np.max(vals)):.6g}"))
    if spec.p_interval is None:
        checks.append(Check("H3.p_floor", "not-checked", detail="no [p1, p2] given"))
    else:
        p1, p2 = spec.p_interval
        sel = np.linspace(p1, p2, 64)
        pv = spec.weight_p(sel)
        low = pv <= fert.delta
        ok = 0 < p1 < p2 and not low.any()
        checks.append(Check("H3.p_floor", "pass" if ok else "fail",
                            None if ok else ((float(sel[np.argmax(low)]),) if low.any() else None)))

    # H4: initial distribution
    fv = _eval_age("f", spec.initial, ages)
    neg = fv < -tiny
    checks.append(Check("H4.f_nonnegative", "fail" if neg.any() else "pass",
                        _first(neg, ages) if neg.any() else None))
    total = float(trapezoid(fv, ages))
    checks.append(Check("H4.f_integrable", "pass" if math.isfinite(total) else "fail",
                        detail=f"integral ~ {total:.6g}"))

    # A1 / A2, only when derivable
    c = estimate_A1_constant(spec, probe)
    if c is None:
        checks.append(Check("A1", "fail", detail="beta > 0 where p = 0"))
    else:
        checks.append(Check("A1", "pass", detail=f"c = {c:.6g}"))
    if psi is not None:
        pv = np.asarray(psi(xs), dtype=float)
        under = M < pv[:, None] - 1e-12 * np.maximum(1.0, np.abs(pv[:, None]))
        checks.append(Check("A2.M_above_psi", "fail" if under.any() else "pass",
                            _first(under, ages, xs) if under.any() else None))
        fine = np.linspace(0.0, probe.x_max, 4 * probe.n_ages)
        pf = np.asarray(psi(fine), dtype=float)
        dec = np.diff(pf) < -1e-12 * np.maximum(1.0, np.abs(pf[1:]))
        checks.append(Check("A2.psi_monotone", "fail" if dec.any() else "pass",
                            (float(fine[1:][dec][0]),) if dec.any() else None))
        top = float(pf[-1])
        checks.append(Check("A2.psi_divergent",
                            "pass" if top > probe.psi_threshold else "fail",
                            None if top > probe.psi_threshold else (probe.x_max,),
                            f"psi(x_max) = {top:.6g}"))
    return ValidationReport(checks)


def estimate_A1_constant(spec: ModelSpec, probe: ProbeGrid = ProbeGrid()) -> Optional[float]:
    """Smallest ``c`` with ``sup_x beta(a, x) <= c * p(a)`` on the probe ages.

    Returns ``None`` when fertility is positive at an age where ``p``
    vanishes.
    """
    fert = spec.fertility
    ages = np.union1d(probe.ages(spec.a_dagger),
                      np.linspace(fert.a1, fert.a2, probe.n_ages))
    ages = ages[ages < spec.a_dagger]
    xs = probe.densities()
    B = _eval_rate("beta", fert, ages, xs).max(axis=0)
    P = _eval_age("p", spec.weight_p, ages)
    pos = B > 0
    if np.any(pos & (P <= 0)):
        return None
    if not pos.any():
        return 0.0
    return float(np.max(B[pos] / P[pos]))
