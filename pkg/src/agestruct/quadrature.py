"""Uniform age grids and the quadrature rules used on them."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from scipy.integrate import cumulative_simpson


class AgeGrid:
    """Uniform grid ``0 = a_0 < ... < a_n = a_dagger``.

    Node values of piecewise rules are sampled with one-sided limits at the
    ends of ``[0, a_dagger]`` and with the mean of both one-sided limits at
    interior breakpoints, which keeps trapezoid and Simpson sums at their
    nominal order when a jump falls on a node.
    """

    def __init__(self, a_dagger: float, n_intervals: int):
        if n_intervals < 1:
            raise ValueError("need at least one interval")
        self.a_dagger = float(a_dagger)
        self.n = int(n_intervals)
        self.h = self.a_dagger / self.n
        self.nodes = np.linspace(0.0, self.a_dagger, self.n + 1)
        self._eta = 1e-9 * self.h

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n + 1, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def simpson_weights(self) -> np.ndarray:
        if self.n % 2:
            raise ValueError("Simpson weights need an even number of intervals")
        w = np.empty(self.n + 1)
        w[1::2] = 4.0
        w[2::2] = 2.0
        w[0] = w[-1] = 1.0
        return w * (self.h / 3.0)

    def breakpoint_nodes(self, breakpoints: Iterable[float]) -> np.ndarray:
        idx = []
        for b in breakpoints:
            if not 0.0 <= b <= self.a_dagger:
                continue
            i = int(round(b / self.h))
            if abs(self.nodes[i] - b) <= 1e-9 * self.h:
                idx.append(i)
        return np.unique(np.asarray(idx, dtype=int))

    def sample(self, fn: Callable, breakpoints: Iterable[float] = (),
               points: np.ndarray = None) -> np.ndarray:
        """Evaluate ``fn`` on the nodes (last axis), correcting at breakpoints."""
        nodes = self.nodes if points is None else points
        vals = np.array(fn(nodes), dtype=float)
        if points is not None:
            return vals
        idx = self.breakpoint_nodes(breakpoints)
        if idx.size == 0:
            return vals
        left = np.asarray(fn(self.nodes[idx] - self._eta), dtype=float)
        right = np.asarray(fn(self.nodes[idx] + self._eta), dtype=float)
        mid = 0.5 * (left + right)
        first = idx == 0
        last = idx == self.n
        mid = np.where(first, right, np.where(last, left, mid))
        vals[..., idx] = mid
        return vals

    def cumulative(self, values: np.ndarray) -> np.ndarray:
        """Running integral from 0 to each node (composite Simpson)."""
        if self.n < 2:
            out = np.zeros_like(values)
            out[..., 1:] = 0.5 * self.h * (values[..., 1:] + values[..., :-1])
            return out
        return cumulative_simpson(values, dx=self.h, axis=-1, initial=0.0)


def node_sampler(rule, grid: AgeGrid, breakpoints=(), points=None, mask=None):
    """Return ``x -> rule(nodes, x)`` sampled on ``grid`` (or on ``points``).

    ``x`` may be a scalar (result has the node shape) or a 1-d array
    (result has shape ``(len(x), n_nodes)``).  Separable rules sample their
    age factor once.
    """
    from .functions import SeparableRate

    inner = getattr(rule, "rate", rule)
    if mask is None and hasattr(rule, "_mask"):
        mask = rule._mask
    if isinstance(inner, SeparableRate):
        g = inner.g
        base_fn = g if mask is None else (lambda a: np.where(mask(a), g(a), 0.0))
        base = grid.sample(base_fn, breakpoints, points)
        hx = inner.h

        def sampled(x):
            x = np.asarray(x, dtype=float)
            if hx is None:
                return base if x.ndim == 0 else np.broadcast_to(base, x.shape + base.shape)
            hv = np.asarray(hx(x), dtype=float)
            return base * hv if x.ndim == 0 else base[None, :] * hv[:, None]

        sampled.depends_on_x = hx is not None
        return sampled

    def sampled(x):
        x = np.asarray(x, dtype=float)
        xx = x if x.ndim == 0 else x[:, None]
        return grid.sample(lambda a: rule(a, xx), breakpoints, points)

    sampled.depends_on_x = getattr(rule, "depends_on_x", True)
    return sampled
