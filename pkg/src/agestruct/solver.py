"""Forward integration along characteristics on an aligned age-time grid.

The age step equals the time step, so every cohort moves exactly one node
per step.  Newborn rate and the two weighted sizes at the newest time slice
enter their own defining sums; that coupling is closed by a damped
fixed-point iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .exceptions import ConvergenceError, NegativeValueError, ValidationFailed
from .model import ModelSpec, validate
from .quadrature import AgeGrid, node_sampler


@dataclass(frozen=True)
class GridSpec:
    h: float
    T: float
    snapshot_stride: int = 0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not self.T >= self.h:
            raise ValueError("horizon T must be at least h")
        if self.snapshot_stride < 0:
            raise ValueError("snapshot_stride must be >= 0")

    def n_ages(self, a_dagger: float) -> int:
        ratio = a_dagger / self.h
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9:
            raise ValueError(f"a_dagger/h = {ratio!r} is not an integer; grid not aligned")
        return n

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.h))


@dataclass
class Trajectory:
    h: float
    a_dagger: float
    t: np.ndarray
    rho: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    iters: np.ndarray
    ages: np.ndarray
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return self.t.size

    def total_population(self, k: int) -> float:
        """Trapezoid integral of the stored density at step ``k``."""
        n = self.snapshots[k]
        w = np.full(n.size, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return float(w @ n)

    def window(self, t0: float, t1: float = np.inf) -> np.ndarray:
        """Indices of steps with ``t0 <= t <= t1``."""
        eps = 1e-9 * self.h
        return np.nonzero((self.t >= t0 - eps) & (self.t <= t1 + eps))[0]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "rho", "P", "Q", "iters"])
            for k in range(self.t.size):
                w.writerow([repr(float(self.t[k])), repr(float(self.rho[k])),
                            repr(float(self.P[k])), repr(float(self.Q[k])),
                            int(self.iters[k])])

    def write_snapshots(self, directory) -> list:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for k in sorted(self.snapshots):
            p = directory / f"snapshot_t{k}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["a", "n"])
                for a, n in zip(self.ages, self.snapshots[k]):
                    w.writerow([repr(float(a)), repr(float(n))])
            paths.append(p)
        return paths


@dataclass
class SolverState:
    """Density slice and aggregates at step ``k``."""

    k: int
    n: np.ndarray
    rho: float
    P: float
    Q: float


class _Stepper:
    """Grid-sampled rules and the one-step map for a fixed model and grid."""

    def __init__(self, spec: ModelSpec, grid: GridSpec):
        self.spec = spec
        N = grid.n_ages(spec.a_dagger)
        self.N = N
        self.h = h = spec.a_dagger / N
        self.age_grid = ag = AgeGrid(spec.a_dagger, N)
        self.ages = ag.nodes
        self.mids = ag.nodes[:-1] + 0.5 * h
        self.wt = ag.trapezoid_weights()

        H = spec.baseline.cumulative(self.ages)
        with np.errstate(invalid="ignore", over="ignore"):
            dH = H[1:] - H[:-1]
        self.surv_step = np.where(np.isinf(H[1:]), 0.0, np.exp(-np.nan_to_num(dH)))

        fert = spec.fertility
        self._beta = node_sampler(fert, ag, fert.breakpoints)
        self.beta_dep = bool(self._beta.depends_on_x)
        if not self.beta_dep:
            self._beta_w0 = self.wt * self._beta(0.0)

        M = spec.density_mortality
        self._M = node_sampler(M, ag, (), points=self.mids)
        self.M_dep = bool(self._M.depends_on_x)
        if not self.M_dep:
            self._decay0 = self.surv_step * np.exp(-h * self._M(0.0))

        self.p_w = self.wt * ag.sample(spec.weight_p, spec.weight_p.breakpoints)
        self.q_w = self.wt * ag.sample(spec.weight_q, spec.weight_q.breakpoints)

    def beta_w(self, Q: float) -> np.ndarray:
        return self.wt * self._beta(Q) if self.beta_dep else self._beta_w0

    def decay(self, P_prev: float, P: float) -> np.ndarray:
        if not self.M_dep:
            return self._decay0
        return self.surv_step * np.exp(-self.h * self._M(0.5 * (P_prev + P)))

    def initial(self) -> SolverState:
        n0 = self.age_grid.sample(self.spec.initial, self.spec.initial.breakpoints)
        n0[-1] = 0.0
        P = float(self.p_w @ n0)
        Q = float(self.q_w @ n0)
        rho = float(self.beta_w(Q) @ n0)
        return SolverState(0, n0, rho, P, Q)

    def slice(self, prev: SolverState, rho: float, P: float) -> np.ndarray:
        n = np.empty_like(prev.n)
        n[1:] = prev.n[:-1] * self.decay(prev.P, P)
        n[0] = rho
        return n

    def image(self, prev: SolverState, cand) -> tuple:
        """Apply the discrete integral equations to a candidate triple."""
        rho, P, Q = cand
        n = self.slice(prev, rho, P)
        return (float(self.beta_w(Q) @ n), float(self.p_w @ n), float(self.q_w @ n)), n


def step_residual(spec: ModelSpec, grid: GridSpec, state: SolverState, candidate) -> float:
    """Max absolute residual of the discrete (rho, P, Q) equations at step ``state.k + 1``.

    ``state`` is the slice at the previous time.
    """
    st = _Stepper(spec, grid)
    img, _ = st.image(state, candidate)
    return float(max(abs(a - b) for a, b in zip(img, candidate)))


def _check_sign(values, scale, tol, k):
    floor = -tol * max(scale, 1.0)
    for name, v in values.items():
        if v < floor:
            raise NegativeValueError(f"{name} = {v:.3e} at step {k} (below -tol)")


def simulate(spec: ModelSpec, grid: GridSpec, tol: float = 1e-10, max_iter: int = 200,
             check: bool = False) -> Trajectory:
    """Integrate the model on ``[0, grid.T]``.

    Convergence of the per-step closure is declared when the residual is at
    most ``tol`` times the size of the current (rho, P, Q) iterate.  With
    ``check=True`` the model is validated first.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if check:
        report = validate(spec)
        if not report.ok:
            raise ValidationFailed(report)

    st = _Stepper(spec, grid)
    K = grid.n_steps
    stride = grid.snapshot_stride
    rho = np.zeros(K + 1)
    P = np.zeros(K + 1)
    Q = np.zeros(K + 1)
    iters = np.zeros(K + 1, dtype=int)
    snaps = {}

    state = st.initial()
    rho[0], P[0], Q[0] = state.rho, state.P, state.Q
    if stride:
        snaps[0] = state.n.copy()

    for k in range(1, K + 1):
        cand = (state.rho, state.P, state.Q)
        omega = 1.0
        last = np.inf
        for it in range(1, max_iter + 1):
            img, n = st.image(state, cand)
            res = max(abs(img[0] - cand[0]), abs(img[1] - cand[1]), abs(img[2] - cand[2]))
            scale = max(abs(cand[0]), abs(cand[1]), abs(cand[2]))
            if res <= tol * scale or res == 0.0:
                break
            if res > last:
                omega = 0.5
            last = res
            cand = tuple(c + omega * (g - c) for c, g in zip(cand, img))
        else:
            raise ConvergenceError(k, res, max_iter)

        scale = max(abs(cand[0]), abs(cand[1]), abs(cand[2]), float(np.max(np.abs(n))))
        _check_sign({"rho": cand[0], "P": cand[1], "Q": cand[2],
                     "n": float(np.min(n))}, scale, tol, k)
        np.maximum(n, 0.0, out=n)
        r, p, q = (max(c, 0.0) for c in cand)
        state = SolverState(k, n, r, p, q)
        rho[k], P[k], Q[k], iters[k] = r, p, q, it
        if stride and k % stride == 0:
            snaps[k] = n.copy()

    t = np.arange(K + 1) * st.h
    return Trajectory(st.h, spec.a_dagger, t, rho, P, Q, iters, st.ages.copy(), snaps)


def renewal_rho(spec: ModelSpec, traj: Trajectory, k: int) -> float:
    """Recompute ``rho`` at step ``k >= N`` from the stored rho/P/Q history.

    Uses the renewal form (no density slices): newborns at ``t_k`` are the
    births from every earlier cohort that survived along its characteristic.
    """
    st = _Stepper(spec, GridSpec(traj.h, traj.h))
    N = st.N
    if k < N:
        raise ValueError("renewal form needs t >= a_dagger")
    i = np.arange(N + 1)
    births = traj.rho[k - i]
    # P at the midpoint of each step that cohort i traversed at age index m
    Pmid = 0.5 * (traj.P[1:] + traj.P[:-1])
    logs = np.log(np.where(st.surv_step > 0, st.surv_step, 1.0))
    dead = st.surv_step == 0
    # Mtab[j, m]: extra mortality at age midpoint m during step k - N + j
    if st.M_dep:
        Mtab = np.asarray(st._M(Pmid[k - N:k]))
    else:
        Mtab = np.broadcast_to(st._M(0.0), (N, N))
    surv = np.ones(N + 1)
    for c in range(1, N + 1):
        m = np.arange(c)
        if np.any(dead[m]):
            surv[c] = 0.0
            continue
        rows = N - c + m
        surv[c] = np.exp(np.sum(logs[m]) - st.h * np.sum(Mtab[rows, m]))
    return float(np.sum(st.beta_w(traj.Q[k]) * births * surv))
