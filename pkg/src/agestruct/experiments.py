"""Scenario files, outcome classification and parameter sweeps."""

from __future__ import annotations

import copy
import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .analysis import (
    find_equilibria,
    net_reproduction_rate,
    solve_malthusian,
    write_equilibria_csv,
)
from .bounds import allee_threshold, compute_bound, extinction_trigger_time
from .exceptions import AgestructError, ModelLoadError, ValidationFailed
from .model import ModelSpec, ProbeGrid, model_from_dict, validate
from .solver import GridSpec, Trajectory, simulate
from .stability import build_characteristic, locate_roots

ANALYSES = ("simulate", "r0", "malthusian", "equilibria", "stability", "bound", "allee")
EXTINCTION_EPS = 1e-8
PERSISTENCE_EPS = 1e-6


@dataclass
class Scenario:
    id: str
    model: dict
    h: float
    T: float
    snapshot_stride: int = 0
    analyses: tuple = ("simulate",)
    sweep_path: Optional[str] = None
    sweep_values: tuple = ()
    output: Optional[Path] = None
    tol: float = 1e-10
    pmax: Optional[float] = None
    search_cap: float = 10.0
    workers: int = 1
    require_valid: bool = True

    def __post_init__(self):
        unknown = set(self.analyses) - set(ANALYSES)
        if unknown:
            raise ValueError(f"unknown analyses: {sorted(unknown)}")
        if self.sweep_path is not None and not self.sweep_values:
            raise ValueError("sweep needs a non-empty value list")
        if "bound" in self.analyses and self.spec().density_mortality.psi is None:
            raise ValueError("bound analysis needs psi in the model")

    def spec(self, value=None) -> ModelSpec:
        d = self.model
        if value is not None:
            d = set_path(d, self.sweep_path, value)
        return model_from_dict(d)


def set_path(d: dict, path: str, value) -> dict:
    """Copy of ``d`` with the dotted ``path`` set to ``value``."""
    out = copy.deepcopy(d)
    keys = path.split(".")
    cur = out
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            raise ModelLoadError(f"sweep path {path!r}: {k!r} is not a mapping")
        cur = cur[k]
    cur[keys[-1]] = value
    return out


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"{path}: {exc}") from exc
    base = path.parent
    m = d.get("model")
    if isinstance(m, str):
        mp = (base / m) if not Path(m).is_absolute() else Path(m)
        try:
            model = json.loads(mp.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelLoadError(f"model {mp}: {exc}") from exc
    elif isinstance(m, dict):
        model = m
    else:
        raise ModelLoadError("scenario: 'model' must be a path or a mapping")
    g = d.get("grid", {})
    sw = d.get("sweep") or {}
    out = d.get("output")
    return Scenario(
        id=str(d.get("id", path.stem)),
        model=model,
        h=float(g.get("h", 0.01)),
        T=float(g.get("T", 20 * float(model.get("a_dagger", 1.0)))),
        snapshot_stride=int(g.get("snapshot_stride", 0)),
        analyses=tuple(d.get("analyses", ["simulate"])),
        sweep_path=sw.get("path"),
        sweep_values=tuple(sw.get("values", ())),
        output=None if out is None else (base / out),
        tol=float(d.get("tol", 1e-10)),
        pmax=d.get("pmax"),
        search_cap=float(d.get("search_cap", 10.0)),
        workers=int(d.get("workers", 1)),
        require_valid=bool(d.get("validate", True)),
    )


@dataclass
class OutcomeRecord:
    scenario_id: str
    value: Optional[float] = None
    R0: Optional[float] = None
    lam: Optional[float] = None
    dominant_root: Optional[complex] = None
    classification: str = "undecided"
    rho_min: Optional[float] = None
    rho_max: Optional[float] = None
    rho_final: Optional[float] = None
    bound: Optional[float] = None
    scale: Optional[float] = None
    extinction_trigger: Optional[float] = None
    diagnostics: List[str] = field(default_factory=list)
    error: Optional[str] = None


def is_monotone(spec: ModelSpec, probe: ProbeGrid = ProbeGrid()) -> bool:
    """M non-decreasing and fertility non-increasing in the size argument (probe grid)."""
    ages = probe.ages(spec.a_dagger)[None, :]
    xs = probe.densities()[:, None]
    M = np.asarray(spec.density_mortality(ages, xs), dtype=float)
    B = np.asarray(spec.fertility(ages, xs), dtype=float)
    M = np.broadcast_to(M, (xs.size, ages.size))
    B = np.broadcast_to(B, (xs.size, ages.size))
    return bool(np.all(np.diff(M, axis=0) >= -1e-12) and np.all(np.diff(B, axis=0) <= 1e-12))


def classify(traj: Trajectory, a_dagger: float, scale: float):
    """Return ``(label, rho_min, rho_max)`` over the final two lifespans."""
    T = traj.t[-1]
    if T < 4 * a_dagger - 1e-9 * traj.h:
        raise ValueError(f"horizon {T!r} shorter than 4 * a_dagger")
    idx = traj.window(T - 2 * a_dagger)
    rho = traj.rho[idx]
    lo, hi = float(rho.min()), float(rho.max())
    chunks = [float(c.max()) for c in np.array_split(rho, 4)]
    decreasing = all(b <= a for a, b in zip(chunks, chunks[1:]))
    if traj.rho[-1] < EXTINCTION_EPS * scale and decreasing:
        return "extinct", lo, hi
    if lo >= PERSISTENCE_EPS * scale:
        return "persistent", lo, hi
    return "undecided", lo, hi


def run_scenario(sc: Scenario, value=None, out_dir: Optional[Path] = None) -> OutcomeRecord:
    """Run the requested analyses for one (possibly swept) model."""
    rec = OutcomeRecord(sc.id, value)
    spec = sc.spec(value)
    if sc.require_valid:
        report = validate(spec)
        if not report.ok:
            raise ValidationFailed(report)
    out_dir = out_dir if out_dir is not None else sc.output
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    want = set(sc.analyses)
    a_d = spec.a_dagger
    if "simulate" in want and sc.T < 4 * a_d:
        raise ValueError(f"horizon T={sc.T!r} shorter than 4 * a_dagger for classification")

    rec.R0 = net_reproduction_rate(spec)
    if rec.R0 > 0 and want & {"malthusian", "simulate"}:
        rec.lam = solve_malthusian(spec)

    cert = None
    if spec.density_mortality.psi is not None:
        cert = compute_bound(spec)
        rec.bound = cert.B
        if out_dir is not None and "bound" in want:
            (out_dir / "bound.txt").write_text(cert.record() + "\n")

    eqs = None
    if want & {"equilibria", "stability"}:
        pmax = sc.pmax
        eqs = find_equilibria(spec, pmax)
        if out_dir is not None:
            write_equilibria_csv(eqs, out_dir / "equilibria.csv")
    if "stability" in want:
        lines = []
        for i, eq in enumerate(eqs):
            rep = locate_roots(build_characteristic(spec, eq))
            if out_dir is not None:
                rep.to_csv(out_dir / f"stability_{i}.csv")
            lines.append(f"equilibrium={i} " + rep.classification_record())
            if i == 0:
                rec.dominant_root = rep.dominant
        if out_dir is not None:
            (out_dir / "stability.txt").write_text("\n".join(lines) + "\n")

    thr = None
    if "allee" in want:
        thr = allee_threshold(spec, sc.search_cap)
        if out_dir is not None:
            (out_dir / "allee.txt").write_text(thr.record() + "\n")

    if "simulate" in want:
        traj = simulate(spec, GridSpec(sc.h, sc.T, sc.snapshot_stride), tol=sc.tol)
        if out_dir is not None:
            traj.to_csv(out_dir / "trajectory.csv")
            if traj.snapshots:
                traj.write_snapshots(out_dir / "snapshots")
        if cert is not None:
            scale = cert.B
        else:
            scale = float(np.max(traj.rho))
            rec.diagnostics.append("no psi: thresholds relative to max rho")
        rec.scale = scale
        label, rec.rho_min, rec.rho_max = classify(traj, a_d, scale)
        rec.rho_final = float(traj.rho[-1])
        if is_monotone(spec) and rec.R0 is not None:
            expected = "extinct" if rec.R0 <= 1.0 else "persistent"
            if label != expected:
                rec.diagnostics.append(
                    f"monotone model with R0={rec.R0:.6g} expected {expected}, got {label}")
                label = "undecided"
        rec.classification = label
        if thr is not None:
            rec.extinction_trigger = extinction_trigger_time(traj, thr, a_d)
    return rec


def _run_one(args):
    sc, value, out_dir = args
    try:
        return run_scenario(sc, value, out_dir)
    except (AgestructError, ValueError, ArithmeticError) as exc:
        return OutcomeRecord(sc.id, value, error=f"{type(exc).__name__}: {exc}")


def sweep(sc: Scenario) -> List[OutcomeRecord]:
    """Run the scenario once per sweep value; rows come back ordered by value."""
    if sc.sweep_path is None or not sc.sweep_values:
        raise ValueError("scenario has no sweep axis or an empty value list")
    values = sorted(sc.sweep_values)
    jobs = []
    for i, v in enumerate(values):
        od = None if sc.output is None else Path(sc.output) / f"value_{i:03d}"
        jobs.append((sc, v, od))
    if sc.workers <= 1:
        records = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=sc.workers) as ex:
            records = list(ex.map(_run_one, jobs))
    if sc.output is not None:
        write_summary(records, Path(sc.output) / "summary.csv")
    return records


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_summary(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "R0", "lambda", "classification", "rho_final", "error"])
        for r in records:
            w.writerow([_fmt(r.value), _fmt(r.R0), _fmt(r.lam), r.classification,
                        _fmt(r.rho_final), r.error or ""])


def record_json(rec: OutcomeRecord) -> str:
    d = asdict(rec)
    dr = d.pop("dominant_root")
    d["dominant_root"] = None if dr is None else [dr.real, dr.imag]
    for k, v in d.items():
        if isinstance(v, float) and not math.isfinite(v):
            d[k] = repr(v)
    return json.dumps(d, indent=2, sort_keys=True)
