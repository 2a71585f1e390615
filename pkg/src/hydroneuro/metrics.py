"""Distances, Monte-Carlo oracles and the convergence harness."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .limit import DensityField, DriftPath, PDESolution, run_scheme, weak_residual
from .microsim import EmpiricalMeasure, SimulationResult, simulate
from .model import CellKernels, InitialDensity, ModelSpec, RateFunction, as_generator, sample_initial_state

THREADS_ENV = "HYDRONEURO_THREADS"
DEFAULT_MAX_SITES = 10_000


def replica_generator(root_seed: int, *key: int) -> np.random.Generator:
    """Independent stream for replica ``key`` of a run seeded with ``root_seed``."""
    ss = np.random.SeedSequence(root_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def worker_count(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def map_replicas(fn: Callable, tasks: Sequence, workers: int = 1) -> list:
    """Apply ``fn`` to every task, in order; fans out over processes when workers > 1."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def stderr(x: Sequence[float]) -> float:
    x = np.asarray(x, float)
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float | None:
    """OLS slope of log y against log x; None with fewer than 3 usable points."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 3:
        return None
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


# ---------------------------------------------------------------- test functions


def _hat(center: float, width: float):
    def f(u):
        return np.maximum(0.0, 1.0 - np.abs(u - center) / width)

    def df(u):
        inside = np.abs(u - center) < width
        return np.where(inside, -np.sign(u - center) / width, 0.0)

    return f, df, 1.0 / width


@dataclass(frozen=True, eq=False)
class PotentialFunction:
    """Function of the potential alone, with derivative, Lipschitz constant and kinks."""

    name: str
    f: Callable
    df: Callable
    lipschitz: float
    kinks: tuple[float, ...] = ()

    def __iter__(self):
        return iter((self.name, self.f, self.df, self.lipschitz))


U_FUNCTIONS: list[PotentialFunction] = [
    PotentialFunction("one", lambda u: np.ones_like(u), lambda u: np.zeros_like(u), 0.0),
    PotentialFunction("ramp", lambda u: np.minimum(u, 4.0) / 4.0, lambda u: np.where(u < 4.0, 0.25, 0.0), 0.25, (4.0,)),
    PotentialFunction("exp", lambda u: np.exp(-u), lambda u: -np.exp(-u), 1.0),
    PotentialFunction("cos", lambda u: np.cos(0.5 * np.pi * u), lambda u: -0.5 * np.pi * np.sin(0.5 * np.pi * u), 0.5 * np.pi),
]
for _c, _w in ((0.25, 0.25), (0.5, 0.25), (1.0, 0.5), (1.5, 0.5)):
    _f, _df, _L = _hat(_c, _w)
    U_FUNCTIONS.append(PotentialFunction(f"hat({_c},{_w})", _f, _df, _L, (_c - _w, _c, _c + _w)))

R_FUNCTIONS: list[tuple[str, Callable, float]] = [
    ("one", lambda r: np.ones(np.shape(r)[:-1]), 0.0),
    ("cos_x", lambda r: np.cos(2 * np.pi * r[..., 0]), 2 * np.pi),
    ("cos_y", lambda r: np.cos(2 * np.pi * r[..., 1]), 2 * np.pi),
    ("sin_xy", lambda r: np.sin(2 * np.pi * (r[..., 0] + r[..., 1])), 2 * np.pi * math.sqrt(2)),
]


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Scaled product f(u) g(r) with sup norm and Lipschitz constant at most 1."""

    name: str
    f: Callable
    df: Callable
    g: Callable
    scale: float

    __test__ = False  # not a pytest class

    def __call__(self, u, r) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        r = np.asarray(r, dtype=float)
        return self.scale * self.f(u) * self.g(np.broadcast_to(r, u.shape + (2,)))


def test_library() -> list[TestFunction]:
    lib = []
    for uname, f, df, lf in U_FUNCTIONS:
        for rname, g, lg in R_FUNCTIONS:
            lib.append(TestFunction(f"{uname}*{rname}", f, df, g, 1.0 / max(1.0, lf + lg)))
    return lib


test_library.__test__ = False
LIBRARY = test_library()


def library_integrals(obj: Any) -> np.ndarray:
    """Pairings of an empirical measure or a density with every library function."""
    return np.array([obj.integrate(fn) for fn in LIBRARY])


def bl_distance(first: Any, second: Any) -> float:
    """Largest pairing gap over the test library (a bounded-Lipschitz type pseudometric)."""
    return float(np.max(np.abs(library_integrals(first) - library_integrals(second))))


def sample_measure(fld: DensityField, n: int, rng_seed: Any) -> EmpiricalMeasure:
    u, r = fld.sample(n, as_generator(rng_seed))
    return EmpiricalMeasure(u, r, 1.0 / n)


# ------------------------------------------------------------ one-particle oracle


def one_particle_oracle(
    path: DriftPath,
    phi: RateFunction,
    r: np.ndarray,
    initial: np.ndarray | InitialDensity,
    times: Sequence[float],
    replicas: int,
    rng_seed: Any,
) -> dict[float, np.ndarray]:
    """Samples of the single-neuron process driven by given mean-field paths.

    Drift -alpha u - lam (u - ubar_t) + p_t, jumps to 0 at rate phi(u, r).
    Jumps are drawn by thinning against phi_star; between proposals the
    potential follows the exact characteristic of the drift.
    """
    rng = as_generator(rng_seed)
    r = np.asarray(r, dtype=float)
    if isinstance(initial, InitialDensity):
        u = initial.sample(np.broadcast_to(r, (replicas, 2)), rng)
    else:
        u = np.array(initial, dtype=float)
        if u.shape != (replicas,):
            raise ValueError("initial samples must have one value per replica")
    t = np.zeros(replicas)
    phistar = phi.sup_bound
    out: dict[float, np.ndarray] = {}
    for tau in sorted(float(x) for x in times):
        if phistar <= 0:
            u = path.flow(t, np.full(replicas, tau), u)
            t[:] = tau
            out[tau] = u.copy()
            continue
        active = np.flatnonzero(t < tau)
        while active.size:
            cand = t[active] + rng.exponential(1.0 / phistar, size=active.size)
            done = cand >= tau
            fin = active[done]
            u[fin] = path.flow(t[fin], np.full(fin.size, tau), u[fin])
            t[fin] = tau
            go = active[~done]
            uc = path.flow(t[go], cand[~done], u[go])
            t[go] = cand[~done]
            accept = rng.random(go.size) * phistar < phi(uc, r)
            u[go] = np.where(accept, 0.0, uc)
            active = go
        out[tau] = u.copy()
    return out


def histogram_l1(samples: np.ndarray, fld: DensityField, idx: int, bins: int = 20) -> float:
    """sum_b |fraction of samples in b - int_b rho| over equal bins covering both supports."""
    top = max(float(fld.top[idx]), float(np.max(samples)))
    edges = np.linspace(0.0, top * (1 + 1e-9), bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    frac = counts / samples.size
    probs = np.empty(bins)
    for b in range(bins):
        u = np.linspace(edges[b], edges[b + 1], 401)
        extra = [fld.ustar[idx], fld.top[idx]]
        u = np.unique(np.concatenate([u, [x for x in extra if edges[b] < x < edges[b + 1]]]))
        probs[b] = np.trapezoid(fld.density(u, idx), u)
    return float(np.abs(frac - probs).sum())


# ------------------------------------------------------------ weak residuals


def weak_residual_table(
    psi0: InitialDensity,
    kern: CellKernels,
    phi: RateFunction,
    t: float,
    delta: float,
    ugrid: int = 801,
    born_nodes: int = 16,
) -> dict[str, float]:
    """Largest per-cell weak-form defect at time t for each potential test function."""
    keep = (t - delta, t, t + delta)
    run = run_scheme(psi0, kern, phi, t + delta, delta, ugrid, born_nodes, keep=keep)
    before, now, after = (run.field_at(s) for s in keep)
    out = {}
    for fn in U_FUNCTIONS:
        res = weak_residual(before, now, after, fn.f, fn.df, kern, phi, fn.kinks)
        out[fn.name] = float(np.max(np.abs(res)))
    return out


# ------------------------------------------------------------ convergence study


@dataclass
class ConvergenceReport:
    cells: list[dict] = field(default_factory=list)
    slopes: dict[float, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def cell(self, epsilon: float) -> dict:
        for c in self.cells:
            if math.isclose(c["epsilon"], epsilon):
                return c
        raise KeyError(epsilon)

    def to_dict(self) -> dict:
        d = {"schema_version": 1, "cells": self.cells, "metadata": self.metadata}
        if self.slopes:
            d["slopes"] = {repr(t): s for t, s in self.slopes.items()}
        return d


def _replica_distances(task: tuple) -> np.ndarray:
    spec, root_seed, key, times, targets, substep = task
    rng = replica_generator(root_seed, *key)
    state = sample_initial_state(spec, rng)
    later = [t for t in times if t > 0]
    res = simulate(spec, state, times[-1], rng, substep=substep, snapshot_times=later) if later else None
    out = []
    for t, target in zip(times, targets):
        pot = state.potentials if t == 0 else res.snapshots[t]
        mu = EmpiricalMeasure(pot, spec.mesh.sites, 1.0 / spec.mesh.count)
        out.append(np.max(np.abs(library_integrals(mu) - target)))
    return np.array(out)


def convergence_study(
    spec: ModelSpec,
    epsilons: Iterable[float],
    solution: PDESolution,
    replicas: int,
    rng_seed: int,
    times: Sequence[float] | None = None,
    delta: float | None = None,
    substep: float | None = None,
    workers: int = 1,
    max_sites: int = DEFAULT_MAX_SITES,
) -> ConvergenceReport:
    """Mean test-library distance between network snapshots and the limit density.

    Replica k at mesh 1/n uses the stream ``(rng_seed, n, k)``, so the report
    does not depend on the order in which epsilons are given.
    """
    eps_sorted = sorted({float(e) for e in epsilons}, reverse=True)
    times = sorted(solution.obs_times if times is None else times)
    targets = [library_integrals(solution.fields[t]) for t in times]
    report = ConvergenceReport(metadata={"root_seed": rng_seed, "replicas": replicas, "times": list(times),
                                         "pde_deltas": solution.deltas, "delta": delta})
    for eps in eps_sorted:
        mspec = spec.with_epsilon(eps)
        cell: dict[str, Any] = {"epsilon": mspec.mesh.epsilon, "sites": mspec.mesh.count, "replicas": replicas}
        if delta is not None:
            cell["delta"] = delta
        if mspec.mesh.count > max_sites:
            cell.update(skipped=True, reason=f"{mspec.mesh.count} sites exceed the limit of {max_sites}")
            report.cells.append(cell)
            continue
        start = time.perf_counter()
        n_side = mspec.mesh.n_side
        tasks = [(mspec, rng_seed, (n_side, k), times, targets, substep) for k in range(replicas)]
        dist = np.array(map_replicas(_replica_distances, tasks, workers))
        cell.update(
            skipped=False,
            seed_key=[rng_seed, n_side],
            times=list(times),
            mean=[float(x) for x in dist.mean(axis=0)],
            stderr=[stderr(dist[:, j]) for j in range(len(times))],
            wall_time=time.perf_counter() - start,
        )
        report.cells.append(cell)
    done = [c for c in report.cells if not c["skipped"]]
    if len(done) >= 3:
        for j, t in enumerate(times):
            s = loglog_slope([c["epsilon"] for c in done], [c["mean"][j] for c in done])
            if s is not None:
                report.slopes[t] = s
    return report


# ------------------------------------------------------------------ bound audit


class BoundViolation(AssertionError):
    """A pathwise inequality that holds by construction failed: an integrator bug."""


def bound_audit(results: Sequence[SimulationResult], spec: ModelSpec, horizon: float, delta: float | None = None) -> dict:
    eps2 = spec.mesh.epsilon**2
    phistar = spec.phi.sup_bound
    a_star = float(spec.jump_matrix.max(initial=0.0)) / eps2 if spec.mesh.count > 1 else 0.0
    rows = []
    for k, res in enumerate(results):
        n_spikes = len(res.events)
        bound = res.initial_sup + a_star * eps2 * n_spikes
        if res.sup_norm > bound * (1 + 1e-12) + 1e-12:
            raise BoundViolation(
                f"replica {k}: sup norm {res.sup_norm!r} exceeds {res.initial_sup!r} + a* eps^2 N = {bound!r}"
            )
        row = {
            "replica": k,
            "spikes": n_spikes,
            "initial_sup": res.initial_sup,
            "sup_norm": res.sup_norm,
            "path_bound": bound,
            "count_violation": n_spikes > 2 * phistar * horizon / eps2,
        }
        if delta is not None:
            n_win = int(round(horizon / delta))
            t0 = res.state.clock - horizon
            times, _, _ = res.events.arrays()
            per_window = np.bincount(np.minimum(((times - t0) / delta).astype(int), n_win - 1), minlength=n_win)
            row["max_window_spikes"] = int(per_window.max(initial=0))
            row["window_violation"] = bool(per_window.max(initial=0) > 2 * phistar * delta / eps2)
        rows.append(row)
    out = {
        "schema_version": 1,
        "epsilon": spec.mesh.epsilon,
        "horizon": horizon,
        "replicas": len(rows),
        "path_bound_holds": True,
        "count_violation_fraction": float(np.mean([r["count_violation"] for r in rows])) if rows else 0.0,
        "rows": rows,
    }
    if delta is not None:
        out["delta"] = delta
        out["window_violation_fraction"] = float(np.mean([r["window_violation"] for r in rows])) if rows else 0.0
    return out
