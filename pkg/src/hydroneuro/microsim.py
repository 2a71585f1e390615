"""Event-driven simulation of the microscopic network.

Between spikes every potential follows the linear ODE
``dU_i/dt = -alpha U_i - lam_i (U_i - Ubar_i)``; spikes are drawn by thinning
against the global bound ``N * phi_star``.  Per proposal the generator is
consumed in the fixed order (gap, site, uniform).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .model import ModelSpec, RateFunction, as_generator

MAX_EXACT_SITES = 4096


class SpikeEvent(NamedTuple):
    time: float
    site: int
    pre_potential: float


@dataclass
class EventLog:
    times: list[float] = field(default_factory=list)
    sites: list[int] = field(default_factory=list)
    pre_potentials: list[float] = field(default_factory=list)

    def append(self, time: float, site: int, pre: float) -> None:
        self.times.append(time)
        self.sites.append(site)
        self.pre_potentials.append(pre)

    def extend(self, other: "EventLog") -> None:
        self.times.extend(other.times)
        self.sites.extend(other.sites)
        self.pre_potentials.extend(other.pre_potentials)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[SpikeEvent]:
        for t, i, u in zip(self.times, self.sites, self.pre_potentials):
            yield SpikeEvent(t, i, u)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.asarray(self.times, dtype=float),
            np.asarray(self.sites, dtype=np.int64),
            np.asarray(self.pre_potentials, dtype=float),
        )


@dataclass
class NetworkState:
    potentials: np.ndarray
    clock: float = 0.0
    events: EventLog = field(default_factory=EventLog)

    def __post_init__(self) -> None:
        self.potentials = np.asarray(self.potentials, dtype=float)

    def copy(self) -> "NetworkState":
        log = EventLog(list(self.events.times), list(self.events.sites), list(self.events.pre_potentials))
        return NetworkState(self.potentials.copy(), self.clock, log)

    def local_averages(self, dyn: "Dynamics | ModelSpec") -> np.ndarray:
        return as_dynamics(dyn).average @ self.potentials


@dataclass(frozen=True, eq=False)
class Dynamics:
    """Array form of the network: everything the integrator needs.

    Usually built from a ModelSpec; constructing it directly allows degenerate
    networks (e.g. an isolated neuron) that a ModelSpec rejects.
    """

    alpha: float
    lam: np.ndarray
    average: np.ndarray
    jumps: np.ndarray
    phi: RateFunction
    sites: np.ndarray
    substep: float

    @property
    def count(self) -> int:
        return len(self.lam)

    @property
    def leak(self) -> np.ndarray:
        return self.alpha + self.lam

    def rate(self, i: int, u: float) -> float:
        return float(self.phi(u, self.sites[i]))

    def generator(self) -> np.ndarray:
        """Matrix A of the linear flow dU/dt = A U."""
        A = self.lam[:, None] * self.average
        A[np.diag_indices_from(A)] = -self.alpha - self.lam
        return A


def as_dynamics(obj: "Dynamics | ModelSpec", substep: float | None = None) -> Dynamics:
    if isinstance(obj, Dynamics):
        if substep is None or substep == obj.substep:
            return obj
        return Dynamics(obj.alpha, obj.lam, obj.average, obj.jumps, obj.phi, obj.sites, float(substep))
    spec = obj
    return Dynamics(
        alpha=float(spec.alpha),
        lam=spec.lam,
        average=spec.average_matrix,
        jumps=spec.jump_matrix,
        phi=spec.phi,
        sites=spec.mesh.sites,
        substep=float(substep if substep is not None else spec.default_substep),
    )


def _relax_gain(k: np.ndarray, t: float) -> np.ndarray:
    """(1 - exp(-k t)) / k with the k -> 0 limit t."""
    k = np.asarray(k, dtype=float)
    safe = np.where(k > 0, k, 1.0)
    return np.where(k > 0, -np.expm1(-safe * t) / safe, t)


def advance(u: np.ndarray, dt: float, dyn: Dynamics) -> None:
    """Frozen-average substeps of the linear flow, in place."""
    if dt <= 0:
        return
    if not dyn.lam.any():
        # no gap junctions: the flow is a pure exponential
        u *= np.exp(-dyn.alpha * dt)
        return
    n = max(1, math.ceil(dt / dyn.substep - 1e-9))
    h = dt / n
    k = dyn.leak
    decay = np.exp(-k * h)
    gain = dyn.lam * _relax_gain(k, h)
    for _ in range(n):
        ubar = dyn.average @ u
        u *= decay
        u += gain * ubar


def flow(state: NetworkState, spec: Dynamics | ModelSpec, dt: float, substep: float | None = None) -> NetworkState:
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    dyn = as_dynamics(spec, substep)
    u = state.potentials.copy()
    advance(u, dt, dyn)
    return NetworkState(u, state.clock + dt, state.events)


def expm_apply(A: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    if dt == 0:
        return np.array(u, dtype=float)
    if np.allclose(A, A.T, rtol=0, atol=1e-14 * max(1.0, np.abs(A).max())):
        w, V = np.linalg.eigh(A)
        return V @ (np.exp(w * dt) * (V.T @ u))
    return scipy.linalg.expm(A * dt) @ u


def exact_flow(state: NetworkState, spec: Dynamics | ModelSpec, dt: float) -> NetworkState:
    """Matrix-exponential oracle for :func:`flow` (dense, small networks only)."""
    dyn = as_dynamics(spec)
    if dyn.count > MAX_EXACT_SITES:
        raise ValueError(f"exact_flow is limited to {MAX_EXACT_SITES} sites, got {dyn.count}")
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    u = expm_apply(dyn.generator(), state.potentials, dt)
    return NetworkState(u, state.clock + dt, state.events)


def apply_spike(u: np.ndarray, i: int, dyn: Dynamics) -> None:
    u += dyn.jumps[i]
    u[i] = 0.0


@dataclass
class SimulationResult:
    state: NetworkState
    events: EventLog
    snapshots: dict[float, np.ndarray]
    initial_sup: float
    sup_norm: float
    proposals: int

    def __iter__(self):
        # allows ``state, log = simulate(...)``
        yield self.state
        yield self.events


def simulate(
    spec: Dynamics | ModelSpec,
    state: NetworkState,
    horizon: float,
    rng_seed: Any,
    substep: float | None = None,
    snapshot_times: Sequence[float] = (),
) -> SimulationResult:
    """Run the network for ``horizon`` time units from ``state``.

    Snapshot times are absolute clock values inside (clock, clock + horizon].
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    dyn = as_dynamics(spec, substep)
    rng = as_generator(rng_seed)
    u = state.potentials.copy()
    t = state.clock
    end = t + horizon
    pending = sorted(float(s) for s in snapshot_times)
    if pending and (pending[0] < t or pending[-1] > end + 1e-12):
        raise ValueError("snapshot times must lie inside the simulated window")
    snaps: dict[float, np.ndarray] = {}
    log = EventLog()
    sup0 = float(u.max(initial=0.0))
    sup = sup0
    phistar = dyn.phi.sup_bound
    n = dyn.count
    proposals = 0

    def take_snapshots(upto: float) -> None:
        nonlocal t
        while pending and pending[0] <= upto:
            s = pending.pop(0)
            advance(u, s - t, dyn)
            t = max(t, s)
            snaps[s] = u.copy()

    if phistar <= 0:
        take_snapshots(end)
        advance(u, end - t, dyn)
    else:
        total = n * phistar
        sites = dyn.sites
        phi = dyn.phi
        while True:
            gap = rng.exponential(1.0 / total)
            i = int(rng.integers(n))
            v = rng.random()
            proposals += 1
            cand = t + gap
            take_snapshots(min(cand, end))
            if cand >= end:
                advance(u, end - t, dyn)
                break
            advance(u, cand - t, dyn)
            t = cand
            ui = u[i]
            if v * phistar < float(phi(ui, sites[i])):
                log.append(t, i, float(ui))
                apply_spike(u, i, dyn)
                sup = max(sup, float(u.max()))
    events = EventLog(list(state.events.times), list(state.events.sites), list(state.events.pre_potentials))
    events.extend(log)
    final = NetworkState(u, end, events)
    return SimulationResult(final, log, snaps, sup0, sup, proposals)


# -------------------------------------------------------------- empirical measure


TestFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted point set {(u_i, r_i)} with equal weights."""

    u: np.ndarray
    r: np.ndarray
    weight: float

    @property
    def total_mass(self) -> float:
        return self.weight * len(self.u)

    def integrate(self, fn: TestFunction) -> float:
        return float(self.weight * np.sum(fn(self.u, self.r)))


def empirical_measure(state: NetworkState, spec: ModelSpec | Dynamics) -> EmpiricalMeasure:
    sites = spec.mesh.sites if isinstance(spec, ModelSpec) else spec.sites
    n = len(state.potentials)
    return EmpiricalMeasure(np.asarray(state.potentials, float), np.asarray(sites, float), 1.0 / n)


def pair(measure: EmpiricalMeasure, fn: TestFunction) -> float:
    return measure.integrate(fn)
