"""Discretized auxiliary process and its coupling with the network.

The auxiliary process freezes rates over macro steps of length delta: inside
a square every neuron fires at most once per step, at a constant rate set by
its binned potential and the square's center, and spike arrival times are
resolved only to the micro bin of width tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .microsim import Dynamics, NetworkState, EventLog, advance, apply_spike, as_dynamics, _relax_gain
from .model import CellKernels, Mesh, ModelSpec, as_generator, cell_grid, integer_ratio, is_integer_ratio


@dataclass(frozen=True)
class PartitionSpec:
    delta: float
    ell: float
    E: float
    tau: float
    R0: float
    epsilon: float | None = None

    def __post_init__(self) -> None:
        errors = partition_errors(self.delta, self.ell, self.E, self.tau, self.R0, self.epsilon)
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def n_time_bins(self) -> int:
        return integer_ratio(self.delta, self.tau)

    @property
    def n_side(self) -> int:
        return integer_ratio(1.0, self.ell)

    @property
    def n_squares(self) -> int:
        return self.n_side**2

    @property
    def n_u_bins(self) -> int:
        return integer_ratio(self.R0, self.E)

    @property
    def centers(self) -> np.ndarray:
        return cell_grid(self.n_side)

    @property
    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.n_u_bins) + 0.5) * self.E

    def square_of(self, mesh: Mesh) -> np.ndarray:
        per = integer_ratio(self.ell, mesh.epsilon)
        kxy = mesh.site_indices() // per
        return kxy[:, 0] * self.n_side + kxy[:, 1]

    def time_bin(self, elapsed: float) -> int:
        """Index h (1-based) of the bin J_h = [delta - h tau, delta - (h-1) tau) holding ``elapsed``."""
        H = self.n_time_bins
        j = int(math.floor(elapsed / self.tau))
        if (j + 1) * self.tau <= elapsed:
            j += 1
        elif j * self.tau > elapsed:
            j -= 1
        j = min(max(j, 0), H - 1)
        return H - j


def partition_errors(delta, ell, E, tau, R0, epsilon=None) -> list[str]:
    errs = []
    for name, v in (("delta", delta), ("ell", ell), ("E", E), ("tau", tau), ("R0", R0)):
        if not (isinstance(v, (int, float)) and v > 0):
            errs.append(f"{name} must be a positive number, got {v!r}")
    if errs:
        return errs
    if not is_integer_ratio(delta, tau):
        errs.append(f"partition.delta={delta!r} and partition.tau={tau!r}: delta/tau must be an integer (pick tau = delta/k)")
    if not is_integer_ratio(1.0, ell):
        errs.append(f"partition.ell={ell!r}: 1/ell must be an integer")
    if not is_integer_ratio(R0, E):
        errs.append(f"partition.E={E!r} and psi0 R0={R0!r}: R0/E must be an integer")
    if epsilon is not None and not is_integer_ratio(ell, epsilon):
        errs.append(f"partition.ell={ell!r} and model.epsilon={epsilon!r}: ell must be a multiple of epsilon")
    return errs


def relax(y: np.ndarray, ybar: np.ndarray, t: float, leak: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Flow Phi_{t, ybar}(y) = e^{-t k} y + lam (1 - e^{-t k}) / k * ybar with k = alpha + lam."""
    return np.exp(-leak * t) * y + lam * _relax_gain(leak, t) * ybar


@dataclass
class AuxState:
    """Auxiliary potentials stored as per-square level tables.

    ``levels[m, k]`` is the k-th potential level of square m; every site sits on
    one level (``level_of``), so ``y = levels[square, level_of]``.  Levels
    0..H-1 are the resets of the last step (bin h -> level h-1), the rest are
    survivors in their previous order.
    """

    levels: np.ndarray
    level_of: np.ndarray
    square: np.ndarray
    step: int = 0
    counts: np.ndarray | None = None

    @property
    def y(self) -> np.ndarray:
        return self.levels[self.square, self.level_of]

    def occupation(self) -> np.ndarray:
        """eta[m, k]: number of sites of square m on level k."""
        occ = np.zeros(self.levels.shape)
        np.add.at(occ, (self.square, self.level_of), 1.0)
        return occ

    def square_average(self, kern: CellKernels, eps2: float) -> np.ndarray:
        sums = np.bincount(self.square, weights=self.y, minlength=kern.size)
        return eps2 * (kern.b_hat @ sums)


def bin_initial(u0: np.ndarray, part: PartitionSpec, square: np.ndarray) -> AuxState:
    u0 = np.asarray(u0, dtype=float)
    if np.any(u0 > part.R0) or np.any(u0 < 0):
        raise ValueError(f"initial potentials must lie in [0, R0={part.R0}]")
    K = part.n_u_bins
    k = np.minimum(np.floor(u0 / part.E).astype(np.int64), K - 1)
    levels = np.tile(part.bin_centers, (part.n_squares, 1))
    return AuxState(levels=levels, level_of=k, square=np.asarray(square), step=0)


def _aux_update(
    state: AuxState, spiked: np.ndarray, h: np.ndarray, part: PartitionSpec, kern: CellKernels, eps2: float
) -> AuxState:
    H = part.n_time_bins
    M = kern.size
    sq = state.square
    counts = np.zeros((M, H))
    np.add.at(counts, (sq[spiked], h[spiked] - 1), 1.0)
    ybar = state.square_average(kern, eps2)
    before = np.zeros_like(counts)
    before[:, 1:] = np.cumsum(counts[:, :-1], axis=1)
    a_t = kern.a_cell.T
    S_h = eps2 * (a_t @ before)
    S_d = eps2 * (a_t @ counts.sum(axis=1))
    leak, lam = kern.leak, kern.lam
    new = np.empty((M, H))
    for hh in range(1, H + 1):
        new[:, hh - 1] = relax(0.0, ybar, (hh - 1) * part.tau, leak, lam) + S_h[:, hh - 1]
    surv = relax(state.levels, ybar[:, None], part.delta, leak[:, None], lam[:, None]) + S_d[:, None]
    levels = np.concatenate([new, surv], axis=1)
    level_of = np.where(spiked, h - 1, state.level_of + H)
    return AuxState(levels=levels, level_of=level_of, square=sq, step=state.step + 1, counts=counts)


def aux_rates(state: AuxState, kern: CellKernels, phi) -> np.ndarray:
    return np.asarray(phi(state.y, kern.centers[state.square]), dtype=float)


def aux_step(state: AuxState, part: PartitionSpec, kern: CellKernels, phi, rng_seed: Any, eps2: float) -> AuxState:
    rng = as_generator(rng_seed)
    rate = aux_rates(state, kern, phi)
    e = rng.exponential(size=rate.size)
    with np.errstate(divide="ignore"):
        xi = np.where(rate > 0, e / np.where(rate > 0, rate, 1.0), np.inf)
    spiked = xi < part.delta
    H = part.n_time_bins
    j = np.clip(np.floor(np.where(spiked, xi, 0.0) / part.tau).astype(np.int64), 0, H - 1)
    h = np.where(spiked, H - j, 0)
    return _aux_update(state, spiked, h, part, kern, eps2)


# ------------------------------------------------------------------- coupling


@dataclass
class CouplingLedger:
    good: np.ndarray
    step: int = 0
    start_clock: float = 0.0
    theta: float = 0.0
    theta_history: list[float] = field(default_factory=list)
    bad_history: list[int] = field(default_factory=list)
    step_gap: list[float] = field(default_factory=list)
    u_spikes: list[int] = field(default_factory=list)
    aux_spikes: list[int] = field(default_factory=list)

    @classmethod
    def start(cls, n_sites: int, clock: float = 0.0) -> "CouplingLedger":
        return cls(good=np.ones(n_sites, dtype=bool), start_clock=clock)

    @property
    def bad_count(self) -> int:
        return int(self.good.size - self.good.sum())

    def record(self, u: np.ndarray, y: np.ndarray, bad_now: np.ndarray, n_u: int, n_y: int) -> None:
        self.good &= ~bad_now
        gap = np.abs(u - y)
        step_gap = float(gap[self.good].max()) if self.good.any() else 0.0
        self.theta = max(self.theta, step_gap)
        self.step += 1
        self.step_gap.append(step_gap)
        self.theta_history.append(self.theta)
        self.bad_history.append(self.bad_count)
        self.u_spikes.append(n_u)
        self.aux_spikes.append(n_y)


def coupled_step(
    u_state: NetworkState,
    aux: AuxState,
    ledger: CouplingLedger,
    part: PartitionSpec,
    dyn: Dynamics,
    kern: CellKernels,
    rng_seed: Any,
    eps2: float,
) -> tuple[NetworkState, AuxState, CouplingLedger]:
    """Advance network and auxiliary process jointly over one macro step.

    Each proposal of the global thinning clock is classified as a shared spike
    (below both rates), a one-sided spike (between the rates) or, once the
    auxiliary neuron has fired, a network-only spike.  The ledger is updated
    in place and returned.
    """
    expected = ledger.start_clock + ledger.step * part.delta
    if abs(u_state.clock - expected) > 1e-9 * max(1.0, abs(expected)):
        raise ValueError(f"network clock {u_state.clock!r} does not match step {ledger.step} (expected {expected!r})")
    rng = as_generator(rng_seed)
    n = dyn.count
    u = u_state.potentials.copy()
    y = aux.y
    phi_y = aux_rates(aux, kern, dyn.phi)
    phistar = dyn.phi.sup_bound
    fired = np.zeros(n, dtype=bool)
    beta = np.zeros(n, dtype=np.int64)
    bad_now = np.zeros(n, dtype=bool)
    log = EventLog()
    s = 0.0
    delta = part.delta
    t0 = u_state.clock
    if phistar > 0:
        total = n * phistar
        while True:
            gap = rng.exponential(1.0 / total)
            i = int(rng.integers(n))
            v = rng.random() * phistar
            if s + gap >= delta:
                break
            advance(u, gap, dyn)
            s += gap
            pu = float(dyn.phi(u[i], dyn.sites[i]))
            spike_u = False
            if not fired[i]:
                py = phi_y[i]
                lo, hi = (pu, py) if pu <= py else (py, pu)
                if v < lo:
                    fired[i] = True
                    beta[i] = part.time_bin(s)
                    spike_u = True
                elif v < hi:
                    bad_now[i] = True
                    if pu > py:
                        spike_u = True
                    else:
                        fired[i] = True
                        beta[i] = part.time_bin(s)
            elif v < pu:
                bad_now[i] = True
                spike_u = True
            if spike_u:
                log.append(t0 + s, i, float(u[i]))
                apply_spike(u, i, dyn)
    advance(u, delta - s, dyn)
    new_aux = _aux_update(aux, fired, beta, part, kern, eps2)
    events = EventLog(list(u_state.events.times), list(u_state.events.sites), list(u_state.events.pre_potentials))
    events.extend(log)
    new_u = NetworkState(u, t0 + delta, events)
    ledger.record(u, new_aux.y, bad_now, len(log), int(fired.sum()))
    return new_u, new_aux, ledger


@dataclass
class CoupledRun:
    ledger: CouplingLedger
    network: NetworkState
    aux: AuxState


def run_coupled(
    spec: ModelSpec, part: PartitionSpec, horizon: float, rng_seed: Any, substep: float | None = None
) -> CoupledRun:
    """Sample initial data, bin it and run the coupling for ``horizon / delta`` steps."""
    from .model import sample_initial_state

    steps = integer_ratio(horizon, part.delta)
    rng = as_generator(rng_seed)
    dyn = as_dynamics(spec, substep)
    kern = spec.cell_kernels(part.n_side)
    square = part.square_of(spec.mesh)
    u_state = sample_initial_state(spec, rng)
    aux = bin_initial(u_state.potentials, part, square)
    ledger = CouplingLedger.start(spec.mesh.count)
    eps2 = spec.mesh.epsilon**2
    for _ in range(steps):
        u_state, aux, ledger = coupled_step(u_state, aux, ledger, part, dyn, kern, rng, eps2)
    return CoupledRun(ledger, u_state, aux)


def run_aux(
    spec: ModelSpec, part: PartitionSpec, horizon: float, rng_seed: Any
) -> list[AuxState]:
    """Auxiliary trajectory alone, one state per macro step including the initial one."""
    from .model import sample_initial_state

    steps = integer_ratio(horizon, part.delta)
    rng = as_generator(rng_seed)
    kern = spec.cell_kernels(part.n_side)
    square = part.square_of(spec.mesh)
    u0 = sample_initial_state(spec, rng).potentials
    states = [bin_initial(u0, part, square)]
    eps2 = spec.mesh.epsilon**2
    for _ in range(steps):
        states.append(aux_step(states[-1], part, kern, spec.phi, rng, eps2))
    return states


def _ols_slope(x: Sequence[float], y: Sequence[float]) -> float | None:
    x = np.log(np.asarray(x, float))
    y = np.asarray(y, float)
    if len(x) < 3 or np.any(y <= 0):
        return None
    y = np.log(y)
    return float(np.polyfit(x, y, 1)[0])


def coupling_report(ledgers: Mapping[float, Sequence[CouplingLedger]], epsilon: float) -> dict:
    """Summaries per delta (averaged over replica ledgers) and slopes across the sweep."""
    eps2 = epsilon * epsilon
    per_delta = []
    for delta in sorted(ledgers):
        reps = list(ledgers[delta])
        theta_max = np.array([lg.theta for lg in reps])
        bad_max = np.array([eps2 * max(lg.bad_history, default=0) for lg in reps])
        n_steps = len(reps[0].theta_history)
        steps = []
        for k in range(n_steps):
            th = np.array([lg.theta_history[k] for lg in reps])
            bf = np.array([eps2 * lg.bad_history[k] for lg in reps])
            steps.append({"n": k + 1, "theta_n": float(th.mean()), "bad_fraction": float(bf.mean())})
        per_delta.append(
            {
                "delta": delta,
                "replicas": len(reps),
                "theta_max_mean": float(theta_max.mean()),
                "theta_max_stderr": _stderr(theta_max),
                "bad_fraction_max_mean": float(bad_max.mean()),
                "bad_fraction_max_stderr": _stderr(bad_max),
                "steps": steps,
            }
        )
    deltas = [d["delta"] for d in per_delta]
    report = {"epsilon": epsilon, "per_delta": per_delta}
    slope_t = _ols_slope(deltas, [d["theta_max_mean"] for d in per_delta])
    slope_b = _ols_slope(deltas, [d["bad_fraction_max_mean"] for d in per_delta])
    if slope_t is not None:
        report["theta_slope"] = slope_t
    if slope_b is not None:
        report["bad_fraction_slope"] = slope_b
    return report


def _stderr(x: np.ndarray) -> float:
    x = np.asarray(x, float)
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
