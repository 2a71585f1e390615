"""Deterministic limit objects.

* ``LevelLedger``: the mean-field recursion of potential levels and masses per
  square that the auxiliary process concentrates on.
* ``DensityField`` and ``rho_delta_step``: the time-delta recursion for the
  limit density, stored on characteristic-adapted nodes split at the reset
  front u*.
* ``solve_pde``: runs the recursion for a dyadic sequence of deltas and
  extrapolates, and ``closed_form_field`` rebuilds the density from the
  converged drift paths along characteristics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from .auxcouple import AuxState, PartitionSpec, relax
from .microsim import _relax_gain
from .model import CellKernels, InitialDensity, ModelSpec, RateFunction, integer_ratio

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _trap(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise trapezoid rule that accepts zero-length rows."""
    if x.shape[-1] < 2:
        return np.zeros(x.shape[:-1])
    return np.trapezoid(y, x, axis=-1)


# ------------------------------------------------------------------ level ledger


@dataclass
class LevelLedger:
    levels: np.ndarray
    masses: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    cell_area: float
    step: int = 0
    averages: list[np.ndarray] = field(default_factory=list)
    deposits: list[np.ndarray] = field(default_factory=list)
    bin_deposits: list[np.ndarray] = field(default_factory=list)

    def total_mass(self) -> np.ndarray:
        return self.masses.sum(axis=1)


def ledger_init(psi0: InitialDensity, part: PartitionSpec, kern: CellKernels) -> LevelLedger:
    """Masses ell^2 int_{I_k} psi0(u, i_m) du on the potential bins, levels at bin centers."""
    if kern.size != part.n_squares:
        raise ValueError("cell kernels do not match the partition's squares")
    K, E = part.n_u_bins, part.E
    centers = part.bin_centers
    # Gauss-Legendre on each bin, split where psi0 may jump
    pieces = []
    for k, c in enumerate(centers):
        cuts = [c - 0.5 * E] + [b for b in psi0.breakpoints if abs(b - c) < 0.5 * E] + [c + 0.5 * E]
        pieces += [(k, a, b) for a, b in zip(cuts, cuts[1:]) if b > a]
    idx = np.array([p[0] for p in pieces])
    lo_p, hi_p = np.array([p[1] for p in pieces]), np.array([p[2] for p in pieces])
    u = 0.5 * (lo_p + hi_p)[:, None] + 0.5 * (hi_p - lo_p)[:, None] * _GL_NODES[None, :]
    masses = np.empty((kern.size, K))
    for m, r in enumerate(kern.centers):
        vals = psi0(u, np.broadcast_to(r, u.shape + (2,)))
        masses[m] = kern.cell_area * np.bincount(idx, 0.5 * (hi_p - lo_p) * (vals @ _GL_WEIGHTS), minlength=K)
    levels = np.tile(centers, (kern.size, 1))
    lo = np.tile(centers - 0.5 * E, (kern.size, 1))
    hi = np.tile(centers + 0.5 * E, (kern.size, 1))
    return LevelLedger(levels, masses, lo, hi, kern.cell_area)


def ledger_step(ledger: LevelLedger, part: PartitionSpec, kern: CellKernels, phi: RateFunction) -> LevelLedger:
    D, Z = ledger.levels, ledger.masses
    H, delta, tau = part.n_time_bins, part.delta, part.tau
    rates = phi(D, np.broadcast_to(kern.centers[:, None, :], D.shape + (2,)))
    leak, lam = kern.leak, kern.lam
    e = kern.b_hat @ (D * Z).sum(axis=1)
    surv_frac = np.exp(-delta * rates)
    a_t = kern.a_cell.T
    s_full = a_t @ (Z * (1.0 - surv_frac)).sum(axis=1)
    # tail[h] = exp(-(delta - h tau) phi) for h = 0..H
    tail = [np.exp(-(delta - h * tau) * rates) for h in range(H + 1)]
    tail[H] = np.ones_like(rates)
    tail[0] = surv_frac
    new_levels = np.empty((kern.size, H))
    new_masses = np.empty((kern.size, H))
    s_bins = np.empty((kern.size, H))
    for h in range(1, H + 1):
        s_bins[:, h - 1] = a_t @ (Z * (tail[h - 1] - surv_frac)).sum(axis=1)
        new_levels[:, h - 1] = relax(0.0, e, (h - 1) * tau, leak, lam) + s_bins[:, h - 1]
        new_masses[:, h - 1] = (Z * (tail[h] - tail[h - 1])).sum(axis=1)

    def push(x: np.ndarray) -> np.ndarray:
        return relax(x, e[:, None], delta, leak[:, None], lam[:, None]) + s_full[:, None]

    floor = push(np.zeros((kern.size, 1)))[:, 0]
    new_hi = np.concatenate([new_levels[:, 1:], floor[:, None]], axis=1)
    return LevelLedger(
        levels=np.concatenate([new_levels, push(D)], axis=1),
        masses=np.concatenate([new_masses, Z * surv_frac], axis=1),
        lo=np.concatenate([new_levels, push(ledger.lo)], axis=1),
        hi=np.concatenate([new_hi, push(ledger.hi)], axis=1),
        cell_area=ledger.cell_area,
        step=ledger.step + 1,
        averages=ledger.averages + [e],
        deposits=ledger.deposits + [s_full],
        bin_deposits=ledger.bin_deposits + [s_bins],
    )


def ledger_vs_aux(ledger: LevelLedger, aux: AuxState, epsilon: float) -> dict:
    """Level and mass discrepancies between a ledger and an auxiliary state at the same step."""
    if ledger.levels.shape != aux.levels.shape:
        raise ValueError(
            f"ledger levels {ledger.levels.shape} and auxiliary levels {aux.levels.shape} differ: partitions do not match"
        )
    if ledger.step != aux.step:
        raise ValueError(f"ledger is at step {ledger.step}, auxiliary state at step {aux.step}")
    eta = aux.occupation()
    level_gap = np.abs(aux.levels - ledger.levels)
    mass_gap = np.abs(epsilon**2 * eta - ledger.masses)
    return {
        "step": ledger.step,
        "level_gap": float(level_gap.max()),
        "mass_gap": float(mass_gap.max()),
        "level_gap_per_square": level_gap.max(axis=1),
        "mass_gap_per_square": mass_gap.max(axis=1),
    }


@dataclass(frozen=True, eq=False)
class StepDensity:
    """Piecewise-constant density per square built from a ledger."""

    centers: np.ndarray
    cell_area: float
    lo: np.ndarray
    hi: np.ndarray
    masses: np.ndarray

    def mass(self) -> np.ndarray:
        return self.masses.sum(axis=1) / self.cell_area

    def density(self, u: np.ndarray, m: int) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        lo, hi, z = self.lo[m], self.hi[m], self.masses[m]
        width = hi - lo
        ok = width > 0
        out = np.zeros_like(u)
        for a, b, w, zz in zip(lo[ok], hi[ok], width[ok], z[ok]):
            out += np.where((u >= a) & (u < b), zz / (w * self.cell_area), 0.0)
        return out

    def integrate(self, fn: Callable) -> float:
        total = 0.0
        for m, r in enumerate(self.centers):
            lo, hi, z = self.lo[m], self.hi[m], self.masses[m]
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
            u = mid[:, None] + half[:, None] * _GL_NODES[None, :]
            avg = 0.5 * (fn(u, np.broadcast_to(r, u.shape + (2,))) @ _GL_WEIGHTS)
            total += float(np.sum(z * avg))
        return total


def density_from_ledger(ledger: LevelLedger, kern: CellKernels) -> StepDensity:
    """Spread each level's mass uniformly over its interval; intervals must not overlap."""
    lo, hi, z = ledger.lo, ledger.hi, ledger.masses
    if np.any(hi < lo - 1e-12):
        raise ValueError("ledger interval with negative width")
    for m in range(lo.shape[0]):
        order = np.argsort(lo[m], kind="stable")
        l_sorted, h_sorted = lo[m][order], hi[m][order]
        overlap = h_sorted[:-1] - l_sorted[1:]
        if np.any(overlap > 1e-9 * max(1.0, float(h_sorted.max()))):
            k = int(np.argmax(overlap))
            raise ValueError(
                f"overlapping level intervals in square {m}: "
                f"[{l_sorted[k]!r}, {h_sorted[k]!r}) and [{l_sorted[k + 1]!r}, {h_sorted[k + 1]!r})"
            )
    return StepDensity(kern.centers, kern.cell_area, lo.copy(), hi.copy(), z.copy())


# ----------------------------------------------------------------- density field


@dataclass(eq=False)
class DensityField:
    """rho_t(u, r) on r cells, stored as two node sets per cell.

    ``born_*`` covers [0, u*) (mass created by resets), ``init_*`` covers
    [u*, top] (mass that has never fired).  Densities are piecewise linear
    between nodes; the born nodes may repeat a u value to encode a jump.
    """

    t: float
    centers: np.ndarray
    cell_area: float
    born_u: np.ndarray
    born_rho: np.ndarray
    init_u: np.ndarray
    init_rho: np.ndarray

    @property
    def size(self) -> int:
        return len(self.centers)

    @property
    def ustar(self) -> np.ndarray:
        return self.init_u[:, 0].copy()

    @property
    def top(self) -> np.ndarray:
        return self.init_u[:, -1].copy()

    def r_of_nodes(self, u: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.centers[:, None, :], u.shape + (2,))

    def moment(self, g: Callable, breakpoints: Sequence[float] = ()) -> np.ndarray:
        """int g(u, r) rho(u, r) du for every cell.

        ``breakpoints`` are kinks of g; they are added as nodes so the
        quadrature error does not depend on where the kinks fall.
        """
        if len(breakpoints):
            return self._refined_moment(g, np.asarray(breakpoints, float))
        out = _trap(g(self.init_u, self.r_of_nodes(self.init_u)) * self.init_rho, self.init_u)
        if self.born_u.shape[1]:
            out = out + _trap(g(self.born_u, self.r_of_nodes(self.born_u)) * self.born_rho, self.born_u)
        return out

    def _refined_moment(self, g: Callable, bps: np.ndarray) -> np.ndarray:
        out = np.zeros(self.size)
        for idx in range(self.size):
            r = self.centers[idx]
            for u, rho in ((self.born_u[idx], self.born_rho[idx]), (self.init_u[idx], self.init_rho[idx])):
                if u.size < 2:
                    continue
                inner = bps[(bps > u[0]) & (bps < u[-1])]
                u_eval = u
                if inner.size:
                    # each kink enters twice so g (or g') is sampled from both sides
                    twice = np.repeat(np.sort(inner), 2)
                    pos = np.searchsorted(u, twice)
                    rho = np.insert(rho, pos, np.interp(twice, u, rho))
                    side = np.tile([-np.inf, np.inf], inner.size)
                    u_eval = np.insert(u, pos, np.nextafter(twice, side))
                    u = np.insert(u, pos, twice)
                out[idx] += np.trapezoid(g(u_eval, np.broadcast_to(r, u.shape + (2,))) * rho, u)
        return out

    def mass(self) -> np.ndarray:
        return _trap(self.init_rho, self.init_u) + _trap(self.born_rho, self.born_u)

    def integrate(self, fn: Callable) -> float:
        return float(self.cell_area * self.moment(fn).sum())

    def boundary_value(self) -> np.ndarray:
        """rho(0+, r)."""
        if self.born_u.shape[1]:
            return self.born_rho[:, 0].copy()
        return self.init_rho[:, 0].copy()

    def front_jump(self) -> np.ndarray:
        """rho(u*+, r) - rho(u*-, r); NaN before any mass was reset."""
        if not self.born_u.shape[1]:
            return np.full(self.size, np.nan)
        return self.init_rho[:, 0] - self.born_rho[:, -1]

    def density(self, u: np.ndarray, idx: int) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        init = np.interp(u, self.init_u[idx], self.init_rho[idx], left=0.0, right=0.0)
        if not self.born_u.shape[1]:
            return np.where(u >= 0, init, 0.0)
        born = np.interp(u, self.born_u[idx], self.born_rho[idx], left=0.0, right=0.0)
        return np.where(u < self.init_u[idx, 0], np.where(u >= 0, born, 0.0), init)

    def shifted(self, du: float) -> "DensityField":
        return DensityField(self.t, self.centers, self.cell_area, self.born_u + du, self.born_rho,
                            self.init_u + du, self.init_rho)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` draws (u, r): r uniform over cell centers, u from rho(., r)."""
        cells = rng.integers(self.size, size=n)
        unif = rng.random(n)
        u = np.empty(n)
        for idx in range(self.size):
            sel = cells == idx
            if not sel.any():
                continue
            grid = np.concatenate([self.born_u[idx], self.init_u[idx]])
            dens = np.concatenate([self.born_rho[idx], self.init_rho[idx]])
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
            cdf /= cdf[-1]
            u[sel] = _inverse_piecewise_linear_cdf(unif[sel], grid, dens, cdf)
        return u, self.centers[cells]


def _inverse_piecewise_linear_cdf(p: np.ndarray, grid: np.ndarray, dens: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    j = np.clip(np.searchsorted(cdf, p, side="right") - 1, 0, len(grid) - 2)
    x0, h = grid[j], grid[j + 1] - grid[j]
    f0, f1 = dens[j], dens[j + 1]
    mass = p * cdf[-1] - cdf[j]
    # solve f0 s + (f1 - f0) s^2 / (2h) = mass for s in [0, h]
    slope = np.where(h > 0, (f1 - f0) / np.where(h > 0, h, 1.0), 0.0)
    disc = np.maximum(f0 * f0 + 2.0 * slope * mass, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(slope) > 1e-12, (np.sqrt(disc) - f0) / slope, mass / np.where(f0 > 0, f0, 1.0))
    return x0 + np.clip(s, 0.0, h)


def initial_field(psi0: InitialDensity, kern: CellKernels, ugrid: int) -> DensityField:
    u = np.tile(np.linspace(0.0, psi0.R0, ugrid), (kern.size, 1))
    rho = psi0(u, np.broadcast_to(kern.centers[:, None, :], u.shape + (2,)))
    empty = np.zeros((kern.size, 0))
    return DensityField(0.0, kern.centers, kern.cell_area, empty, empty.copy(), u, rho)


@dataclass(frozen=True)
class FieldScalars:
    ubar: np.ndarray
    p: np.ndarray
    q: np.ndarray
    p_delta: np.ndarray | None = None

    def boundary_law(self, lam: np.ndarray) -> np.ndarray:
        """q / (lam ubar + p): the density the reset flux deposits at u = 0."""
        den = lam * self.ubar + self.p
        return np.where(den > 0, self.q / np.where(den > 0, den, 1.0), 0.0)


def field_scalars(fld: DensityField, kern: CellKernels, phi: RateFunction, delta: float | None = None) -> FieldScalars:
    w = kern.cell_area
    m1 = fld.moment(lambda u, r: u)
    q = fld.moment(lambda u, r: phi(u, r))
    ubar = w * (kern.b_hat @ m1)
    p = w * (kern.a_cell.T @ q)
    p_delta = None
    if delta is not None:
        lost = fld.moment(lambda u, r: -np.expm1(-delta * phi(u, r)))
        p_delta = w * (kern.a_cell.T @ lost) / delta
    return FieldScalars(ubar, p, q, p_delta)


@dataclass(eq=False)
class SpikerBranch:
    """Data of one step needed to place the mass reset during that step.

    A neuron that fires with remaining time t in the step sits at
    ``potential(t)`` at the end of it; ``reset_time`` inverts that map.
    """

    delta: float
    kern: CellKernels
    ubar: np.ndarray
    u_nodes: np.ndarray
    rho_nodes: np.ndarray
    rate_nodes: np.ndarray

    def _integrals(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        decay = np.exp(-(self.delta - t)[None, :, None] * self.rate_nodes[:, None, :])
        full = np.exp(-self.delta * self.rate_nodes)[:, None, :]
        rho = self.rho_nodes[:, None, :]
        u = self.u_nodes[:, None, :]
        G = _trap(rho * (decay - full), u)
        Gp = _trap(rho * self.rate_nodes[:, None, :] * decay, u)
        return G, Gp

    def profile(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """End-of-step potential and density of resets with remaining time t (cells x times)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        kern = self.kern
        G, Gp = self._integrals(t)
        drive = (kern.lam * self.ubar)[:, None]
        pot = drive * _relax_gain(kern.leak[:, None], t[None, :]) + kern.cell_area * (kern.a_cell.T @ G)
        speed = drive * np.exp(-kern.leak[:, None] * t[None, :]) + kern.cell_area * (kern.a_cell.T @ Gp)
        dens = np.where(speed > 0, Gp / np.where(speed > 0, speed, 1.0), 0.0)
        return pot, dens

    def potential(self, t: np.ndarray) -> np.ndarray:
        return self.profile(t)[0]

    def density(self, t: np.ndarray) -> np.ndarray:
        return self.profile(t)[1]

    def reset_time(self, u: float, idx: int, tol: float = 1e-12) -> float:
        lo, hi = 0.0, self.delta
        f_lo = self.potential(lo)[idx, 0] - u
        f_hi = self.potential(hi)[idx, 0] - u
        if f_lo > 0 or f_hi < 0:
            raise ValueError(
                f"reset time not bracketed for u={u!r} in cell {idx}: "
                f"potential(0)={f_lo + u!r}, potential(delta)={f_hi + u!r}"
            )
        return float(brentq(lambda t: self.potential(t)[idx, 0] - u, lo, hi, xtol=tol))


def rho_delta_step(
    fld: DensityField, kern: CellKernels, phi: RateFunction, delta: float, born_nodes: int = 16
) -> tuple[DensityField, SpikerBranch, FieldScalars]:
    """One step of the time-delta recursion.

    Mass that does not fire is carried along the frozen-average flow with
    weight e^{-delta (phi - alpha - lam)}; mass that fires is re-injected
    on [0, x_n) using ``born_nodes + 1`` nodes in remaining time.
    """
    sc = field_scalars(fld, kern, phi, delta)
    leak, lam = kern.leak[:, None], kern.lam[:, None]
    u_all = np.concatenate([fld.born_u, fld.init_u], axis=1)
    rho_all = np.concatenate([fld.born_rho, fld.init_rho], axis=1)
    rate_all = phi(u_all, fld.r_of_nodes(u_all))
    branch = SpikerBranch(delta, kern, sc.ubar, u_all, rho_all, rate_all)

    t = np.linspace(0.0, delta, born_nodes + 1)
    new_u, new_rho = branch.profile(t)
    shift = new_u[:, -1:]
    new_u[:, 0] = 0.0

    def carry(u, rho):
        rates = phi(u, fld.r_of_nodes(u))
        return np.exp(-leak * delta) * u + shift, rho * np.exp(-delta * (rates - leak))

    old_born_u, old_born_rho = carry(fld.born_u, fld.born_rho)
    init_u, init_rho = carry(fld.init_u, fld.init_rho)
    out = DensityField(
        fld.t + delta,
        fld.centers,
        fld.cell_area,
        np.concatenate([new_u, old_born_u], axis=1),
        np.concatenate([new_rho, old_born_rho], axis=1),
        init_u,
        init_rho,
    )
    return out, branch, sc


# -------------------------------------------------------------- scheme driver


@dataclass
class SchemeRun:
    delta: float
    times: np.ndarray
    ubar: np.ndarray
    p: np.ndarray
    q: np.ndarray
    ustar: np.ndarray
    fields: dict[int, DensityField]

    def field_at(self, t: float) -> DensityField:
        return self.fields[int(round(t / self.delta))]


def run_scheme(
    psi0: InitialDensity,
    kern: CellKernels,
    phi: RateFunction,
    horizon: float,
    delta: float,
    ugrid: int = 801,
    born_nodes: int = 16,
    keep: Sequence[float] = (),
) -> SchemeRun:
    steps = integer_ratio(horizon, delta)
    keep_steps = {int(round(t / delta)) for t in keep}
    for k, t in zip(sorted(keep_steps), sorted(keep)):
        if abs(k * delta - t) > 1e-9:
            raise ValueError(f"time {t!r} is not on the grid of step {delta!r}")
    fld = initial_field(psi0, kern, ugrid)
    scal = {"ubar": [], "p": [], "q": [], "ustar": []}
    fields = {}
    for n in range(steps + 1):
        if n in keep_steps:
            fields[n] = fld
        if n == steps:
            sc = field_scalars(fld, kern, phi)
        else:
            nxt, _, sc = rho_delta_step(fld, kern, phi, delta, born_nodes)
        scal["ubar"].append(sc.ubar)
        scal["p"].append(sc.p)
        scal["q"].append(sc.q)
        scal["ustar"].append(fld.ustar)
        if n < steps:
            fld = nxt
    times = delta * np.arange(steps + 1)
    return SchemeRun(delta, times, *(np.array(scal[k]) for k in ("ubar", "p", "q", "ustar")), fields)


def _resample(fld: DensityField, n_born: int, n_init: int) -> tuple[np.ndarray, ...]:
    """Values on normalized coordinates: xi*u* below the front, u* + xi*(top - u*) above."""
    xi_b = np.linspace(0.0, 1.0, n_born)
    xi_i = np.linspace(0.0, 1.0, n_init)
    us, top = fld.ustar, fld.top
    born = np.empty((fld.size, n_born))
    init = np.empty((fld.size, n_init))
    for idx in range(fld.size):
        ub = xi_b * us[idx]
        if fld.born_u.shape[1]:
            born[idx] = np.interp(ub, fld.born_u[idx], fld.born_rho[idx])
            # the front itself belongs to the initial part; take the left limit there
            born[idx, -1] = fld.born_rho[idx, -1]
            born[idx, 0] = fld.born_rho[idx, 0]
        else:
            born[idx] = 0.0
        ui = us[idx] + xi_i * (top[idx] - us[idx])
        init[idx] = np.interp(ui, fld.init_u[idx], fld.init_rho[idx])
    return us, top, born, init


def extrapolate(fine: DensityField, coarse: DensityField, n_born: int = 401, n_init: int = 801) -> DensityField:
    """First-order Richardson combination 2*fine - coarse on front-aligned coordinates."""
    us_f, top_f, born_f, init_f = _resample(fine, n_born, n_init)
    us_c, top_c, born_c, init_c = _resample(coarse, n_born, n_init)
    us = np.maximum(2.0 * us_f - us_c, 0.0)
    top = 2.0 * top_f - top_c
    xi_b = np.linspace(0.0, 1.0, n_born)
    xi_i = np.linspace(0.0, 1.0, n_init)
    has_born = fine.born_u.shape[1] > 0
    born_u = us[:, None] * xi_b[None, :] if has_born else np.zeros((fine.size, 0))
    born_rho = np.maximum(2.0 * born_f - born_c, 0.0) if has_born else np.zeros((fine.size, 0))
    init_u = us[:, None] + (top - us)[:, None] * xi_i[None, :]
    init_rho = np.maximum(2.0 * init_f - init_c, 0.0)
    return DensityField(fine.t, fine.centers, fine.cell_area, born_u, born_rho, init_u, init_rho)


def l1_distance(f: DensityField, g: DensityField, n_grid: int = 8001) -> float:
    """int int |f - g| du dr, cellwise on a fine uniform grid with both fronts inserted."""
    total = 0.0
    for idx in range(f.size):
        top = max(f.top[idx], g.top[idx])
        pts = [np.linspace(0.0, top, n_grid)]
        for fld in (f, g):
            us = fld.ustar[idx]
            pts.append(np.array([us, np.nextafter(us, -np.inf), fld.top[idx], np.nextafter(fld.top[idx], -np.inf)]))
        u = np.unique(np.clip(np.concatenate(pts), 0.0, top))
        diff = np.abs(f.density(u, idx) - g.density(u, idx))
        total += float(np.trapezoid(diff, u))
    return total * f.cell_area


# --------------------------------------------------------------- characteristics


@dataclass(frozen=True, eq=False)
class DriftPath:
    """Piecewise-linear forcing lam*ubar_t + p_t of one cell, with exact flow maps.

    The characteristic T_{s,t}(u) = e^{-k(t-s)} u + int_s^t e^{-k(t-h)} f(h) dh
    is evaluated through the primitive H(t) = int_0^t e^{k h} f(h) dh, which is
    exact for piecewise-linear f.
    """

    times: np.ndarray
    ubar: np.ndarray
    p: np.ndarray
    lam: float
    alpha: float
    q: np.ndarray | None = None

    @property
    def leak(self) -> float:
        return self.alpha + self.lam

    @property
    def forcing(self) -> np.ndarray:
        return self.lam * np.asarray(self.ubar) + np.asarray(self.p)

    @cached_property
    def _cumulative(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self._piece_integrals())])

    def _piece_integrals(self) -> np.ndarray:
        k = self.leak
        t = np.asarray(self.times, float)
        f = self.forcing
        dt = np.diff(t)
        slope = np.diff(f) / dt
        ek = np.exp(k * dt)
        # int_0^dt e^{k x} (f0 + m x) dx
        base = f[:-1] * np.expm1(k * dt) / k
        lin = slope * (dt * ek / k - np.expm1(k * dt) / (k * k))
        return np.exp(k * t[:-1]) * (base + lin)

    def primitive(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        times = np.asarray(self.times, float)
        if np.any(t < times[0] - 1e-12) or np.any(t > times[-1] + 1e-12):
            raise ValueError("time outside the path grid")
        cum = self._cumulative
        k = self.leak
        f = self.forcing
        j = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
        x = t - times[j]
        m = (f[j + 1] - f[j]) / (times[j + 1] - times[j])
        part = f[j] * np.expm1(k * x) / k + m * (x * np.exp(k * x) / k - np.expm1(k * x) / (k * k))
        return cum[j] + np.exp(k * times[j]) * part

    def flow(self, s, t, u) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(s > t + 1e-15):
            raise ValueError("characteristic flow needs s <= t")
        k = self.leak
        return np.exp(-k * (t - s)) * np.asarray(u, float) + np.exp(-k * t) * (self.primitive(t) - self.primitive(s))

    def interp(self, name: str, t) -> np.ndarray:
        return np.interp(t, self.times, getattr(self, name))


def characteristic_flow(s, t, u, path: DriftPath) -> np.ndarray:
    return path.flow(s, t, u)


def closed_form_field(
    t: float,
    paths: Sequence[DriftPath],
    psi0: InitialDensity,
    phi: RateFunction,
    kern: CellKernels,
    ugrid: int = 801,
    n_time: int = 1024,
) -> DensityField:
    """Density at time t rebuilt from drift paths along characteristics.

    Above the front the initial density is transported from time 0; below it,
    mass enters at u = 0 at time s with density q_s / (lam ubar_s + p_s) and
    is transported from s to t.  Both carry the factor
    exp(-int (phi(T_h) - alpha - lam) dh).
    """
    tau = np.linspace(0.0, t, n_time + 1)
    n = kern.size
    v0 = np.linspace(0.0, psi0.R0, ugrid)
    init_u = np.empty((n, ugrid))
    init_rho = np.empty((n, ugrid))
    born_u = np.empty((n, n_time + 1)) if t > 0 else np.zeros((n, 0))
    born_rho = np.empty_like(born_u)
    for idx, (path, r) in enumerate(zip(paths, kern.centers)):
        k = path.leak
        H = path.primitive(tau)
        dec = np.exp(-k * tau)
        X = dec[:, None] * (v0[None, :] + H[:, None])
        rate = phi(X, np.broadcast_to(r, X.shape + (2,))) - k
        I = np.trapezoid(rate, tau, axis=0) if t > 0 else np.zeros(ugrid)
        init_u[idx] = X[-1]
        init_rho[idx] = psi0(v0, np.broadcast_to(r, v0.shape + (2,))) * np.exp(-I)
        if t <= 0:
            continue
        # B[j, i] = T_{tau_j, tau_i}(0) for i >= j
        B = dec[None, :] * (H[None, :] - H[:, None])
        lower = np.tri(n_time + 1, k=-1, dtype=bool)
        B = np.where(lower, 0.0, B)
        rb = phi(B, np.broadcast_to(r, B.shape + (2,))) - k
        rb = np.where(lower, 0.0, rb)
        seg = 0.5 * (rb[:, 1:] + rb[:, :-1]) * np.diff(tau)[None, :]
        seg = np.where(np.tri(n_time + 1, n_time, k=-1, dtype=bool), 0.0, seg)
        J = seg.sum(axis=1)
        ub, pp, qq = path.interp("ubar", tau), path.interp("p", tau), path.interp("q", tau)
        v1 = qq / (path.lam * ub + pp)
        born_u[idx] = B[::-1, -1]
        born_rho[idx] = (v1 * np.exp(-J))[::-1]
    return DensityField(t, kern.centers, kern.cell_area, born_u, born_rho, init_u, init_rho)


# ------------------------------------------------------------------ weak residual


def _cell_index(centers: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Index of the cell center closest to each position in ``r`` (shape (..., 2))."""
    d = np.sum((r[..., None, :] - centers) ** 2, axis=-1)
    return np.argmin(d, axis=-1)


def weak_residual(
    before: DensityField,
    now: DensityField,
    after: DensityField,
    g: Callable,
    dg: Callable,
    kern: CellKernels,
    phi: RateFunction,
    breakpoints: Sequence[float] = (),
) -> np.ndarray:
    """Defect of the weak form at ``now.t`` for a test function g(u) (per cell).

    d/dt int g rho - int g' V rho - g(0) V(0) v1 + int phi g rho, where
    V(u) = -alpha u - lam (u - ubar) + p and v1 = q / (lam ubar + p).
    """
    h1 = now.t - before.t
    h2 = after.t - now.t
    if not (h1 > 0 and h2 > 0):
        raise ValueError("weak residual needs three increasing times")
    bp = breakpoints
    mb, ma = before.moment(lambda u, r: g(u), bp), after.moment(lambda u, r: g(u), bp)
    mn = now.moment(lambda u, r: g(u), bp)
    ddt = (h1 * h1 * ma - h2 * h2 * mb - (h1 * h1 - h2 * h2) * mn) / (h1 * h2 * (h1 + h2))
    sc = field_scalars(now, kern, phi)
    lam, alpha = kern.lam, kern.alpha
    ubar, p = sc.ubar, sc.p
    drift = {"lam": lam, "ubar": ubar, "p": p}

    def transport_density(u, r):
        # r carries the cell position; recover the cell from it
        idx = _cell_index(now.centers, r)
        return dg(u) * (-alpha * u - drift["lam"][idx] * (u - drift["ubar"][idx]) + drift["p"][idx])

    transport = now.moment(transport_density, bp)
    boundary = g(np.zeros(1))[0] * (lam * ubar + p) * sc.boundary_law(lam)
    killing = now.moment(lambda u, r: phi(u, r) * g(u), bp)
    return ddt - transport - boundary + killing


# ------------------------------------------------------------------ PDE solver


@dataclass(eq=False)
class PDESolution:
    kern: CellKernels
    phi: RateFunction
    psi0: InitialDensity
    horizon: float
    deltas: list[float]
    obs_times: list[float]
    fields: dict[float, DensityField]
    level_fields: list[dict[float, DensityField]]
    times: np.ndarray
    ubar: np.ndarray
    p: np.ndarray
    q: np.ndarray
    ustar: np.ndarray
    level_gaps: np.ndarray
    converged: bool
    runs: list[SchemeRun] = field(repr=False, default_factory=list)

    def error_estimate(self, t: float) -> float:
        """L1 gap between the two finest levels at time t (the finest level's error to first order)."""
        if not len(self.level_gaps):
            return float("nan")
        return float(self.level_gaps[-1][self.obs_times.index(t)])

    def path(self, idx: int) -> DriftPath:
        return DriftPath(self.times, self.ubar[:, idx], self.p[:, idx], float(self.kern.lam[idx]),
                         self.kern.alpha, self.q[:, idx])

    def paths(self) -> list[DriftPath]:
        return [self.path(i) for i in range(self.kern.size)]

    def closed_form(self, t: float, ugrid: int = 801, n_time: int = 1024) -> DensityField:
        return closed_form_field(t, self.paths(), self.psi0, self.phi, self.kern, ugrid, n_time)

    def scalars_at(self, t: float) -> FieldScalars:
        j = int(round(t / (self.times[1] - self.times[0])))
        return FieldScalars(self.ubar[j], self.p[j], self.q[j])

    def boundary_defect(self, t: float) -> np.ndarray:
        law = self.scalars_at(t).boundary_law(self.kern.lam)
        return np.abs(self.fields[t].boundary_value() - law)


def dyadic_times(horizon: float, q: int) -> list[float]:
    return [horizon * i / 2**q for i in range(2**q + 1)]


def solve_pde(
    spec: ModelSpec,
    horizon: float = 1.0,
    delta: float = 2.0**-6,
    levels: int = 3,
    rgrid: int = 4,
    ugrid: int = 801,
    born_nodes: int = 16,
    obs_level: int = 3,
    kern: CellKernels | None = None,
) -> PDESolution:
    """Run the delta-recursion at delta, delta/2, ... and extrapolate the two finest levels."""
    if levels < 1:
        raise ValueError("need at least one delta level")
    kern = kern if kern is not None else spec.cell_kernels(rgrid)
    deltas = [delta / 2**j for j in range(levels)]
    obs = dyadic_times(horizon, obs_level)
    for t in obs[1:]:
        integer_ratio(t, delta)
    runs = [run_scheme(spec.psi0, kern, spec.phi, horizon, d, ugrid, born_nodes, keep=obs) for d in deltas]
    level_fields = [{t: run.field_at(t) for t in obs} for run in runs]
    coarse_n = integer_ratio(horizon, delta)
    times = delta * np.arange(coarse_n + 1)

    def on_coarse(run: SchemeRun, name: str) -> np.ndarray:
        stride = int(round(delta / run.delta))
        return getattr(run, name)[::stride]

    def combine(name: str) -> np.ndarray:
        if levels == 1:
            return on_coarse(runs[0], name)
        return 2.0 * on_coarse(runs[-1], name) - on_coarse(runs[-2], name)

    if levels == 1:
        fields = dict(level_fields[0])
    else:
        fields = {t: extrapolate(level_fields[-1][t], level_fields[-2][t], n_init=ugrid) for t in obs}
    gaps = np.array([[l1_distance(level_fields[j + 1][t], level_fields[j][t]) for t in obs] for j in range(levels - 1)])
    converged = True
    if levels >= 3:
        converged = bool(np.all(gaps[1:, 1:] < gaps[:-1, 1:]))
    return PDESolution(
        kern=kern,
        phi=spec.phi,
        psi0=spec.psi0,
        horizon=horizon,
        deltas=deltas,
        obs_times=obs,
        fields=fields,
        level_fields=level_fields,
        times=times,
        ubar=combine("ubar"),
        p=combine("p"),
        q=combine("q"),
        ustar=combine("ustar"),
        level_gaps=gaps,
        converged=converged,
        runs=runs,
    )
