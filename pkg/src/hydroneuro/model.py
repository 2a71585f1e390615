"""Problem instance: mesh, interaction kernels, firing rate, leak and initial law.

Kernels, rates and initial densities are built from named presets so that a
model can be serialized to a config file and rebuilt bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property, partial
from typing import Any, Callable, Mapping

import numpy as np
from scipy.optimize import brentq

TWO_PI = 2.0 * math.pi
CDF_GRID_POINTS = 4096
CONTINUUM_QUADRATURE = 128


def as_generator(seed: Any) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def is_integer_ratio(x: float, unit: float, rtol: float = 1e-9) -> bool:
    """True when ``x / unit`` is a positive integer up to rounding."""
    if unit <= 0 or x <= 0:
        return False
    q = x / unit
    n = round(q)
    return n >= 1 and abs(q - n) <= rtol * max(1.0, q)


def integer_ratio(x: float, unit: float) -> int:
    if not is_integer_ratio(x, unit):
        raise ValueError(f"{x!r} is not an integer multiple of {unit!r}")
    return int(round(x / unit))


# --------------------------------------------------------------------------- mesh


@dataclass(frozen=True)
class Mesh:
    epsilon: float
    n_side: int
    sites: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return self.n_side * self.n_side

    def site_indices(self) -> np.ndarray:
        """Integer lattice coordinates (kx, ky) of every site."""
        k = np.arange(self.count)
        return np.stack([k // self.n_side, k % self.n_side], axis=1)


def build_mesh(epsilon: float) -> Mesh:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    inv = 1.0 / epsilon
    n = round(inv)
    if n < 1 or abs(inv - n) > 1e-9 * max(1.0, inv):
        raise ValueError(
            f"epsilon={epsilon!r}: 1/epsilon={inv!r} is not an integer; "
            "choose epsilon = 1/n so the lattice tiles [0,1)^2"
        )
    kx, ky = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    sites = np.stack([kx.ravel() / n, ky.ravel() / n], axis=1)
    sites.setflags(write=False)
    return Mesh(epsilon=1.0 / n, n_side=n, sites=sites)


def cell_grid(n_side: int) -> np.ndarray:
    """Centers of the n_side x n_side squares tiling [0,1)^2, same ordering as the mesh."""
    c = (np.arange(n_side) + 0.5) / n_side
    cx, cy = np.meshgrid(c, c, indexing="ij")
    return np.stack([cx.ravel(), cy.ravel()], axis=1)


def displacement(r: np.ndarray, rp: np.ndarray, periodic: bool = True) -> np.ndarray:
    """Componentwise |r - r'|, wrapped on the torus when ``periodic``."""
    d = np.abs(np.asarray(r, dtype=float) - np.asarray(rp, dtype=float))
    if periodic:
        d = np.minimum(d, 1.0 - d)
    return d


# ------------------------------------------------------------------------ kernels


def _constant_profile(d: np.ndarray, c: float) -> np.ndarray:
    return np.full(d.shape[:-1], float(c))


def _gaussian_profile(d: np.ndarray, c: float, sigma: float) -> np.ndarray:
    return c * np.exp(-np.sum(d * d, axis=-1) / (2.0 * sigma * sigma))


def _cosine_profile(d: np.ndarray, c: float, kappa: float) -> np.ndarray:
    return c * (1.0 + kappa * np.cos(TWO_PI * d[..., 0]) * np.cos(TWO_PI * d[..., 1]))


_KERNEL_PRESETS: dict[str, tuple[Callable, tuple[str, ...]]] = {
    "constant": (_constant_profile, ("c",)),
    "gaussian": (_gaussian_profile, ("c", "sigma")),
    "cosine": (_cosine_profile, ("c", "kappa")),
}

KERNEL_PRESETS = tuple(_KERNEL_PRESETS)


@dataclass(frozen=True, eq=False)
class Kernel:
    """Interaction kernel given by a smooth profile of the displacement.

    ``profile`` is the continuous function used for cell-level quadrature;
    calling the kernel returns the same value except on the diagonal, where it
    vanishes (a neuron does not act on itself).
    """

    preset: str
    params: Mapping[str, float] = field(default_factory=dict)
    periodic: bool = True

    def __post_init__(self) -> None:
        if self.preset not in _KERNEL_PRESETS:
            raise ValueError(f"unknown kernel preset {self.preset!r}; known: {KERNEL_PRESETS}")
        _, names = _KERNEL_PRESETS[self.preset]
        missing = [n for n in names if n not in self.params]
        if missing:
            raise ValueError(f"kernel preset {self.preset!r} needs parameters {missing}")
        extra = sorted(set(self.params) - set(names))
        if extra:
            raise ValueError(f"kernel preset {self.preset!r} does not take {extra}")
        p = {k: float(v) for k, v in self.params.items()}
        object.__setattr__(self, "params", p)
        if p["c"] < 0:
            raise ValueError("kernel amplitude c must be nonnegative (excitatory only)")
        if self.preset == "gaussian" and p["sigma"] <= 0:
            raise ValueError("gaussian kernel needs sigma > 0")
        if self.preset == "cosine" and not 0.0 <= p["kappa"] <= 1.0:
            raise ValueError("cosine kernel needs 0 <= kappa <= 1 to stay nonnegative")

    @property
    def symmetric(self) -> bool:
        return True

    @property
    def sup(self) -> float:
        p = self.params
        return p["c"] * (1.0 + p["kappa"]) if self.preset == "cosine" else p["c"]

    @property
    def lipschitz_bound(self) -> float:
        p = self.params
        if self.preset == "constant":
            return 0.0
        if self.preset == "gaussian":
            return p["c"] / (p["sigma"] * math.sqrt(math.e))
        return TWO_PI * p["c"] * p["kappa"]

    def profile(self, r: np.ndarray, rp: np.ndarray) -> np.ndarray:
        fn, names = _KERNEL_PRESETS[self.preset]
        d = displacement(r, rp, self.periodic)
        return fn(d, *(self.params[n] for n in names))

    def __call__(self, r: np.ndarray, rp: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        rp = np.asarray(rp, dtype=float)
        val = self.profile(r, rp)
        same = np.all(r == rp, axis=-1)
        return np.where(same, 0.0, val)

    def matrix(self, sites: np.ndarray) -> np.ndarray:
        """Pairwise values k(r_i, r_j) on a point set, diagonal zeroed."""
        sites = np.asarray(sites, dtype=float)
        m = self.profile(sites[:, None, :], sites[None, :, :])
        np.fill_diagonal(m, 0.0)
        return m

    def cell_matrix(self, centers: np.ndarray) -> np.ndarray:
        """Continuous profile on cell centers (diagonal kept: it stands for a whole cell)."""
        centers = np.asarray(centers, dtype=float)
        return self.profile(centers[:, None, :], centers[None, :, :])

    def row_integral(self, points: np.ndarray, n_quad: int = CONTINUUM_QUADRATURE) -> np.ndarray:
        """int_{[0,1)^2} profile(r, r') dr' for each r, by a fine midpoint rule."""
        if self.preset == "constant":
            return np.full(len(points), self.params["c"])
        q = cell_grid(n_quad)
        vals = self.profile(np.asarray(points, float)[:, None, :], q[None, :, :])
        return vals.mean(axis=1)

    def to_config(self) -> dict:
        return {"preset": self.preset, **self.params}


def normalize_gap_kernel(raw_b: Kernel | np.ndarray, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Split ``raw_b`` on the mesh into a row-normalized kernel and the gap rates.

    Returns ``(b_tilde, lam)`` with ``lam[i] = eps^2 sum_j raw_b(i, j)`` and
    ``b_tilde[i, j] = raw_b(i, j) / lam[i]`` so that ``eps^2 sum_j b_tilde[i, j] = 1``.
    """
    eps2 = mesh.epsilon**2
    if isinstance(raw_b, Kernel):
        mat = raw_b.matrix(mesh.sites)
    else:
        mat = np.array(raw_b, dtype=float)
        if mat.shape != (mesh.count, mesh.count):
            raise ValueError(f"kernel matrix shape {mat.shape} does not match {mesh.count} sites")
        if np.any(np.diag(mat) != 0.0):
            raise ValueError("gap kernel must vanish on the diagonal")
    if np.any(mat < 0):
        raise ValueError("gap kernel must be nonnegative")
    lam = eps2 * mat.sum(axis=1)
    if np.any(lam <= 0):
        bad = np.flatnonzero(lam <= 0)
        raise ValueError(
            f"gap kernel has {bad.size} isolated site(s) (zero row), e.g. site {bad[0]}; "
            "every neuron needs at least one electrical neighbour"
        )
    return mat / lam[:, None], lam


# -------------------------------------------------------------------------- rates


def _modulation(r: np.ndarray | None, gamma: float) -> np.ndarray | float:
    if gamma == 0.0 or r is None:
        return 1.0
    r = np.asarray(r, dtype=float)
    return 1.0 + gamma * np.cos(TWO_PI * r[..., 0])


def _linear_rate(u, r, slope, gamma):
    return slope * u * _modulation(r, gamma)


def _sigmoid_rate(u, r, height, steepness, gamma):
    return height * np.tanh(steepness * u) * _modulation(r, gamma)


def _power_rate(u, r, coef, power, gamma):
    return coef * np.power(u, power) * _modulation(r, gamma)


def _zero_rate(u, r):
    return np.zeros(np.shape(u))


_RATE_PRESETS: dict[str, tuple[Callable, tuple[str, ...]]] = {
    "linear": (_linear_rate, ("slope",)),
    "sigmoid": (_sigmoid_rate, ("height", "steepness")),
    "power": (_power_rate, ("coef", "power")),
    "zero": (_zero_rate, ()),
}

RATE_PRESETS = tuple(_RATE_PRESETS)


def _default_r_samples(n: int = 16) -> np.ndarray:
    # corner-aligned grid: includes x = 0 and x = 1/2, where cosine modulations peak
    k = np.arange(n) / n
    return np.stack(np.meshgrid(k, k, indexing="ij"), axis=-1).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class RateFunction:
    """Firing rate phi(u, r), frozen above ``clamp_level``."""

    raw: Callable[[np.ndarray, np.ndarray | None], np.ndarray] = field(repr=False)
    clamp_level: float
    sup_bound: float
    lipschitz_bound: float
    r_dependent: bool = False
    preset: str | None = None
    params: Mapping[str, float] = field(default_factory=dict)

    def __call__(self, u, r=None) -> np.ndarray:
        u = np.minimum(np.asarray(u, dtype=float), self.clamp_level)
        return self.raw(u, r)

    def to_config(self) -> dict:
        return {"preset": self.preset, "clamp": self.clamp_level, **self.params}


def clamp_rate(
    raw_phi: Callable,
    clamp_level: float,
    r_samples: np.ndarray | None = None,
    *,
    r_dependent: bool = True,
    preset: str | None = None,
    params: Mapping[str, float] | None = None,
) -> RateFunction:
    """Freeze ``raw_phi`` above ``clamp_level`` and record its sup and Lipschitz bounds."""
    if not clamp_level > 0:
        raise ValueError("clamp_level must be positive")
    rs = _default_r_samples() if r_samples is None else np.asarray(r_samples, dtype=float)
    ug = np.linspace(0.0, clamp_level, 2049)
    vals = np.asarray(raw_phi(ug[None, :], rs[:, None, :]), dtype=float)
    vals = np.broadcast_to(vals, (len(rs), ug.size))
    if np.any(vals < 0):
        raise ValueError("firing rate must be nonnegative")
    if np.any(np.abs(vals[:, 0]) > 0):
        raise ValueError("firing rate must vanish at u=0 (no external stimulus)")
    if np.any(np.diff(vals, axis=1) < -1e-12):
        raise ValueError("firing rate must be nondecreasing in u")
    sup = float(vals[:, -1].max())
    lip = float((np.diff(vals, axis=1) / np.diff(ug)).max())
    return RateFunction(
        raw=raw_phi,
        clamp_level=float(clamp_level),
        sup_bound=sup,
        lipschitz_bound=lip,
        r_dependent=r_dependent,
        preset=preset,
        params=dict(params or {}),
    )


def rate_preset(preset: str, clamp: float, modulation: float = 0.0, **params: float) -> RateFunction:
    if preset not in _RATE_PRESETS:
        raise ValueError(f"unknown rate preset {preset!r}; known: {RATE_PRESETS}")
    fn, names = _RATE_PRESETS[preset]
    missing = [n for n in names if n not in params]
    extra = sorted(set(params) - set(names))
    if missing or extra:
        raise ValueError(f"rate preset {preset!r} needs {list(names)}, got {sorted(params)}")
    if not -1.0 < modulation < 1.0:
        raise ValueError("rate modulation must lie in (-1, 1)")
    if preset == "power" and params["power"] <= 0:
        raise ValueError("power rate needs a positive exponent")
    kw = {n: float(params[n]) for n in names}
    if preset == "zero":
        raw = fn
    else:
        raw = partial(fn, gamma=float(modulation), **kw)
    cfg = dict(kw)
    if modulation:
        cfg["modulation"] = float(modulation)
    rate = clamp_rate(raw, clamp, r_dependent=modulation != 0.0, preset=preset, params=cfg)
    if modulation:
        # exact bounds: the modulation factor peaks at 1 + |gamma|
        base = clamp_rate(partial(fn, gamma=0.0, **kw), clamp, r_dependent=False)
        peak = 1.0 + abs(float(modulation))
        rate = replace(rate, sup_bound=base.sup_bound * peak, lipschitz_bound=base.lipschitz_bound * peak)
    return rate


# ---------------------------------------------------------------- initial density


def _uniform_pdf(u, r, R0):
    return np.full(np.shape(u), 1.0 / R0)


def _linear_pdf(u, r, R0):
    return 2.0 / R0 * (1.0 - u / R0)


def _mixture_pdf(u, r, R0, theta):
    return theta / R0 + (1.0 - theta) * 2.0 * u / (R0 * R0)


def _narrow_pdf(u, r, center, width):
    return np.where(np.abs(u - center) <= 0.5 * width, 1.0 / width, 0.0)


def _tilted_pdf(u, r, R0, gamma):
    w = 0.5 * (1.0 + gamma * np.sin(TWO_PI * np.asarray(r, dtype=float)[..., 0]))
    return w * _linear_pdf(u, r, R0) + (1.0 - w) * _uniform_pdf(u, r, R0)


_DENSITY_PRESETS: dict[str, tuple[Callable, tuple[str, ...], bool]] = {
    "uniform": (_uniform_pdf, ("R0",), False),
    "linear": (_linear_pdf, ("R0",), False),
    "mixture": (_mixture_pdf, ("R0", "theta"), False),
    "narrow": (_narrow_pdf, ("center", "width"), False),
    "tilted": (_tilted_pdf, ("R0", "gamma"), True),
}

DENSITY_PRESETS = tuple(_DENSITY_PRESETS) + ("compatible",)


@dataclass(frozen=True, eq=False)
class InitialDensity:
    pdf: Callable = field(repr=False)
    R0: float
    r_dependent: bool = False
    compatible: bool = False
    preset: str | None = None
    params: Mapping[str, float] = field(default_factory=dict)

    def __call__(self, u, r=None) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        val = self.pdf(u, r)
        return np.where((u >= 0.0) & (u <= self.R0), val, 0.0)

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Points in u where the density may jump; quadrature should split there."""
        if self.preset == "narrow":
            c, w = self.params["center"], self.params["width"]
            return (c - 0.5 * w, c + 0.5 * w)
        return (0.0, self.R0)

    def cdf_table(self, r=None) -> tuple[np.ndarray, np.ndarray]:
        grid = np.linspace(0.0, self.R0, CDF_GRID_POINTS)
        dens = self(grid, None if r is None else np.broadcast_to(r, grid.shape + (2,)))
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
        return grid, cdf / cdf[-1]

    def sample(self, points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One independent draw per position in ``points`` by inverse CDF."""
        points = np.asarray(points, dtype=float)
        unif = rng.random(len(points))
        if not self.r_dependent:
            grid, cdf = self.cdf_table()
            return np.interp(unif, cdf, grid)
        out = np.empty(len(points))
        uniq, inverse = np.unique(points, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        for j, r in enumerate(uniq):
            sel = inverse == j
            grid, cdf = self.cdf_table(r)
            out[sel] = np.interp(unif[sel], cdf, grid)
        return out

    def to_config(self) -> dict:
        return {"preset": self.preset, **self.params}


def density_preset(preset: str, **params: float) -> InitialDensity:
    if preset not in _DENSITY_PRESETS:
        raise ValueError(f"unknown psi0 preset {preset!r}; known: {DENSITY_PRESETS}")
    fn, names, rdep = _DENSITY_PRESETS[preset]
    missing = [n for n in names if n not in params]
    extra = sorted(set(params) - set(names))
    if missing or extra:
        raise ValueError(f"psi0 preset {preset!r} needs {list(names)}, got {sorted(params)}")
    kw = {n: float(params[n]) for n in names}
    if preset == "narrow":
        if kw["width"] <= 0 or kw["center"] - 0.5 * kw["width"] < 0:
            raise ValueError("narrow psi0 needs width > 0 and support inside [0, inf)")
        R0 = kw["center"] + 0.5 * kw["width"]
    else:
        R0 = kw["R0"]
        if R0 <= 0:
            raise ValueError("psi0 support bound R0 must be positive")
    if preset == "mixture" and not 0.0 <= kw["theta"] <= 1.0:
        raise ValueError("mixture weight theta must lie in [0, 1]")
    if preset == "tilted" and not 0.0 <= kw["gamma"] <= 1.0:
        raise ValueError("tilted psi0 needs 0 <= gamma <= 1")
    return InitialDensity(pdf=partial(fn, **kw), R0=R0, r_dependent=rdep, preset=preset, params=kw)


def compatible_density(a: Kernel, b: Kernel, phi: RateFunction, R0: float) -> InitialDensity:
    """Mixture of uniform and increasing-linear laws whose value at 0 matches the reset flux.

    The weight is chosen so that psi(0) = q / (lam * ubar + p) with
    q = int phi psi, ubar = int u psi and p = (int a) q, making the limit
    density continuous across the reset front.  Requires r-independent data.
    """
    if phi.r_dependent or not (a.periodic and b.periodic):
        raise ValueError("compatible psi0 is only constructed for r-independent data (periodic kernels, unmodulated rate)")
    probe = cell_grid(4)
    lam = float(b.row_integral(probe[:1])[0])
    a_tot = float(a.row_integral(probe[:1])[0])
    u = np.linspace(0.0, R0, 20001)
    rates = phi(u)

    def moments(theta: float) -> tuple[float, float, float]:
        dens = _mixture_pdf(u, None, R0, theta)
        return dens[0], np.trapezoid(rates * dens, u), np.trapezoid(u * dens, u)

    def gap(theta: float) -> float:
        psi0, q, ubar = moments(theta)
        return psi0 - q / (lam * ubar + a_tot * q)

    lo, hi = gap(0.0), gap(1.0)
    if lo * hi > 0:
        raise ValueError(
            "no uniform/linear mixture is compatible with these kernels and rate "
            f"(mismatch at theta=0: {lo:.3g}, theta=1: {hi:.3g})"
        )
    theta = brentq(gap, 0.0, 1.0, xtol=1e-14)
    kw = {"R0": float(R0), "theta": float(theta)}
    return InitialDensity(
        pdf=partial(_mixture_pdf, **kw), R0=float(R0), compatible=True, preset="compatible", params=kw
    )


# ------------------------------------------------------------------------- model


@dataclass(frozen=True)
class CellKernels:
    """Kernel data frozen on cell centers, shared by the discrete and limit schemes.

    ``b_hat`` is row-normalized so ``cell_area * b_hat.sum(1) == 1``;
    ``a_cell[src, dst]`` is the synaptic weight from cell ``src`` onto ``dst``.
    """

    centers: np.ndarray
    cell_area: float
    b_hat: np.ndarray
    a_cell: np.ndarray
    lam: np.ndarray
    alpha: float

    @property
    def size(self) -> int:
        return len(self.centers)

    @property
    def leak(self) -> np.ndarray:
        return self.alpha + self.lam


@dataclass(frozen=True, eq=False)
class ModelSpec:
    mesh: Mesh
    a: Kernel
    b: Kernel
    alpha: float
    phi: RateFunction
    psi0: InitialDensity

    def __post_init__(self) -> None:
        if not self.alpha >= 0:
            raise ValueError("leak alpha must be nonnegative")

    @cached_property
    def _gap(self) -> tuple[np.ndarray, np.ndarray]:
        return normalize_gap_kernel(self.b, self.mesh)

    @property
    def b_tilde(self) -> np.ndarray:
        return self._gap[0]

    @property
    def lam(self) -> np.ndarray:
        return self._gap[1]

    @cached_property
    def average_matrix(self) -> np.ndarray:
        """eps^2 b_tilde, so that ``average_matrix @ U`` is the local average."""
        return self.mesh.epsilon**2 * self.b_tilde

    @cached_property
    def jump_matrix(self) -> np.ndarray:
        """Row i: increments eps^2 a(i, j) received by every j when i spikes."""
        return self.mesh.epsilon**2 * self.a.matrix(self.mesh.sites)

    @property
    def a_star(self) -> float:
        return float(self.a.sup)

    @property
    def lam_star(self) -> float:
        return float(self.lam.max())

    @property
    def default_substep(self) -> float:
        return min(0.01, 0.1 / (self.alpha + self.lam_star))

    def with_epsilon(self, epsilon: float) -> "ModelSpec":
        return ModelSpec(build_mesh(epsilon), self.a, self.b, self.alpha, self.phi, self.psi0)

    def continuum_lam(self, points: np.ndarray) -> np.ndarray:
        return self.b.row_integral(points)

    @cached_property
    def _cell_cache(self) -> dict[int, CellKernels]:
        return {}

    def cell_kernels(self, n_side: int) -> CellKernels:
        """Kernels on the n_side x n_side cell grid (cached per grid; treat as read-only)."""
        if n_side not in self._cell_cache:
            self._cell_cache[n_side] = self._build_cell_kernels(n_side)
        return self._cell_cache[n_side]

    def _build_cell_kernels(self, n_side: int) -> CellKernels:
        centers = cell_grid(n_side)
        area = 1.0 / (n_side * n_side)
        smooth_b = self.b.cell_matrix(centers)
        b_hat = smooth_b / (area * smooth_b.sum(axis=1, keepdims=True))
        return CellKernels(
            centers=centers,
            cell_area=area,
            b_hat=b_hat,
            a_cell=self.a.cell_matrix(centers),
            lam=self.continuum_lam(centers),
            alpha=float(self.alpha),
        )

    def to_config(self) -> dict:
        return {
            "epsilon": self.mesh.epsilon,
            "alpha": self.alpha,
            "periodic": self.a.periodic,
            "a": self.a.to_config(),
            "b": self.b.to_config(),
            "phi": self.phi.to_config(),
            "psi0": self.psi0.to_config(),
        }


def build_model(cfg: Mapping[str, Any]) -> ModelSpec:
    """Build a model from a ``[model]`` config mapping (see ``hydroneuro.config``)."""
    periodic = bool(cfg.get("periodic", True))
    a = Kernel(cfg["a"]["preset"], {k: v for k, v in cfg["a"].items() if k != "preset"}, periodic)
    b = Kernel(cfg["b"]["preset"], {k: v for k, v in cfg["b"].items() if k != "preset"}, periodic)
    pcfg = dict(cfg["phi"])
    phi = rate_preset(pcfg.pop("preset"), pcfg.pop("clamp"), pcfg.pop("modulation", 0.0), **pcfg)
    dcfg = dict(cfg["psi0"])
    dname = dcfg.pop("preset")
    if dname == "compatible":
        psi0 = compatible_density(a, b, phi, float(dcfg["R0"]))
    else:
        psi0 = density_preset(dname, **dcfg)
    return ModelSpec(build_mesh(float(cfg["epsilon"])), a, b, float(cfg["alpha"]), phi, psi0)


def sample_initial_state(spec: ModelSpec, rng_seed: Any):
    from .microsim import NetworkState

    rng = as_generator(rng_seed)
    u0 = spec.psi0.sample(spec.mesh.sites, rng)
    return NetworkState(potentials=u0, clock=0.0)
