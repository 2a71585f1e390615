import math

import numpy as np
import pytest
from scipy import integrate

from conftest import make_model
from hydroneuro.auxcouple import PartitionSpec, bin_initial, relax, run_aux
from hydroneuro.limit import (
    DriftPath,
    LevelLedger,
    characteristic_flow,
    closed_form_field,
    density_from_ledger,
    field_scalars,
    initial_field,
    l1_distance,
    ledger_init,
    ledger_step,
    ledger_vs_aux,
    rho_delta_step,
    run_scheme,
    solve_pde,
    weak_residual,
)
from hydroneuro.metrics import loglog_slope
from hydroneuro.microsim import _relax_gain
from hydroneuro.model import CellKernels, rate_preset, sample_initial_state

TILTED = {"preset": "tilted", "R0": 1.0, "gamma": 0.5}
MODULATED = {"preset": "linear", "slope": 1.0, "clamp": 2.0, "modulation": 0.3}


@pytest.fixture(scope="module")
def main_spec():
    return make_model(psi0=TILTED, phi=MODULATED)


@pytest.fixture(scope="module")
def solution(main_spec):
    return solve_pde(main_spec, 1.0, 2.0**-5, levels=2, ugrid=401)


# ------------------------------------------------------------------- ledger


def test_ledger_init_uniform_split():
    spec = make_model(epsilon=0.25)
    part = PartitionSpec(0.1, 0.5, 0.25, 0.05, 1.0, 0.25)
    lg = ledger_init(spec.psi0, part, spec.cell_kernels(2))
    np.testing.assert_allclose(lg.masses, 0.25 * 0.25, rtol=1e-14)
    np.testing.assert_allclose(lg.levels[0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(lg.total_mass(), 0.25, atol=1e-9)


def test_ledger_init_r_dependent_quadrature_oracle():
    spec = make_model(psi0=TILTED)
    part = PartitionSpec(0.1, 0.5, 0.1, 0.05, 1.0, 0.1)
    kern = spec.cell_kernels(2)
    lg = ledger_init(spec.psi0, part, kern)
    for m, r in enumerate(kern.centers):
        for k, c in enumerate(part.bin_centers):
            want, _ = integrate.quad(lambda u: float(spec.psi0(u, r)), c - 0.05, c + 0.05, epsabs=1e-13)
            assert lg.masses[m, k] == pytest.approx(0.25 * want, abs=1e-6)


def test_ledger_zero_rate_only_flows():
    spec = make_model(phi={"preset": "zero", "clamp": 1.0})
    part = PartitionSpec(0.1, 0.5, 0.1, 0.05, 1.0, 0.1)
    kern = spec.cell_kernels(2)
    lg = ledger_init(spec.psi0, part, kern)
    nxt = ledger_step(lg, part, kern, spec.phi)
    H = part.n_time_bins
    np.testing.assert_array_equal(nxt.masses[:, H:], lg.masses)
    assert np.all(nxt.masses[:, :H] == 0)
    assert np.all(nxt.deposits[0] == 0)
    e = kern.b_hat @ (lg.levels * lg.masses).sum(axis=1)
    want = relax(lg.levels, e[:, None], part.delta, kern.leak[:, None], kern.lam[:, None])
    np.testing.assert_allclose(nxt.levels[:, H:], want, rtol=1e-14)


def test_ledger_mass_conserved_and_levels_ordered(main_spec):
    part = PartitionSpec(0.1, 0.5, 0.05, 0.025, 1.0, 0.1)
    kern = main_spec.cell_kernels(2)
    lg = ledger_init(main_spec.psi0, part, kern)
    m0 = lg.total_mass()
    for _ in range(20):
        lg = ledger_step(lg, part, kern, main_spec.phi)
        assert np.abs(lg.total_mass() - m0).max() <= 1e-12
        assert np.all(np.diff(lg.levels, axis=1) > 0)
        assert lg.levels[:, 0].max() == 0.0


def test_ledger_two_level_hand_computation():
    # one square, constant rate c (both levels sit above the clamp), no flow, no synapses
    c, delta, tau = 0.2, 0.2, 0.05
    phi = rate_preset("linear", 0.2, slope=1.0)
    kern = CellKernels(np.array([[0.5, 0.5]]), 1.0, np.ones((1, 1)), np.zeros((1, 1)), np.zeros(1), 0.0)
    part = PartitionSpec(delta, 1.0, 0.5, tau, 1.0)
    z = np.array([[0.3, 0.7]])
    lg = LevelLedger(np.array([[0.25, 0.75]]), z, np.array([[0.0, 0.5]]), np.array([[0.5, 1.0]]), 1.0)
    nxt = ledger_step(lg, part, kern, phi)
    H = part.n_time_bins
    np.testing.assert_allclose(nxt.masses[0, H:], z[0] * math.exp(-delta * c), rtol=1e-14)
    np.testing.assert_allclose(nxt.levels[0, H:], [0.25, 0.75], rtol=1e-14)
    assert np.all(nxt.levels[0, :H] == 0.0)
    assert nxt.masses[0, :H].sum() == pytest.approx(z.sum() * (1 - math.exp(-delta * c)), rel=1e-13)


def test_ledger_matches_aux_exactly_without_spikes():
    spec = make_model(phi={"preset": "zero", "clamp": 1.0}, psi0={"preset": "narrow", "center": 0.5, "width": 0.1})
    part = PartitionSpec(0.1, 0.5, 0.11, 0.05, spec.psi0.R0, 0.1)
    kern = spec.cell_kernels(2)
    states = run_aux(spec, part, 1.0, 4)
    lg = ledger_init(spec.psi0, part, kern)
    for n in range(1, 11):
        lg = ledger_step(lg, part, kern, spec.phi)
        cmp = ledger_vs_aux(lg, states[n], 0.1)
        assert cmp["level_gap"] <= 1e-12 and cmp["mass_gap"] <= 1e-12


def test_ledger_vs_aux_rejects_mismatch(main_spec):
    part = PartitionSpec(0.1, 0.5, 0.05, 0.025, 1.0, 0.1)
    other = PartitionSpec(0.1, 0.5, 0.1, 0.025, 1.0, 0.1)
    lg = ledger_init(main_spec.psi0, part, main_spec.cell_kernels(2))
    aux = bin_initial(sample_initial_state(main_spec, 0).potentials, other, other.square_of(main_spec.mesh))
    with pytest.raises(ValueError, match="partitions do not match"):
        ledger_vs_aux(lg, aux, 0.1)


@pytest.mark.slow
def test_ledger_vs_aux_epsilon_sweep():
    base = make_model()
    eps_list = (0.2, 0.1, 0.05)
    level, mass = [], []
    for eps in eps_list:
        spec = base.with_epsilon(eps)
        part = PartitionSpec(0.1, 1.0, 0.05, 0.025, 1.0, eps)
        kern = spec.cell_kernels(1)
        lg = ledger_init(spec.psi0, part, kern)
        for _ in range(10):
            lg = ledger_step(lg, part, kern, spec.phi)
        gaps = [ledger_vs_aux(lg, run_aux(spec, part, 1.0, [int(round(1 / eps)), k])[-1], eps) for k in range(40)]
        level.append(np.mean([g["level_gap"] for g in gaps]))
        mass.append(np.mean([g["mass_gap"] for g in gaps]))
    assert level[0] > level[1] > level[2] and mass[0] > mass[1] > mass[2]
    assert 0.3 <= loglog_slope(eps_list, level) <= 1.1
    assert 0.3 <= loglog_slope(eps_list, mass) <= 1.1


def test_density_from_ledger(main_spec):
    part = PartitionSpec(0.1, 0.5, 0.05, 0.025, 1.0, 0.1)
    kern = main_spec.cell_kernels(2)
    lg = ledger_init(main_spec.psi0, part, kern)
    dens0 = density_from_ledger(lg, kern)
    np.testing.assert_allclose(dens0.density(part.bin_centers, 1), lg.masses[1] / (part.E * kern.cell_area))
    for _ in range(5):
        lg = ledger_step(lg, part, kern, main_spec.phi)
    dens = density_from_ledger(lg, kern)
    np.testing.assert_allclose(dens.mass(), 1.0, atol=1e-12)
    bad = LevelLedger(lg.levels, lg.masses, lg.lo.copy(), lg.hi.copy(), lg.cell_area)
    bad.hi[0, 0] = bad.hi[0, 3]
    with pytest.raises(ValueError, match="overlapping"):
        density_from_ledger(bad, kern)


def _step_vs_field_l1(dens, fld):
    total = 0.0
    for m in range(fld.size):
        u = np.unique(np.concatenate([np.linspace(0, fld.top[m] * 1.2, 20001), dens.lo[m], dens.hi[m]]))
        total += np.trapezoid(np.abs(dens.density(u, m) - fld.density(u, m)), u) * fld.cell_area
    return total


def test_ledger_density_refines_toward_scheme(main_spec):
    gaps = []
    for ell, E, tau in ((0.5, 0.1, 0.05), (0.25, 0.05, 0.025), (0.125, 0.025, 0.0125)):
        part = PartitionSpec(0.1, ell, E, tau, 1.0)
        kern = main_spec.cell_kernels(part.n_side)
        lg = ledger_init(main_spec.psi0, part, kern)
        for _ in range(5):
            lg = ledger_step(lg, part, kern, main_spec.phi)
        fld = run_scheme(main_spec.psi0, kern, main_spec.phi, 0.5, 0.1, keep=(0.5,)).field_at(0.5)
        gaps.append(_step_vs_field_l1(density_from_ledger(lg, kern), fld))
    assert gaps[0] > gaps[1] > gaps[2]


# -------------------------------------------------------------- delta scheme


def test_scheme_transport_only_conserves_mass_and_mean():
    spec = make_model(alpha=0.0, phi={"preset": "zero", "clamp": 1.0}, a={"preset": "constant", "c": 0.0},
                      b={"preset": "constant", "c": 1.0})
    kern = spec.cell_kernels(2)
    fld = initial_field(spec.psi0, kern, 401)
    m1 = fld.moment(lambda u, r: u)
    for _ in range(8):
        fld, _, _ = rho_delta_step(fld, kern, spec.phi, 0.125)
    np.testing.assert_allclose(fld.mass(), 1.0, atol=1e-12)
    np.testing.assert_allclose(fld.moment(lambda u, r: u), m1, atol=1e-12)


def test_spiker_branch_endpoints(main_spec):
    kern = main_spec.cell_kernels(2)
    delta = 0.05
    fld = initial_field(main_spec.psi0, kern, 401)
    nxt, branch, sc = rho_delta_step(fld, kern, main_spec.phi, delta)
    x_n = branch.potential(delta)[:, 0]
    want = kern.lam * _relax_gain(kern.leak, delta) * sc.ubar + delta * sc.p_delta
    np.testing.assert_allclose(x_n, want, rtol=1e-12)
    np.testing.assert_allclose(nxt.ustar, x_n, rtol=1e-12)
    for idx in range(kern.size):
        assert branch.reset_time(0.0, idx) <= 1e-12
        assert branch.reset_time(x_n[idx] * (1 - 1e-13), idx) == pytest.approx(delta, abs=1e-9)
        with pytest.raises(ValueError, match="bracket"):
            branch.reset_time(2 * x_n[idx], idx)


def test_scheme_self_convergence(main_spec):
    kern = main_spec.cell_kernels(2)
    fields = [
        run_scheme(main_spec.psi0, kern, main_spec.phi, 0.5, d, 401, keep=(0.5,)).field_at(0.5)
        for d in (0.1, 0.05, 0.025, 0.0125)
    ]
    diffs = [l1_distance(a, b) for a, b in zip(fields, fields[1:])]
    for coarse, fine in zip(diffs, diffs[1:]):
        assert 1.6 < coarse / fine < 2.6


def test_scheme_support_positivity_and_average_increments(main_spec):
    kern = main_spec.cell_kernels(2)
    a_star, phistar = main_spec.a_star, main_spec.phi.sup_bound
    consts = []
    for delta in (2.0**-4, 2.0**-5, 2.0**-6):
        run = run_scheme(main_spec.psi0, kern, main_spec.phi, 1.0, delta, 201, keep=(0.5, 1.0))
        for t in (0.5, 1.0):
            fld = run.field_at(t)
            assert fld.born_rho.min() >= 0 and fld.init_rho.min() >= 0
            assert np.all(fld.top <= 1.0 + t * phistar * a_star + 1e-12)
        consts.append(np.abs(np.diff(run.ubar, axis=0)).max() / delta)
    # C fitted on the coarsest step bounds the finer ones, and the constants settle
    assert max(consts) <= 1.25 * consts[0]
    assert abs(consts[2] - consts[1]) <= 0.75 * abs(consts[1] - consts[0])


def test_solution_mass_and_boundary_law(solution):
    for t in solution.obs_times:
        assert np.abs(solution.fields[t].mass() - 1).max() <= 1e-4
    for t in (0.25, 0.5, 1.0):
        assert solution.boundary_defect(t).max() <= 1e-3


def test_mean_field_symmetry():
    spec = make_model(a={"preset": "constant", "c": 1.0}, b={"preset": "constant", "c": 1.0},
                      psi0={"preset": "linear", "R0": 1.0})
    sol = solve_pde(spec, 1.0, 2.0**-5, levels=2, ugrid=401)
    u = np.linspace(0, 2, 801)
    for fld in sol.fields.values():
        d = np.array([fld.density(u, i) for i in range(fld.size)])
        assert np.abs(d - d[0]).max() <= 1e-4


def test_closed_form_matches_scheme(solution):
    for t in (0.5, 1.0):
        closed = solution.closed_form(t)
        gap = l1_distance(closed, solution.fields[t])
        assert gap <= 2 * solution.error_estimate(t)


# ------------------------------------------------------------ characteristics


def test_characteristics_constant_paths():
    times = np.linspace(0, 2, 9)
    path = DriftPath(times, np.full(9, 0.7), np.full(9, 0.3), lam=0.8, alpha=0.5)
    k = 1.3
    for s, t, u in ((0.0, 1.0, 0.4), (0.3, 1.7, 1.2), (0.5, 0.5, 0.9)):
        want = math.exp(-k * (t - s)) * u + (0.8 * 0.7 + 0.3) * (1 - math.exp(-k * (t - s))) / k
        assert float(characteristic_flow(s, t, u, path)) == pytest.approx(want, abs=1e-10)


def test_characteristics_quadrature_and_semigroup():
    times = np.linspace(0, 1, 17)
    rng = np.random.default_rng(3)
    path = DriftPath(times, rng.random(17), rng.random(17), lam=0.6, alpha=0.2)
    k = path.leak
    for s, t in ((0.0, 1.0), (0.13, 0.71)):
        f = lambda h: math.exp(-k * (t - h)) * float(np.interp(h, times, path.forcing))  # noqa: E731
        pts = [x for x in times if s < x < t]
        want = math.exp(-k * (t - s)) * 0.5 + integrate.quad(f, s, t, points=pts, epsabs=1e-13)[0]
        assert float(path.flow(s, t, 0.5)) == pytest.approx(want, abs=1e-10)
    mid = float(path.flow(0.1, 0.4, 0.8))
    assert float(path.flow(0.4, 0.9, mid)) == pytest.approx(float(path.flow(0.1, 0.9, 0.8)), abs=1e-8)
    assert float(path.flow(0.3, 0.3, 0.8)) == 0.8


# -------------------------------------------------------------- weak residual


def test_weak_residual_constant_function_and_order(main_spec):
    kern = main_spec.cell_kernels(4)
    one = (lambda u: np.ones_like(u), lambda u: np.zeros_like(u))
    hat = (lambda u: np.maximum(0, 1 - np.abs(u - 0.5) / 0.25),
           lambda u: np.where(np.abs(u - 0.5) < 0.25, -np.sign(u - 0.5) / 0.25, 0.0))
    res = []
    for delta in (2.0**-5, 2.0**-6):
        run = run_scheme(main_spec.psi0, kern, main_spec.phi, 0.5 + delta, delta, keep=(0.5 - delta, 0.5, 0.5 + delta))
        f = [run.field_at(t) for t in (0.5 - delta, 0.5, 0.5 + delta)]
        assert np.abs(weak_residual(*f, *one, kern, main_spec.phi)).max() <= 1e-3
        res.append(np.abs(weak_residual(*f, *hat, kern, main_spec.phi, (0.25, 0.5, 0.75))).max())
    assert math.log2(res[0] / res[1]) >= 0.8


def test_weak_residual_trivial_stationary_data():
    spec = make_model(alpha=0.0, phi={"preset": "zero", "clamp": 1.0}, a={"preset": "constant", "c": 0.0},
                      b={"preset": "constant", "c": 1.0})
    kern = spec.cell_kernels(2)
    delta = 2.0**-6
    run = run_scheme(spec.psi0, kern, spec.phi, 3 * delta, delta, keep=(delta, 2 * delta, 3 * delta))
    f = [run.field_at(t) for t in (delta, 2 * delta, 3 * delta)]
    for g, dg in ((lambda u: np.ones_like(u), lambda u: np.zeros_like(u)), (lambda u: u, lambda u: np.ones_like(u))):
        assert np.abs(weak_residual(*f, g, dg, kern, spec.phi)).max() <= 1e-10


def test_field_scalars_midpoint_quadrature(main_spec):
    kern = main_spec.cell_kernels(2)
    fld = initial_field(main_spec.psi0, kern, 2001)
    sc = field_scalars(fld, kern, main_spec.phi)
    m1 = fld.moment(lambda u, r: u)
    np.testing.assert_allclose(sc.ubar, kern.cell_area * kern.b_hat @ m1)
    np.testing.assert_allclose(sc.q, fld.moment(lambda u, r: main_spec.phi(u, r)))


def test_closed_form_at_zero_is_initial_density(main_spec):
    kern = main_spec.cell_kernels(2)
    times = np.linspace(0, 1, 5)
    paths = [DriftPath(times, np.full(5, 0.5), np.full(5, 0.2), float(kern.lam[i]), kern.alpha, np.full(5, 0.3))
             for i in range(kern.size)]
    fld = closed_form_field(0.0, paths, main_spec.psi0, main_spec.phi, kern, 101)
    assert l1_distance(fld, initial_field(main_spec.psi0, kern, 101)) <= 1e-12
