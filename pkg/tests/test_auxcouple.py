import math

import numpy as np
import pytest
from scipy import stats

from conftest import make_model
from hydroneuro.auxcouple import (
    CouplingLedger,
    PartitionSpec,
    aux_step,
    bin_initial,
    coupled_step,
    coupling_report,
    relax,
    run_aux,
    run_coupled,
)
from hydroneuro.microsim import as_dynamics, simulate
from hydroneuro.model import sample_initial_state


def part_for(spec, delta=0.1, ell=0.5, E=0.05, tau=0.025):
    return PartitionSpec(delta, ell, E, tau, spec.psi0.R0, spec.mesh.epsilon)


# ------------------------------------------------------------------ partition


def test_partition_divisibility_message_names_both_keys():
    with pytest.raises(ValueError) as exc:
        PartitionSpec(0.3, 0.5, 0.1, 0.2, 1.0)
    assert "partition.delta" in str(exc.value) and "partition.tau" in str(exc.value)
    with pytest.raises(ValueError, match="ell"):
        PartitionSpec(0.1, 0.3, 0.1, 0.05, 1.0)
    with pytest.raises(ValueError, match="R0"):
        PartitionSpec(0.1, 0.5, 0.3, 0.05, 1.0)
    with pytest.raises(ValueError, match="multiple of epsilon"):
        PartitionSpec(0.1, 0.5, 0.1, 0.05, 1.0, epsilon=0.2)


def test_squares_tile_the_mesh(spec):
    part = part_for(spec, ell=0.2)
    sq = part.square_of(spec.mesh)
    assert sq.min() == 0 and sq.max() == part.n_squares - 1
    assert np.all(np.bincount(sq) == (0.2 / 0.1) ** 2)
    # every site lies inside its square
    corner = part.centers[sq] - 0.1
    assert np.all((spec.mesh.sites >= corner - 1e-12) & (spec.mesh.sites < corner + 0.2 - 1e-12))


def test_time_bins_tile_and_edges_go_to_later_bin():
    part = PartitionSpec(0.1, 0.5, 0.05, 0.1 / 3, 1.0)
    H, tau = part.n_time_bins, part.tau
    assert H == 3
    for k in range(H):
        assert part.time_bin(k * tau) == H - k
        assert part.time_bin((k + 0.5) * tau) == H - k
    xs = np.linspace(0, 0.1, 1000, endpoint=False)
    bins = [part.time_bin(x) for x in xs]
    for x, h in zip(xs, bins):
        assert 0.1 - h * tau - 1e-15 <= x < 0.1 - (h - 1) * tau


def test_bin_initial_examples():
    part = PartitionSpec(0.1, 1.0, 0.5, 0.05, 1.0)
    aux = bin_initial(np.array([0.3, 0.5, 0.0, 1.0]), part, np.zeros(4, dtype=int))
    np.testing.assert_allclose(aux.y, [0.25, 0.75, 0.25, 0.75])
    u = np.random.default_rng(0).random(500)
    aux = bin_initial(u, part, np.zeros(500, dtype=int))
    assert np.all(np.abs(aux.y - u) <= 0.25 + 1e-15)
    with pytest.raises(ValueError, match="R0"):
        bin_initial(np.array([1.2]), part, np.zeros(1, dtype=int))


# ----------------------------------------------------------------- aux step


def test_relax_identities():
    y, ybar = np.array([0.3, 1.7]), np.array([0.9, 0.2])
    leak, lam = np.array([1.1, 0.6]), np.array([0.6, 0.6])
    assert np.array_equal(relax(y, ybar, 0.0, leak, lam), y)
    fixed = relax(ybar, ybar, 0.7, lam, lam)
    np.testing.assert_allclose(fixed, ybar, rtol=1e-15)


def test_aux_step_zero_rate_is_deterministic_relaxation():
    spec = make_model(phi={"preset": "zero", "clamp": 1.0})
    part = part_for(spec)
    kern = spec.cell_kernels(part.n_side)
    u0 = sample_initial_state(spec, 1).potentials
    aux = bin_initial(u0, part, part.square_of(spec.mesh))
    eps2 = spec.mesh.epsilon**2
    ybar = aux.square_average(kern, eps2)
    nxt = aux_step(aux, part, kern, spec.phi, 2, eps2)
    sq = aux.square
    want = relax(aux.y, ybar[sq], part.delta, kern.leak[sq], kern.lam[sq])
    np.testing.assert_allclose(nxt.y, want, rtol=1e-14)
    assert nxt.counts.sum() == 0


def test_aux_step_bookkeeping_and_last_bin_reset(spec):
    part = part_for(spec)
    kern = spec.cell_kernels(part.n_side)
    aux = bin_initial(sample_initial_state(spec, 3).potentials, part, part.square_of(spec.mesh))
    eps2 = spec.mesh.epsilon**2
    rng = np.random.default_rng(4)
    sizes = np.bincount(aux.square)
    for _ in range(10):
        nxt = aux_step(aux, part, kern, spec.phi, rng, eps2)
        H = part.n_time_bins
        spikers = np.bincount(nxt.square[nxt.level_of < H], minlength=part.n_squares)
        np.testing.assert_array_equal(spikers, nxt.counts.sum(axis=1))
        non = np.bincount(nxt.square[nxt.level_of >= H], minlength=part.n_squares)
        np.testing.assert_array_equal(non + nxt.counts.sum(axis=1), sizes)
        assert np.all(nxt.levels[:, 0] == 0.0)
        assert nxt.y.min() >= 0
        aux = nxt


def test_expected_spike_count_per_square():
    # all potentials above the clamp: every rate equals phi*
    spec = make_model(phi={"preset": "linear", "slope": 1.0, "clamp": 0.5},
                      psi0={"preset": "narrow", "center": 1.0, "width": 0.05})
    part = PartitionSpec(0.1, 0.5, 0.025, 0.025, spec.psi0.R0, 0.1)
    kern = spec.cell_kernels(part.n_side)
    aux = bin_initial(sample_initial_state(spec, 0).potentials, part, part.square_of(spec.mesh))
    eps2 = spec.mesh.epsilon**2
    rng = np.random.default_rng(8)
    counts = np.array([aux_step(aux, part, kern, spec.phi, rng, eps2).counts.sum(axis=1) for _ in range(1000)])
    c = spec.phi.sup_bound
    want = 0.25 / eps2 * (1 - math.exp(-part.delta * c))
    se = counts.std(axis=0, ddof=1) / math.sqrt(counts.shape[0])
    assert np.all(np.abs(counts.mean(axis=0) - want) <= 3 * se)


def test_run_aux_length(spec):
    states = run_aux(spec, part_for(spec), 0.5, 0)
    assert len(states) == 6 and states[-1].step == 5


# ----------------------------------------------------------------- coupling


def test_coupling_zero_rate():
    spec = make_model(phi={"preset": "zero", "clamp": 1.0})
    part = part_for(spec)
    run = run_coupled(spec, part, 1.0, 5)
    lg = run.ledger
    assert lg.bad_history == [0] * 10 and lg.good.all()
    assert sum(lg.u_spikes) == 0 and sum(lg.aux_spikes) == 0
    # theta is then the binning error carried by the (contracting) flow plus splitting error
    assert lg.theta <= part.E / 2 + 1e-3


def test_equal_rates_share_first_spikes():
    spec = make_model(phi={"preset": "linear", "slope": 1.0, "clamp": 0.5},
                      psi0={"preset": "narrow", "center": 1.0, "width": 0.05})
    part = PartitionSpec(0.05, 0.5, 0.025, 0.025, spec.psi0.R0, 0.1)
    kern = spec.cell_kernels(part.n_side)
    dyn = as_dynamics(spec)
    st0 = sample_initial_state(spec, 2)
    aux = bin_initial(st0.potentials, part, part.square_of(spec.mesh))
    lg = CouplingLedger.start(spec.mesh.count)
    new_u, new_aux, lg = coupled_step(st0, aux, lg, part, dyn, kern, 3, spec.mesh.epsilon**2)
    distinct = np.unique(new_u.events.sites).size
    assert lg.aux_spikes[0] == distinct
    assert distinct > 0


def test_coupled_step_clock_check(spec):
    part = part_for(spec)
    kern = spec.cell_kernels(part.n_side)
    st0 = sample_initial_state(spec, 2)
    st0.clock = 0.05
    aux = bin_initial(st0.potentials, part, part.square_of(spec.mesh))
    with pytest.raises(ValueError, match="clock"):
        coupled_step(st0, aux, CouplingLedger.start(spec.mesh.count), part, as_dynamics(spec), kern, 0, 0.01)


def test_ledger_monotone_and_label_partition(spec):
    part = part_for(spec)
    kern = spec.cell_kernels(part.n_side)
    dyn = as_dynamics(spec)
    st0 = sample_initial_state(spec, 6)
    aux = bin_initial(st0.potentials, part, part.square_of(spec.mesh))
    lg = CouplingLedger.start(spec.mesh.count)
    rng = np.random.default_rng(9)
    good_prev = lg.good.copy()
    for _ in range(10):
        st0, aux, lg = coupled_step(st0, aux, lg, part, dyn, kern, rng, spec.mesh.epsilon**2)
        assert np.all(lg.good <= good_prev)
        assert lg.good.sum() + lg.bad_count == spec.mesh.count
        good_prev = lg.good.copy()
    assert np.all(np.diff(lg.theta_history) >= 0)
    assert np.all(np.diff(lg.bad_history) >= 0)


def test_coupling_preserves_network_marginal():
    spec = make_model(epsilon=0.2)
    part = PartitionSpec(0.1, 0.2, 0.05, 0.025, 1.0, 0.2)
    coupled = [sum(run_coupled(spec, part, 1.0, np.random.default_rng([1, k])).ledger.u_spikes) for k in range(500)]
    alone = [len(simulate(spec, sample_initial_state(spec, rng), 1.0, rng).events)
             for rng in (np.random.default_rng([2, k]) for k in range(500))]
    assert stats.ks_2samp(coupled, alone).pvalue > 0.001


def test_report_structure(spec):
    part = part_for(spec)
    ledgers = [run_coupled(spec, part, 0.5, k).ledger for k in range(3)]
    rep = coupling_report({0.1: ledgers}, spec.mesh.epsilon)
    assert "theta_slope" not in rep
    block = rep["per_delta"][0]
    assert block["replicas"] == 3 and len(block["steps"]) == 5
    assert block["theta_max_mean"] == pytest.approx(np.mean([lg.theta for lg in ledgers]))


def test_theta_max_decreases_with_delta():
    spec = make_model()
    ledgers = {}
    for d in (0.2, 0.1, 0.05):
        part = PartitionSpec(d, 0.2, 0.05, 0.025, 1.0, 0.1)
        ledgers[d] = [run_coupled(spec, part, 1.0, np.random.default_rng([7, k])).ledger for k in range(20)]
    rep = coupling_report(ledgers, 0.1)
    theta = {b["delta"]: b["theta_max_mean"] for b in rep["per_delta"]}
    assert theta[0.2] > theta[0.1] > theta[0.05]
    assert rep["theta_slope"] > 0
