"""Lindblad propagator checks against closed-form and dense-exponential oracles."""

import numpy as np
import pytest

from disspec import fock, lindblad


def two_level_decay_setup():
    """Single two-level system: |0> ground, |1> excited, jump sigma^-."""
    b = fock.build_basis(1)
    H = fock.OperatorMatrix(b, np.diag([0.0, 1.0]).astype(complex), hermitian=True)
    sm = np.zeros((2, 2), dtype=complex)
    sm[0, 1] = 1.0
    jump = lindblad.JumpOperatorSet([fock.OperatorMatrix(b, sm)])
    rho0 = fock.DensityMatrix(b, np.diag([0.0, 1.0]).astype(complex))
    return b, H, jump, rho0


def chain_setup(L=4, n=2):
    spec = fock.LatticeSpec(L=L, h0=1.0, mu=0.0, pbc=True)
    b = fock.build_basis(L, sector=n)
    H = fock.build_chain_hamiltonian(spec, b)
    jumps = lindblad.JumpOperatorSet(
        [fock.site_number_operator(j, b) for j in range(0, L, 2)])
    dec = fock.diagonalize(H)
    rho0 = fock.thermal_state(dec, 1.0, b)
    return b, H, jumps, rho0


def test_rate_schedule():
    s = lindblad.RateSchedule(gamma=0.01, gamma_prime=0.005, omega0=2.0,
                              shape="cosine")
    assert s.rate(0.0) == pytest.approx(0.015)
    assert s.rate(np.pi / 2.0) == pytest.approx(0.005)
    assert lindblad.RateSchedule(gamma=0.02).rate(123.0) == 0.02
    with pytest.raises(ValueError):
        lindblad.RateSchedule(gamma=0.01, gamma_prime=0.02, omega0=1.0,
                              shape="cosine")
    with pytest.raises(ValueError):
        lindblad.RateSchedule(gamma=-1.0)


def test_dephasing_mask_matches_general_dissipator():
    b, H, jumps, rho0 = chain_setup()
    m = rho0.matrix
    rate = 0.37
    mask = jumps.dephasing_mask()
    ref = np.zeros_like(m)
    for op in jumps.ops:
        L = op.toarray()
        LdL = L.conj().T @ L
        ref += L @ m @ L.conj().T - 0.5 * (LdL @ m + m @ LdL)
    assert np.abs(rate * mask * m - rate * ref).max() < 1e-13
    assert jumps.all_diagonal()


def test_two_level_exponential_decay():
    b, H, jump, rho0 = two_level_decay_setup()
    rate = 0.25
    sched = lindblad.RateSchedule(gamma=rate)
    pop = fock.OperatorMatrix(b, np.diag([0.0, 1.0]).astype(complex), hermitian=True)
    rec = lindblad.evolve(rho0, H, jump, sched, t_end=4.0, dt=0.01,
                          observables={"pe": pop})
    ref = np.exp(-rate * rec.times)
    assert np.abs(rec.observables["pe"] - ref).max() < 1e-9


def test_rk4_matches_exponential_oracle():
    b, H, jumps, rho0 = chain_setup()
    rate = 0.05
    sched = lindblad.RateSchedule(gamma=rate)
    W = fock.imbalance_operator(b)
    rec = lindblad.evolve(rho0, H, jumps, sched, t_end=5.0, dt=0.01,
                          observables={"w": W}, keep_final=True)
    ref = lindblad.liouvillian_exponential_oracle(rho0, H, jumps, rate, 5.0)
    assert np.abs(rec.final_state.matrix - ref.matrix).max() < 1e-8
    ref.validate()


@pytest.mark.filterwarnings("ignore:dt \\* spectral width")
def test_rk4_fourth_order_convergence():
    b, H, jumps, rho0 = chain_setup()
    rate = 0.05
    sched = lindblad.RateSchedule(gamma=rate)
    t = 1.0
    exact = lindblad.liouvillian_exponential_oracle(rho0, H, jumps, rate, t).matrix
    errs = []
    for dt in (0.05, 0.025):
        rec = lindblad.evolve(rho0, H, jumps, sched, t_end=t, dt=dt,
                              observables={}, keep_final=True)
        errs.append(np.abs(rec.final_state.matrix - exact).max())
    ratio = errs[0] / errs[1]
    assert 16 * 0.6 < ratio < 16 * 1.4


def test_cptp_invariants_preserved():
    b, H, jumps, rho0 = chain_setup()
    sched = lindblad.RateSchedule(gamma=0.02, gamma_prime=0.01, omega0=1.5,
                                  shape="cosine")
    rec = lindblad.evolve(rho0, H, jumps, sched, t_end=10.0, dt=0.01,
                          observables={}, keep_final=True)
    rec.final_state.validate()


def test_number_conserved_under_dephasing():
    b, H, jumps, rho0 = chain_setup()
    N = fock.total_number_operator(b)
    sched = lindblad.RateSchedule(gamma=0.1)
    rec = lindblad.evolve(rho0, H, jumps, sched, t_end=3.0, dt=0.01,
                          observables={"N": N})
    assert np.abs(rec.observables["N"] - 2.0).max() < 1e-9


def test_time_dependent_rate_against_substep_oracle():
    # piecewise-constant reference with very fine steps
    b, H, jump, rho0 = two_level_decay_setup()
    sched = lindblad.RateSchedule(gamma=0.2, gamma_prime=0.1, omega0=3.0,
                                  shape="cosine")
    rec = lindblad.evolve(rho0, H, jump, sched, t_end=2.0, dt=0.01,
                          observables={}, keep_final=True)
    # population obeys dp/dt = -gamma(t) p -> p = exp(-int gamma)
    integral = 0.2 * 2.0 + (0.1 / 3.0) * np.sin(3.0 * 2.0)
    assert abs(rec.final_state.matrix[1, 1].real - np.exp(-integral)) < 1e-9


def test_expectation_requires_hermitian():
    b, H, jumps, rho0 = chain_setup()
    bad = fock.OperatorMatrix(b, 1j * np.eye(b.dim))
    with pytest.raises(fock.ContractViolation):
        lindblad.expectation(rho0, bad)


def test_stability_warning():
    b, H, jumps, rho0 = chain_setup()
    sched = lindblad.RateSchedule(gamma=0.0)
    with pytest.warns(UserWarning):
        lindblad.evolve(rho0, H, jumps, sched, t_end=0.5, dt=0.5,
                        observables={})


def test_oracle_dimension_guard():
    b, H, jumps, rho0 = chain_setup(L=6, n=3)   # dim 20 -> vectorized 400, fine
    lindblad.liouvillian_exponential_oracle(rho0, H, jumps, 0.1, 0.1)
    b2 = fock.build_basis(8, sector=4)          # dim 70 > limit
    spec = fock.LatticeSpec(L=8)
    H2 = fock.build_chain_hamiltonian(spec, b2)
    dec = fock.diagonalize(H2)
    rho2 = fock.thermal_state(dec, 1.0, b2)
    with pytest.raises(ValueError):
        lindblad.liouvillian_exponential_oracle(
            rho2, H2, lindblad.JumpOperatorSet([fock.site_number_operator(0, b2)]),
            0.1, 0.1)


def test_trajectory_csv_roundtrip(tmp_path):
    rec = lindblad.TrajectoryRecord(
        times=np.array([0.0, 0.5]),
        observables={"w": np.array([1.0, 0.123456789012345])})
    path = tmp_path / "out.csv"
    rec.to_csv(path)
    text = path.read_text()
    assert text.splitlines()[0] == "t,w"
    assert "0.123456789012345" in text
    assert "\r" not in text
