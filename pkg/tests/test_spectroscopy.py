"""Analytic spectrum, envelope fitting, and protocol checks on small chains."""

import numpy as np
import pytest

from disspec import fock, lindblad, spectroscopy as spc
from disspec.lindblad import RateSchedule


def lehmann_peak_weights(L, n):
    """Exact delta-peak weights of the even-site dissipative kernel for rho_pi.

    Independent oracle: chi(t) = sum_j <2 n_j W(t) n_j - {n_j^2, W(t)}> on the
    ground space, collected per Bohr frequency.
    """
    spec = fock.LatticeSpec(L=L, h0=1.0, mu=0.0, pbc=True)
    b = fock.build_basis(L, sector=n)
    dec = fock.diagonalize(fock.build_chain_hamiltonian(spec, b))
    U, E = dec.vectors, dec.energies
    p = np.real(np.diag(U.conj().T
                        @ fock.thermal_state(dec, np.inf, b).matrix @ U))
    We = U.conj().T @ fock.density_wave_operator(np.pi, b).toarray() @ U
    r0 = np.diag(p)
    K = np.zeros((b.dim, b.dim), dtype=complex)
    for j in range(0, L, 2):
        ne = U.conj().T @ fock.site_number_operator(j, b).toarray() @ U
        M = 2 * (ne @ r0 @ ne) - (r0 @ ne @ ne) - (ne @ ne @ r0)
        K += We * M.T
    freqs = {}
    for bi in range(b.dim):
        for ci in range(b.dim):
            if abs(K[bi, ci]) < 1e-12:
                continue
            key = round(E[ci] - E[bi], 8)
            freqs[key] = freqs.get(key, 0.0) + K[bi, ci].real
    return {k: v for k, v in freqs.items() if abs(v) > 1e-10}


def test_analytic_peaks_match_lehmann_oracle():
    for (L, n) in ((10, 6), (6, 4)):
        exact = lehmann_peak_weights(L, n)
        spec = spc.analytic_ds_free_fermions(L, n, np.pi)
        assert len(spec.peaks) == len(exact)
        for (pos, w, _) in spec.peaks:
            key = min(exact, key=lambda k: abs(k - pos))
            assert abs(key - pos) < 1e-7
            assert abs(exact[key] - w) < 1e-9


def test_analytic_known_weights():
    spec = spc.analytic_ds_free_fermions(10, 6, np.pi)
    table = {round(p, 6): w for (p, w, _) in spec.peaks}
    assert table[4.0] == pytest.approx(0.01, abs=1e-12)
    assert table[-4.0] == pytest.approx(0.01, abs=1e-12)
    assert table[3.236068] == pytest.approx(0.02, abs=1e-6)
    assert table[1.236068] == pytest.approx(-0.03, abs=1e-6)
    assert max(abs(p) for (p, _, _) in spec.peaks) <= 4.0 + 1e-12


def test_analytic_off_pi_momentum_is_zero():
    spec = spc.analytic_ds_free_fermions(8, 4, np.pi / 2)
    assert spec.peaks == []
    assert np.abs(spec.values).max() == 0.0


def test_analytic_half_filling_cancellation():
    # at half filling n_q + n_{q+pi} = 1 for every q, so all weights vanish
    spec = spc.analytic_ds_free_fermions(6, 3, np.pi)
    assert spec.peaks == []


def test_analytic_off_grid_momentum_raises():
    with pytest.raises(ValueError):
        spc.analytic_ds_free_fermions(10, 6, 0.3)


def test_ds_spectrum_invariants():
    with pytest.raises(ValueError):
        spc.DsSpectrum(frequencies=np.array([0.0, 0.0, 1.0]),
                       values=np.zeros(3, complex), peaks=[], broadening=0.05)
    with pytest.raises(ValueError):
        spc.DsSpectrum(frequencies=np.array([0.0, 1.0]),
                       values=np.array([np.inf, 0.0]), peaks=[],
                       broadening=0.05)


def test_rendered_peaks_integrate_to_weight():
    grid = np.linspace(-2.0, 2.0, 4001)
    spec = spc.DsSpectrum(frequencies=grid, values=np.zeros_like(grid),
                          peaks=[(0.3, 0.7, 0.05)], broadening=0.05)
    assert np.trapezoid(spec.rendered(), grid) == pytest.approx(0.7, rel=1e-6)
    assert spec.rendered().max() == pytest.approx(
        0.7 / (0.05 * np.sqrt(2 * np.pi)), rel=1e-6)


def test_fit_resonance_synthetic():
    om = 2.7
    t = np.arange(0.0, 80.0, 0.01)
    sig = 0.013 * t * np.cos(om * t + 0.3)
    fit = spc.fit_resonance(t, sig, om, window=(5.0 / om, 80.0))
    assert fit.amplitude_rate == pytest.approx(0.013, rel=1e-3)
    assert fit.phase == pytest.approx(0.3, abs=1e-3)
    assert fit.r2 > 0.999
    assert not fit.flagged


def test_fit_resonance_zero_signal():
    t = np.arange(0.0, 60.0, 0.01)
    fit = spc.fit_resonance(t, np.zeros_like(t), 2.0)
    assert fit.amplitude_rate == 0.0


def test_fit_resonance_with_compensation():
    om, gamma, alpha = 3.1, 0.01, 0.8
    t = np.arange(0.0, 100.0, 0.01)
    sig = 0.02 * t * np.cos(om * t - 0.5) * np.exp(-alpha * gamma * t)
    comp = spc.DecayCompensation(alpha=alpha, gamma=gamma)
    fit = spc.fit_resonance(t, sig, om, compensation=comp)
    assert fit.amplitude_rate == pytest.approx(0.02, rel=1e-3)
    assert fit.phase == pytest.approx(-0.5, abs=1e-3)


def test_fit_resonance_too_few_periods_flagged():
    t = np.arange(0.0, 30.0, 0.01)
    sig = 0.01 * t * np.cos(0.9 * t)
    fit = spc.fit_resonance(t, sig, 0.9, window=(6.0, 30.0))
    assert fit.flagged


def test_decay_compensation_synthetic():
    gamma, alpha = 0.005, 0.6
    t = np.arange(0.0, 200.0, 0.01)
    base = lindblad.TrajectoryRecord(
        times=t,
        observables={"W": 1e-3 * np.sin(3.0 * t) * np.exp(-alpha * gamma * t)})
    comp = spc.fit_decay_compensation(base, gamma)
    assert comp.alpha == pytest.approx(alpha, rel=0.2)
    assert not comp.flagged


def test_decay_compensation_trivial_cases():
    t = np.arange(0.0, 10.0, 0.1)
    base = lindblad.TrajectoryRecord(times=t,
                                     observables={"W": np.zeros_like(t)})
    assert spc.fit_decay_compensation(base, 0.0).alpha == 0.0
    assert spc.fit_decay_compensation(base, 0.01).alpha == 0.0
    with pytest.raises(ValueError):
        spc.DecayCompensation(alpha=-1.0, gamma=0.01)


def test_oscillatory_response_zero_modulation():
    sys_ = spc.chain_protocol_system(L=6, n=4)
    sched = RateSchedule(gamma=0.01, gamma_prime=0.0, omega0=2.0,
                         shape="cosine")
    times, osc, _ = spc.oscillatory_response(sys_, sched, 5.0, 0.01)
    assert np.abs(osc).max() < 1e-14


def test_oscillatory_response_requires_cosine():
    sys_ = spc.chain_protocol_system(L=6, n=4)
    with pytest.raises(ValueError):
        spc.oscillatory_response(sys_, RateSchedule(gamma=0.01), 1.0, 0.01)


def test_protocol_recovers_small_chain_weight():
    # L=6, n=4: largest weight 1/36 at omega = 4 h0
    sys_ = spc.chain_protocol_system(L=6, n=4)
    gamma, gp = 0.002, 0.0004
    base = None
    fits = {}
    for scale in (1.0, 2.0):
        sched = RateSchedule(gamma=gamma, gamma_prime=scale * gp, omega0=4.0,
                             shape="cosine")
        times, osc, base = spc.oscillatory_response(sys_, sched, 90.0, 0.01,
                                                    baseline=base)
        comp = spc.fit_decay_compensation(base, gamma)
        fits[scale] = spc.fit_resonance(times, osc, 4.0,
                                        window=(5.0 / 4.0, 90.0),
                                        compensation=comp)
    assert fits[1.0].amplitude_rate / gp == pytest.approx(1.0 / 36.0, rel=0.1)
    assert fits[1.0].r2 > 0.99
    # response is first order in gamma': doubling gamma' doubles A within 2%
    ratio = fits[2.0].amplitude_rate / fits[1.0].amplitude_rate
    assert ratio == pytest.approx(2.0, rel=0.02)


def test_protocol_outside_support_bounded():
    sys_ = spc.chain_protocol_system(L=6, n=4)
    sched = RateSchedule(gamma=0.002, gamma_prime=0.0004, omega0=10.0,
                         shape="cosine")
    times, osc, base = spc.oscillatory_response(sys_, sched, 90.0, 0.01)
    comp = spc.fit_decay_compensation(base, 0.002)
    fit = spc.fit_resonance(times, osc, 10.0, window=(0.5, 90.0),
                            compensation=comp)
    assert fit.amplitude_rate / 0.0004 < 0.1 * (1.0 / 36.0)


def test_reconstruct_small_chain(tmp_path):
    sys_ = spc.chain_protocol_system(L=6, n=4)
    grid = np.linspace(3.5, 4.5, 5)
    spec = spc.reconstruct_ds(grid, sys_, gamma=0.002, gamma_prime=0.0004,
                              t_end=90.0, dt=0.01)
    assert len(spec.peaks) == 1
    pos, w, _ = spec.peaks[0]
    assert pos == pytest.approx(4.0, abs=0.25)
    assert w == pytest.approx(1.0 / 36.0, rel=0.1)
    spec.to_csv(tmp_path / "ds.csv")
    header = (tmp_path / "ds.csv").read_text().splitlines()[0]
    assert header == "omega,chi_abs,chi_phase,r2,flagged"
