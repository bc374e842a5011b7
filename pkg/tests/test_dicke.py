"""Dicke model construction, spectrum assembly, and scaling-fit checks."""

import numpy as np
import pytest
import scipy.sparse as sp

from disspec import dicke

G_C = 0.5 * np.sqrt(2.0)  # omega_c = 2, omega_a = 1


def near_critical_spec(N, n_max=16, frac=0.9998):
    return dicke.DickeSpec(omega_c=2.0, omega_a=1.0, g=frac * G_C, N=N,
                           n_max=n_max)


def test_spec_validation():
    with pytest.raises(ValueError):
        dicke.DickeSpec(2.0, 1.0, 0.1, 0, 16)
    with pytest.raises(ValueError):
        dicke.DickeSpec(2.0, 1.0, 0.1, 4, 3)
    assert near_critical_spec(10).g_c == pytest.approx(G_C)


def test_decoupled_ground_state():
    spec = dicke.DickeSpec(2.0, 1.0, 0.0, 6, 8)
    b = dicke.build_dicke(spec)
    w, v = dicke.low_spectrum(b.H, 3)
    assert w[0] == pytest.approx(-3.0, abs=1e-12)   # -omega_a N / 2
    # gaps are multiples of min(omega_c, omega_a) = 1
    assert w[1] - w[0] == pytest.approx(1.0, abs=1e-10)


def test_parity_commutes_and_labels_eigenstates():
    spec = near_critical_spec(8)
    b = dicke.build_dicke(spec)
    rows, cols = b.H.nonzero()
    assert np.all(b.parity[rows] == b.parity[cols])
    w, v = dicke.low_spectrum(b.H, 6)
    for i in range(6):
        p = v[:, i] @ (b.parity * v[:, i])
        assert abs(abs(p) - 1.0) < 1e-8


def test_low_spectrum_matches_dense():
    spec = near_critical_spec(12, n_max=20)   # dim 273, dense oracle
    b = dicke.build_dicke(spec)
    w, v = dicke.low_spectrum(b.H, 8)
    ref = np.sort(np.linalg.eigvalsh(b.H.toarray()))[:8]
    assert np.abs(w - ref).max() < 1e-9


def test_sparse_path_matches_dense():
    spec = near_critical_spec(30, n_max=24)   # dim 775 forces eigsh
    b = dicke.build_dicke(spec)
    w, _ = dicke.low_spectrum(b.H, 5)
    ref = np.sort(np.linalg.eigvalsh(b.H.toarray()))[:5]
    assert np.abs(w - ref).max() < 1e-8


def test_rabi_limit_cutoff_doubling():
    # N=1 reduces to the Rabi model; doubling the cutoff must not move E0
    e0 = {}
    for n_max in (32, 64):
        spec = dicke.DickeSpec(2.0, 1.0, 0.5, 1, n_max)
        b = dicke.build_dicke(spec)
        w, _ = dicke.low_spectrum(b.H, 1)
        e0[n_max] = w[0]
    assert abs(e0[32] - e0[64]) < 1e-10


def test_normal_phase_photon_parity():
    spec = near_critical_spec(10)
    b = dicke.build_dicke(spec)
    _, v = dicke.low_spectrum(b.H, 1, b.parity, +1.0)
    g0 = v[:, 0]
    assert abs(g0 @ (b.a @ g0)) < 1e-10


def test_lehmann_ds_zero_coupling():
    spec = dicke.DickeSpec(2.0, 1.0, 0.0, 4, 8)
    b = dicke.build_dicke(spec)
    ds = dicke.lehmann_ds(b, k_even=6, k_odd=6)
    assert ds.peaks == []


def test_lehmann_total_weight_identity():
    spec = near_critical_spec(10)
    b = dicke.build_dicke(spec)
    ds = dicke.lehmann_ds(b)
    _, v = dicke.low_spectrum(b.H, 1, b.parity, +1.0)
    nph = v[:, 0] @ (b.n_ph @ v[:, 0])
    total = sum(w for _, w, _ in ds.peaks)
    assert total == pytest.approx(-2.0 * nph, rel=1e-6)


def test_soft_mode_gap_softens_with_N():
    gaps = {}
    for N in (20, 40):
        spec = near_critical_spec(N)
        b = dicke.build_dicke(spec)
        ds = dicke.lehmann_ds(b)
        gaps[N] = dicke.extract_soft_mode(ds).omega_s
    assert gaps[40] < gaps[20]


def test_extract_soft_mode_synthetic():
    grid = np.linspace(-2, 2, 11)
    spec = dicke.DsSpectrum(
        frequencies=grid, values=np.zeros(11, complex),
        peaks=[(-0.7, -0.4, 0.0), (0.0, 1.1, 0.0), (0.7, -0.4, 0.0)],
        broadening=0.0)
    ext = dicke.extract_soft_mode(spec)
    assert ext.omega_s == pytest.approx(0.7)
    assert ext.N_s_tilde == pytest.approx(0.4)
    assert ext.N_0_tilde == pytest.approx(1.1)
    assert ext.residual == 0.0


def test_quench_prediction_forms():
    ext = dicke.SoftModeExtract(omega_s=0.5, N_s_tilde=0.3, N_0_tilde=0.6,
                                residual=0.0)
    t = np.linspace(0.0, 1.0, 11)
    pred = dicke.quench_prediction(ext, t)
    assert pred[0] == 0.0
    # N0 = 2 Ns cancels the linear term: pure cubic, log-slope 3
    ref = (0.3 / (3 * 0.5)) * (0.5 * t[1:]) ** 3
    assert np.allclose(pred[1:], ref, rtol=1e-12)
    slope = np.diff(np.log(pred[1:])) / np.diff(np.log(t[1:]))
    assert np.abs(slope - 3.0).max() < 0.05
    # kappa scaling is linear with factor kappa/2
    assert np.allclose(dicke.quench_prediction(ext, t, kappa=0.1),
                       0.05 * pred)
    with pytest.raises(ValueError):
        dicke.quench_prediction(ext, np.array([4.0]))


def test_lindblad_quench_trivial_cases():
    # g=0: vacuum is dark under photon loss
    spec = dicke.DickeSpec(2.0, 1.0, 0.0, 4, 8, kappa=0.1)
    rec = dicke.lindblad_quench(spec, 1.0, 0.01)
    assert np.abs(rec.observables["n_ph"]).max() < 1e-12
    # kappa=0: photon number constant
    spec = dicke.DickeSpec(2.0, 1.0, 0.9 * G_C, 6, 10, kappa=0.0)
    rec = dicke.lindblad_quench(spec, 1.0, 0.01)
    nph = rec.observables["n_ph"]
    assert np.abs(nph - nph[0]).max() < 1e-9


def test_lindblad_quench_dimension_cap():
    spec = dicke.DickeSpec(2.0, 1.0, 0.1, 100, 40, kappa=0.1)
    with pytest.raises(ValueError):
        dicke.lindblad_quench(spec, 1.0, 0.01)


def test_quench_matches_full_spectrum_response_small_N():
    # cross-validation: Lindblad quench vs first-order DS response at N=20
    N, kappa = 20, 0.05
    spec = dicke.DickeSpec(2.0, 1.0, 0.9998 * G_C, N, 16, kappa=kappa)
    b = dicke.build_dicke(spec)
    ds = dicke.lehmann_ds(b)
    ext = dicke.extract_soft_mode(ds)
    t_end = 0.5 / ext.omega_s
    rec = dicke.lindblad_quench(spec, t_end, 0.005)
    delta = rec.observables["n_ph"] - rec.observables["n_ph"][0]
    full = dicke.quench_response(ds, rec.times, kappa=kappa)
    assert np.abs(delta - full).max() < 0.05 * np.abs(delta).max()
    # initial slope equals (kappa/2) chi(0) = -kappa <n_ph> (sum rule)
    _, v = dicke.low_spectrum(b.H, 1, b.parity, +1.0)
    nph0 = v[:, 0] @ (b.n_ph @ v[:, 0])
    i = np.searchsorted(rec.times, 0.05 / ext.omega_s)
    slope = (delta[i] - delta[0]) / rec.times[i]
    assert slope == pytest.approx(-kappa * nph0, rel=0.05)
    # the two-peak truncation drops the polariton branch, which carries
    # most of the linear weight at this size; its residual must be large
    assert ext.residual > abs(ext.N_0_tilde - 2 * ext.N_s_tilde)


def test_quench_response_reduces_to_truncated_form():
    # a spectrum holding only the three soft peaks reproduces the
    # linear-plus-cubic law at leading order in omega_s t
    grid = np.linspace(-2, 2, 11)
    ds = dicke.DsSpectrum(
        frequencies=grid, values=np.zeros(11, complex),
        peaks=[(-0.5, -0.3, 0.0), (0.0, 0.6, 0.0), (0.5, -0.3, 0.0)],
        broadening=0.0)
    ext = dicke.extract_soft_mode(ds)
    t = np.linspace(0.0, 0.3 / ext.omega_s, 50)
    full = dicke.quench_response(ds, t, kappa=0.05)
    trunc = dicke.quench_prediction(ext, t, kappa=0.05)
    # difference is the O((omega_s t)^5) tail of the sine expansion,
    # about (omega_s t)^2 / 20 of the cubic term here
    assert np.abs(full - trunc).max() < 5e-3 * np.abs(full).max()


def test_fit_power_law():
    N = np.array([50, 80, 125, 200, 320])
    exp, err = dicke.fit_power_law(N, N ** 0.5)
    assert exp == pytest.approx(0.5, abs=1e-6)
    assert err < 1e-6
    with pytest.raises(ValueError):
        dicke.fit_power_law(N, np.array([1, -1, 1, 1, 1.0]))
    with pytest.raises(ValueError):
        dicke.fit_power_law(N[:3], N[:3] ** 0.5)


def test_fit_finite_size_recovery():
    N = np.geomspace(20, 2000, 12)
    truth = (2.5, 150.0, 0.65)
    vals = truth[0] * (1 - np.exp(-(N / truth[1]) ** truth[2]))
    a0, lc, beta, flag = dicke.fit_finite_size(N, vals)
    assert a0 == pytest.approx(truth[0], rel=0.01)
    assert lc == pytest.approx(truth[1], rel=0.01)
    assert beta == pytest.approx(truth[2], rel=0.01)
    assert not flag


def test_fit_finite_size_under_determined():
    N = np.geomspace(20, 100, 8)
    vals = 2.5 * (1 - np.exp(-(N / 5000.0) ** 0.65))
    _, _, _, flag = dicke.fit_finite_size(N, vals)
    assert flag
