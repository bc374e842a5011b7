"""Basis enumeration, chain Hamiltonian, and thermal-state checks."""

import numpy as np
import pytest

from disspec import fock


def test_basis_dimensions():
    assert fock.build_basis(4).dim == 16
    assert fock.build_basis(4, sector=2).dim == 6
    assert fock.build_basis(10, sector=6).dim == 210


def test_basis_half_filling_configurations():
    b = fock.build_basis(4, sector=2)
    assert sorted(int(c) for c in b.occupations) == [0b0011, 0b0101, 0b0110,
                                                     0b1001, 0b1010, 0b1100]
    for i, c in enumerate(b.occupations):
        assert b.index[int(c)] == i


def test_sector_out_of_range():
    with pytest.raises(ValueError):
        fock.build_basis(4, sector=5)


def test_jw_sign():
    # cfg 0b0110 has one occupied site below j=2 and two below j=3
    assert fock._jw_sign(0b0110, 2) == -1
    assert fock._jw_sign(0b0110, 3) == 1
    assert fock._jw_sign(0b0110, 1) == 1


def test_hop_element_pauli_blocking():
    assert fock.hop_element(0b0011, 1, 0) is None     # target occupied
    assert fock.hop_element(0b0100, 1, 0) is None     # source empty
    cfg, sign = fock.hop_element(0b0001, 1, 0)
    assert cfg == 0b0010 and sign == 1


def test_hop_element_boundary_sign():
    # c^dag_3 c_0 on 0b0111 crosses two occupied sites: sign -1 * +1
    res = fock.hop_element(0b0111, 3, 0)
    assert res is not None
    cfg, sign = res
    assert cfg == 0b1110
    assert sign == 1  # one fermion below j=0 removed first, then two below i=3 -> +1


def test_open_chain_two_site_eigenvalues():
    spec = fock.LatticeSpec(L=2, h0=1.0, mu=0.0, pbc=False)
    b = fock.build_basis(2, sector=1)
    H = fock.build_chain_hamiltonian(spec, b)
    w = np.linalg.eigvalsh(H.toarray())
    assert np.allclose(w, [-1.0, 1.0], atol=1e-12)


def test_single_particle_band_pbc():
    # one-particle sector reproduces -2 h0 cos(2 pi m / L) exactly
    L = 10
    spec = fock.LatticeSpec(L=L, h0=1.0, mu=0.0, pbc=True)
    b = fock.build_basis(L, sector=1)
    H = fock.build_chain_hamiltonian(spec, b)
    w = np.sort(np.linalg.eigvalsh(H.toarray()))
    ref = np.sort(-2.0 * np.cos(fock.momentum_grid(L)))
    assert np.allclose(w, ref, atol=1e-12)


def test_ground_energy_filled_orbitals():
    # interacting-free duality: many-body ground energy = sum of lowest orbitals
    L, n = 10, 6
    spec = fock.LatticeSpec(L=L, h0=1.0, mu=0.0, pbc=True)
    b = fock.build_basis(L, sector=n)
    dec = fock.diagonalize(fock.build_chain_hamiltonian(spec, b))
    orbitals = np.sort(-2.0 * np.cos(fock.momentum_grid(L)))
    assert abs(dec.energies[0] - orbitals[:n].sum()) < 1e-10
    # open shell at the Fermi level gives a twofold-degenerate ground space
    assert np.sum(dec.energies - dec.energies[0] < 1e-9) == 2


def test_hamiltonian_conserves_number():
    L = 6
    spec = fock.LatticeSpec(L=L)
    b = fock.build_basis(L)
    H = fock.build_chain_hamiltonian(spec, b).toarray()
    N = fock.total_number_operator(b).toarray()
    assert np.abs(H @ N - N @ H).max() < 1e-12


def test_translation_invariant_spectrum():
    # translating every configuration by one site leaves the eigenvalue set fixed
    L, n = 6, 3
    spec = fock.LatticeSpec(L=L)
    b = fock.build_basis(L, sector=n)
    H = fock.build_chain_hamiltonian(spec, b).toarray()
    w1 = np.sort(np.linalg.eigvalsh(H))

    def shift(cfg):
        return ((cfg << 1) | (cfg >> (L - 1))) & ((1 << L) - 1)

    perm = np.array([b.index[shift(int(c))] for c in b.occupations])
    P = np.zeros((b.dim, b.dim))
    P[perm, np.arange(b.dim)] = 1.0
    w2 = np.sort(np.linalg.eigvalsh(P @ H @ P.T))
    assert np.allclose(w1, w2, atol=1e-10)


def test_site_number_operator():
    b = fock.build_basis(4, sector=2)
    n1 = fock.site_number_operator(1, b).toarray()
    expect = [(int(c) >> 1) & 1 for c in b.occupations]
    assert np.allclose(np.diag(n1).real, expect)


def test_density_wave_grid_check():
    b = fock.build_basis(4, sector=2)
    with pytest.raises(ValueError):
        fock.density_wave_operator(0.3, b)
    fock.density_wave_operator(np.pi, b)  # on-grid, no raise


def test_imbalance_matches_density_wave():
    b = fock.build_basis(6, sector=3)
    rho_pi = fock.density_wave_operator(np.pi, b).toarray()
    imb = fock.imbalance_operator(b).toarray()
    assert np.allclose(imb, 6 * rho_pi, atol=1e-12)


def test_heisenberg_picture_free_evolution():
    L = 4
    spec = fock.LatticeSpec(L=L)
    b = fock.build_basis(L, sector=2)
    H = fock.build_chain_hamiltonian(spec, b)
    dec = fock.diagonalize(H)
    n0 = fock.site_number_operator(0, b).toarray()
    t = 0.37
    Ut = dec.vectors @ np.diag(np.exp(-1j * dec.energies * t)) @ dec.vectors.conj().T
    ref = Ut.conj().T @ n0 @ Ut
    assert np.abs(dec.heisenberg(n0, t) - ref).max() < 1e-12


def test_thermal_state_finite_beta():
    L = 4
    spec = fock.LatticeSpec(L=L)
    b = fock.build_basis(L, sector=2)
    H = fock.build_chain_hamiltonian(spec, b)
    dec = fock.diagonalize(H)
    beta = 1.0
    rho = fock.thermal_state(dec, beta, b)
    rho.validate()
    import scipy.linalg
    ref = scipy.linalg.expm(-beta * H.toarray())
    ref /= np.trace(ref).real
    assert np.abs(rho.matrix - ref).max() < 1e-10


def test_thermal_state_beta_inf_projector():
    L, n = 10, 6
    spec = fock.LatticeSpec(L=L)
    b = fock.build_basis(L, sector=n)
    dec = fock.diagonalize(fock.build_chain_hamiltonian(spec, b))
    rho = fock.thermal_state(dec, np.inf, b)
    rho.validate()
    # uniform weight on the two degenerate ground states
    m = rho.matrix
    assert abs(np.trace(m @ m).real - 0.5) < 1e-9
    # staggered density wave has zero expectation on the symmetric ground space
    W = fock.density_wave_operator(np.pi, b).toarray()
    assert abs(np.trace(m @ W)) < 1e-12


def test_hermitian_flag_contract():
    b = fock.build_basis(2)
    bad = np.array([[0.0, 1.0], [0.0, 0.0]])
    m = np.zeros((4, 4), dtype=complex)
    m[:2, :2] = bad
    with pytest.raises(fock.ContractViolation):
        fock.OperatorMatrix(b, m, hermitian=True)


def test_density_matrix_validation():
    b = fock.build_basis(2)
    good = np.eye(4) / 4.0
    fock.DensityMatrix(b, good).validate()
    with pytest.raises(fock.ContractViolation):
        fock.DensityMatrix(b, np.eye(4)).validate()          # trace 4
    bad = np.diag([0.6, 0.5, 0.0, -0.1])
    with pytest.raises(fock.ContractViolation):
        fock.DensityMatrix(b, bad).validate()                # negative weight
