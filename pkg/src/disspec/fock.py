"""Many-body Fock-space tools for the spinless-fermion chain.

Builds occupation-number bases (optionally restricted to a particle-number
sector), tight-binding chain Hamiltonians with the Jordan-Wigner sign
convention, local density and density-wave operators, and exact
diagonalization / thermal-state utilities.

Conventions
-----------
Site 0 is the least significant bit of a configuration integer.  Applying
c_j to a configuration picks up the sign (-1)**(number of occupied sites
below j).  With this convention c^dag_i c_j matrix elements are exact
fermionic ones, so periodic boundary terms need no extra bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.linalg
import scipy.sparse as sp

# Above this Hilbert-space dimension operators are stored sparse.
DENSE_DIM_LIMIT = 2000

HERMITICITY_TOL = 1e-12


class ContractViolation(ValueError):
    """An operator did not satisfy a declared structural property."""


@dataclass(frozen=True)
class LatticeSpec:
    """Chain geometry and single-particle parameters.

    h0 sets the global energy unit; all times are quoted in 1/h0.
    """

    L: int
    h0: float = 1.0
    mu: float = 0.0
    pbc: bool = True

    def __post_init__(self):
        if self.L < 2:
            raise ValueError(f"need at least 2 sites, got L={self.L}")
        if self.h0 <= 0:
            raise ValueError(f"hopping amplitude must be positive, got h0={self.h0}")


@dataclass(frozen=True)
class ManyBodyBasis:
    """Ordered occupation configurations, optionally in a fixed-N sector."""

    L: int
    sector: int | None
    occupations: np.ndarray          # uint32 configurations, ascending
    index: dict = field(repr=False)  # configuration -> basis index

    @property
    def dim(self) -> int:
        return len(self.occupations)

    def occupation_matrix(self) -> np.ndarray:
        """(dim, L) array of 0/1 site occupations."""
        cfg = self.occupations[:, None]
        return ((cfg >> np.arange(self.L)[None, :]) & 1).astype(np.float64)


@dataclass
class OperatorMatrix:
    """A complex matrix over a basis, dense or sparse by fill fraction."""

    basis: ManyBodyBasis
    data: np.ndarray | sp.spmatrix
    hermitian: bool = False

    def __post_init__(self):
        d = self.basis.dim
        if self.data.shape != (d, d):
            raise ValueError(f"matrix shape {self.data.shape} != basis dim {d}")
        if self.hermitian:
            dev = self.data - self.data.conj().T
            dev = np.abs(dev.toarray() if sp.issparse(dev) else dev).max()
            if dev > HERMITICITY_TOL:
                raise ContractViolation(f"hermiticity violated by {dev:.3e}")

    @property
    def dim(self) -> int:
        return self.basis.dim

    def toarray(self) -> np.ndarray:
        if sp.issparse(self.data):
            return self.data.toarray()
        return np.asarray(self.data)


@dataclass
class SpectralDecomposition:
    """Eigenvalues (ascending) and unitary eigenvector columns."""

    energies: np.ndarray
    vectors: np.ndarray

    def heisenberg(self, op: np.ndarray, t: float) -> np.ndarray:
        """exp(iHt) op exp(-iHt) in the original basis."""
        phase = np.exp(1j * self.energies * t)
        op_eig = self.vectors.conj().T @ op @ self.vectors
        return self.vectors @ (np.outer(phase, phase.conj()) * op_eig) @ self.vectors.conj().T


@dataclass
class DensityMatrix:
    """State carrier for Lindblad evolution and expectation values."""

    basis: ManyBodyBasis
    matrix: np.ndarray
    time: float = 0.0

    def validate(self, trace_tol=1e-9, herm_tol=1e-9, psd_tol=1e-8):
        tr = np.trace(self.matrix)
        if abs(tr - 1.0) > trace_tol:
            raise ContractViolation(f"trace deviates from 1 by {abs(tr - 1):.3e}")
        if np.abs(self.matrix - self.matrix.conj().T).max() > herm_tol:
            raise ContractViolation("density matrix not Hermitian")
        w = np.linalg.eigvalsh(self.matrix)
        if w.min() < -psd_tol:
            raise ContractViolation(f"negative eigenvalue {w.min():.3e}")
        return self


def build_basis(L: int, sector: int | None = None) -> ManyBodyBasis:
    """Enumerate configurations of an L-site chain, lexicographic by bit pattern."""
    if sector is not None and not 0 <= sector <= L:
        raise ValueError(f"sector {sector} out of range for L={L}")
    if sector is None:
        occ = np.arange(1 << L, dtype=np.uint32)
    else:
        all_cfg = np.arange(1 << L, dtype=np.uint32)
        counts = np.zeros(1 << L, dtype=np.int64)
        for j in range(L):
            counts += (all_cfg >> j) & 1
        occ = all_cfg[counts == sector]
        assert len(occ) == comb(L, sector)
    index = {int(c): i for i, c in enumerate(occ)}
    return ManyBodyBasis(L=L, sector=sector, occupations=occ, index=index)


def _jw_sign(cfg: int, j: int) -> int:
    """(-1)**(occupied sites strictly below j)."""
    return 1 - 2 * (bin(cfg & ((1 << j) - 1)).count("1") & 1)


def hop_element(cfg: int, i: int, j: int):
    """Apply c^dag_i c_j to |cfg>; returns (new_cfg, sign) or None."""
    if not (cfg >> j) & 1:
        return None
    sign = _jw_sign(cfg, j)
    cfg1 = cfg & ~(1 << j)
    if (cfg1 >> i) & 1:
        return None
    sign *= _jw_sign(cfg1, i)
    return cfg1 | (1 << i), sign


def _wrap(basis: ManyBodyBasis, mat: sp.lil_matrix, hermitian: bool) -> OperatorMatrix:
    d = basis.dim
    csr = mat.tocsr()
    if d <= DENSE_DIM_LIMIT:
        return OperatorMatrix(basis, csr.toarray(), hermitian=hermitian)
    return OperatorMatrix(basis, csr, hermitian=hermitian)


def build_chain_hamiltonian(spec: LatticeSpec, basis: ManyBodyBasis) -> OperatorMatrix:
    """H = -h0 sum_j (c^dag_j c_{j+1} + h.c.) - mu sum_j n_j on the given basis."""
    if basis.L != spec.L:
        raise ValueError(f"basis built for L={basis.L}, spec has L={spec.L}")
    L, d = spec.L, basis.dim
    mat = sp.lil_matrix((d, d), dtype=np.complex128)
    bonds = [(j, j + 1) for j in range(L - 1)]
    if spec.pbc:
        bonds.append((L - 1, 0))
    for a, cfg in enumerate(basis.occupations):
        cfg = int(cfg)
        mat[a, a] += -spec.mu * bin(cfg).count("1")
        for (i, j) in bonds:
            for (src, dst) in ((j, i), (i, j)):   # c^dag_dst c_src and h.c.
                res = hop_element(cfg, dst, src)
                if res is not None:
                    newcfg, sign = res
                    b = basis.index[newcfg]
                    mat[b, a] += -spec.h0 * sign
    return _wrap(basis, mat, hermitian=True)


def site_number_operator(j: int, basis: ManyBodyBasis) -> OperatorMatrix:
    """Diagonal occupation operator n_j."""
    if not 0 <= j < basis.L:
        raise ValueError(f"site index {j} out of range for L={basis.L}")
    diag = ((basis.occupations >> j) & 1).astype(np.complex128)
    d = basis.dim
    if d <= DENSE_DIM_LIMIT:
        return OperatorMatrix(basis, np.diag(diag), hermitian=True)
    return OperatorMatrix(basis, sp.diags(diag).tocsr(), hermitian=True)


def momentum_grid(L: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(L) / L


def density_wave_operator(q: float, basis: ManyBodyBasis) -> OperatorMatrix:
    """rho_q = (1/L) sum_j exp(-i q j) n_j; even sites carry phase +1 at q=pi."""
    L = basis.L
    grid = momentum_grid(L)
    if not np.isclose(np.min(np.abs(np.angle(np.exp(1j * (grid - q))))), 0.0, atol=1e-9):
        raise ValueError(f"momentum q={q} not on the 2*pi*m/{L} grid")
    occ = basis.occupation_matrix()
    phases = np.exp(-1j * q * np.arange(L))
    diag = occ @ phases / L
    herm = bool(np.allclose(diag.imag, 0.0, atol=1e-12))
    mat = np.diag(diag) if basis.dim <= DENSE_DIM_LIMIT else sp.diags(diag).tocsr()
    return OperatorMatrix(basis, mat, hermitian=herm)


def imbalance_operator(basis: ManyBodyBasis) -> OperatorMatrix:
    """N_even - N_odd, i.e. L * rho_pi with even sites at phase +1."""
    op = density_wave_operator(np.pi, basis)
    if sp.issparse(op.data):
        return OperatorMatrix(basis, (op.data * basis.L).real.tocsr(), hermitian=True)
    return OperatorMatrix(basis, (op.data * basis.L).real.astype(np.complex128), hermitian=True)


def total_number_operator(basis: ManyBodyBasis) -> OperatorMatrix:
    diag = basis.occupation_matrix().sum(axis=1).astype(np.complex128)
    mat = np.diag(diag) if basis.dim <= DENSE_DIM_LIMIT else sp.diags(diag).tocsr()
    return OperatorMatrix(basis, mat, hermitian=True)


def diagonalize(H: OperatorMatrix) -> SpectralDecomposition:
    """Full dense eigendecomposition of a Hermitian operator."""
    if not H.hermitian:
        raise ContractViolation("diagonalize requires the hermitian flag")
    mat = H.toarray()
    energies, vectors = scipy.linalg.eigh(mat)
    return SpectralDecomposition(energies=energies, vectors=vectors)


def thermal_state(decomp: SpectralDecomposition, beta: float,
                  basis: ManyBodyBasis) -> DensityMatrix:
    """rho = exp(-beta H)/Z; beta=inf gives the uniform ground-space projector."""
    E = decomp.energies
    if np.isinf(beta):
        scale = max(1.0, np.abs(E).max())
        degenerate = E - E[0] < 1e-9 * scale
        p = degenerate.astype(np.float64)
        p /= p.sum()
    else:
        if beta < 0:
            raise ValueError("beta must be >= 0")
        w = np.exp(-beta * (E - E[0]))
        p = w / w.sum()
    U = decomp.vectors
    rho = (U * p) @ U.conj().T
    rho = 0.5 * (rho + rho.conj().T)
    return DensityMatrix(basis=basis, matrix=rho, time=0.0)
