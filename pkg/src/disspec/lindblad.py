"""Lindblad master-equation propagation with fixed-step RK4.

Supports constant and cosine-modulated dissipation rates.  All jump
operators share one rate schedule.  When every jump operator is diagonal
(pure dephasing, e.g. local densities n_j) the dissipator reduces to an
elementwise mask on the density matrix, which is the hot path for the
resonance protocol; the general path handles arbitrary sparse jumps
(e.g. the cavity annihilation operator).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .fock import ContractViolation, DensityMatrix, ManyBodyBasis, OperatorMatrix

ORACLE_DIM_LIMIT = 64


class IntegrationFailure(RuntimeError):
    """Trace drift exceeded tolerance; retry with a smaller dt."""


@dataclass(frozen=True)
class RateSchedule:
    """gamma(t) = gamma + gamma_prime * cos(omega0 * t) (or constant gamma)."""

    gamma: float
    gamma_prime: float = 0.0
    omega0: float = 0.0
    shape: str = "constant"

    def __post_init__(self):
        if self.gamma < 0 or self.gamma_prime < 0:
            raise ValueError("rates must be non-negative")
        if self.shape not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")
        if self.shape == "cosine" and self.gamma_prime > self.gamma:
            raise ValueError("resonance protocol requires gamma_prime <= gamma")

    def rate(self, t: float) -> float:
        if self.shape == "constant":
            return self.gamma
        return self.gamma + self.gamma_prime * np.cos(self.omega0 * t)


@dataclass
class JumpOperatorSet:
    """Jump operators sharing a single rate schedule."""

    ops: list
    basis: ManyBodyBasis = None

    def __post_init__(self):
        if self.ops:
            self.basis = self.ops[0].basis
            for op in self.ops:
                if op.basis.dim != self.basis.dim:
                    raise ValueError("jump operators live on different bases")

    def all_diagonal(self) -> bool:
        for op in self.ops:
            m = op.data
            if sp.issparse(m):
                if (m - sp.diags(m.diagonal())).nnz:
                    return False
            elif np.any(m - np.diag(np.diag(m))):
                return False
        return True

    def dephasing_mask(self) -> np.ndarray:
        """M[a,b] = sum_j (v_a v_b - (v_a^2 + v_b^2)/2) for diagonal jumps v=diag(L_j).

        The dissipator then acts as rate * M * rho, elementwise.
        """
        d = self.basis.dim
        mask = np.zeros((d, d))
        for op in self.ops:
            v = (op.data.diagonal() if sp.issparse(op.data) else np.diag(op.data)).real
            mask += np.subtract.outer(-0.5 * v**2, 0.5 * v**2) + np.outer(v, v)
        return mask


@dataclass
class TrajectoryRecord:
    """Sampled observable series of one evolution."""

    times: np.ndarray
    observables: dict
    final_state: DensityMatrix | None = None
    meta: dict = field(default_factory=dict)

    def to_csv(self, path):
        names = list(self.observables)
        with open(path, "w", newline="\n") as fh:
            fh.write("t," + ",".join(names) + "\n")
            cols = [self.observables[n] for n in names]
            for i, t in enumerate(self.times):
                row = [f"{t:.15g}"] + [f"{c[i]:.15g}" for c in cols]
                fh.write(",".join(row) + "\n")


def expectation(rho: DensityMatrix, W: OperatorMatrix) -> float:
    """tr(rho W) for Hermitian W; the imaginary residue is asserted small."""
    if not W.hermitian:
        raise ContractViolation("expectation requires a Hermitian observable")
    if sp.issparse(W.data):
        val = (W.data.multiply(rho.matrix.T)).sum()
    else:
        val = np.sum(W.data * rho.matrix.T)
    assert abs(val.imag) < 1e-9, f"imaginary expectation residue {val.imag:.3e}"
    return float(val.real)


def _spectral_width(Hm) -> float:
    """Spectral half-width (E_max - E_min)/2 of a Hermitian matrix."""
    if sp.issparse(Hm):
        if Hm.shape[0] <= DENSE_WIDTH_LIMIT:
            w = np.linalg.eigvalsh(Hm.toarray())
            return float(w[-1] - w[0]) / 2.0
        try:
            lo = sp.linalg.eigsh(Hm, k=1, which="SA", return_eigenvectors=False)
            hi = sp.linalg.eigsh(Hm, k=1, which="LA", return_eigenvectors=False)
            return float(hi[0] - lo[0]) / 2.0
        except Exception:
            return float(abs(Hm).sum(axis=1).max())
    w = np.linalg.eigvalsh(Hm)
    return float(w[-1] - w[0]) / 2.0


DENSE_WIDTH_LIMIT = 600


def _comm(H, rho):
    """[H, rho] for Hermitian H (sparse or dense)."""
    Hr = H @ rho
    return Hr - (H @ rho.conj().T).conj().T


def liouvillian_apply(rho: DensityMatrix, H: OperatorMatrix, jumps: JumpOperatorSet,
                      rate: float) -> np.ndarray:
    """-i[H, rho] + rate * sum_j (L rho Ldag - {Ldag L, rho}/2)."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if H.dim != rho.basis.dim:
        raise ValueError("dimension mismatch between H and rho")
    m = rho.matrix
    out = -1j * _comm(H.data, m)
    if rate != 0.0 and jumps.ops:
        for Lop in jumps.ops:
            L = Lop.data
            Lr = L @ m
            LrLd = (L @ Lr.conj().T).conj().T
            LdL = L.conj().T @ L
            anti = LdL @ m
            out += rate * (LrLd - 0.5 * (anti + anti.conj().T))
    return out


def evolve(rho0: DensityMatrix, H: OperatorMatrix, jumps: JumpOperatorSet,
           schedule: RateSchedule, t_end: float, dt: float,
           observables: dict, sample_stride: int = 1,
           keep_final: bool = False, check_interval: int = 50) -> TrajectoryRecord:
    """Fixed-step RK4 integration of the Lindblad equation.

    gamma(t) is evaluated at the RK substage times t, t+dt/2, t+dt.
    Observables are sampled every `sample_stride` steps; CPTP sanity
    (trace, hermiticity) is checked every `check_interval` samples.
    """
    if t_end <= 0 or dt <= 0:
        raise ValueError("t_end and dt must be positive")
    d = rho0.basis.dim
    Hm = H.data
    # tight-binding sectors are very sparse; csr matmul wins over zgemm there
    if not sp.issparse(Hm) and d >= 100:
        if np.count_nonzero(Hm) < 0.05 * Hm.size:
            Hm = sp.csr_matrix(Hm)
    width = _spectral_width(Hm)
    if dt * width > 0.1:
        warnings.warn(f"dt * spectral width = {dt * width:.3f} exceeds the 0.1 "
                      "stability heuristic; consider a smaller dt",
                      stacklevel=2)

    dephasing = jumps.all_diagonal() and bool(jumps.ops)
    mask = jumps.dephasing_mask() if dephasing else None
    jump_data = [op.data for op in jumps.ops]
    ldl = [op.data.conj().T @ op.data for op in jumps.ops] if not dephasing else None
    # RK stage arguments stay Hermitian along the flow, so the commutator
    # needs one product: -i[H, m] = C + C^dag with C = (-iH) m.  This also
    # makes every stage output exactly Hermitian.
    Hj = -1j * Hm

    def rhs(t, m):
        C = Hj @ m
        out = C + C.conj().T
        g = schedule.rate(t)
        if g == 0.0 or not jump_data:
            return out
        if dephasing:
            out += g * (mask * m)
            return out
        for L, A in zip(jump_data, ldl):
            Lr = L @ m
            anti = A @ m
            out += g * ((L @ Lr.conj().T).conj().T - 0.5 * (anti + anti.conj().T))
        return out

    n_steps = int(round(t_end / dt))
    rho = rho0.matrix.astype(np.complex128, copy=True)
    names = list(observables)
    obs_ops = [observables[n] for n in names]

    sample_times = [0.0]
    series = {n: [expectation(DensityMatrix(rho0.basis, rho), op)]
              for n, op in zip(names, obs_ops)}
    n_checked = 0
    for step in range(n_steps):
        t = step * dt
        k1 = rhs(t, rho)
        k2 = rhs(t + 0.5 * dt, rho + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, rho + 0.5 * dt * k2)
        k4 = rhs(t + dt, rho + dt * k3)
        rho += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if (step + 1) % sample_stride == 0 or step == n_steps - 1:
            tcur = (step + 1) * dt
            sample_times.append(tcur)
            dm = DensityMatrix(rho0.basis, rho, time=tcur)
            for n, op in zip(names, obs_ops):
                series[n].append(expectation(dm, op))
            n_checked += 1
            if n_checked % check_interval == 0 or step == n_steps - 1:
                drift = abs(np.trace(rho) - 1.0)
                if drift > 1e-6:
                    raise IntegrationFailure(
                        f"trace drift {drift:.3e} at t={tcur:.4g}; reduce dt")
                herm = np.abs(rho - rho.conj().T).max()
                if herm > 1e-7:
                    raise IntegrationFailure(
                        f"hermiticity drift {herm:.3e} at t={tcur:.4g}; reduce dt")

    final = DensityMatrix(rho0.basis, rho, time=n_steps * dt) if keep_final else None
    return TrajectoryRecord(
        times=np.array(sample_times),
        observables={n: np.array(v) for n, v in series.items()},
        final_state=final,
        meta={"dt": dt, "schedule": schedule},
    )


def liouvillian_exponential_oracle(rho0: DensityMatrix, H: OperatorMatrix,
                                   jumps: JumpOperatorSet, rate: float,
                                   t: float) -> DensityMatrix:
    """Exact rho(t) via dense exponential of the vectorized Liouvillian.

    Test oracle only; refuses dimensions above ORACLE_DIM_LIMIT.
    """
    d = rho0.basis.dim
    if d > ORACLE_DIM_LIMIT:
        raise ValueError(f"oracle limited to dim <= {ORACLE_DIM_LIMIT}, got {d}")
    Hm = H.toarray()
    eye = np.eye(d)
    sup = -1j * (np.kron(Hm, eye) - np.kron(eye, Hm.T))
    for op in jumps.ops:
        L = op.toarray()
        LdL = L.conj().T @ L
        sup += rate * (np.kron(L, L.conj())
                       - 0.5 * np.kron(LdL, eye)
                       - 0.5 * np.kron(eye, LdL.T))
    prop = scipy.linalg.expm(sup * t)
    vec = prop @ rho0.matrix.reshape(-1)
    return DensityMatrix(rho0.basis, vec.reshape(d, d), time=rho0.time + t)
