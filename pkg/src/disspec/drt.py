"""Dissipative response theory: susceptibilities, memory kernels, predictions.

Implements the second-order response of a system observable to a weak
system-environment coupling with a Gaussian environment.  The Markovian
limit reduces to a Lindblad-form susceptibility; the leading memory
corrections enter through order-ell expansions of the bath correlator
around equal times, with susceptibility tables chi^{[ell] re/im}(s) built
by exact diagonalization and bath kernels G^{[ell] re/im}(tbar; t) by
trapezoidal quadrature.  A deviation metric sigma(t) quantifies agreement
with reference dynamics on a coarse-graining window.

The ell = 1 susceptibilities are the one-sided equal-time limit of the
delta-t derivative of the two-time superoperator expectation: with
C = [H, A], Cd = [H, A+], both parts derive from the complex series
T(s) = <Cd W(s) A - A+ W(s) C - W(s)(Cd A - A+ C)> via
chi^{[1]re} = -2 Im T and chi^{[1]im} = -2 Re T.  This pairing was fixed
by matching the expansion against the exact double-integral response on
small chains (see the order-scaling tests).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .fock import (ContractViolation, DensityMatrix, LatticeSpec,
                   ManyBodyBasis, OperatorMatrix, SpectralDecomposition,
                   build_basis, build_chain_hamiltonian, diagonalize,
                   imbalance_operator, site_number_operator, thermal_state,
                   total_number_operator)
from .kbe import BathCorrelator, initial_equilibrium_gf
from .lindblad import TrajectoryRecord

PARTS = ("real", "imag")


class UnsupportedOrderError(ValueError):
    """Memory-expansion order outside the implemented ell <= 1 range."""


@dataclass(frozen=True)
class SusceptibilityTable:
    """chi^{[ell] part}(s) on a uniform s = t - tbar grid.

    energy_scale is the characteristic system energy Lambda entering the
    expansion-control diagnostic Lambda * tau0.
    """

    order: int
    part: str
    times: np.ndarray
    values: np.ndarray
    labels: tuple[str, str]
    energy_scale: float

    def control_parameter(self, tau0: float) -> float:
        """Expansion-control diagnostic Lambda * tau0."""
        return self.energy_scale * tau0


@dataclass(frozen=True)
class MemoryKernel:
    """G^{[ell] part}(tbar; t) over tbar in [0, t] for a fixed final t."""

    order: int
    part: str
    times: np.ndarray
    values: np.ndarray
    t_final: float


@dataclass(frozen=True)
class DeviationMetric:
    """Windowed relative deviation sigma(t); undefined points are NaN."""

    times: np.ndarray
    sigma: np.ndarray
    delta0: float
    defined: np.ndarray


def _mat(op) -> np.ndarray:
    if isinstance(op, OperatorMatrix):
        return op.toarray()
    return np.asarray(op, dtype=complex)


def _state_matrix(state) -> np.ndarray:
    if isinstance(state, DensityMatrix):
        return state.matrix
    return np.asarray(state, dtype=complex)


def _check_dims(*ops):
    dims = {m.shape[0] for m in ops}
    if len(dims) != 1 or any(m.shape[0] != m.shape[1] for m in ops):
        raise ContractViolation(f"operator dimensions disagree: "
                                f"{[m.shape for m in ops]}")


def superoperator_L(A, B, W, t1: float, t2: float, t: float,
                    decomp: SpectralDecomposition, state) -> complex:
    """<A(t1) W(t) B(t2) - th12 W(t) A(t1) B(t2) - th21 A(t1) B(t2) W(t)>.

    Heisenberg evolution from the spectral decomposition; theta(0) = 1/2
    at coincident times so the equal-time value matches the Lindblad form.
    """
    Am, Bm, Wm, rho = _mat(A), _mat(B), _mat(W), _state_matrix(state)
    _check_dims(Am, Bm, Wm, rho, decomp.vectors)
    At = decomp.heisenberg(Am, t1)
    Bt = decomp.heisenberg(Bm, t2)
    Wt = decomp.heisenberg(Wm, t)
    th12 = 0.5 if t1 == t2 else float(t1 > t2)
    op = At @ Wt @ Bt - th12 * (Wt @ At @ Bt) - (1.0 - th12) * (At @ Bt @ Wt)
    return complex(np.trace(rho @ op))


def _hamiltonian_from(decomp: SpectralDecomposition) -> np.ndarray:
    U = decomp.vectors
    return (U * decomp.energies) @ U.conj().T


def chi_ell(A, W, ell: int, part: str, t: float, tbar: float,
            decomp: SpectralDecomposition, state) -> float:
    """Dissipative susceptibility chi^{[ell] part}_{A,W}(t, tbar).

    ell = 0: 2<L_{A+,A} W(t)> (real part) and i<[A+A, W(t)]> (imag part),
    operators at tbar.  ell = 1: derivative-order memory susceptibility
    from the complex series T described in the module docstring.
    """
    if part not in PARTS:
        raise ValueError(f"part must be one of {PARTS}, got {part!r}")
    if ell not in (0, 1):
        raise UnsupportedOrderError(f"order {ell} not implemented (ell <= 1)")
    Am, Wm, rho = _mat(A), _mat(W), _state_matrix(state)
    _check_dims(Am, Wm, rho, decomp.vectors)
    if ell == 0:
        if part == "real":
            val = 2.0 * superoperator_L(Am.conj().T, Am, Wm, tbar, tbar, t,
                                        decomp, rho)
            return float(val.real)
        Nt = decomp.heisenberg(Am.conj().T @ Am, tbar)
        Wt = decomp.heisenberg(Wm, t)
        return float((1j * np.trace(rho @ (Nt @ Wt - Wt @ Nt))).real)
    H = _hamiltonian_from(decomp)
    C = H @ Am - Am @ H
    Cd = H @ Am.conj().T - Am.conj().T @ H
    At = decomp.heisenberg(Am, tbar)
    Adt = At.conj().T
    Ct = decomp.heisenberg(C, tbar)
    Cdt = decomp.heisenberg(Cd, tbar)
    Wt = decomp.heisenberg(Wm, t)
    T = np.trace(rho @ (Cdt @ Wt @ At - Adt @ Wt @ Ct
                        - Wt @ (Cdt @ At - Adt @ Ct)))
    return float(-2.0 * T.imag) if part == "real" else float(-2.0 * T.real)


def susceptibility_tables(A_ops, W, times: np.ndarray,
                          decomp: SpectralDecomposition, state,
                          energy_scale: float,
                          verify_points: int = 1,
                          rng: np.random.Generator | None = None,
                          labels: tuple[str, str] = ("O", "W"),
                          ) -> dict[tuple[int, str], SusceptibilityTable]:
    """All four chi^{[ell] part}(s) tables, summed over the coupling set.

    Time-translation invariance (time-independent H, stationary state) is
    exploited to store one-dimensional tables; verify_points spot-checks
    randomly shifted absolute (t, tbar) pairs against the direct chi_ell
    evaluation before the tables are returned.
    """
    times = np.asarray(times, dtype=float)
    W_m = _mat(W)
    rho = _state_matrix(state)
    U = decomp.vectors
    E = decomp.energies
    _check_dims(W_m, rho, U)
    rho_t = U.conj().T @ rho @ U
    W_t = U.conj().T @ W_m @ U
    ediff = E[:, None] - E[None, :]

    Y0r = np.zeros_like(rho_t)
    Y0i = np.zeros_like(rho_t)
    Yc = np.zeros_like(rho_t)
    mats = [_mat(A) for A in A_ops]
    for Am in mats:
        _check_dims(Am, rho)
        At = U.conj().T @ Am @ U
        Adt = At.conj().T
        Ct = ediff * At
        Cdt = ediff * Adt
        P = At @ rho_t
        N = Adt @ At
        Y0r += 2.0 * (P @ Adt - 0.5 * (N @ rho_t + rho_t @ N))
        Y0i += 1j * (rho_t @ N - N @ rho_t)
        Yc += P @ Cdt - (Ct @ rho_t) @ Adt - (Cdt @ At - Adt @ Ct) @ rho_t

    Vm = np.exp(1j * np.outer(E, times))

    def series(Y):
        return np.einsum("mk,mk->k", Vm, (Y.T * W_t) @ np.conj(Vm))

    s0r = series(Y0r)
    s0i = series(Y0i)
    sc = series(Yc)
    for name, s in (("chi[0]re", s0r), ("chi[0]im", s0i)):
        if np.abs(s.imag).max() > 1e-8 * max(1.0, np.abs(s.real).max()):
            raise ContractViolation(f"{name} has imaginary residue "
                                    f"{np.abs(s.imag).max():.3e}")
    raw = {(0, "real"): s0r.real, (0, "imag"): s0i.real,
           (1, "real"): -2.0 * sc.imag, (1, "imag"): -2.0 * sc.real}
    tables = {key: SusceptibilityTable(order=key[0], part=key[1],
                                       times=times, values=vals,
                                       labels=labels,
                                       energy_scale=energy_scale)
              for key, vals in raw.items()}

    if verify_points > 0:
        rng = rng or np.random.default_rng(7)
        for (ell, part), tab in tables.items():
            for _ in range(verify_points):
                k = int(rng.integers(0, times.size))
                tbar = float(rng.uniform(0.0, 2.0))
                direct = sum(chi_ell(Am, W_m, ell, part, times[k] + tbar,
                                     tbar, decomp, rho) for Am in mats)
                scale = max(1.0, np.abs(tab.values).max())
                if abs(direct - tab.values[k]) > 1e-8 * scale:
                    raise ContractViolation(
                        f"chi[{ell}]{part} not time-translation invariant: "
                        f"{direct:.6e} vs {tab.values[k]:.6e} at s={times[k]}")
    return tables


def _kernel_prefix(bath: BathCorrelator, ell: int, part: str,
                   n_t: int) -> np.ndarray:
    """Cumulative integral of [re/im g](dt') dt'^ell / (ell! 2^ell)."""
    if ell not in (0, 1):
        raise UnsupportedOrderError(f"order {ell} not implemented (ell <= 1)")
    if part not in PARTS:
        raise ValueError(f"part must be one of {PARTS}, got {part!r}")
    if n_t > bath.grid.n_steps:
        raise ContractViolation(f"bath correlator tabulated to index "
                                f"{bath.grid.n_steps} < requested {n_t}")
    dts = bath.grid.dt * np.arange(n_t + 1)
    comp = np.real if part == "real" else np.imag
    integrand = comp(bath.values[:n_t + 1]) * dts**ell \
        / (factorial(ell) * 2.0**ell)
    return np.concatenate(
        [[0.0], cumulative_trapezoid(integrand, dx=bath.grid.dt)])


def memory_kernel_table(bath: BathCorrelator, ell: int, part: str,
                        n_t: int) -> MemoryKernel:
    """G^{[ell] part}(tbar; t_n) for tbar on the grid up to t_n = n_t dt.

    The integration range 0..t - |t - 2 tbar| is empty at both endpoints,
    so the kernel vanishes at tbar = 0 and tbar = t.
    """
    F = _kernel_prefix(bath, ell, part, n_t)
    k = np.arange(n_t + 1)
    vals = F[n_t - np.abs(n_t - 2 * k)]
    return MemoryKernel(order=ell, part=part,
                        times=bath.grid.dt * k, values=vals,
                        t_final=bath.grid.dt * n_t)


def _grid_index(x: float, dt: float, name: str) -> int:
    k = int(round(x / dt))
    if abs(x - k * dt) > 1e-9 * max(1.0, abs(x)):
        raise ValueError(f"{name}={x} is not on the dt={dt} grid")
    return k


def bath_memory_kernel(bath: BathCorrelator, ell: int, part: str,
                       t: float, tbar: float) -> float:
    """Single kernel value G^{[ell] part}(tbar; t)."""
    if not 0.0 <= tbar <= t:
        raise ValueError(f"tbar={tbar} outside [0, t={t}]")
    n_t = _grid_index(t, bath.grid.dt, "t")
    k = _grid_index(tbar, bath.grid.dt, "tbar")
    F = _kernel_prefix(bath, ell, part, n_t)
    return float(F[n_t - abs(n_t - 2 * k)])


def drt_predict(tables: dict, bath: BathCorrelator,
                orders=(0, 1)) -> TrajectoryRecord:
    """Memory-expansion prediction dW(t) = sum chi^{[l]p} o G^{[l]p}.

    The convolution is (A o B)(t) = int_0^t A(t - tbar) B(tbar; t) dtbar
    with the kernel rebuilt for each final time t.  Returns the ell = 0
    series and, when order 1 is requested, the combined 0+1 series.
    """
    orders = tuple(sorted(set(orders)))
    if not orders or any(o not in (0, 1) for o in orders):
        raise UnsupportedOrderError(f"orders {orders} outside {{0, 1}}")
    times = None
    for ell in orders:
        for part in PARTS:
            if (ell, part) not in tables:
                raise ContractViolation(f"missing table ({ell}, {part})")
            t_tab = tables[(ell, part)].times
            if times is None:
                times = t_tab
            elif t_tab.shape != times.shape or not np.allclose(t_tab, times):
                raise ContractViolation("susceptibility tables on "
                                        "mismatched grids")
    n = times.size - 1
    dt = times[1] - times[0]
    if not np.allclose(np.diff(times), dt):
        raise ContractViolation("susceptibility grid not uniform")
    if abs(bath.grid.dt - dt) > 1e-12 or bath.grid.n_steps < n:
        raise ContractViolation("bath correlator grid does not cover the "
                                "susceptibility grid")
    F = {(ell, part): _kernel_prefix(bath, ell, part, n)
         for ell in orders for part in PARTS}
    out = {ell: np.zeros(n + 1) for ell in orders}
    for K in range(1, n + 1):
        k = np.arange(K + 1)
        w = np.full(K + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        ker_idx = K - np.abs(K - 2 * k)
        for ell in orders:
            acc = 0.0
            for part in PARTS:
                chi = tables[(ell, part)].values
                acc += np.sum(w * chi[K - k] * F[(ell, part)][ker_idx])
            out[ell][K] = acc
    obs = {}
    if 0 in orders:
        obs["dW_l0"] = out[0]
    if 1 in orders:
        obs["dW_l01"] = sum(out.values())
    return TrajectoryRecord(times=times, observables=obs,
                            meta={"orders": orders})


def sigma_deviation(times: np.ndarray, reference: np.ndarray,
                    prediction: np.ndarray,
                    delta0: float) -> DeviationMetric:
    """sigma(t) = int (ref - pred)^2 / int ref^2 over [t-d0, t+d0].

    Both integrals by trapezoid on the shared uniform grid; points whose
    window leaves the data are dropped, vanishing denominators give NaN.
    """
    times = np.asarray(times, float)
    reference = np.asarray(reference, float)
    prediction = np.asarray(prediction, float)
    if reference.shape != times.shape or prediction.shape != times.shape:
        raise ContractViolation("series and grid shapes disagree")
    dt = times[1] - times[0]
    if not np.allclose(np.diff(times), dt):
        raise ContractViolation("sigma requires a uniform grid")
    h = int(round(delta0 / dt))
    if h < 1:
        raise ValueError(f"window delta0={delta0} below grid spacing {dt}")
    n = times.size - 1
    idx = np.arange(h, n - h + 1)
    if idx.size == 0:
        raise ValueError("window does not fit inside the data")
    wtr = np.full(2 * h + 1, dt)
    wtr[0] = wtr[-1] = 0.5 * dt
    d2 = (reference - prediction) ** 2
    r2 = reference**2
    num = np.array([wtr @ d2[i - h:i + h + 1] for i in idx])
    den = np.array([wtr @ r2[i - h:i + h + 1] for i in idx])
    defined = den > 1e-300
    sigma = np.full(idx.size, np.nan)
    sigma[defined] = num[defined] / den[defined]
    return DeviationMetric(times=times[idx], sigma=sigma, delta0=delta0,
                           defined=defined)


def _signed_values(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Correlator at signed index offsets, using g(-s) = conj(g(s))."""
    return np.where(offsets >= 0, values[np.abs(offsets)],
                    np.conj(values[np.abs(offsets)]))


def response_double_integral(O, W, times: np.ndarray,
                             decomp: SpectralDecomposition, state,
                             g_greater: np.ndarray,
                             g_lesser: np.ndarray | None = None
                             ) -> np.ndarray:
    """Exact second-order response from the unexpanded double integral.

    dW(t) = int int_0^t dt1 dt2 [<L_{O+(t1),O(t2)} W(t)> g>(t1 - t2)
    (+ <L_{O(t1),O+(t2)} W(t)> g<(t1 - t2) when g_lesser is given)], with
    the correlators tabulated on the same uniform grid as `times`.  Cost
    scales as (grid points)^2 x dim^3; intended for small systems.
    """
    times = np.asarray(times, float)
    n = times.size - 1
    dt = times[1] - times[0]
    if not np.allclose(np.diff(times), dt) or times[0] != 0.0:
        raise ContractViolation("times must be a uniform grid from 0")
    Om, Wm, rho = _mat(O), _mat(W), _state_matrix(state)
    _check_dims(Om, Wm, rho, decomp.vectors)
    U = decomp.vectors
    E = decomp.energies
    rho_t = U.conj().T @ rho @ U
    # stationarity lets operators be shifted to relative times
    comm = (E[:, None] - E[None, :]) * rho_t
    if np.abs(comm).max() > 1e-9 * max(1.0, np.abs(rho_t).max()):
        raise ContractViolation("state is not stationary under H; the "
                                "relative-time reduction does not apply")
    W_t = U.conj().T @ Wm @ U
    O_t = U.conj().T @ Om @ U

    th = (np.arange(n + 1)[None, :] > np.arange(n + 1)[:, None]).astype(float)
    th += 0.5 * np.eye(n + 1)
    off = np.arange(n + 1)[None, :] - np.arange(n + 1)[:, None]  # v - u

    def l_table(Aop):
        """<L_{A+(-u), A(-v)} W(0)> over the (u, v) grid."""
        ph = np.exp(-1j * np.outer(times, E))
        Au = ph[:, :, None] * Aop[None] * np.conj(ph)[:, None, :]
        Adu = np.conj(np.transpose(Au, (0, 2, 1)))
        T1 = np.einsum("uij,vji->uv", rho_t[None] @ Adu, W_t[None] @ Au)
        T2 = np.einsum("uik,vki->uv", (rho_t @ W_t)[None] @ Adu, Au)
        T3 = np.einsum("uij,vji->uv", Adu, Au @ (W_t @ rho_t))
        return T1 - th * T2 - (1.0 - th) * T3

    M = l_table(O_t) * _signed_values(np.asarray(g_greater), off)
    if g_lesser is not None:
        M = M + l_table(O_t.conj().T) * _signed_values(
            np.asarray(g_lesser), off)
    out = np.zeros(n + 1)
    for K in range(1, n + 1):
        w = np.full(K + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        out[K] = np.real(w @ M[:K + 1, :K + 1] @ w)
    return out


def chain_reference_setup(spec: LatticeSpec, beta_s: float,
                          n_target: float):
    """Grand-canonical chain state matching the two-time initial corner.

    Tunes mu on the single-particle problem (exact for free fermions) and
    returns (basis, decomposition, thermal state, mu) on the full Fock
    space with the tuned mu folded into the Hamiltonian.
    """
    _, _, mu = initial_equilibrium_gf(spec, beta_s, n_target=n_target)
    tuned = LatticeSpec(L=spec.L, h0=spec.h0, mu=mu, pbc=spec.pbc)
    basis = build_basis(spec.L)
    H = build_chain_hamiltonian(tuned, basis)
    decomp = diagonalize(H)
    rho = thermal_state(decomp, beta_s, basis)
    n_mean = float(np.trace(rho.matrix
                            @ total_number_operator(basis).toarray()).real)
    if abs(n_mean - n_target) > 1e-6 * spec.L:
        raise ContractViolation(f"grand-canonical filling {n_mean} misses "
                                f"target {n_target}")
    return basis, decomp, rho, mu


def chain_susceptibility_tables(spec: LatticeSpec, beta_s: float,
                                n_target: float, times: np.ndarray,
                                verify_points: int = 1) -> dict:
    """Imbalance-response tables for even-site density couplings."""
    basis, decomp, rho, _ = chain_reference_setup(spec, beta_s, n_target)
    A_ops = [site_number_operator(j, basis) for j in range(0, spec.L, 2)]
    W = imbalance_operator(basis)
    return susceptibility_tables(A_ops, W, times, decomp, rho,
                                 energy_scale=spec.h0,
                                 verify_points=verify_points,
                                 labels=("n_even", "Ne_minus_No"))


@dataclass(frozen=True)
class ToyBathSpec:
    """Few-mode quadratic fermionic bath for the exact-evolution check."""

    energies: tuple
    couplings: tuple
    occupations: tuple
    interaction: float | None = None


@dataclass(frozen=True)
class ToyVerifyReport:
    """Exact-versus-second-order comparison and its coupling scaling."""

    eta: float
    times: np.ndarray
    exact: np.ndarray
    predicted: np.ndarray
    residual: float
    residual_half: float
    scaling_ratio: float


def _annihilation(j: int, basis: ManyBodyBasis) -> np.ndarray:
    d = basis.dim
    mat = np.zeros((d, d), dtype=complex)
    index = {int(c): i for i, c in enumerate(basis.occupations)}
    for i, cfg in enumerate(basis.occupations):
        cfg = int(cfg)
        if (cfg >> j) & 1:
            sign = 1 - 2 * (bin(cfg & ((1 << j) - 1)).count("1") & 1)
            mat[index[cfg & ~(1 << j)], i] = sign
    return mat


def gdrt_toy_verify(eta: float = 0.4, t_final: float = 2.0,
                    dt: float = 0.01, h0: float = 1.0, beta_s: float = 1.0,
                    bath_spec: ToyBathSpec | None = None) -> ToyVerifyReport:
    """Exact system+bath unitary evolution versus the second-order response.

    Two chain sites exchange particles with a few-mode quadratic bath
    through eta (c+_1 xi + h.c.), xi = sum_a v_a b_a.  The exact deviation
    of the site imbalance is compared with the double-integral response
    built from the bath's exact two-point functions; the residual is the
    beyond-second-order remainder and is re-measured at eta/2 to report
    its coupling scaling (expected factor ~16).
    """
    bath_spec = bath_spec or ToyBathSpec(energies=(-1.0, 0.4, 1.3),
                                         couplings=(0.6, 0.5, 0.4),
                                         occupations=(1, 0, 0))
    if bath_spec.interaction is not None:
        raise ContractViolation("toy bath must stay quadratic: two-point "
                                "functions do not close otherwise")
    eps = np.asarray(bath_spec.energies, float)
    v = np.asarray(bath_spec.couplings, float)
    occ = np.asarray(bath_spec.occupations, float)
    n_modes = eps.size
    if not (v.size == n_modes and occ.size == n_modes):
        raise ContractViolation("bath arrays must share one length")
    if 2 ** (2 + n_modes) > 256:
        raise ContractViolation("total dimension exceeds 256")

    n = int(round(t_final / dt))
    times = dt * np.arange(n + 1)

    # system alone: 2-site hop, thermal initial state
    sbasis = build_basis(2)
    hop = _annihilation(0, sbasis).conj().T @ _annihilation(1, sbasis)
    H_s = -h0 * (hop + hop.conj().T)
    sdec = diagonalize(OperatorMatrix(sbasis, H_s, hermitian=True))
    rho_s = thermal_state(sdec, beta_s, sbasis).matrix
    W_s = np.diag([(int(c) & 1) - ((int(c) >> 1) & 1)
                   for c in sbasis.occupations]).astype(complex)
    O_s = _annihilation(1, sbasis)

    # full system (x) bath on a 2 + n_modes mode register
    gbasis = build_basis(2 + n_modes)
    dim = gbasis.dim
    cs = [_annihilation(j, gbasis) for j in range(2 + n_modes)]
    H0 = -h0 * (cs[0].conj().T @ cs[1] + cs[1].conj().T @ cs[0])
    for a in range(n_modes):
        H0 += eps[a] * (cs[2 + a].conj().T @ cs[2 + a])
    V = np.zeros_like(H0)
    for a in range(n_modes):
        V += v[a] * (cs[1].conj().T @ cs[2 + a]
                     + cs[2 + a].conj().T @ cs[1])
    bath_cfg = int(np.sum((occ > 0.5) * (1 << np.arange(n_modes))))
    rho_full = np.zeros((dim, dim), dtype=complex)
    for i, ci in enumerate(gbasis.occupations):
        for j, cj in enumerate(gbasis.occupations):
            if (int(ci) >> 2) == bath_cfg and (int(cj) >> 2) == bath_cfg:
                rho_full[i, j] = rho_s[int(ci) & 3, int(cj) & 3]
    W_full = np.diag([(int(c) & 1) - ((int(c) >> 1) & 1)
                      for c in gbasis.occupations]).astype(complex)

    def exact_deviation(coupling):
        w_ref = np.zeros(n + 1)
        w_cpl = np.zeros(n + 1)
        for series, Hm in ((w_ref, H0), (w_cpl, H0 + coupling * V)):
            E, Uv = np.linalg.eigh(Hm)
            r_t = Uv.conj().T @ rho_full @ Uv
            W_t = Uv.conj().T @ W_full @ Uv
            Ph = np.exp(-1j * np.outer(times, E))
            for k in range(n + 1):
                rk = (Ph[k][:, None] * r_t) * np.conj(Ph[k])[None, :]
                series[k] = np.trace(rk @ W_t).real
        return w_cpl - w_ref

    g_great = np.einsum("a,ak->k", v**2 * (1.0 - occ),
                        np.exp(-1j * np.outer(eps, times)))
    g_less = np.einsum("a,ak->k", v**2 * occ,
                       np.exp(1j * np.outer(eps, times)))
    base = response_double_integral(O_s, W_s, times, sdec, rho_s,
                                    g_great, g_less)

    exact = exact_deviation(eta)
    predicted = eta**2 * base
    residual = float(np.abs(exact - predicted).max())
    exact_h = exact_deviation(eta / 2.0)
    residual_half = float(np.abs(exact_h - (eta / 2.0) ** 2 * base).max())
    ratio = residual / residual_half if residual_half > 0 else np.inf
    return ToyVerifyReport(eta=eta, times=times, exact=exact,
                           predicted=predicted, residual=residual,
                           residual_half=residual_half,
                           scaling_ratio=float(ratio))
