"""Finite-N Dicke model: spectra, soft-mode extraction, quench scaling.

The model H = omega_c a^dag a + omega_a J_z + (2g/sqrt(N)) (a^dag + a) J_x
lives on |n> (x) |J, m> with N = 2J.  Parity (-1)^(n + m + J) commutes with
H and splits the problem into two sectors: the ground state is even, the
photon-addition vector a|0> is odd, and n_ph|0> is even again, which is
what the discrete spectrum assembly needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import lindblad
from .fock import ContractViolation, DensityMatrix, OperatorMatrix
from .spectroscopy import DsSpectrum

QUENCH_DIM_LIMIT = 2000
CLUSTER_TOL = 1e-3


class CutoffError(RuntimeError):
    """Boson cutoff failed its doubling certification."""


class IncompleteBasisError(RuntimeError):
    """Captured eigenpairs do not resolve the needed vectors."""


@dataclass(frozen=True)
class DickeSpec:
    """Model parameters; energies in units of omega_a unless stated."""

    omega_c: float
    omega_a: float
    g: float
    N: int
    n_max: int
    kappa: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("need at least one atom")
        if self.n_max < 4:
            raise ValueError("boson cutoff too small")

    @property
    def g_c(self) -> float:
        return 0.5 * np.sqrt(self.omega_a * self.omega_c)

    @property
    def dim(self) -> int:
        return (self.n_max + 1) * (self.N + 1)


@dataclass(frozen=True)
class ProductBasis:
    """Boson (x) collective-spin product basis; index = n (N+1) + (m+J)."""

    n_max: int
    N: int

    @property
    def dim(self) -> int:
        return (self.n_max + 1) * (self.N + 1)


@dataclass
class DickeBundle:
    """Sparse operators of one Dicke realization."""

    spec: DickeSpec
    basis: ProductBasis
    H: sp.csr_matrix
    a: sp.csr_matrix
    n_ph: sp.csr_matrix
    Jx: sp.csr_matrix
    Jz: sp.csr_matrix
    parity: np.ndarray      # diagonal of Pi, entries +-1


@dataclass(frozen=True)
class SoftModeExtract:
    """Soft-mode data of one near-critical spectrum."""

    omega_s: float
    N_s_tilde: float
    N_0_tilde: float
    residual: float

    def __post_init__(self):
        if self.omega_s <= 0:
            raise ValueError("soft-mode frequency must be positive")
        if self.N_s_tilde < 0 or self.N_0_tilde < 0:
            raise ValueError("spectral weights must be non-negative")


@dataclass
class ScalingFitResult:
    """Critical exponents and finite-size parameters of one g-scan."""

    nu1: tuple
    nu2: tuple
    nu3: tuple
    eta_exp: tuple
    finite_size: dict = field(default_factory=dict)
    fit_ranges: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)


def build_dicke(spec: DickeSpec) -> DickeBundle:
    """Assemble sparse H, a, n_ph, Jx, Jz and the parity diagonal."""
    nb = spec.n_max + 1
    ns = spec.N + 1
    J = spec.N / 2.0
    m = np.arange(ns) - J
    adiag = np.sqrt(np.arange(1, nb))
    a_b = sp.diags(adiag, 1)
    n_b = sp.diags(np.arange(nb, dtype=float))
    jp = np.sqrt(J * (J + 1) - m[:-1] * (m[:-1] + 1.0))
    Jx_s = 0.5 * (sp.diags(jp, -1) + sp.diags(jp, 1))
    Jz_s = sp.diags(m)
    eye_b = sp.identity(nb)
    eye_s = sp.identity(ns)
    a = sp.kron(a_b, eye_s, format="csr")
    n_ph = sp.kron(n_b, eye_s, format="csr")
    Jx = sp.kron(eye_b, Jx_s, format="csr")
    Jz = sp.kron(eye_b, Jz_s, format="csr")
    H = (spec.omega_c * n_ph + spec.omega_a * Jz
         + (2.0 * spec.g / np.sqrt(spec.N)) * ((a + a.T) @ Jx)).tocsr()
    n_idx = np.repeat(np.arange(nb), ns)
    k_idx = np.tile(np.arange(ns), nb)
    parity = np.where((n_idx + k_idx) % 2 == 0, 1.0, -1.0)
    rows, cols = H.nonzero()
    if np.any(parity[rows] != parity[cols]):
        raise ContractViolation("Hamiltonian does not conserve parity")
    return DickeBundle(spec=spec, basis=ProductBasis(spec.n_max, spec.N),
                       H=H, a=a, n_ph=n_ph, Jx=Jx, Jz=Jz, parity=parity)


def low_spectrum(H: sp.spmatrix, k: int, parity: np.ndarray | None = None,
                 sector: float | None = None):
    """k lowest eigenpairs (optionally restricted to one parity sector).

    Returns (energies ascending, columns) in the full-space indexing.
    Residual and orthonormality are verified to 1e-8.
    """
    d = H.shape[0]
    if parity is not None and sector is not None:
        idx = np.flatnonzero(parity == sector)
        Hs = H[np.ix_(idx, idx)].tocsr()
    else:
        idx = None
        Hs = H.tocsr()
    ds = Hs.shape[0]
    if k >= ds:
        raise ValueError(f"k={k} too large for dimension {ds}")
    if ds <= 600:
        w, v = np.linalg.eigh(Hs.toarray())
        w, v = w[:k], v[:, :k]
    else:
        w, v = spla.eigsh(Hs, k=k, which="SA")
        order = np.argsort(w)
        w, v = w[order], v[:, order]
    scale = abs(Hs).sum(axis=1).max()
    res = np.linalg.norm(Hs @ v - v * w, axis=0)
    if res.max() > 1e-8 * scale:
        raise RuntimeError(f"eigensolver residual {res.max():.3e} "
                           f"exceeds 1e-8 * {scale:.3e}")
    ortho = np.abs(v.T @ v - np.eye(k)).max()
    if ortho > 1e-8:
        raise RuntimeError(f"eigenvectors not orthonormal: {ortho:.3e}")
    if idx is not None:
        full = np.zeros((d, k))
        full[idx] = v
        v = full
    return w, v


def lehmann_ds(bundle: DickeBundle, k_even: int = 24, k_odd: int = 24,
               deficit_tol: float = 1e-6) -> DsSpectrum:
    """Discrete photon-probe spectrum from low-lying eigenpairs.

    The kernel chi(t) = 2<a^dag n_ph(t) a> - <{a^dag a, n_ph(t)}> on the
    ground state decomposes into delta peaks: 2 conj(c_m) c_n (n_ph)_{mn}
    at omega = E_m - E_n over odd-sector pairs, and -|w_m|^2 at
    omega = +-(E_m - E_0) over even-sector states, with c = <m|a|0> and
    w_m = <m|n_ph|0>.
    """
    spec = bundle.spec
    half = bundle.basis.dim // 2
    k_cap = min(max(8 * k_even, 8 * k_odd, 1024), half - 2)
    while True:
        we, ve = low_spectrum(bundle.H, k_even, bundle.parity, +1.0)
        wo, vo = low_spectrum(bundle.H, k_odd, bundle.parity, -1.0)
        if we[0] > wo[0]:
            raise ContractViolation("ground state is not even-parity")
        g0 = ve[:, 0]
        E0 = we[0]
        u = bundle.a @ g0                  # odd sector
        c = vo.T @ u
        deficit_u = (u @ u - c @ c) / max(u @ u, 1e-30)
        wvec = bundle.n_ph @ g0            # even sector
        wm = ve.T @ wvec
        deficit_w = (wvec @ wvec - wm @ wm) / max(wvec @ wvec, 1e-30)
        if deficit_u <= deficit_tol and deficit_w <= deficit_tol:
            break
        if max(k_even, k_odd) >= k_cap:
            raise IncompleteBasisError(
                f"projection deficits {deficit_u:.2e} (a|0>), "
                f"{deficit_w:.2e} (n_ph|0>) exceed {deficit_tol:.0e} "
                f"at k={max(k_even, k_odd)}")
        if deficit_u > deficit_tol:
            k_odd = min(2 * k_odd, k_cap)
        if deficit_w > deficit_tol:
            k_even = min(2 * k_even, k_cap)

    nmn = vo.T @ (bundle.n_ph @ vo)
    acc = {}

    def add(omega, weight):
        key = round(omega / spec.omega_a, 9)
        acc[key] = acc.get(key, 0.0) + weight

    for mi in range(len(wo)):
        for ni in range(len(wo)):
            wgt = 2.0 * c[mi] * c[ni] * nmn[mi, ni]
            if abs(wgt) > 1e-14:
                add(wo[mi] - wo[ni], wgt)
    for mi in range(len(we)):
        wgt = wm[mi] ** 2
        if wgt > 1e-14:
            add(we[mi] - E0, -wgt)
            add(E0 - we[mi], -wgt)

    peaks = sorted((k * spec.omega_a, w, 0.0) for k, w in acc.items()
                   if abs(w) > 1e-12)
    grid_max = max((abs(p) for p, _, _ in peaks), default=spec.omega_a) * 1.5
    grid = np.linspace(-grid_max, grid_max, 801)
    out = DsSpectrum(frequencies=grid, values=np.zeros(len(grid), complex),
                     peaks=peaks, broadening=0.0)
    # chi(0) = 2<a^dag n_ph a> - 2<n_ph^2> = -2<n_ph> on the ground state
    total = sum(w for _, w, _ in peaks)
    direct = 2.0 * (u @ (bundle.n_ph @ u)) - 2.0 * (wvec @ wvec)
    if abs(total - direct) > 1e-4 * max(1.0, abs(direct)):
        raise ContractViolation(
            f"sum rule violated: {total:.6e} vs {direct:.6e}")
    return out


def extract_soft_mode(spectrum: DsSpectrum, omega_a: float = 1.0,
                      tol: float = CLUSTER_TOL) -> SoftModeExtract:
    """Cluster delta peaks into the zero-frequency and soft-mode weights."""
    pts = sorted((p, w) for p, w, _ in spectrum.peaks)
    if not pts:
        raise ValueError("empty spectrum")
    clusters = []
    for p, w in pts:
        if clusters and p - clusters[-1][-1][0] < tol * omega_a:
            clusters[-1].append((p, w))
        else:
            clusters.append([(p, w)])
    summary = []
    for cl in clusters:
        wsum = sum(w for _, w in cl)
        pos = sum(p * abs(w) for p, w in cl) / max(
            sum(abs(w) for _, w in cl), 1e-30)
        summary.append((pos, wsum))
    n0 = sum(w for p, w in summary if abs(p) < tol * omega_a)
    positive = [(p, w) for p, w in summary if p >= tol * omega_a]
    if not positive:
        raise ValueError("no positive-frequency cluster found")
    soft = max(positive, key=lambda pw: abs(pw[1]))
    residual = sum(abs(w) for p, w in positive if p != soft[0])
    return SoftModeExtract(omega_s=soft[0], N_s_tilde=-soft[1],
                           N_0_tilde=n0, residual=2.0 * residual)


def quench_prediction(extract: SoftModeExtract, t: np.ndarray,
                      kappa: float | None = None) -> np.ndarray:
    """Early-time photon growth from the soft-mode weights.

    Without kappa this is the bare linear-plus-cubic law
    (N0 - 2 Ns) t + (Ns / (3 omega_s)) (omega_s t)^3; a photon-loss rate
    kappa scales it by kappa / 2 (the dissipator expectation carries half
    the spectrum kernel).
    """
    t = np.asarray(t, dtype=float)
    if extract.omega_s * t.max() > 1.5:
        raise ValueError("grid extends beyond the expansion's validity")
    ws = extract.omega_s
    out = (extract.N_0_tilde - 2.0 * extract.N_s_tilde) * t \
        + (extract.N_s_tilde / (3.0 * ws)) * (ws * t) ** 3
    if kappa is not None:
        out = 0.5 * kappa * out
    return out


def quench_response(ds: DsSpectrum, t: np.ndarray,
                    kappa: float | None = None) -> np.ndarray:
    """First-order photon growth from the full delta-peak spectrum.

    Integrates every peak of chi(t): a weight w at omega contributes
    w sin(omega t) / omega (w t at omega = 0).  Unlike quench_prediction
    this keeps the high-frequency polariton branch, whose weight dominates
    the linear term at small N.  Scaling by kappa follows the same
    kappa / 2 convention.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for pos, w, _ in ds.peaks:
        out += w * t if abs(pos) < 1e-12 else w * np.sin(pos * t) / pos
    if kappa is not None:
        out = 0.5 * kappa * out
    return out


def lindblad_quench(spec: DickeSpec, t_end: float, dt: float,
                    sample_stride: int = 1) -> lindblad.TrajectoryRecord:
    """Photon-loss quench from the closed-system ground state."""
    if spec.dim > QUENCH_DIM_LIMIT:
        raise ValueError(f"dimension {spec.dim} exceeds the full "
                         f"density-matrix cap {QUENCH_DIM_LIMIT}")
    bundle = build_dicke(spec)
    w, v = low_spectrum(bundle.H, 1, bundle.parity, +1.0)
    g0 = v[:, 0]
    rho0 = DensityMatrix(bundle.basis, np.outer(g0, g0).astype(complex))
    H = OperatorMatrix(bundle.basis, bundle.H, hermitian=True)
    jumps = lindblad.JumpOperatorSet([OperatorMatrix(bundle.basis, bundle.a)])
    nph = OperatorMatrix(bundle.basis, bundle.n_ph, hermitian=True)
    sched = lindblad.RateSchedule(gamma=spec.kappa)
    return lindblad.evolve(rho0, H, jumps, sched, t_end, dt,
                           observables={"n_ph": nph},
                           sample_stride=sample_stride)


def fit_power_law(N: np.ndarray, values: np.ndarray):
    """log-log linear fit; returns (exponent, stderr)."""
    N = np.asarray(N, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(N) < 5:
        raise ValueError("need at least 5 points")
    if np.any(values <= 0) or np.any(N <= 0):
        raise ValueError("power-law fit requires positive data")
    x, y = np.log(N), np.log(values)
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    dof = len(x) - 2
    s2 = (res[0] / dof) if (len(res) and dof > 0) else 0.0
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[0]), float(np.sqrt(max(cov[0, 0], 0.0)))


def fit_finite_size(N: np.ndarray, values: np.ndarray):
    """Fit A = A0 (1 - exp(-(N/ell_c)^beta)).

    Returns (A0, ell_c, beta, flag) where flag marks an under-determined
    fit (no visible saturation in the sampled range).
    """
    N = np.asarray(N, dtype=float)
    values = np.asarray(values, dtype=float)

    def model(n, a0, lc, beta):
        return a0 * (1.0 - np.exp(-(n / lc) ** beta))

    p0 = (values.max() * 1.2, np.median(N), 0.7)
    popt, pcov = scipy.optimize.curve_fit(
        model, N, values, p0=p0,
        bounds=([0.0, 1e-3, 0.05], [np.inf, 1e9, 5.0]), maxfev=20000)
    a0, lc, beta = popt
    flag = lc > N.max() or not np.all(np.isfinite(pcov))
    return float(a0), float(lc), float(beta), bool(flag)


def converged_cutoff(omega_a: float, omega_c: float, g: float, N: int,
                     n_start: int = 16, rel_tol: float = 1e-4,
                     k_even: int = 24, k_odd: int = 24):
    """Adaptive boson cutoff with doubling certification.

    Chooses n_max = max(16, ceil(8 <n_ph> + 10)) from a pilot ground state,
    then certifies that doubling n_max moves E0, omega_s, N0, Ns by less
    than rel_tol.  Returns (bundle, extract, n_max).
    """
    def solve(n_max):
        spec = DickeSpec(omega_c=omega_c, omega_a=omega_a, g=g, N=N,
                         n_max=n_max)
        bundle = build_dicke(spec)
        ds = lehmann_ds(bundle, k_even=k_even, k_odd=k_odd)
        ext = extract_soft_mode(ds, omega_a=omega_a)
        we, ve = low_spectrum(bundle.H, 1, bundle.parity, +1.0)
        nph = float(ve[:, 0] @ (bundle.n_ph @ ve[:, 0]))
        return bundle, ext, we[0], nph

    _, _, _, nph = solve(n_start)
    n_max = max(16, int(np.ceil(8.0 * nph + 10.0)))
    bundle, ext, e0, nph = solve(n_max)
    # escalate by doubling until the doubled cutoff confirms convergence
    while True:
        bundle2, ext2, e02, _ = solve(2 * n_max)
        checks = [
            (e0, e02, max(abs(e02), 1.0)),
            (ext.omega_s, ext2.omega_s, abs(ext2.omega_s)),
            (ext.N_s_tilde, ext2.N_s_tilde, abs(ext2.N_s_tilde)),
            (ext.N_0_tilde, ext2.N_0_tilde, abs(ext2.N_0_tilde)),
        ]
        if all(abs(a - b) <= rel_tol * max(scale, 1e-30)
               for a, b, scale in checks):
            return bundle, ext, n_max
        if 2 * n_max > 512:
            raise CutoffError(
                f"cutoff not certified up to n_max={2 * n_max}")
        n_max *= 2
        bundle, ext, e0 = bundle2, ext2, e02


def scan_criticality(N_list, g_over_gc: float, omega_a: float = 1.0,
                     omega_c: float | None = None):
    """Soft-mode data across system sizes at fixed g/g_c."""
    if omega_c is None:
        omega_c = 2.0 * omega_a
    g = g_over_gc * 0.5 * np.sqrt(omega_a * omega_c)
    rows = []
    for N in N_list:
        bundle, ext, n_max = converged_cutoff(omega_a, omega_c, g, N)
        rows.append({"N": N, "g_over_gc": g_over_gc,
                     "omega_s": ext.omega_s, "N0_tilde": ext.N_0_tilde,
                     "Ns_tilde": ext.N_s_tilde, "residual": ext.residual,
                     "n_max_used": n_max})
    return rows


def fit_scan(rows) -> ScalingFitResult:
    """Exponents nu1..nu3 and eta from one N-scan."""
    N = np.array([r["N"] for r in rows], dtype=float)
    ws = np.array([r["omega_s"] for r in rows])
    n0 = np.array([r["N0_tilde"] for r in rows])
    ns = np.array([r["Ns_tilde"] for r in rows])
    nu1 = fit_power_law(N, 1.0 / ws)
    nu2 = fit_power_law(N, n0)
    nu3 = fit_power_law(N, ns)
    eta = fit_power_law(N, ns / ws)
    return ScalingFitResult(
        nu1=nu1, nu2=nu2, nu3=nu3, eta_exp=eta,
        fit_ranges={"N": (float(N.min()), float(N.max()))},
        notes={"eta_consistency": eta[0] - (nu1[0] + nu3[0])})
