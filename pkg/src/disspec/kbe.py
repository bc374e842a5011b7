"""Two-time Green's function dynamics of a chain with dissipative dots.

Evolves the greater/lesser Green's functions of a tight-binding chain whose
even sites couple through density-density vertices to independent random
fermionic dots with a semicircular spectral density (the large-M limit makes
the bath correlator deterministic and the backaction negligible).  The
memory integrals render the dynamics non-Markovian; this module supplies
the bath propagators and correlator, the equilibrium corner, the
second-order self-energies, and a predictor-corrector stepper for the
two-time integro-differential equations.

Conventions: G^>_{ij}(t1,t2) = -i<c_i(t1) c+_j(t2)>, G^<_{ij}(t1,t2) =
+i<c+_j(t2) c_i(t1)>, retarded/advanced kernels assembled from G^> - G^<.
The equal-time (Hartree-like) part of the self-energy is folded into the
single-particle Hamiltonian at each time slice instead of being discretized
as a delta spike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .fock import ContractViolation, LatticeSpec
from .lindblad import TrajectoryRecord

HARTREE_MODES = ("lesser", "symmetric", "retarded", "none")
QUAD_TOL = 1e-9


class SequencingError(RuntimeError):
    """Two-time data requested beyond the filled part of the grid."""


class InstabilityError(RuntimeError):
    """A symmetry or density invariant broke during time stepping."""


@dataclass(frozen=True)
class TwoTimeGrid:
    """Uniform grid for two-time objects; covers [0, t_max]^2."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 1:
            raise ValueError("dt and n_steps must be positive")

    @property
    def t_max(self) -> float:
        return self.dt * self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


def semicircle_density(eps, J: float):
    """Single-particle spectral density sqrt(4J^2 - eps^2) / (2 pi J^2)."""
    eps = np.asarray(eps, dtype=float)
    out = np.zeros_like(eps)
    band = np.abs(eps) < 2.0 * J
    out[band] = np.sqrt(4.0 * J**2 - eps[band] ** 2) / (2.0 * np.pi * J**2)
    return out


@dataclass(frozen=True)
class DotPropagators:
    """Bath single-particle G^>_psi, G^<_psi tabulated on t >= 0."""

    J: float
    T_E: float
    grid: TwoTimeGrid
    greater: np.ndarray
    lesser: np.ndarray


def syk2_propagators(J: float, grid: TwoTimeGrid,
                     T_E: float = 0.0) -> DotPropagators:
    """Half-filled dot propagators by adaptive quadrature over the band.

    G^>(t) = -i int_0^{2J} rho(e) e^{-iet} de and
    G^<(t) = +i int_{-2J}^0 rho(e) e^{-iet} de at zero bath temperature.
    """
    if J <= 0:
        raise ValueError("J must be positive")
    if T_E != 0.0:
        raise ValueError("only the zero-temperature bath is implemented")

    def rho(e):
        return np.sqrt(max(4.0 * J**2 - e**2, 0.0)) / (2.0 * np.pi * J**2)

    times = grid.times
    greater = np.empty(times.size, dtype=complex)
    lesser = np.empty(times.size, dtype=complex)
    for k, t in enumerate(times):
        re, re_err = quad(rho, 0.0, 2.0 * J, weight="cos", wvar=t,
                          epsabs=QUAD_TOL, epsrel=0.0, limit=400)
        im, im_err = quad(rho, 0.0, 2.0 * J, weight="sin", wvar=t,
                          epsabs=QUAD_TOL, epsrel=0.0, limit=400)
        if max(re_err, im_err) > 100.0 * QUAD_TOL:
            raise RuntimeError(f"propagator quadrature did not converge at "
                               f"t={t:.6g}: error {max(re_err, im_err):.2e}")
        # int_0^{2J} rho e^{-iet} = re - i im; the lesser branch maps e -> -e
        greater[k] = -1j * (re - 1j * im)
        lesser[k] = 1j * (re + 1j * im)
    return DotPropagators(J=J, T_E=T_E, grid=grid, greater=greater,
                          lesser=lesser)


@dataclass(frozen=True)
class BathCorrelator:
    """Particle-hole bath correlator g(t1 - t2), tabulated for t1 >= t2.

    g(s) = V^2 G^>_psi(s) G^<_psi(-s); negative arguments follow from
    g(-s) = conj(g(s)).  g^>(t1,t2) = g(t1,t2), g^<(t1,t2) = g(t2,t1).
    """

    V: float
    J: float
    T_E: float
    grid: TwoTimeGrid
    values: np.ndarray

    def __post_init__(self):
        g0 = self.values[0]
        if abs(g0.imag) > 1e-12 or g0.real < -1e-12:
            raise ContractViolation(f"g(0) = {g0:.3e} is not real non-negative")

    def signed(self, offsets: np.ndarray) -> np.ndarray:
        """g evaluated at index offsets (t1 - t2)/dt, any sign."""
        offsets = np.atleast_1d(offsets)
        out = np.where(offsets >= 0, self.values[np.abs(offsets)],
                       np.conj(self.values[np.abs(offsets)]))
        return out

    def greater_row(self, i1: int, i2: np.ndarray) -> np.ndarray:
        return self.signed(i1 - np.asarray(i2))

    def lesser_row(self, i1: int, i2: np.ndarray) -> np.ndarray:
        return self.signed(np.asarray(i2) - i1)


def bath_correlator(V: float, props: DotPropagators) -> BathCorrelator:
    """Assemble g(s) = V^2 G^>_psi(s) G^<_psi(-s) on the grid.

    G^<_psi(-s) = -conj(G^<_psi(s)), so the tabulated non-negative branch
    suffices.
    """
    if V < 0:
        raise ValueError("V must be non-negative")
    values = -V**2 * props.greater * np.conj(props.lesser)
    if V == 0.0:
        values = np.zeros_like(values)
    return BathCorrelator(V=V, J=props.J, T_E=props.T_E, grid=props.grid,
                          values=values)


@dataclass
class TwoTimeGF:
    """Greater/lesser site Green's functions on the two-time square.

    The square [0..filled]^2 holds valid data; the two triangles are related
    by G^X(t1,t2) = -G^X(t2,t1)^dagger and both are stored explicitly.
    """

    grid: TwoTimeGrid
    L: int
    greater: np.ndarray
    lesser: np.ndarray
    filled: int = 0

    @classmethod
    def allocate(cls, grid: TwoTimeGrid, L: int) -> "TwoTimeGF":
        n = grid.n_steps + 1
        return cls(grid=grid, L=L,
                   greater=np.zeros((n, n, L, L), dtype=complex),
                   lesser=np.zeros((n, n, L, L), dtype=complex))

    def density(self, k: int) -> np.ndarray:
        """Per-site densities n_i(t_k) = -i G^<_{ii}(t_k, t_k)."""
        if k > self.filled:
            raise SequencingError(f"time index {k} beyond filled {self.filled}")
        diag = -1j * np.diagonal(self.lesser[k, k])
        if np.abs(diag.imag).max() > 1e-8:
            raise ContractViolation(
                f"density imaginary residue {np.abs(diag.imag).max():.3e}")
        return diag.real.copy()

    def validate(self, k: int, tol: float = 1e-6) -> None:
        """Conjugation, equal-time jump, and density-range invariants at t_k."""
        if k > self.filled:
            raise SequencingError(f"time index {k} beyond filled {self.filled}")
        eye = np.eye(self.L)
        jump = np.abs(self.greater[k, k] - self.lesser[k, k] + 1j * eye).max()
        if jump > tol:
            raise InstabilityError(f"equal-time jump residue {jump:.3e} at "
                                   f"index {k}")
        for arr in (self.greater, self.lesser):
            mirror = -np.conj(arr[k, :k + 1].transpose(0, 2, 1))
            sym = np.abs(arr[:k + 1, k] - mirror).max()
            if sym > tol:
                raise InstabilityError(f"conjugation symmetry residue "
                                       f"{sym:.3e} at index {k}")
        n = self.density(k)
        if n.min() < -1e-4 or n.max() > 1.0 + 1e-4:
            raise InstabilityError(f"density out of range at index {k}: "
                                   f"[{n.min():.3e}, {n.max():.3e}]")


@dataclass(frozen=True)
class SelfEnergySlice:
    """Diagonal (site-space) self-energy values at one (t1, t2) pair."""

    i1: int
    i2: int
    greater: np.ndarray
    lesser: np.ndarray
    hartree: np.ndarray | None


def single_particle_hamiltonian(spec: LatticeSpec) -> np.ndarray:
    """L x L hopping matrix -h0 (nearest neighbour) - mu on the diagonal."""
    L = spec.L
    h = np.zeros((L, L))
    for i in range(L - 1):
        h[i, i + 1] = h[i + 1, i] = -spec.h0
    if spec.pbc and L > 2:
        h[0, L - 1] += -spec.h0
        h[L - 1, 0] += -spec.h0
    h -= spec.mu * np.eye(L)
    return h


def _fermi(eps: np.ndarray, beta: float, mu: float) -> np.ndarray:
    if np.isinf(beta):
        return (eps < mu).astype(float) + 0.5 * (eps == mu)
    x = np.clip(beta * (eps - mu), -700.0, 700.0)
    return 1.0 / (1.0 + np.exp(x))


def initial_equilibrium_gf(spec: LatticeSpec, beta_s: float,
                           n_target: float | None = None,
                           mu: float | None = None):
    """Equilibrium corner G^>(0,0), G^<(0,0) of the isolated chain.

    Either a chemical potential is given directly or it is tuned by
    bisection until the mean particle number hits n_target.  Returns
    (g_greater, g_lesser, mu).
    """
    kin = single_particle_hamiltonian(
        LatticeSpec(L=spec.L, h0=spec.h0, mu=0.0, pbc=spec.pbc))
    eps, phi = np.linalg.eigh(kin)
    if n_target is not None:
        if not 0.0 < n_target < spec.L:
            raise ValueError(f"filling target {n_target} outside (0, {spec.L})")
        lo, hi = eps.min() - 20.0, eps.max() + 20.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _fermi(eps, beta_s, mid).sum() < n_target:
                lo = mid
            else:
                hi = mid
        mu = 0.5 * (lo + hi)
        if abs(_fermi(eps, beta_s, mu).sum() - n_target) > 1e-6:
            raise ValueError(f"filling target {n_target} unreachable at "
                             f"beta={beta_s}")
    elif mu is None:
        raise ValueError("either mu or n_target must be given")
    f = _fermi(eps, beta_s, mu)
    g_lesser = 1j * (phi * f) @ phi.T
    g_greater = g_lesser - 1j * np.eye(spec.L)
    return g_greater.astype(complex), g_lesser.astype(complex), float(mu)


def _trap_w(n: int, dt: float) -> np.ndarray:
    """Trapezoid weights for n+1 samples spanning [0, n dt]."""
    if n == 0:
        return np.zeros(1)
    w = np.full(n + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _even_mask(L: int) -> np.ndarray:
    return (np.arange(L) % 2 == 0).astype(float)


def _hartree_potential(i1: int, bath: BathCorrelator, dens: np.ndarray,
                       mode: str) -> np.ndarray:
    """Equal-time effective potential on even sites at time index i1.

    dens holds n_i(tau) for tau indices 0..i1.  Modes: "lesser" uses
    2 int Im(g) n dtau (the Hartree reading of the delta term with the
    lesser function), "symmetric" subtracts the half-filling background,
    "retarded" keeps only the density-independent theta(0) = 1/2 part of
    the retarded assembly, "none" drops the term.
    """
    L = dens.shape[1]
    mask = _even_mask(L)
    if mode == "none" or i1 == 0:
        return np.zeros(L)
    img = np.imag(bath.greater_row(i1, np.arange(i1 + 1)))
    w = _trap_w(i1, bath.grid.dt)
    a = np.sum(w * img)
    if mode == "retarded":
        return -a * mask
    v = 2.0 * ((w * img) @ dens[:i1 + 1])
    if mode == "symmetric":
        v = v - a
    elif mode != "lesser":
        raise ValueError(f"unknown hartree mode {mode!r}")
    return v * mask


def self_energy(gf: TwoTimeGF, bath: BathCorrelator, i1: int, i2: int,
                hartree: str = "lesser") -> SelfEnergySlice:
    """Diagonal even-site self-energies Sigma^>/<(t_i1, t_i2).

    The delta(t1 - t2) memory-of-the-density term is reported separately as
    an effective potential (only at i1 == i2), matching how the stepper
    applies it.
    """
    if max(i1, i2) > gf.filled:
        raise SequencingError(f"({i1}, {i2}) beyond filled {gf.filled}")
    mask = _even_mask(gf.L)
    gg = complex(bath.greater_row(i1, np.array([i2]))[0])
    gl = complex(bath.lesser_row(i1, np.array([i2]))[0])
    sg = gg * np.diagonal(gf.greater[i1, i2]) * mask
    sl = gl * np.diagonal(gf.lesser[i1, i2]) * mask
    pot = None
    if i1 == i2:
        dens = np.array([gf.density(k) for k in range(i1 + 1)])
        pot = _hartree_potential(i1, bath, dens, hartree)
    return SelfEnergySlice(i1=i1, i2=i2, greater=sg, lesser=sl, hartree=pot)


def _triangular_weights(n: int, dt: float) -> np.ndarray:
    """W[t, s] = trapezoid weight of sample s in the integral over [0, t]."""
    w = np.tril(np.full((n + 1, n + 1), dt))
    idx = np.arange(n + 1)
    w[idx, idx] = 0.5 * dt
    w[1:, 0] = 0.5 * dt
    w[0, 0] = 0.0
    return w


def kbe_evolve(initial, spec: LatticeSpec, bath: BathCorrelator,
               grid: TwoTimeGrid, hartree: str = "lesser",
               check_interval: int = 25) -> TwoTimeGF:
    """Predictor-corrector integration of the two-time equations of motion.

    initial: (g_greater, g_lesser) corner matrices at t = 0.  Advances row
    by row: i dG/dt1 = H_eff G + Sigma^R * G + Sigma^X * G^A with the
    memory convolutions by trapezoid, one corrector pass per step, and the
    time-diagonal advanced along (t, t) with the combined equation.
    """
    if hartree not in HARTREE_MODES:
        raise ValueError(f"unknown hartree mode {hartree!r}")
    if grid.dt * (4.0 * spec.h0 + 2.0 * bath.J) >= 0.5:
        raise ValueError("dt (4 h0 + 2 J) must stay below 0.5 for stability")
    if bath.grid.dt != grid.dt or bath.grid.n_steps < grid.n_steps:
        raise ContractViolation("bath correlator grid does not cover the "
                                "evolution grid")
    L = spec.L
    g0_great, g0_less = initial
    if np.abs(g0_great - g0_less + 1j * np.eye(L)).max() > 1e-8:
        raise ContractViolation("initial corner violates the equal-time jump")

    h = single_particle_hamiltonian(spec)
    mask = _even_mask(L)
    evens = np.flatnonzero(mask)
    n = grid.n_steps
    dt = grid.dt

    gf = TwoTimeGF.allocate(grid, L)
    Gg, Gl = gf.greater, gf.lesser
    ne = evens.size
    # even columns of (G^< - G^>)(t, s), laid out (even-col, t, s, site);
    # the advanced-kernel convolution contracts over its contiguous s axis
    Gce = np.zeros((ne, n + 1, n + 1, L), dtype=complex)
    # even-row copies of G^>/< in (site, t1, t2, site') layout; the
    # retarded-kernel contraction then runs as one batched matmul over the
    # full zero-padded width (unfilled entries are exact zeros)
    Gge = np.zeros((ne, n + 1, n + 1, L), dtype=complex)
    Gle = np.zeros((ne, n + 1, n + 1, L), dtype=complex)
    Gge_flat = Gge.reshape(ne, n + 1, (n + 1) * L)
    Gle_flat = Gle.reshape(ne, n + 1, (n + 1) * L)
    Sg = np.zeros((n + 1, n + 1, L), dtype=complex)
    Sl = np.zeros((n + 1, n + 1, L), dtype=complex)
    VH = np.zeros((n + 1, L))
    dens = np.zeros((n + 1, L))
    Wtri = _triangular_weights(n, dt)

    Gg[0, 0] = g0_great
    Gl[0, 0] = g0_less
    Gce[:, 0, 0] = (g0_less - g0_great)[:, ::2].T
    Gge[:, 0, 0] = g0_great[::2]
    Gle[:, 0, 0] = g0_less[::2]
    g00 = complex(bath.signed(np.array([0]))[0])
    Sg[0, 0] = g00 * np.diagonal(g0_great) * mask
    Sl[0, 0] = np.conj(g00) * np.diagonal(g0_less) * mask
    dens[0] = (-1j * np.diagonal(g0_less)).real

    def i2_pair(sg_row, sl_row, T):
        """Advanced-kernel memory integrals for both components.

        out[t2] = int_0^{t2} Sigma^X(t1, s) (G^< - G^>)(s, t2) ds, reduced
        to the stored (t2, s) triangle through (G^< - G^>)(s, t2) =
        -conj transpose of (G^< - G^>)(t2, s).
        """
        out = np.zeros((2, T + 1, ne, L), dtype=complex)
        sce = np.conj(np.stack([sg_row[:T + 1, ::2], sl_row[:T + 1, ::2]]))
        for t in range(1, T + 1):
            a = (Wtri[t, :t + 1, None] * sce[:, :t + 1]) \
                .transpose(0, 2, 1)[:, :, None, :]
            out[:, t] = -np.conj(np.matmul(a, Gce[:, t, :t + 1])[:, :, 0])
        return out[0], out[1]

    def row_rhs(i1, row_g, row_l, sg_row, sl_row, vh, T, filled):
        """d/dt1 of G^>/< (i1, t2) for t2 = 0..T (times -i already applied)."""
        heff = h + np.diag(vh)
        w1 = _trap_w(i1, dt)
        wds = w1[:, None] * (sg_row - sl_row)
        s_stored = min(i1, filled)
        i2g, i2l = i2_pair(sg_row, sl_row, T)
        out = []
        wde = np.ascontiguousarray(wds[:s_stored + 1, ::2].T)[:, None, :]
        for row_x, Ge_flat, i2x in ((row_g, Gge_flat, i2g),
                                    (row_l, Gle_flat, i2l)):
            term = np.matmul(heff, row_x)
            i1_part = np.zeros_like(term)
            conv = np.matmul(wde, Ge_flat[:, :s_stored + 1])
            i1_part[:, ::2] = conv.reshape(ne, n + 1, L)[:, :T + 1] \
                .transpose(1, 0, 2)
            if i1 > filled:
                i1_part[:, ::2] += wds[i1, ::2][None, :, None] \
                    * row_x[:, ::2]
            i1_part[:, ::2] += i2x
            out.append(-1j * (term + i1_part))
        return out

    def diag_rhs(k, gkk_g, gkk_l, col_g, col_l, sg_row, sl_row, vh):
        """d/dt of G^>/< (t, t) along the diagonal (times -i applied)."""
        heff = h + np.diag(vh)
        w1 = _trap_w(k, dt)
        dsig = sg_row[:k + 1] - sl_row[:k + 1]
        ga_col = col_l - col_g
        out = []
        for gkk, colx, sx in ((gkk_g, col_g, sg_row), (gkk_l, col_l, sl_row)):
            k1 = np.einsum("s,sa,sab->ab", w1, dsig, colx)
            k2 = np.einsum("s,sa,sab->ab", w1, sx[:k + 1], ga_col)
            kk = k1 + k2
            comm = heff @ gkk - gkk @ heff
            out.append(-1j * comm - 1j * (kk + kk.conj().T))
        return out

    for m in range(n):
        p = m + 1
        # predictor: advance row and diagonal with slopes at t1 = t_m
        fg, fl = row_rhs(m, Gg[m, :m + 1], Gl[m, :m + 1],
                         Sg[m, :m + 1], Sl[m, :m + 1], VH[m], m, m)
        dg, dl = diag_rhs(m, Gg[m, m], Gl[m, m], Gg[:m + 1, m],
                          Gl[:m + 1, m], Sg[m, :m + 1], Sl[m, :m + 1], VH[m])
        prow_g = np.concatenate([Gg[m, :m + 1] + dt * fg,
                                 (Gg[m, m] + dt * dg)[None]], axis=0)
        prow_l = np.concatenate([Gl[m, :m + 1] + dt * fl,
                                 (Gl[m, m] + dt * dl)[None]], axis=0)

        gr = bath.greater_row(p, np.arange(p + 1))
        gle = bath.lesser_row(p, np.arange(p + 1))
        sg_p = gr[:, None] * np.diagonal(prow_g, axis1=1, axis2=2) * mask
        sl_p = gle[:, None] * np.diagonal(prow_l, axis1=1, axis2=2) * mask
        dens_p = np.vstack([dens[:p], (-1j * np.diagonal(prow_l[p])).real])
        vh_p = _hartree_potential(p, bath, dens_p, hartree)

        # corrector: slopes re-evaluated at t1 = t_p with the predicted row
        fg2, fl2 = row_rhs(p, prow_g[:m + 1], prow_l[:m + 1],
                           sg_p, sl_p, vh_p, m, m)
        col_g = np.concatenate(
            [-np.conj(prow_g[:p].transpose(0, 2, 1)), prow_g[p][None]], axis=0)
        col_l = np.concatenate(
            [-np.conj(prow_l[:p].transpose(0, 2, 1)), prow_l[p][None]], axis=0)
        dg2, dl2 = diag_rhs(p, prow_g[p], prow_l[p], col_g, col_l,
                            sg_p, sl_p, vh_p)

        Gg[p, :m + 1] = Gg[m, :m + 1] + 0.5 * dt * (fg + fg2)
        Gl[p, :m + 1] = Gl[m, :m + 1] + 0.5 * dt * (fl + fl2)
        Gg[p, p] = Gg[m, m] + 0.5 * dt * (dg + dg2)
        Gl[p, p] = Gl[m, m] + 0.5 * dt * (dl + dl2)
        # mirror the new row into the column t2 = t_p
        Gg[:p, p] = -np.conj(Gg[p, :p].transpose(0, 2, 1))
        Gl[:p, p] = -np.conj(Gl[p, :p].transpose(0, 2, 1))
        Gce[:, p, :p + 1] = (Gl[p, :p + 1] - Gg[p, :p + 1])[:, :, ::2] \
            .transpose(2, 0, 1)
        Gce[:, :p, p] = (Gl[:p, p] - Gg[:p, p])[:, :, ::2].transpose(2, 0, 1)
        Gge[:, p, :p + 1] = Gg[p, :p + 1, ::2].transpose(1, 0, 2)
        Gle[:, p, :p + 1] = Gl[p, :p + 1, ::2].transpose(1, 0, 2)
        Gge[:, :p, p] = Gg[:p, p, ::2].transpose(1, 0, 2)
        Gle[:, :p, p] = Gl[:p, p, ::2].transpose(1, 0, 2)

        Sg[p, :p + 1] = gr[:, None] \
            * np.diagonal(Gg[p, :p + 1], axis1=1, axis2=2) * mask
        Sl[p, :p + 1] = gle[:, None] \
            * np.diagonal(Gl[p, :p + 1], axis1=1, axis2=2) * mask
        Sg[:p, p] = -np.conj(Sg[p, :p])
        Sl[:p, p] = -np.conj(Sl[p, :p])
        dens[p] = (-1j * np.diagonal(Gl[p, p])).real
        VH[p] = _hartree_potential(p, bath, dens[:p + 1], hartree)

        gf.filled = p
        if p % check_interval == 0 or p == n:
            gf.validate(p)
    return gf


def equal_time_density(gf: TwoTimeGF, k: int) -> np.ndarray:
    """Per-site densities n_i(t_k); imaginary residue asserted small."""
    return gf.density(k)


def imbalance_record(gf: TwoTimeGF) -> TrajectoryRecord:
    """Even-odd imbalance and total particle number versus time."""
    ks = np.arange(gf.filled + 1)
    dens = np.array([gf.density(k) for k in ks])
    sign = np.where(np.arange(gf.L) % 2 == 0, 1.0, -1.0)
    return TrajectoryRecord(
        times=gf.grid.dt * ks,
        observables={"Ne_minus_No": dens @ sign, "total_N": dens.sum(axis=1)},
        meta={"dt": gf.grid.dt},
    )
