"""Quasi-periodic Green's functions and the quasi-periodic capacitance matrix.

The quasi-periodic kernel is the phase-weighted lattice sum

    G^alpha(x) = sum_{m in Lambda} e^{i alpha . m} / (4 pi |x - m|),

for a d-dimensional lattice embedded in R^3 (d = 1, 2, 3) and alpha a nonzero
quasi-momentum.  The sum is conditionally convergent and is evaluated by one of
three schemes: a windowed direct sum (oracle), Kummer acceleration with
analytic tail resummation (d = 1), or Ewald splitting (d = 2, 3).

Operator assembly for the spherical-multipole backend reduces to solid-harmonic
lattice sums

    sigma_{L,M}(alpha; Delta) = sum_m e^{i alpha . m}
                                Y_{L,M}(unit(Delta - m)) / |Delta - m|^{L+1},

evaluated here with a generalized Ewald decomposition valid for every L and
every lattice dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erfc, eval_hermite, gammaincc

from . import harmonics as sh
from .errors import CutoffInsufficient, GammaPointRequested, LengthMismatch
from .geometry import (
    BrillouinZone,
    LatticeSpec,
    Sphere,
    UnitCell,
    dual_basis,
    structure_hash,
)
from .singlelayer import DiscreteSingleLayer, SphericalMultipole, PanelP0

__all__ = [
    "QuasiMomentum",
    "reduce_quasimomentum",
    "DirectPartial",
    "Kummer",
    "SpectralEwald",
    "default_scheme",
    "quasi_greens",
    "quasi_greens_direct",
    "solid_lattice_sums",
    "quasi_single_layer",
    "QuasiCapacitanceSample",
    "quasi_capacitance",
    "band_function",
    "near_gamma_expansion",
]


# --------------------------------------------------------------------------
# quasi-momenta
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QuasiMomentum:
    """Nonzero quasi-momentum in the span of the dual lattice."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        object.__setattr__(self, "vector", v)
        if np.linalg.norm(v) == 0.0:
            raise GammaPointRequested("alpha = 0 is excluded")


def reduce_quasimomentum(alpha, lattice: LatticeSpec) -> QuasiMomentum:
    """Representative of alpha in the fundamental Brillouin zone torus.

    Dual coordinates are folded to [-1/2, 1/2); the reduction is idempotent.
    """
    alpha = np.asarray(alpha, dtype=float)
    gen = lattice.generators
    # dual coordinates c with alpha = c @ duals; alpha.l_j = 2 pi c_j
    c = gen @ alpha / (2.0 * math.pi)
    c -= np.floor(c + 0.5)
    bz = dual_basis(lattice)
    return QuasiMomentum(vector=c @ bz.duals)


# --------------------------------------------------------------------------
# summation schemes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DirectPartial:
    """Windowed direct sum: terms with |m| <= cutoff at full weight, smoothly
    ramped to zero by 2*cutoff.  Slow but unconditionally trustworthy."""

    cutoff: int
    tol: float = 1e-8


@dataclass(frozen=True)
class Kummer:
    """d=1 acceleration: exact head sum plus analytic tail resummation."""

    head: int = 64
    tol: float = 1e-10


@dataclass(frozen=True)
class SpectralEwald:
    """Gaussian-screened spatial sum plus dual-space spectral sum.

    `splitting` defaults to sqrt(pi) / (cell scale); cutoffs are derived from
    `tol` unless given explicitly.
    """

    splitting: float | None = None
    spatial_cutoff: float | None = None
    spectral_cutoff: float | None = None
    tol: float = 1e-10


def default_scheme(lattice: LatticeSpec):
    return Kummer() if lattice.d == 1 else SpectralEwald()


def _splitting(scheme: SpectralEwald, lattice: LatticeSpec) -> float:
    if scheme.splitting is not None:
        return scheme.splitting
    scale = lattice.cell_measure ** (1.0 / lattice.d)
    return math.sqrt(math.pi) / scale


def _gauss_cut(tol: float, power: int) -> float:
    """z such that e^-z z^(power/2) is safely below tol."""
    z = math.log(1.0 / tol) + 10.0
    for _ in range(4):
        z = math.log(1.0 / tol) + 0.5 * power * math.log(max(z, 3.0)) + 10.0
    return z


# --------------------------------------------------------------------------
# point evaluation
# --------------------------------------------------------------------------

#: flat core of the summation window, as a fraction of the cutoff
_RAMP_CORE = 0.25


def _ramp_weight(s: np.ndarray) -> np.ndarray:
    """C-infinity window: 1 for s <= core, 0 for s >= 2, smooth in between.

    The long ramp (rather than a long flat core) is what buys convergence: the
    oscillatory-sum error decays superalgebraically in the ramp width.
    """
    s = np.asarray(s, dtype=float)

    def f(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out

    t = (s - _RAMP_CORE) / (2.0 - _RAMP_CORE)
    a = f(1.0 - t)
    b = f(t)
    w = a / (a + b + 1e-300)
    w[s <= _RAMP_CORE] = 1.0
    w[s >= 2.0] = 0.0
    return w


def _enumerate_coeffs(lattice: LatticeSpec, radius: float, center=None):
    """Integer coefficient grid covering all m with |m - center| <= radius."""
    gen = lattice.generators
    gram = gen @ gen.T
    inv = np.linalg.inv(gram)
    c0 = np.zeros(lattice.d) if center is None else gram_solve(gen, center)
    axes = []
    for i in range(lattice.d):
        half = radius * math.sqrt(inv[i, i]) + 1.0
        axes.append(np.arange(math.floor(c0[i] - half), math.ceil(c0[i] + half) + 1))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def gram_solve(gen: np.ndarray, point: np.ndarray) -> np.ndarray:
    """Least-squares lattice coordinates of a physical point."""
    return np.linalg.solve(gen @ gen.T, gen @ np.asarray(point, dtype=float))


def quasi_greens_direct(x, alpha, lattice: LatticeSpec, cutoff: int) -> complex:
    """Windowed direct sum oracle; superalgebraically convergent in cutoff."""
    qm = alpha if isinstance(alpha, QuasiMomentum) else QuasiMomentum(np.asarray(alpha, float))
    x = np.asarray(x, dtype=float)
    scale = min(np.linalg.norm(g) for g in lattice.generators)
    rmax = 2.0 * cutoff * scale
    coeffs = _enumerate_coeffs(lattice, rmax)
    pts = coeffs @ lattice.generators
    norm = np.linalg.norm(pts, axis=-1)
    keep = norm <= rmax + 1e-9
    pts, coeffs = pts[keep], coeffs[keep]
    w = _ramp_weight(np.linalg.norm(pts, axis=-1) / (cutoff * scale))
    d = np.linalg.norm(x - pts, axis=-1)
    if np.any(d < 1e-12):
        raise ValueError("x coincides with a lattice point")
    phase = np.exp(1j * (pts @ qm.vector))
    # fixed accumulation order (lexicographic m) for reproducibility
    return complex(np.sum(w * phase / (4.0 * math.pi * d)))


def _kummer_point(x, alpha_vec, lattice: LatticeSpec, head: int):
    """d=1: exact head plus Lerch-transcendent tails of the axial expansion."""
    import mpmath

    e1 = lattice.generators[0]
    ell = np.linalg.norm(e1)
    ehat = e1 / ell
    x = np.asarray(x, dtype=float)
    t = float(x @ ehat)
    rho2 = float(x @ x - t * t)
    theta = float(alpha_vec @ e1)
    z = complex(mpmath.exp(1j * theta))
    if abs(z - 1.0) < 1e-13:
        raise GammaPointRequested("alpha . l = 0 mod 2 pi")

    m = np.arange(-head, head + 1)
    d = np.linalg.norm(x[None, :] - np.outer(m, e1), axis=-1)
    if np.any(d < 1e-12):
        raise ValueError("x coincides with a lattice point")
    headsum = complex(np.sum(np.exp(1j * theta * m) / d))

    # tails: 1/|x - m l| = sum_k c_k(rho) / (m ell -+ t)^(2k+1), resummed with
    # Lerch Phi(z, s, a) = sum_{n>=0} z^n / (n+a)^s starting at m = head+1
    a_plus = head + 1 - t / ell     # m ell - t = ell (m - t/ell)
    a_minus = head + 1 + t / ell
    zc = z.conjugate()
    tail = 0.0 + 0.0j
    coeffs = [1.0, -rho2 / 2.0, 3.0 * rho2**2 / 8.0]
    for k, ck in enumerate(coeffs):
        s = 2 * k + 1
        phi_p = complex(mpmath.lerchphi(z, s, a_plus))
        phi_m = complex(mpmath.lerchphi(zc, s, a_minus))
        tail += ck / ell**s * (z ** (head + 1) * phi_p + zc ** (head + 1) * phi_m)
    # first omitted order bounds the truncation error
    err = abs(rho2) ** 3 / ((head + 1) * ell - abs(t)) ** 7 * (head + 1)
    return (headsum + tail) / (4.0 * math.pi), err


def _ewald_point_3d(x, alpha_vec, lattice, E, tol, r_cut=None, k_cut=None):
    x = np.asarray(x, dtype=float)
    z = _gauss_cut(tol, 1)
    r_cut = r_cut if r_cut is not None else math.sqrt(z) / E
    k_cut = k_cut if k_cut is not None else 2.0 * E * math.sqrt(z)

    coeffs = _enumerate_coeffs(lattice, r_cut, center=x)
    pts = coeffs @ lattice.generators
    d = np.linalg.norm(x - pts, axis=-1)
    keep = d <= r_cut
    pts, d = pts[keep], d[keep]
    if np.any(d < 1e-12):
        raise ValueError("x coincides with a lattice point")
    spatial = np.sum(np.exp(1j * (pts @ alpha_vec)) * erfc(E * d) / d) / (4.0 * math.pi)

    bz = dual_basis(lattice)
    qc = _enumerate_coeffs_dual(bz, k_cut, alpha_vec)
    k = qc + alpha_vec
    k2 = np.sum(k * k, axis=-1)
    vol = lattice.cell_measure
    spectral = np.sum(np.exp(1j * (k @ x)) * np.exp(-k2 / (4 * E * E)) / k2) / vol
    est = math.exp(-E * E * r_cut * r_cut) + math.exp(-k_cut * k_cut / (4 * E * E))
    return complex(spatial + spectral), est


def _enumerate_coeffs_dual(bz: BrillouinZone, k_cut: float, alpha_vec):
    """Dual lattice vectors q with |q + alpha| <= k_cut."""
    lat = LatticeSpec(d=bz.d, generators=bz.duals)
    coeffs = _enumerate_coeffs(lat, k_cut + np.linalg.norm(alpha_vec), center=-np.asarray(alpha_vec))
    q = coeffs @ bz.duals
    keep = np.linalg.norm(q + alpha_vec, axis=-1) <= k_cut
    return q[keep]


def _ewald_point_2d(x, alpha_vec, lattice, E, tol, r_cut=None, k_cut=None):
    x = np.asarray(x, dtype=float)
    # in-plane / off-plane split (lattice span must be the xy-plane)
    _require_aligned(lattice)
    x3 = x[2]
    xp = np.array([x[0], x[1], 0.0])
    z = _gauss_cut(tol, 1)
    r_cut = r_cut if r_cut is not None else math.sqrt(z) / E
    k_cut = k_cut if k_cut is not None else 2.0 * E * math.sqrt(z)

    coeffs = _enumerate_coeffs(lattice, r_cut, center=xp)
    pts = coeffs @ lattice.generators
    d = np.linalg.norm(x - pts, axis=-1)
    keep = d <= r_cut
    pts, d = pts[keep], d[keep]
    if np.any(d < 1e-12):
        raise ValueError("x coincides with a lattice point")
    spatial = np.sum(np.exp(1j * (pts @ alpha_vec)) * erfc(E * d) / d) / (4.0 * math.pi)

    bz = dual_basis(lattice)
    q = _enumerate_coeffs_dual(bz, k_cut, alpha_vec)
    k = q + alpha_vec
    kn = np.linalg.norm(k, axis=-1)
    area = lattice.cell_measure
    up = np.exp(kn * x3) * erfc(kn / (2 * E) + E * x3)
    dn = np.exp(-kn * x3) * erfc(kn / (2 * E) - E * x3)
    spectral = np.sum(np.exp(1j * (k @ xp)) * (up + dn) / kn) / (4.0 * area)
    est = math.exp(-E * E * r_cut * r_cut) + math.exp(-k_cut * k_cut / (4 * E * E))
    return complex(spatial + spectral), est


def _require_aligned(lattice: LatticeSpec):
    """Lattice span must be the first d coordinate axes (accelerated paths)."""
    gen = lattice.generators
    if np.abs(gen[:, lattice.d :]).max() > 1e-12 * np.abs(gen).max():
        raise NotImplementedError(
            "accelerated lattice sums require the lattice span to be the "
            f"first {lattice.d} coordinate axes"
        )


def quasi_greens(x, alpha, lattice: LatticeSpec, scheme=None) -> complex:
    """Accelerated evaluation of G^alpha(x) for x not on the lattice."""
    qm = alpha if isinstance(alpha, QuasiMomentum) else QuasiMomentum(np.asarray(alpha, float))
    if scheme is None:
        scheme = default_scheme(lattice)
    if isinstance(scheme, DirectPartial):
        return quasi_greens_direct(x, qm, lattice, scheme.cutoff)
    if isinstance(scheme, Kummer):
        if lattice.d != 1:
            raise ValueError("Kummer scheme is d=1 only")
        val, est = _kummer_point(x, qm.vector, lattice, scheme.head)
    elif isinstance(scheme, SpectralEwald):
        E = _splitting(scheme, lattice)
        point = {2: _ewald_point_2d, 3: _ewald_point_3d}.get(lattice.d)
        if point is None:
            # d=1 via the generalized machinery (monopole row of the sums)
            sig = solid_lattice_sums(qm, lattice, x, 0, scheme)
            return complex(sig[0] / math.sqrt(4.0 * math.pi))
        val, est = point(
            x, qm.vector, lattice, E, scheme.tol,
            r_cut=scheme.spatial_cutoff, k_cut=scheme.spectral_cutoff,
        )
    else:
        raise TypeError(f"unknown scheme {scheme!r}")
    if est > scheme.tol:
        raise CutoffInsufficient(f"error estimate {est:.2e} exceeds {scheme.tol:.2e}")
    return val


# --------------------------------------------------------------------------
# solid-harmonic lattice sums (generalized Ewald)
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _monomials_at(l: int, m: int):
    return sh.solid_harmonic_monomials(l, m)


def solid_lattice_sums(alpha, lattice: LatticeSpec, delta, lmax: int, scheme=None):
    """sigma[idx(L,M)] = sum_m e^{i alpha.m} Y_LM(unit(Delta-m)) / |Delta-m|^{L+1}.

    Any lattice point coinciding with Delta is excluded from the sum.  Returns
    a complex array over all (L, M) with L <= lmax.
    """
    qm = alpha if isinstance(alpha, QuasiMomentum) else QuasiMomentum(np.asarray(alpha, float))
    if scheme is None or isinstance(scheme, Kummer):
        scheme = SpectralEwald()
    if isinstance(scheme, DirectPartial):
        return _solid_sums_direct(qm, lattice, delta, lmax, scheme.cutoff)
    _require_aligned(lattice) if lattice.d < 3 else None
    delta = np.asarray(delta, dtype=float)
    E = _splitting(scheme, lattice)
    tol = scheme.tol
    nh = sh.num_harmonics(lmax)
    Ls = np.concatenate([[l] * (2 * l + 1) for l in range(lmax + 1)]).astype(int)

    # ---- spatial part: Gaussian-screened, absolutely convergent ----
    z = _gauss_cut(tol, 2 * lmax + 1)
    r_cut = scheme.spatial_cutoff if scheme.spatial_cutoff is not None else math.sqrt(z) / E
    coeffs = _enumerate_coeffs(lattice, r_cut, center=delta)
    pts = coeffs @ lattice.generators
    v = delta - pts
    rr = np.linalg.norm(v, axis=-1)
    hit = rr < 1e-10
    keep = (rr <= r_cut) & ~hit
    excluded = bool(np.any(hit))
    vk, rrk = v[keep], rr[keep]
    phase = np.exp(1j * (pts[keep] @ qm.vector))
    solid = sh.eval_solid_harmonics(vk, lmax)  # r^L Y_LM
    sigma = np.zeros(nh, dtype=complex)
    for l in range(lmax + 1):
        # regularized upper incomplete gamma Q(l + 1/2, E^2 r^2)
        q = gammaincc(l + 0.5, (E * rrk) ** 2)
        radial = q / rrk ** (2 * l + 1)
        for m in range(-l, l + 1):
            idx = sh.harmonic_index(l, m)
            sigma[idx] = np.sum(phase * solid[idx] * radial)

    # ---- dual part of the low-t (long-range) piece ----
    k_cut = scheme.spectral_cutoff if scheme.spectral_cutoff is not None else 2.0 * E * math.sqrt(z)
    bz = dual_basis(lattice)
    q = _enumerate_coeffs_dual(bz, k_cut, qm.vector)
    k = q + qm.vector
    if lattice.d == 3:
        sigma += _dual_sums_3d(k, delta, lmax, E, lattice.cell_measure, Ls)
    else:
        sigma += _dual_sums_low_rank(k, delta, lmax, E, lattice, tol)

    # excluded lattice point: remove its low-t contribution (only L=0 survives)
    if excluded:
        sigma[0] -= 2.0 * E / math.sqrt(math.pi) * (1.0 / math.sqrt(4.0 * math.pi))
    return sigma


def _dual_sums_3d(k, delta, lmax, E, vol, Ls):
    k2 = np.sum(k * k, axis=-1)
    solid_k = sh.eval_solid_harmonics(k, lmax)  # |k|^L Y_LM(k^)
    phase = np.exp(1j * (k @ np.asarray(delta, float)))
    gauss = np.exp(-k2 / (4.0 * E * E)) / k2
    out = np.zeros(sh.num_harmonics(lmax), dtype=complex)
    for l in range(lmax + 1):
        pref = (
            4.0 * math.pi ** 1.5 / (2.0**l * math.gamma(l + 0.5)) * (-1j) ** l / vol
        )
        for m in range(-l, l + 1):
            idx = sh.harmonic_index(l, m)
            out[idx] = pref * np.sum(phase * solid_k[idx] * gauss)
    return out


def _dual_sums_low_rank(k, delta, lmax, E, lattice: LatticeSpec, tol):
    """Dual part for d in {1, 2}: numerically t-integrated spectral sums.

    For each dual vector the 1D/2D Fourier transform of the screened solid
    harmonic factors into per-axis Hermite integrals; the remaining t-integral
    over (0, E] is done on a log-substituted Gauss grid.
    """
    d = lattice.d
    delta = np.asarray(delta, dtype=float)
    dpar = np.concatenate([delta[:d], np.zeros(3 - d)])
    dperp = delta - dpar
    perp2 = float(dperp @ dperp)
    kax = k[:, :d]  # in-span components
    kn2 = np.sum(kax * kax, axis=-1)
    kmin = math.sqrt(kn2.min())

    # log grid t = E e^{-u}: resolves the boundary layer near t ~ kmin
    t_floor = kmin / (2.0 * math.sqrt(math.log(1.0 / tol) + 30.0))
    U = max(math.log(E / max(t_floor, 1e-300)), 0.5)
    n_nodes = max(64, int(18 * U) + 32)
    u, wu = np.polynomial.legendre.leggauss(n_nodes)
    u = 0.5 * U * (u + 1.0)
    wu = 0.5 * U * wu
    t = E * np.exp(-u)           # (T,)
    wt = wu * t                  # absorbs dt = -t du

    # shared per-axis ingredients, shape (Q, T)
    inv2t = 1.0 / (2.0 * t)
    expfac = np.exp(-np.outer(kn2, 1.0 / (4.0 * t * t)))
    gperp = np.exp(-np.outer(np.ones(len(k)), (t * t) * perp2))

    vol = lattice.cell_measure
    out = np.zeros(sh.num_harmonics(lmax), dtype=complex)
    phase = np.exp(1j * (k @ dpar))

    herm_cache: dict[tuple[int, int], np.ndarray] = {}

    def axis_factor(a: int, axis: int) -> np.ndarray:
        """(Q, T) array: integral of x^a e^{-t^2 x^2 - i k x} over the axis."""
        key = (a, axis)
        if key not in herm_cache:
            ratio = np.outer(kax[:, axis], inv2t)  # k/(2t)
            herm_cache[key] = (
                (1j ** a)
                * eval_hermite(a, ratio)
                * np.outer(np.ones(len(k)), (math.sqrt(math.pi) / t))
                * (-1.0) ** a
                * np.outer(np.ones(len(k)), inv2t**a)
            )
        return herm_cache[key]

    for l in range(lmax + 1):
        pref = 2.0 / math.gamma(l + 0.5) / vol
        t_pow = t ** (2 * l)
        for m in range(-l, l + 1):
            idx = sh.harmonic_index(l, m)
            acc = np.zeros(len(k), dtype=complex)
            for (a, b, c, coeff) in _monomials_at(l, m):
                if d == 1:
                    if (b and dperp[1] == 0.0) or (c and dperp[2] == 0.0):
                        continue
                    perp = dperp[1] ** b * dperp[2] ** c
                    fac = axis_factor(a, 0)
                elif d == 2:
                    if c and dperp[2] == 0.0:
                        continue
                    perp = dperp[2] ** c
                    fac = axis_factor(a, 0) * axis_factor(b, 1)
                integrand = fac * expfac * gperp * (t_pow * wt)[None, :]
                acc += coeff * perp * integrand.sum(axis=1)
            out[idx] = pref * np.sum(phase * acc)
    return out


def _solid_sums_direct(qm, lattice, delta, lmax, cutoff):
    """Windowed direct sum for the solid-harmonic lattice sums (oracle)."""
    delta = np.asarray(delta, dtype=float)
    scale = min(np.linalg.norm(g) for g in lattice.generators)
    rmax = 2.0 * cutoff * scale
    coeffs = _enumerate_coeffs(lattice, rmax)
    pts = coeffs @ lattice.generators
    norm = np.linalg.norm(pts, axis=-1)
    keep = norm <= rmax + 1e-9
    pts = pts[keep]
    w = _ramp_weight(np.linalg.norm(pts, axis=-1) / (cutoff * scale))
    v = delta - pts
    rr = np.linalg.norm(v, axis=-1)
    ok = rr > 1e-10
    pts, v, rr, w = pts[ok], v[ok], rr[ok], w[ok]
    phase = np.exp(1j * (pts @ qm.vector))
    solid = sh.eval_solid_harmonics(v, lmax)
    out = np.zeros(sh.num_harmonics(lmax), dtype=complex)
    for l in range(lmax + 1):
        radial = 1.0 / rr ** (2 * l + 1)
        for m in range(-l, l + 1):
            idx = sh.harmonic_index(l, m)
            out[idx] = np.sum(w * phase * solid[idx] * radial)
    return out


# --------------------------------------------------------------------------
# operator assembly
# --------------------------------------------------------------------------

def _quasi_multipole_operator(cell: UnitCell, qm: QuasiMomentum, order: int, scheme):
    from .singlelayer import _translation_tables

    n = cell.n_resonators
    dof = sh.num_harmonics(order)
    radii = np.array([s.radius for s in cell.spheres])
    centers = np.array([s.center for s in cell.spheres])
    weights, combined, src_l, tgt_l = _translation_tables(order)
    rpow = radii[None, :] ** (np.arange(order + 3)[:, None])

    A = np.zeros((n, dof, n, dof), dtype=complex)
    for i in range(n):          # target
        for ip in range(n):     # source
            delta = centers[i] - centers[ip]
            sigma = solid_lattice_sums(qm, cell.lattice, delta, 2 * order, scheme)
            for b in range(dof):
                for a in range(dof):
                    w = weights[b, a]
                    if w == 0.0:
                        continue
                    A[i, b, ip, a] = (
                        w
                        * rpow[src_l[a] + 2, ip]
                        * rpow[tgt_l[b] + 2, i]
                        * sigma[combined[b, a]]
                    )
        A[i, :, i, :] += np.diag(radii[i] ** 3 / (2.0 * src_l + 1.0))
    A = A.reshape(n * dof, n * dof)
    return 0.5 * (A + A.conj().T)


def _quasi_panel_operator(cell: UnitCell, qm: QuasiMomentum, level: int, scheme):
    """Panel quasi operator: finite panel matrix plus the smooth lattice tail.

    G^alpha minus the free-space kernel is smooth, so the periodic correction
    is well captured by the centroid rule.
    """
    from .singlelayer import _panel_operator

    S0, meshes, areas, counts = _panel_operator(cell.spheres, level)
    centroids = np.concatenate([m.centroids for m in meshes])
    P = centroids.shape[0]
    diff = centroids[:, None, :] - centroids[None, :, :]
    corr = np.empty((P, P), dtype=complex)
    # batch through the monopole lattice sum with the m=0 term removed
    for p in range(P):
        for q in range(P):
            x = diff[p, q]
            g_alpha = quasi_greens_lattice_only(x, qm, cell.lattice, scheme)
            corr[p, q] = g_alpha
    S = S0.astype(complex) + areas[:, None] * areas[None, :] * corr
    return 0.5 * (S + S.conj().T), meshes, counts


def quasi_greens_lattice_only(x, alpha, lattice: LatticeSpec, scheme=None) -> complex:
    """G^alpha(x) minus the m = 0 free-space term (finite as |x| -> 0)."""
    qm = alpha if isinstance(alpha, QuasiMomentum) else QuasiMomentum(np.asarray(alpha, float))
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x)
    if r < 1e-12:
        sig = solid_lattice_sums(qm, lattice, x, 0, scheme)
        return complex(sig[0] / math.sqrt(4.0 * math.pi))
    full = quasi_greens(x, qm, lattice, scheme)
    return complex(full - 1.0 / (4.0 * math.pi * r))


def quasi_single_layer(cell: UnitCell, alpha, backend, scheme=None) -> DiscreteSingleLayer:
    """Hermitian discretization of the quasi-periodic single layer."""
    qm = alpha if isinstance(alpha, QuasiMomentum) else QuasiMomentum(np.asarray(alpha, float))
    if scheme is None:
        scheme = SpectralEwald()
    if isinstance(backend, SphericalMultipole):
        op = _quasi_multipole_operator(cell, qm, backend.order, scheme)
        dof = backend.dof_per_sphere
        return DiscreteSingleLayer(
            backend=backend,
            spheres=tuple(cell.spheres),
            operator=op,
            dof_counts=(dof,) * cell.n_resonators,
        )
    if isinstance(backend, PanelP0):
        op, meshes, counts = _quasi_panel_operator(cell, qm, backend.level, scheme)
        return DiscreteSingleLayer(
            backend=backend,
            spheres=tuple(cell.spheres),
            operator=op,
            dof_counts=tuple(counts),
            meshes=meshes,
        )
    raise TypeError(f"unknown backend {backend!r}")


@dataclass(frozen=True)
class QuasiCapacitanceSample:
    """Hermitian N x N quasi-periodic capacitance matrix at one quasi-momentum."""

    alpha: np.ndarray
    matrix: np.ndarray
    provenance: str

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        object.__setattr__(self, "alpha", a)
        m = np.asarray(self.matrix)
        if m.shape[0] != m.shape[1]:
            raise LengthMismatch("quasi capacitance matrix must be square")


def quasi_capacitance(cell: UnitCell, alpha, backend=None, scheme=None) -> QuasiCapacitanceSample:
    qm = alpha if isinstance(alpha, QuasiMomentum) else QuasiMomentum(np.asarray(alpha, float))
    if backend is None:
        backend = SphericalMultipole(2)
    op = quasi_single_layer(cell, qm, backend, scheme)
    E = op.indicator_matrix().astype(complex)
    X = op.solve(E)
    C = E.conj().T @ X
    C = 0.5 * (C + C.conj().T)
    return QuasiCapacitanceSample(
        alpha=qm.vector,
        matrix=C,
        provenance=f"{backend!r}/{scheme!r}",
    )


def band_function(cell: UnitCell, materials, alpha_grid, backend=None, scheme=None) -> np.ndarray:
    """Sorted eigenvalues of the generalized quasi-periodic capacitance matrix.

    Returns an array of shape (len(alpha_grid), N); materials supplies the per
    resonator scaling delta_i v_i^2 / |D_i|.
    """
    g = np.asarray(getattr(materials, "scaling", None))
    if g.shape == ():  # plain (delta, v) container; volumes from the cell
        g = np.asarray(materials.delta, dtype=float) * np.asarray(materials.v, dtype=float) ** 2
        g = g / cell.volumes
    if np.any(g <= 0):
        raise ValueError("material parameters must be positive")
    root = np.sqrt(g)
    out = np.empty((len(alpha_grid), cell.n_resonators))
    for i, alpha in enumerate(alpha_grid):
        C = quasi_capacitance(cell, alpha, backend, scheme).matrix
        sym = root[:, None] * C * root[None, :]
        out[i] = np.sort(np.linalg.eigvalsh(sym))
    return out


# --------------------------------------------------------------------------
# near-Gamma diagnostics (d = 3)
# --------------------------------------------------------------------------

def periodic_single_layer(cell: UnitCell, backend, scheme=None) -> np.ndarray:
    """Galerkin matrix of the periodic kernel G^0 (q = 0 dual term removed)."""
    if not isinstance(backend, SphericalMultipole):
        raise TypeError("periodic single layer implemented for the multipole backend")
    if cell.lattice.d != 3:
        raise NotImplementedError("periodic kernel diagnostics are d=3 only")
    if scheme is None:
        scheme = SpectralEwald()
    from .singlelayer import _translation_tables

    order = backend.order
    n = cell.n_resonators
    dof = sh.num_harmonics(order)
    radii = np.array([s.radius for s in cell.spheres])
    centers = np.array([s.center for s in cell.spheres])
    weights, combined, src_l, tgt_l = _translation_tables(order)
    rpow = radii[None, :] ** (np.arange(order + 3)[:, None])

    A = np.zeros((n, dof, n, dof), dtype=complex)
    for i in range(n):
        for ip in range(n):
            delta = centers[i] - centers[ip]
            sigma = _periodic_solid_sums(cell.lattice, delta, 2 * order, scheme)
            for b in range(dof):
                for a in range(dof):
                    w = weights[b, a]
                    if w == 0.0:
                        continue
                    A[i, b, ip, a] = (
                        w * rpow[src_l[a] + 2, ip] * rpow[tgt_l[b] + 2, i]
                        * sigma[combined[b, a]]
                    )
        A[i, :, i, :] += np.diag(radii[i] ** 3 / (2.0 * src_l + 1.0))
    A = A.reshape(n * dof, n * dof)
    return 0.5 * (A + A.conj().T)


def _periodic_solid_sums(lattice: LatticeSpec, delta, lmax: int, scheme: SpectralEwald):
    """alpha -> 0 limit of the solid sums with the divergent q = 0 term dropped."""
    delta = np.asarray(delta, dtype=float)
    E = _splitting(scheme, lattice)
    tol = scheme.tol
    z = _gauss_cut(tol, 2 * lmax + 1)
    r_cut = math.sqrt(z) / E
    coeffs = _enumerate_coeffs(lattice, r_cut, center=delta)
    pts = coeffs @ lattice.generators
    v = delta - pts
    rr = np.linalg.norm(v, axis=-1)
    hit = rr < 1e-10
    keep = (rr <= r_cut) & ~hit
    excluded = bool(np.any(hit))
    vk, rrk = v[keep], rr[keep]
    solid = sh.eval_solid_harmonics(vk, lmax)
    nh = sh.num_harmonics(lmax)
    sigma = np.zeros(nh, dtype=complex)
    for l in range(lmax + 1):
        qfac = gammaincc(l + 0.5, (E * rrk) ** 2)
        radial = qfac / rrk ** (2 * l + 1)
        for m in range(-l, l + 1):
            idx = sh.harmonic_index(l, m)
            sigma[idx] = np.sum(solid[idx] * radial)

    k_cut = 2.0 * E * math.sqrt(z)
    bz = dual_basis(lattice)
    lat_dual = LatticeSpec(d=bz.d, generators=bz.duals)
    qc = _enumerate_coeffs(lat_dual, k_cut)
    q = qc @ bz.duals
    qn = np.linalg.norm(q, axis=-1)
    nonzero = (qn > 1e-12) & (qn <= k_cut)
    q = q[nonzero]
    Ls = np.concatenate([[l] * (2 * l + 1) for l in range(lmax + 1)]).astype(int)
    sigma += _dual_sums_3d(q, delta, lmax, E, lattice.cell_measure, Ls)
    if excluded:
        sigma[0] -= 2.0 * E / math.sqrt(math.pi) / math.sqrt(4.0 * math.pi)
    return sigma


def _surface_moments(cell: UnitCell, order: int, w: np.ndarray):
    """Per-dof moments of 1, (w.x), (w.x)^2 against the harmonic basis.

    Returns (M0, M1, M2) arrays of length total dof, for the un-conjugated
    basis functions; conjugated moments are the complex conjugates.
    """
    dof = sh.num_harmonics(order)
    n = cell.n_resonators
    M0 = np.zeros(n * dof, dtype=complex)
    M1 = np.zeros(n * dof, dtype=complex)
    M2 = np.zeros(n * dof, dtype=complex)
    for i, s in enumerate(cell.spheres):
        pts, wt = sh.sphere_quadrature(s.center, s.radius, order + 3)
        Y = sh.eval_solid_harmonics((pts - s.center) / s.radius, order)
        proj = pts @ w
        for b in range(dof):
            sl = i * dof + b
            M0[sl] = np.sum(wt * Y[b])
            M1[sl] = np.sum(wt * proj * Y[b])
            M2[sl] = np.sum(wt * proj**2 * Y[b])
    return M0, M1, M2


def near_gamma_expansion(cell: UnitCell, alpha, backend=None, scheme=None) -> dict:
    """Decompose S^alpha near Gamma into its singular expansion terms (d = 3).

    Returns the four terms as matrices in the Galerkin dof space together with
    the residual norm ||S^alpha - (leading + linear + quadratic + periodic)||.
    """
    qm = alpha if isinstance(alpha, QuasiMomentum) else QuasiMomentum(np.asarray(alpha, float))
    if backend is None:
        backend = SphericalMultipole(2)
    if cell.lattice.d != 3:
        raise NotImplementedError("near-Gamma expansion implemented for d=3")
    w = qm.vector
    a2 = float(w @ w)
    vol = cell.lattice.cell_measure
    order = backend.order
    M0, M1, M2 = _surface_moments(cell, order, w)
    # Galerkin elements of the constant/linear/quadratic kernel pieces:
    #   (1 + i w.(x-y) - (w.(x-y))^2/2) / (|Y| |alpha|^2)
    c = 1.0 / (vol * a2)
    leading = c * np.outer(M0.conj(), M0)
    linear = 1j * c * (np.outer(M1.conj(), M0) - np.outer(M0.conj(), M1))
    quadratic = -0.5 * c * (
        np.outer(M2.conj(), M0) - 2.0 * np.outer(M1.conj(), M1) + np.outer(M0.conj(), M2)
    )
    periodic = periodic_single_layer(cell, backend, scheme)
    full = quasi_single_layer(cell, qm, backend, scheme).operator
    residual = np.linalg.norm(full - (leading + linear + quadratic + periodic), 2)
    return {
        "leading": leading,
        "linear": linear,
        "quadratic": quadratic,
        "periodic": periodic,
        "residual": float(residual),
    }
