"""Inverse Floquet transform and band-reconstruction tools.

Real-space capacitance coefficients are Brillouin-zone averages

    C^m = (1/|Y*|) integral over Y* of Chat^alpha e^{-i alpha . m} d alpha,

computed with a uniform product quadrature on a half-cell-offset grid (the
Gamma point is excluded by construction).  The truncated matrix C_t(r) is the
block-Toeplitz matrix with blocks C^{m-n}, and the truncated Floquet transform
assigns a quasi-periodicity to eigenvectors of finite structures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, MissingCoefficient, QuadratureUnconverged
from .geometry import (
    LatticeSpec,
    TruncationIndex,
    UnitCell,
    dual_basis,
    lattice_points,
    structure_hash,
)
from .latticegreen import QuasiMomentum, quasi_capacitance
from .singlelayer import CapacitanceBlocks, SphericalMultipole

__all__ = [
    "BZQuadrature",
    "bz_quadrature",
    "RealSpaceCoefficients",
    "real_space_capacitance",
    "truncated_matrix",
    "truncated_floquet_transform",
    "QuasiperiodicityEstimate",
    "estimate_quasiperiodicity",
]


@dataclass(frozen=True)
class BZQuadrature:
    """Uniform M^d grid on the Brillouin zone torus, offset by half a cell."""

    m: int
    nodes: np.ndarray   # (M^d, 3)
    weights: np.ndarray  # uniform, summing to |Y*|
    fractional: np.ndarray  # (M^d, d) dual coordinates in (-1/2, 1/2)
    lattice: LatticeSpec

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def mirror_index(self, k: int) -> int:
        """Index of the node at -alpha (exact by grid symmetry)."""
        d = self.lattice.d
        idx = np.unravel_index(k, (self.m,) * d)
        mirrored = tuple(self.m - 1 - i for i in idx)
        return int(np.ravel_multi_index(mirrored, (self.m,) * d))


def bz_quadrature(lattice: LatticeSpec, m: int) -> BZQuadrature:
    """Gamma-avoiding product quadrature with M points per dimension."""
    if m < 2:
        raise ValueError("need at least 2 quadrature points per dimension")
    bz = dual_basis(lattice)
    d = lattice.d
    frac_axis = (np.arange(m) + 0.5) / m - 0.5
    mesh = np.meshgrid(*([frac_axis] * d), indexing="ij")
    frac = np.stack([g.ravel() for g in mesh], axis=-1)
    nodes = frac @ bz.duals
    weights = np.full(len(nodes), bz.volume / m**d)
    return BZQuadrature(m=m, nodes=nodes, weights=weights, fractional=frac, lattice=lattice)


@dataclass
class RealSpaceCoefficients:
    """Map from lattice points m to real N x N coefficient matrices C^m."""

    lattice: LatticeSpec
    n_res: int
    matrices: dict
    quadrature_m: int
    decay: dict = field(default_factory=dict)
    geometry_hash: str = ""

    def __getitem__(self, m) -> np.ndarray:
        key = tuple(int(v) for v in np.atleast_1d(m))
        if key not in self.matrices:
            raise MissingCoefficient(f"coefficient C^{key} not computed")
        return self.matrices[key]

    def __contains__(self, m) -> bool:
        return tuple(int(v) for v in np.atleast_1d(m)) in self.matrices

    def to_json_dict(self) -> dict:
        return {
            "latticePoints": [list(k) for k in self.matrices],
            "matrices": [self.matrices[k].tolist() for k in self.matrices],
            "quadratureM": self.quadrature_m,
            "decayEstimate": self.decay,
            "geometryHash": self.geometry_hash,
        }


# node samples of Chat^alpha keyed by (geometry, backend, scheme, M)
_SAMPLE_CACHE: dict = {}


def _quasi_samples(cell: UnitCell, quad: BZQuadrature, backend, scheme):
    key = structure_hash(
        cell.lattice.d,
        cell.lattice.generators,
        [(s.center, s.radius) for s in cell.spheres],
        repr(backend),
        repr(scheme),
        quad.m,
    )
    if key not in _SAMPLE_CACHE:
        n_nodes = len(quad)
        samples: list = [None] * n_nodes
        for k in range(n_nodes):
            if samples[k] is not None:
                continue
            mk = quad.mirror_index(k)
            C = quasi_capacitance(cell, quad.nodes[k], backend, scheme).matrix
            samples[k] = C
            if mk != k:
                samples[mk] = C.conj()
        _SAMPLE_CACHE[key] = (samples, key)
    return _SAMPLE_CACHE[key]


def real_space_capacitance(
    cell: UnitCell,
    ms,
    quad: BZQuadrature,
    backend=None,
    scheme=None,
    verify_tol: float | None = None,
) -> RealSpaceCoefficients:
    """Inverse Floquet transform of Chat^alpha at the requested lattice points.

    `ms` is an iterable of integer coefficient tuples.  With `verify_tol` set,
    the computation is repeated on a doubled grid and QuadratureUnconverged is
    raised if any requested coefficient moves by more than the tolerance.
    """
    if backend is None:
        backend = SphericalMultipole(2)
    samples, ghash = _quasi_samples(cell, quad, backend, scheme)
    ms = [tuple(int(v) for v in np.atleast_1d(m)) for m in ms]
    gen = cell.lattice.generators
    pts = np.array([np.asarray(m, float) @ gen for m in ms])
    # e^{-i alpha . m} per (node, m); fixed node-index accumulation order
    phases = np.exp(-1j * quad.nodes @ pts.T)
    stack = np.stack(samples)  # (nodes, N, N)
    raw = np.einsum("kij,km->mij", stack, phases) / len(quad)
    scale = np.abs(raw).max()
    if np.abs(raw.imag).max() > 1e-10 * scale:
        raise QuadratureUnconverged(
            f"imaginary residue {np.abs(raw.imag).max():.2e} exceeds 1e-10 relative"
        )
    matrices = {m: raw[i].real.copy() for i, m in enumerate(ms)}
    out = RealSpaceCoefficients(
        lattice=cell.lattice,
        n_res=cell.n_resonators,
        matrices=matrices,
        quadrature_m=quad.m,
        geometry_hash=ghash,
    )
    out.decay = _decay_estimate(out)
    if verify_tol is not None:
        fine = real_space_capacitance(
            cell, ms, bz_quadrature(cell.lattice, 2 * quad.m), backend, scheme
        )
        for m in ms:
            drift = np.abs(out[m] - fine[m]).max()
            if drift > verify_tol:
                raise QuadratureUnconverged(
                    f"C^{m} moved by {drift:.2e} under grid doubling (tol {verify_tol:.1e})"
                )
    return out


def _decay_estimate(coeffs: RealSpaceCoefficients) -> dict:
    """Crude decay model of |C^m| vs |m| over the computed coefficients."""
    gen = coeffs.lattice.generators
    rs, vals = [], []
    for m, mat in coeffs.matrices.items():
        r = float(np.linalg.norm(np.asarray(m, float) @ gen))
        v = float(np.abs(mat).max())
        if r > 0 and v > 0:
            rs.append(r)
            vals.append(v)
    if len(rs) < 3:
        return {"model": "inconclusive"}
    rs, vals = np.asarray(rs), np.asarray(vals)
    logv = np.log(vals)
    slope_alg = np.polyfit(np.log(rs), logv, 1)
    slope_exp = np.polyfit(rs, logv, 1)
    res_alg = np.sum((np.polyval(slope_alg, np.log(rs)) - logv) ** 2)
    res_exp = np.sum((np.polyval(slope_exp, rs) - logv) ** 2)
    if res_alg <= res_exp:
        return {"model": "algebraic", "exponent": float(-slope_alg[0])}
    return {"model": "exponential", "rate": float(-slope_exp[0])}


def truncated_matrix(coeffs: RealSpaceCoefficients, r: float) -> CapacitanceBlocks:
    """Block-Toeplitz truncation C_t(r) with blocks C^{m-n}."""
    index = lattice_points(coeffs.lattice, r)
    return truncated_matrix_indexed(coeffs, index)


def truncated_matrix_indexed(
    coeffs: RealSpaceCoefficients, index: TruncationIndex
) -> CapacitanceBlocks:
    N = coeffs.n_res
    nb = len(index)
    entries = np.empty((nb * N, nb * N))
    cm = index.coeffs
    for a in range(nb):
        for b in range(nb):
            entries[a * N : (a + 1) * N, b * N : (b + 1) * N] = coeffs[cm[a] - cm[b]]
    return CapacitanceBlocks(
        block_index=tuple(tuple(int(v) for v in m) for m in cm),
        n_res=N,
        entries=entries,
        provenance="truncatedInfinite",
        geometry_hash=structure_hash(coeffs.geometry_hash, "C_t", cm),
    )


def truncated_floquet_transform(
    u: np.ndarray, index: TruncationIndex, n_res: int, alpha_grid: np.ndarray
) -> np.ndarray:
    """(u hat)_alpha = sum_{m in I_r} (u)_m e^{i alpha . m}, per grid node.

    Returns an array of shape (len(alpha_grid), n_res).
    """
    u = np.asarray(u)
    nb = len(index)
    if u.shape[0] != nb * n_res:
        raise LengthMismatch(f"vector length {u.shape[0]} != {nb} blocks x {n_res}")
    blocks = u.reshape(nb, n_res)
    alpha_grid = np.atleast_2d(np.asarray(alpha_grid, dtype=float))
    phases = np.exp(1j * alpha_grid @ index.points.T)  # (n_alpha, nb)
    return phases @ blocks


@dataclass(frozen=True)
class QuasiperiodicityEstimate:
    """Sub-grid peak of the truncated Floquet spectrum, with its mirror."""

    alpha: np.ndarray
    mirror: np.ndarray
    peak_norm: float
    flat: bool  # True when no dominant Bloch peak exists (prominence < 2x median)


def estimate_quasiperiodicity(
    u: np.ndarray, index: TruncationIndex, n_res: int, quad: BZQuadrature
) -> QuasiperiodicityEstimate:
    """Grid argmax of ||u hat||_2 refined by one quadratic interpolation step."""
    hat = truncated_floquet_transform(u, index, n_res, quad.nodes)
    norms = np.linalg.norm(hat, axis=-1)
    k = int(np.argmax(norms))
    peak = float(norms[k])
    flat = peak < 2.0 * float(np.median(norms))

    d = quad.lattice.d
    shape = (quad.m,) * d
    idx = np.array(np.unravel_index(k, shape))
    bz = dual_basis(quad.lattice)
    frac = quad.fractional[k].copy()
    # per-axis quadratic refinement on the periodic grid
    for ax in range(d):
        lo = idx.copy()
        hi = idx.copy()
        lo[ax] = (lo[ax] - 1) % quad.m
        hi[ax] = (hi[ax] + 1) % quad.m
        ym = norms[int(np.ravel_multi_index(lo, shape))]
        yp = norms[int(np.ravel_multi_index(hi, shape))]
        denom = ym - 2.0 * peak + yp
        if denom < 0:
            frac[ax] += 0.5 * (ym - yp) / denom / quad.m
    alpha = frac @ bz.duals
    # keep the mirror inside the fundamental torus
    mfrac = -frac
    mirror = mfrac @ bz.duals
    return QuasiperiodicityEstimate(alpha=alpha, mirror=mirror, peak_norm=peak, flat=flat)
