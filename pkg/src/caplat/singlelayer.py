"""Discrete single layer potential and finite capacitance matrices.

The single layer operator with kernel 1/(4 pi |x - y|) is discretized on a
collection of disjoint spheres by one of two interchangeable backends:

* ``SphericalMultipole(order)``: Galerkin in the orthonormal spherical-harmonic
  basis per sphere.  Cross-sphere blocks are exact (finite translation
  algebra), so the error is purely the basis truncation at order L.
* ``PanelP0(level)``: piecewise-constant densities on an icosphere mesh with a
  symmetrized collocation matrix; the analytic flat-triangle potential handles
  self and near interactions.

Capacitance coefficients are C_ij = integral over boundary i of the density
solving S[psi] = indicator of boundary j.  With the positive kernel the matrix
is symmetric positive definite, strictly diagonally dominant, with positive
diagonal and negative off-diagonal entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve, get_lapack_funcs

from . import harmonics as sh
from .errors import IllConditioned, LengthMismatch, LevelTooLarge
from .geometry import (
    MAX_MESH_LEVEL,
    Sphere,
    TruncationIndex,
    UnitCell,
    build_finite_structure,
    lattice_points,
    mesh_sphere,
    structure_hash,
)

__all__ = [
    "SphericalMultipole",
    "PanelP0",
    "DiscreteSingleLayer",
    "CapacitanceBlocks",
    "assemble_single_layer",
    "solve_densities",
    "capacitance_matrix",
    "finite_capacitance",
    "triangle_potential",
    "check_capacitance_invariants",
]

MAX_MULTIPOLE_ORDER = 6
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class SphericalMultipole:
    """Spherical-harmonic Galerkin backend of order L (dof (L+1)^2 per sphere)."""

    order: int

    def __post_init__(self):
        if not 0 <= self.order <= MAX_MULTIPOLE_ORDER:
            raise ValueError(f"multipole order {self.order} outside [0, {MAX_MULTIPOLE_ORDER}]")

    @property
    def dof_per_sphere(self) -> int:
        return sh.num_harmonics(self.order)


@dataclass(frozen=True)
class PanelP0:
    """Piecewise-constant panel backend on a level-`level` icosphere mesh."""

    level: int

    def __post_init__(self):
        if not 0 <= self.level <= MAX_MESH_LEVEL:
            raise LevelTooLarge(f"panel level {self.level} outside [0, {MAX_MESH_LEVEL}]")


@lru_cache(maxsize=None)
def _translation_tables(order: int):
    """Per-(target dof, source dof) weight and combined-harmonic index tables."""
    dof = sh.num_harmonics(order)
    weights = np.zeros((dof, dof))
    combined = np.zeros((dof, dof), dtype=int)
    src_l = np.zeros(dof, dtype=int)
    tgt_l = np.zeros(dof, dtype=int)
    for l in range(order + 1):
        for m in range(-l, l + 1):
            src_l[sh.harmonic_index(l, m)] = l
    tgt_l[:] = src_l
    for l in range(order + 1):
        for m in range(-l, l + 1):
            a = sh.harmonic_index(l, m)
            for j in range(order + 1):
                for k in range(-j, j + 1):
                    b = sh.harmonic_index(j, k)
                    L, M = l + j, m - k
                    if abs(M) > L:
                        continue
                    weights[b, a] = sh.translation_weight(l, m, j, k)
                    combined[b, a] = sh.harmonic_index(L, M)
    return weights, combined, src_l, tgt_l


def _multipole_operator(spheres, order: int) -> np.ndarray:
    """Real symmetric Galerkin matrix of the single layer over all spheres."""
    n = len(spheres)
    dof = sh.num_harmonics(order)
    centers = np.array([s.center for s in spheres])
    radii = np.array([s.radius for s in spheres])
    weights, combined, src_l, tgt_l = _translation_tables(order)

    # displacement d = c_tgt - c_src for every ordered pair; the diagonal is a
    # dummy direction, overwritten by the analytic self blocks below.
    diffs = centers[:, None, :] - centers[None, :, :]
    diffs[np.arange(n), np.arange(n)] = (1.0, 0.0, 0.0)
    irr = sh.eval_irregular_harmonics(diffs, 2 * order)  # (harm, tgt, src)

    # radius powers R^(l+2) for l = 0..order
    rpow = radii[None, :] ** (np.arange(order + 3)[:, None])

    A = np.zeros((n, dof, n, dof), dtype=complex)
    for b in range(dof):
        for a in range(dof):
            w = weights[b, a]
            if w == 0.0:
                continue
            scale = rpow[src_l[a] + 2][None, :] * rpow[tgt_l[b] + 2][:, None]
            A[:, b, :, a] = w * scale * irr[combined[b, a]]
    # analytic self blocks: diag(R^3 / (2l+1))
    for s in range(n):
        A[s, :, s, :] = np.diag(radii[s] ** 3 / (2.0 * src_l + 1.0))

    # rotate each sphere block to the real harmonic basis: B = U^H A U
    U = sh.real_harmonic_transform(order)
    B = np.einsum("pa,tpsq,qb->tasb", U.conj(), A, U, optimize=True)
    B = B.reshape(n * dof, n * dof)
    scale = np.abs(B).max()
    if np.abs(B.imag).max() > 1e-10 * scale:
        raise RuntimeError("multipole operator failed realness check")
    B = B.real
    return 0.5 * (B + B.T)


def triangle_potential(vertices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Potential of a unit constant density on a flat triangle, kernel 1/(4 pi r).

    Closed-form edge decomposition of the integral of 1/|x-y| over the
    triangle; valid for observation points anywhere, including on the panel.
    """
    v = np.asarray(vertices, dtype=float)
    x = np.atleast_2d(np.asarray(points, dtype=float))
    e1, e2 = v[1] - v[0], v[2] - v[0]
    nvec = np.cross(e1, e2)
    nhat = nvec / np.linalg.norm(nvec)
    h = (x - v[0]) @ nhat  # signed height above the plane
    rho = x - h[:, None] * nhat[None, :]
    total = np.zeros(x.shape[0])
    for i in range(3):
        a, b = v[i], v[(i + 1) % 3]
        shat = (b - a) / np.linalg.norm(b - a)
        mhat = np.cross(shat, nhat)  # in-plane outward normal of the edge
        t = (a - rho) @ mhat
        sm = (a - rho) @ shat
        sp = (b - rho) @ shat
        rm = np.linalg.norm(x - a, axis=-1)
        rp = np.linalg.norm(x - b, axis=-1)
        r0sq = t * t + h * h
        # edge log term; the clamp only activates when the point sits on the
        # edge line beyond an endpoint, where the true contribution tends to 0
        num = np.maximum(rp + sp, 1e-300)
        den = np.maximum(rm + sm, 1e-300)
        total += t * np.log(num / den)
        ah = np.abs(h)
        total -= ah * (
            np.arctan2(t * sp, r0sq + ah * rp) - np.arctan2(t * sm, r0sq + ah * rm)
        )
    return total / (4.0 * math.pi)


#: centroid rule beyond this many source-panel diameters; analytic inside.
NEAR_FIELD_DIAMETERS = 2.0


def _panel_operator(spheres, level: int):
    """Symmetrized P0 matrix S[p,q] = area_p * potential of panel q at centroid p."""
    meshes = [mesh_sphere(s, level) for s in spheres]
    centroids = np.concatenate([m.centroids for m in meshes])
    areas = np.concatenate([m.areas for m in meshes])
    tri_verts = np.concatenate([m.vertices[m.triangles] for m in meshes])
    counts = [m.n_panels for m in meshes]
    P = centroids.shape[0]

    edges = tri_verts - tri_verts[:, [1, 2, 0], :]
    diam = np.linalg.norm(edges, axis=-1).max(axis=-1)

    # far field: centroid rule, vectorized over the full pair grid
    dist = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=-1)
    with np.errstate(divide="ignore"):
        phi = areas[None, :] / (4.0 * math.pi * dist)
    # near field (incl. self): analytic panel potential, per source panel
    near = dist <= NEAR_FIELD_DIAMETERS * diam[None, :]
    for q in range(P):
        rows = np.nonzero(near[:, q])[0]
        phi[rows, q] = triangle_potential(tri_verts[q], centroids[rows])
    S = areas[:, None] * phi
    return 0.5 * (S + S.T), meshes, areas, counts


@dataclass
class DiscreteSingleLayer:
    """Dense symmetric (or Hermitian) discretization of the single layer."""

    backend: object
    spheres: tuple
    operator: np.ndarray
    dof_counts: tuple  # dof per sphere, in structure order
    meshes: list | None = None
    _factor: tuple | None = field(default=None, repr=False)
    conditioning: float = field(default=float("nan"))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dof_counts)])

    @property
    def total_dof(self) -> int:
        return int(sum(self.dof_counts))

    def factorize(self):
        """Cholesky factor, computed once; estimates the condition number."""
        if self._factor is None:
            op = self.operator
            anorm = np.linalg.norm(op, 1)
            try:
                self._factor = cho_factor(op, lower=True)
            except np.linalg.LinAlgError as exc:
                raise IllConditioned(f"single layer not positive definite: {exc}") from exc
            pocon = get_lapack_funcs("pocon", (op,))
            rcond, info = pocon(self._factor[0], anorm, uplo="L")[:2]
            if info != 0 or rcond <= 0:
                raise IllConditioned("condition estimate failed")
            self.conditioning = 1.0 / float(rcond)
            if self.conditioning > CONDITION_LIMIT:
                raise IllConditioned(
                    f"condition estimate {self.conditioning:.3e} exceeds {CONDITION_LIMIT:.0e}"
                )
        return self._factor

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if rhs.shape[0] != self.total_dof:
            raise LengthMismatch(
                f"rhs length {rhs.shape[0]} != dof count {self.total_dof}"
            )
        return cho_solve(self.factorize(), rhs)

    def indicator_matrix(self) -> np.ndarray:
        """Columns are the dof-space representations of the boundary indicators.

        Column j is the Galerkin projection of the function 1 on sphere j (and
        0 elsewhere); the same matrix maps a density to its per-sphere surface
        integrals via E^T psi.
        """
        n = len(self.spheres)
        E = np.zeros((self.total_dof, n), dtype=self.operator.dtype)
        off = self.offsets
        if isinstance(self.backend, SphericalMultipole):
            for j, s in enumerate(self.spheres):
                E[off[j], j] = math.sqrt(4.0 * math.pi) * s.radius**2
        else:
            areas = np.concatenate([m.areas for m in self.meshes])
            for j in range(n):
                E[off[j] : off[j + 1], j] = areas[off[j] : off[j + 1]]
        return E


def assemble_single_layer(spheres, backend) -> DiscreteSingleLayer:
    """Discretize the single layer over placed spheres with the given backend."""
    spheres = tuple(spheres)
    from .geometry import _check_disjoint

    _check_disjoint(spheres)
    if isinstance(backend, SphericalMultipole):
        op = _multipole_operator(spheres, backend.order)
        dof = backend.dof_per_sphere
        return DiscreteSingleLayer(
            backend=backend,
            spheres=spheres,
            operator=op,
            dof_counts=(dof,) * len(spheres),
        )
    if isinstance(backend, PanelP0):
        op, meshes, _, counts = _panel_operator(spheres, backend.level)
        return DiscreteSingleLayer(
            backend=backend,
            spheres=spheres,
            operator=op,
            dof_counts=tuple(counts),
            meshes=meshes,
        )
    raise TypeError(f"unknown backend {backend!r}")


def solve_densities(op: DiscreteSingleLayer, targets: np.ndarray | None = None) -> np.ndarray:
    """Densities solving S[psi_j] = indicator j, one column per target.

    `targets` defaults to all boundary indicators; a custom right-hand-side
    matrix in dof space is accepted.
    """
    rhs = op.indicator_matrix() if targets is None else np.asarray(targets)
    return op.solve(rhs)


def capacitance_matrix(spheres, backend) -> np.ndarray:
    """Plain n x n capacitance matrix of a finite collection of spheres."""
    op = assemble_single_layer(spheres, backend)
    E = op.indicator_matrix()
    X = op.solve(E)
    C = E.T @ X
    return 0.5 * (C + C.T)


@dataclass(frozen=True)
class CapacitanceBlocks:
    """Block-indexed symmetric capacitance matrix.

    Rows/columns are ordered (lattice point m lexicographic, then resonator
    index); entry ((m,i),(n,j)) is addressable through `block`.
    """

    block_index: tuple  # ordered tuple of integer lattice coordinates
    n_res: int
    entries: np.ndarray
    provenance: str  # finite | truncatedInfinite | generalized
    geometry_hash: str

    def __post_init__(self):
        nb = len(self.block_index) * self.n_res
        if self.entries.shape != (nb, nb):
            raise LengthMismatch(
                f"entries shape {self.entries.shape} != ({nb}, {nb})"
            )

    @property
    def n_blocks(self) -> int:
        return len(self.block_index)

    def block(self, m, n) -> np.ndarray:
        """N x N block (C^{mn})."""
        bm = self.block_index.index(tuple(m))
        bn = self.block_index.index(tuple(n))
        N = self.n_res
        return self.entries[bm * N : (bm + 1) * N, bn * N : (bn + 1) * N]

    def to_json_dict(self) -> dict:
        return {
            "blockIndex": [list(m) for m in self.block_index],
            "N": self.n_res,
            "rowMajorEntries": self.entries.ravel().tolist(),
            "provenance": self.provenance,
            "geometryHash": self.geometry_hash,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "CapacitanceBlocks":
        idx = tuple(tuple(m) for m in data["blockIndex"])
        n = int(data["N"])
        size = len(idx) * n
        entries = np.asarray(data["rowMajorEntries"], dtype=float).reshape(size, size)
        return cls(
            block_index=idx,
            n_res=n,
            entries=entries,
            provenance=data["provenance"],
            geometry_hash=data["geometryHash"],
        )


def check_capacitance_invariants(C: np.ndarray, rtol: float = 1e-10) -> None:
    """Symmetry, positive definiteness, strict diagonal dominance, sign pattern.

    Raises AssertionError with a description on the first violated property.
    """
    C = np.asarray(C)
    scale = np.abs(C).max()
    assert np.abs(C - C.T).max() <= rtol * scale, "capacitance matrix not symmetric"
    evals = np.linalg.eigvalsh(0.5 * (C + C.T))
    assert evals.min() > 0, f"not positive definite (min eig {evals.min():.3e})"
    d = np.diag(C)
    assert np.all(d > 0), "diagonal entries must be positive"
    off = C - np.diag(d)
    if C.shape[0] > 1:
        assert np.all(off[~np.eye(C.shape[0], dtype=bool)] < 0), (
            "off-diagonal entries must be negative"
        )
    assert np.all(d > np.abs(off).sum(axis=1)), "not strictly diagonally dominant"


def finite_capacitance(cell: UnitCell, r: float, backend) -> CapacitanceBlocks:
    """Capacitance blocks of the finite structure obtained by truncation at r."""
    index = lattice_points(cell.lattice, r)
    return finite_capacitance_indexed(cell, index, backend)


def finite_capacitance_indexed(
    cell: UnitCell, index: TruncationIndex, backend
) -> CapacitanceBlocks:
    placed = build_finite_structure(cell, index)
    C = capacitance_matrix([p[2] for p in placed], backend)
    ghash = structure_hash(
        "finite",
        cell.lattice.d,
        cell.lattice.generators,
        [(s.center, s.radius) for s in cell.spheres],
        index.coeffs,
        repr(backend),
    )
    return CapacitanceBlocks(
        block_index=tuple(tuple(int(v) for v in m) for m in index.coeffs),
        n_res=cell.n_resonators,
        entries=C,
        provenance="finite",
        geometry_hash=ghash,
    )
