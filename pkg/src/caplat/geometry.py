"""Lattices, truncation index sets, resonator placement, and sphere meshing."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLattice, LevelTooLarge, OverlapDetected

__all__ = [
    "LatticeSpec",
    "BrillouinZone",
    "Sphere",
    "UnitCell",
    "TruncationIndex",
    "SurfaceMesh",
    "dual_basis",
    "lattice_points",
    "build_finite_structure",
    "mesh_sphere",
    "structure_hash",
]

#: minimum allowed surface gap between spheres, relative to the smaller radius
DISJOINT_MARGIN = 1e-6


@dataclass(frozen=True)
class LatticeSpec:
    """A d-dimensional lattice embedded in R^3 (d in {1, 2, 3})."""

    d: int
    generators: np.ndarray  # (d, 3)

    def __post_init__(self):
        gen = np.atleast_2d(np.asarray(self.generators, dtype=float))
        if self.d not in (1, 2, 3) or gen.shape != (self.d, 3):
            raise ValueError(f"need {self.d} generators of length 3, got {gen.shape}")
        object.__setattr__(self, "generators", gen)
        scale = np.max(np.abs(gen))
        gram = gen @ gen.T
        if np.linalg.det(gram) <= 1e-12 * scale ** (2 * self.d):
            raise DegenerateLattice("lattice generators are numerically dependent")

    @property
    def cell_measure(self) -> float:
        """d-volume |Y| of the fundamental domain in the lattice directions."""
        gram = self.generators @ self.generators.T
        return float(math.sqrt(np.linalg.det(gram)))

    @classmethod
    def cubic(cls, d: int, a: float) -> "LatticeSpec":
        """Axis-aligned (hyper)cubic lattice with lattice constant a."""
        return cls(d=d, generators=a * np.eye(3)[:d])

    def point(self, coeffs) -> np.ndarray:
        """Physical lattice point for integer coefficients."""
        return np.asarray(coeffs, dtype=float) @ self.generators


@dataclass(frozen=True)
class BrillouinZone:
    """Dual lattice basis with alpha_i . l_j = 2 pi delta_ij."""

    duals: np.ndarray  # (d, 3)
    volume: float

    @property
    def d(self) -> int:
        return self.duals.shape[0]


def dual_basis(lattice: LatticeSpec) -> BrillouinZone:
    """Dual vectors within span(generators) satisfying biorthogonality."""
    gen = lattice.generators
    gram = gen @ gen.T
    try:
        duals = 2.0 * math.pi * np.linalg.solve(gram, gen)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded in ctor
        raise DegenerateLattice(str(exc)) from exc
    vol = float(math.sqrt(np.linalg.det(duals @ duals.T)))
    return BrillouinZone(duals=duals, volume=vol)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def translated(self, shift: np.ndarray) -> "Sphere":
        return Sphere(center=self.center + shift, radius=self.radius)


def _check_disjoint(spheres, context=""):
    for i, a in enumerate(spheres):
        for b in spheres[i + 1 :]:
            gap = np.linalg.norm(a.center - b.center) - a.radius - b.radius
            if gap <= DISJOINT_MARGIN * min(a.radius, b.radius):
                raise OverlapDetected(
                    f"spheres at {a.center} and {b.center} overlap {context}"
                )


@dataclass(frozen=True)
class UnitCell:
    """Ordered resonators within one fundamental cell."""

    spheres: tuple[Sphere, ...]
    lattice: LatticeSpec

    def __post_init__(self):
        object.__setattr__(self, "spheres", tuple(self.spheres))
        if len(self.spheres) < 1:
            raise ValueError("unit cell needs at least one sphere")
        # disjointness within the cell and against first-shell images
        shifts = [np.zeros(3)]
        for coeffs in itertools.product([-1, 0, 1], repeat=self.lattice.d):
            if any(coeffs):
                shifts.append(self.lattice.point(coeffs))
        placed = [s.translated(t) for t in shifts for s in self.spheres]
        _check_disjoint(placed, "(under lattice translation)")

    @property
    def n_resonators(self) -> int:
        return len(self.spheres)

    @property
    def volumes(self) -> np.ndarray:
        """Per-resonator volumes |D_i|."""
        return np.array([4.0 / 3.0 * math.pi * s.radius**3 for s in self.spheres])


@dataclass(frozen=True)
class TruncationIndex:
    """Lattice points m with |m| < r, in lexicographic integer-coordinate order."""

    r: float
    coeffs: np.ndarray  # (n, d) integer coordinates
    points: np.ndarray  # (n, 3) physical lattice vectors

    def __len__(self) -> int:
        return self.points.shape[0]


def lattice_points(lattice: LatticeSpec, r: float) -> TruncationIndex:
    """Enumerate {m in Lambda : |m| < r} exactly."""
    if not r > 0:
        raise ValueError("truncation radius must be positive")
    gen = lattice.generators
    # bound on integer coordinates: |m_int| <= r * ||row of gram^-1 gen|| safe bound
    gram = gen @ gen.T
    inv = np.linalg.inv(gram)
    bounds = [int(math.floor(r * math.sqrt(inv[i, i]))) for i in range(lattice.d)]
    coeffs = []
    for c in itertools.product(*[range(-b, b + 1) for b in bounds]):
        p = np.asarray(c, dtype=float) @ gen
        if np.dot(p, p) < r * r:
            coeffs.append(c)
    coeffs.sort()
    carr = np.asarray(coeffs, dtype=int).reshape(len(coeffs), lattice.d)
    return TruncationIndex(r=r, coeffs=carr, points=carr @ gen)


def build_finite_structure(cell: UnitCell, index: TruncationIndex):
    """Translate the unit cell to every truncation point.

    Returns a list of (m_coeffs, resonator_index, Sphere) in canonical block
    order: lexicographic in the integer coordinates of m, then resonator index.
    """
    placed = []
    for mc, mp in zip(index.coeffs, index.points):
        for i, s in enumerate(cell.spheres):
            placed.append((tuple(int(v) for v in mc), i, s.translated(mp)))
    _check_disjoint([p[2] for p in placed], "(in finite structure)")
    return placed


def structure_hash(*parts) -> str:
    """Stable short hash of geometry/backend descriptors (arrays, scalars, str).

    Floats are rounded to 12 significant digits so the hash is insensitive to
    representation noise but still keyed to the actual geometry.
    """
    import hashlib
    import json

    def canon(obj):
        if isinstance(obj, np.ndarray):
            return [canon(v) for v in obj.tolist()]
        if isinstance(obj, (list, tuple)):
            return [canon(v) for v in obj]
        if isinstance(obj, float):
            return float(f"{obj:.12g}")
        if isinstance(obj, (int, str, bool)) or obj is None:
            return obj
        if isinstance(obj, dict):
            return {str(k): canon(v) for k, v in sorted(obj.items())}
        return repr(obj)

    blob = json.dumps([canon(p) for p in parts], separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SurfaceMesh:
    """Watertight triangle mesh of a sphere surface."""

    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    refinement_level: int
    centroids: np.ndarray = field(init=False)
    areas: np.ndarray = field(init=False)
    normals: np.ndarray = field(init=False)

    def __post_init__(self):
        v = self.vertices[self.triangles]
        cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        self.centroids = v.mean(axis=1)
        self.areas = 0.5 * np.linalg.norm(cross, axis=-1)
        self.normals = cross / np.linalg.norm(cross, axis=-1, keepdims=True)

    @property
    def n_panels(self) -> int:
        return self.triangles.shape[0]

    def total_area(self) -> float:
        return float(self.areas.sum())


_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=float,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=int,
)

MAX_MESH_LEVEL = 7


def mesh_sphere(sphere: Sphere, level: int) -> SurfaceMesh:
    """Icosphere: subdivide an icosahedron `level` times, project to the sphere."""
    if level < 0 or level > MAX_MESH_LEVEL:
        raise LevelTooLarge(f"mesh level {level} outside [0, {MAX_MESH_LEVEL}]")
    verts = list(_ICO_VERTS / np.linalg.norm(_ICO_VERTS[0]))
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                p = verts[i] + verts[j]
                verts.append(p / np.linalg.norm(p))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    vertices = sphere.center + sphere.radius * np.asarray(verts)
    mesh = SurfaceMesh(
        vertices=vertices,
        triangles=np.asarray(faces, dtype=int),
        refinement_level=level,
    )
    # orient all triangles outward (icosahedron table is outward; assert anyway)
    out = np.einsum("ij,ij->i", mesh.normals, mesh.centroids - sphere.center)
    if np.any(out <= 0):  # pragma: no cover - construction guarantees this
        raise RuntimeError("mesh orientation error")
    return mesh
