import math

import numpy as np
import pytest

from caplat.errors import IllConditioned
from caplat.geometry import LatticeSpec, Sphere, UnitCell, lattice_points, mesh_sphere
from caplat.harmonics import sphere_quadrature
from caplat.singlelayer import (
    CapacitanceBlocks,
    PanelP0,
    SphericalMultipole,
    capacitance_matrix,
    check_capacitance_invariants,
    finite_capacitance,
    triangle_potential,
)


def two_sphere_image_oracle(R: float, c: float, n_terms: int = 50) -> np.ndarray:
    """Capacitance of two equal spheres by the classical image-charge series.

    Sphere A at potential 1, sphere B grounded; images alternate between the
    spheres, each reflection q -> -q R/(c - x) at distance R^2/(c - x) from the
    reflecting center.  C entries follow by symmetry and superposition.
    """
    qa, xa = [R], [0.0]  # charges inside A (positions measured from A)
    qb, xb = [], []
    q, x = R, 0.0
    for k in range(n_terms):
        if k % 2 == 0:  # reflect the newest A-side charge in B
            q = -q * R / (c - x)
            x = c - R * R / (c - x)
            qb.append(q)
            xb.append(x)
        else:  # reflect in A
            q = -q * R / x
            x = R * R / x
            qa.append(q)
            xa.append(x)
    Qa, Qb = sum(qa), sum(qb)
    # potentials (1,0): charge on A is 4 pi Qa, on B is 4 pi Qb
    return 4.0 * math.pi * np.array([[Qa, Qb], [Qb, Qa]])


def test_isolated_sphere_multipole_exact():
    C = capacitance_matrix([Sphere(center=np.zeros(3), radius=2.5)], SphericalMultipole(0))
    assert C[0, 0] == pytest.approx(4 * math.pi * 2.5, rel=1e-12)
    # higher orders change nothing for a single sphere
    C4 = capacitance_matrix([Sphere(center=np.zeros(3), radius=2.5)], SphericalMultipole(4))
    assert C4[0, 0] == pytest.approx(C[0, 0], rel=1e-12)


def test_isolated_sphere_panel_converges():
    sphere = [Sphere(center=np.array([0.3, -0.2, 1.0]), radius=1.0)]
    exact = 4 * math.pi
    errs = [abs(capacitance_matrix(sphere, PanelP0(lv))[0, 0] - exact) for lv in (1, 2, 3)]
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] < 0.01 * exact


def test_two_spheres_match_image_series():
    oracle = two_sphere_image_oracle(1.0, 4.0)
    spheres = [
        Sphere(center=np.zeros(3), radius=1.0),
        Sphere(center=np.array([4.0, 0.0, 0.0]), radius=1.0),
    ]
    C = capacitance_matrix(spheres, SphericalMultipole(5))
    assert np.abs(C - oracle).max() < 1e-6
    # truncation error decreases with order
    err3 = np.abs(capacitance_matrix(spheres, SphericalMultipole(3)) - oracle).max()
    err5 = np.abs(C - oracle).max()
    assert err5 < err3


def test_panel_multipole_cross_check():
    spheres = [
        Sphere(center=np.zeros(3), radius=1.0),
        Sphere(center=np.array([0.0, 3.5, 0.0]), radius=0.8),
    ]
    Cm = capacitance_matrix(spheres, SphericalMultipole(4))
    Cp = capacitance_matrix(spheres, PanelP0(3))
    assert np.abs(Cp - Cm).max() < 0.02 * np.abs(Cm).max()


def test_triangle_potential_against_quadrature():
    tri = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.2, 0.9, 0.0]])
    targets = np.array([[0.5, 0.3, 0.7], [2.0, -1.0, 0.1], [0.4, 0.2, 0.0]])
    vals = triangle_potential(tri, targets)
    # Duffy-style brute force: subdivide the triangle and sum 1/(4 pi r)
    n = 600
    u = np.random.default_rng(0).random((n * 50, 2))
    u = u[u.sum(axis=1) < 1.0][:n]
    pts = tri[0] + u[:, :1] * (tri[1] - tri[0]) + u[:, 1:] * (tri[2] - tri[0])
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    for t, v in zip(targets[:2], vals[:2]):  # off-plane targets only (MC is crude)
        mc = area / n * np.sum(1.0 / (4 * math.pi * np.linalg.norm(pts - t, axis=-1)))
        assert v == pytest.approx(mc, rel=0.05)
    assert np.all(vals > 0)


def test_capacitance_invariants_random_suite():
    rng = np.random.default_rng(11)
    for _ in range(8):
        n = rng.integers(2, 5)
        centers = rng.normal(size=(n, 3)) * 4.0
        # push apart until disjoint
        radii = rng.uniform(0.4, 0.9, size=n)
        ok = False
        for _ in range(200):
            d = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            if np.all(d > radii[:, None] + radii[None, :] + 0.3):
                ok = True
                break
            centers *= 1.15
        assert ok
        spheres = [Sphere(center=c, radius=r) for c, r in zip(centers, radii)]
        backend = SphericalMultipole(2) if rng.random() < 0.7 else PanelP0(2)
        C = capacitance_matrix(spheres, backend)
        check_capacitance_invariants(C)


def test_finite_capacitance_blocks_and_json_roundtrip():
    lat = LatticeSpec.cubic(1, 3.0)
    cell = UnitCell(spheres=(Sphere(center=np.zeros(3), radius=1.0),), lattice=lat)
    C = finite_capacitance(cell, 4.0, SphericalMultipole(2))
    assert C.block_index == ((-1,), (0,), (1,))
    assert C.provenance == "finite"
    # translation symmetry of the mirror pair
    assert C.block((-1,), (0,))[0, 0] == pytest.approx(C.block((0,), (1,))[0, 0], rel=1e-10)
    back = CapacitanceBlocks.from_json_dict(C.to_json_dict())
    assert np.allclose(back.entries, C.entries)
    assert back.block_index == C.block_index


def test_touching_spheres_rejected():
    spheres = [
        Sphere(center=np.zeros(3), radius=1.0),
        Sphere(center=np.array([2.0, 0.0, 0.0]), radius=1.0),
    ]
    with pytest.raises(Exception):  # geometry-level overlap guard
        capacitance_matrix(spheres, SphericalMultipole(2))
