import numpy as np
import pytest

from caplat.errors import LengthMismatch, MissingCoefficient
from caplat.floquet import (
    bz_quadrature,
    estimate_quasiperiodicity,
    real_space_capacitance,
    truncated_floquet_transform,
    truncated_matrix,
)
from caplat.geometry import LatticeSpec, Sphere, UnitCell, lattice_points
from caplat.latticegreen import quasi_capacitance
from caplat.singlelayer import SphericalMultipole

LAT = LatticeSpec.cubic(1, 3.0)
CELL = UnitCell(spheres=(Sphere(center=np.zeros(3), radius=1.0),), lattice=LAT)
BACKEND = SphericalMultipole(2)


def test_bz_quadrature_avoids_gamma_and_mirrors():
    quad = bz_quadrature(LAT, 8)
    assert len(quad) == 8
    norms = np.linalg.norm(quad.nodes, axis=-1)
    assert norms.min() > 1e-10
    assert quad.weights.sum() == pytest.approx(2 * np.pi / 3.0)
    for k in range(8):
        mk = quad.mirror_index(k)
        assert np.allclose(quad.nodes[mk], -quad.nodes[k], atol=1e-14)


def test_bz_quadrature_2d_mirror():
    quad = bz_quadrature(LatticeSpec.cubic(2, 2.0), 4)
    for k in range(len(quad)):
        assert np.allclose(quad.nodes[quad.mirror_index(k)], -quad.nodes[k], atol=1e-14)


@pytest.fixture(scope="module")
def coeffs():
    quad = bz_quadrature(LAT, 64)
    ms = [(m,) for m in range(-8, 9)]
    return real_space_capacitance(CELL, ms, quad, BACKEND), quad


def test_real_space_coefficients_real_symmetric(coeffs):
    co, _ = coeffs
    assert np.isrealobj(co[(0,)])
    # inversion symmetry of the centered chain: C^m = C^{-m}
    for m in (1, 3, 7):
        assert co[(m,)][0, 0] == pytest.approx(co[(-m,)][0, 0], rel=1e-12)
    with pytest.raises(MissingCoefficient):
        co[(99,)]


def test_resynthesis_matches_quasi_sample(coeffs):
    co, quad = coeffs
    # sum_m C^m e^{i alpha m} reproduces Chat^alpha on the sampled grid
    alpha = quad.nodes[13]
    acc = sum(
        co[(m,)][0, 0] * np.exp(1j * alpha @ (np.array([m]) @ LAT.generators))
        for m in range(-8, 9)
    )
    ref = quasi_capacitance(CELL, alpha, BACKEND).matrix[0, 0]
    assert acc == pytest.approx(ref, rel=2e-2)  # truncated at |m| <= 8


def test_truncated_matrix_is_block_toeplitz(coeffs):
    co, _ = coeffs
    Ct = truncated_matrix(co, 7.0)
    assert Ct.provenance == "truncatedInfinite"
    idx = Ct.block_index
    n = len(idx)
    for a in range(n):
        for b in range(n):
            m = idx[a][0] - idx[b][0]
            assert Ct.entries[a, b] == pytest.approx(co[(m,)][0, 0], rel=1e-12)
    assert np.allclose(Ct.entries, Ct.entries.T, atol=1e-12)


def test_transform_length_check():
    index = lattice_points(LAT, 7.0)
    with pytest.raises(LengthMismatch):
        truncated_floquet_transform(np.ones(7), index, 2, np.zeros((1, 3)))


def test_quasiperiodicity_estimate_recovers_bloch_vector():
    index = lattice_points(LAT, 40.0)
    quad = bz_quadrature(LAT, 128)
    a0 = 0.47  # not on the grid
    u = np.exp(1j * a0 * index.points[:, 0])
    est = estimate_quasiperiodicity(u, index, 1, quad)
    assert not est.flat
    best = min(
        abs(est.alpha[0] - a0), abs(est.mirror[0] - a0)
    )
    assert best < 2e-3


def test_quasiperiodicity_flat_for_localized_vector():
    index = lattice_points(LAT, 40.0)
    quad = bz_quadrature(LAT, 128)
    u = np.zeros(len(index))
    u[len(index) // 2] = 1.0
    est = estimate_quasiperiodicity(u, index, 1, quad)
    assert est.flat
