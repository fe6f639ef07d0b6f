import math

import numpy as np
import pytest

from caplat.errors import GammaPointRequested
from caplat.geometry import LatticeSpec, Sphere, UnitCell
from caplat.harmonics import harmonic_index
from caplat.latticegreen import (
    Kummer,
    QuasiMomentum,
    SpectralEwald,
    band_function,
    near_gamma_expansion,
    quasi_capacitance,
    quasi_greens,
    quasi_greens_direct,
    reduce_quasimomentum,
    solid_lattice_sums,
)
from caplat.spectra import MaterialParams

LAT1 = LatticeSpec.cubic(1, 3.0)
LAT2 = LatticeSpec.cubic(2, 3.0)
LAT3 = LatticeSpec.cubic(3, 3.0)


def test_gamma_point_rejected():
    with pytest.raises(GammaPointRequested):
        QuasiMomentum(np.zeros(3))


def test_reduce_quasimomentum_idempotent_and_equivalent():
    alpha = np.array([2.9, 0.0, 0.0])
    qm = reduce_quasimomentum(alpha, LAT1)
    assert np.linalg.norm(qm.vector) <= math.pi / 3.0 + 1e-12
    again = reduce_quasimomentum(qm.vector, LAT1)
    assert np.allclose(again.vector, qm.vector)
    # equivalence: e^{i alpha . m} unchanged on lattice points
    m = LAT1.point([5])
    assert np.exp(1j * alpha @ m) == pytest.approx(np.exp(1j * qm.vector @ m), abs=1e-12)


def test_kummer_matches_direct_oracle_1d():
    alpha = np.array([0.7, 0.0, 0.0])
    for x in ([1.1, 0.4, -0.3], [0.2, 1.4, 0.0], [-0.9, 0.0, 0.8]):
        fast = quasi_greens(x, alpha, LAT1, Kummer())
        slow = quasi_greens_direct(x, alpha, LAT1, cutoff=400)
        assert abs(fast - slow) < 1e-9


def test_ewald_matches_direct_oracle_2d():
    alpha = np.array([0.8, -0.5, 0.0])
    for x in ([1.0, 0.7, 0.4], [0.3, -1.1, 0.9]):
        fast = quasi_greens(x, alpha, LAT2, SpectralEwald())
        slow = quasi_greens_direct(x, alpha, LAT2, cutoff=120)
        assert abs(fast - slow) < 1e-8


def test_ewald_matches_direct_oracle_3d():
    alpha = np.array([0.9, 0.7, -0.6])  # away from Gamma so the window converges
    x = np.array([1.2, 0.5, -0.4])
    fast = quasi_greens(x, alpha, LAT3, SpectralEwald())
    slow = quasi_greens_direct(x, alpha, LAT3, cutoff=45)
    assert abs(fast - slow) < 1e-7


def test_ewald_splitting_independence_3d():
    alpha = np.array([0.5, 0.3, 0.2])
    x = np.array([1.0, 0.2, 0.6])
    vals = [
        quasi_greens(x, alpha, LAT3, SpectralEwald(splitting=s)) for s in (0.4, 0.6, 0.9)
    ]
    assert abs(vals[0] - vals[1]) < 1e-10
    assert abs(vals[1] - vals[2]) < 1e-10


def _sigma_direct(alpha, lattice, delta, lmax, cutoff):
    # brute-force windowed structure sum for the oracle
    from caplat.latticegreen import _enumerate_coeffs, _ramp_weight
    from caplat.harmonics import eval_irregular_harmonics

    scale = min(np.linalg.norm(g) for g in lattice.generators)
    coeffs = _enumerate_coeffs(lattice, 2.0 * cutoff * scale)
    pts = coeffs @ lattice.generators
    diffs = np.asarray(delta, float) - pts
    keep = np.linalg.norm(diffs, axis=-1) > 1e-12
    w = _ramp_weight(np.linalg.norm(pts, axis=-1) / (cutoff * scale))[keep]
    phases = np.exp(1j * pts[keep] @ np.asarray(alpha, float))
    harm = eval_irregular_harmonics(diffs[keep], lmax)
    return harm @ (phases * w)


@pytest.mark.parametrize(
    "lattice,alpha,cutoff",
    [
        (LAT1, [0.9, 0.0, 0.0], 400),
        (LAT2, [0.8, -0.6, 0.0], 120),
        (LAT3, [0.9, 0.8, -0.7], 40),
    ],
)
def test_solid_sums_match_direct(lattice, alpha, cutoff):
    delta = np.array([0.6, -0.3, 0.2])
    fast = solid_lattice_sums(np.asarray(alpha), lattice, delta, 3)
    slow = _sigma_direct(alpha, lattice, delta, 3, cutoff)
    assert np.abs(fast - slow).max() < 1e-6


def test_solid_sums_excluded_point():
    # Delta on the lattice: the coincident term is dropped, sum stays finite
    sig = solid_lattice_sums(np.array([0.7, 0.0, 0.0]), LAT1, np.zeros(3), 2)
    assert np.all(np.isfinite(sig))
    # monopole term agrees with the lattice-only kernel at the origin
    slow = 0.0 + 0.0j
    for m in range(-3000, 3001):
        if m == 0:
            continue
        slow += np.exp(1j * 0.7 * 3.0 * m) / abs(3.0 * m)
    # sigma_00 = (kernel sum without its 1/(4 pi)) * Y00
    assert sig[0] == pytest.approx(slow / math.sqrt(4 * math.pi), abs=1e-4)


def _one_sphere_cell(lattice):
    return UnitCell(spheres=(Sphere(center=np.zeros(3), radius=1.0),), lattice=lattice)


def test_quasi_capacitance_hermitian_and_conjugate_symmetry():
    cell = UnitCell(
        spheres=(
            Sphere(center=np.zeros(3), radius=1.0),
            Sphere(center=np.array([0.0, 3.0, 0.0]), radius=0.8),
        ),
        lattice=LAT1,
    )
    alpha = np.array([0.6, 0.0, 0.0])
    C = quasi_capacitance(cell, alpha).matrix
    assert np.allclose(C, C.conj().T, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(C) > 0)
    Cm = quasi_capacitance(cell, -alpha).matrix
    assert np.allclose(Cm, C.conj(), atol=1e-10)


def test_band_function_sorted_positive():
    cell = _one_sphere_cell(LAT2)
    mats = MaterialParams.uniform(cell)
    grid = np.array([[0.5, 0.2, 0.0], [0.9, -0.4, 0.0]])
    bands = band_function(cell, mats, grid)
    assert bands.shape == (2, 1)
    assert np.all(bands > 0)


def test_near_gamma_expansion_residual_shrinks():
    cell = _one_sphere_cell(LAT3)
    res = [
        near_gamma_expansion(cell, np.array([a, 0.7 * a, 0.0]))["residual"]
        for a in (0.2, 0.1)
    ]
    assert res[1] < res[0]
