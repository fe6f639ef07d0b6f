import numpy as np
import pytest
import scipy.linalg

from caplat.errors import (
    NegativeEigenvalue,
    NonPositiveDefect,
    SupportOutsideTruncation,
    ZeroVector,
)
from caplat.geometry import LatticeSpec, lattice_points
from caplat.spectra import (
    DefectSpec,
    MaterialParams,
    build_defect_matrix,
    defect_eigensolve,
    defect_root,
    localization_metrics,
    refined_defect_root,
    resonant_frequencies,
)

LAT = LatticeSpec.cubic(1, 3.0)


def test_defect_matrix_identity_without_entries():
    index = lattice_points(LAT, 7.0)
    diag = build_defect_matrix(DefectSpec(entries=()), index, 2)
    assert np.all(diag == 1.0)
    assert diag.shape == (2 * len(index),)


def test_defect_matrix_places_entry():
    index = lattice_points(LAT, 7.0)
    spec = DefectSpec.single_site(0.5, m=(1,), i=1)
    diag = build_defect_matrix(spec, index, 2)
    k = [tuple(c) for c in index.coeffs].index((1,))
    assert diag[2 * k + 1] == pytest.approx(1.5)
    assert diag.sum() == pytest.approx(2 * len(index) + 0.5)


def test_defect_outside_support_rejected():
    index = lattice_points(LAT, 4.0)
    with pytest.raises(SupportOutsideTruncation):
        build_defect_matrix(DefectSpec.single_site(1.0, m=(9,)), index, 1)


def test_nonpositive_defect_rejected():
    with pytest.raises(NonPositiveDefect):
        DefectSpec.single_site(-1.0)


def test_eigensolve_matches_nonsymmetric_oracle():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(12, 12))
    C = A @ A.T + 12 * np.eye(12)  # SPD
    b = rng.uniform(0.3, 2.5, size=12)
    res = defect_eigensolve(C, b)
    ref = np.sort(scipy.linalg.eig(np.diag(b) @ C)[0].real)
    assert np.allclose(res.eigenvalues, ref, rtol=1e-10, atol=1e-10)
    # eigenvectors solve the nonsymmetric problem
    R = np.diag(b) @ C @ res.eigenvectors - res.eigenvectors * res.eigenvalues
    assert np.abs(R).max() < 1e-8 * res.eigenvalues.max()


def test_eigensolve_diagonal_case():
    C = np.diag([1.0, 4.0, 9.0])
    res = defect_eigensolve(C, np.ones(3))
    assert np.allclose(res.eigenvalues, [1.0, 4.0, 9.0])


def test_eigensolve_folds_material_scaling():
    C = np.eye(2) * 5.0
    mats = MaterialParams(delta=[2.0, 2.0], v=[1.0, 1.0], volume=[4.0, 4.0])
    res = defect_eigensolve(C, np.ones(2), materials=mats)
    assert np.allclose(res.eigenvalues, 5.0 * 0.5)


def test_defect_root_none_for_nonpositive_eta():
    lam = np.linspace(1.0, 2.0, 50)
    assert defect_root(lam, 0.0) is None
    assert defect_root(lam, -0.3) is None


def test_defect_root_solves_equation():
    lam = np.linspace(1.0, 2.0, 501)
    eta = 0.7
    root = defect_root(lam, eta)
    assert root > lam.max()
    assert eta * np.mean(lam / (root - lam)) == pytest.approx(1.0, abs=1e-9)


def test_defect_root_monotone_in_eta():
    lam = 2.0 + np.cos(np.linspace(0.01, np.pi, 300))
    roots = [defect_root(lam, e) for e in (0.05, 0.1, 0.2, 0.5, 1.0)]
    assert all(a < b for a, b in zip(roots, roots[1:]))
    # small eta: root hugs the band top from above
    assert roots[0] - lam.max() < 0.2


def test_defect_root_large_eta_asymptote():
    lam = np.linspace(0.5, 1.5, 200)
    eta = 1e4
    root = defect_root(lam, eta)
    assert root == pytest.approx(eta * lam.mean(), rel=1e-3)


def test_refined_root_stabilizes_on_smooth_band():
    def sampler(m):
        a = (np.arange(m) + 0.5) / m - 0.5
        return 2.0 + np.cos(2 * np.pi * a)

    root = refined_defect_root(sampler, 1.0, m0=32)
    exact = defect_root(sampler(4096), 1.0)
    assert root == pytest.approx(exact, rel=1e-5)


def test_resonant_frequencies():
    w = resonant_frequencies([0.04, 0.25])
    assert np.allclose(w, [0.2, 0.5])
    with pytest.raises(NegativeEigenvalue):
        resonant_frequencies([-1e-6, 1.0])


def test_localization_metrics_exponential_mode():
    index = lattice_points(LAT, 62.0)  # cells -20..20
    m = index.coeffs[:, 0]
    u = np.exp(-np.abs(m).astype(float))
    out = localization_metrics(u, index, 1)
    assert out["peak_cell"] == (0,)
    assert out["decay"]["rate"] == pytest.approx(1.0, abs=1e-10)
    assert out["decay"]["r2"] > 0.999


def test_participation_ratio_limits():
    index = lattice_points(LAT, 31.0)
    n = len(index)
    uniform = localization_metrics(np.ones(n), index, 1)
    assert uniform["participation_ratio"] == pytest.approx(1.0)
    spike = np.zeros(n)
    spike[0] = 1.0
    single = localization_metrics(spike, index, 1)
    assert single["participation_ratio"] == pytest.approx(1.0 / n)
    with pytest.raises(ZeroVector):
        localization_metrics(np.zeros(n), index, 1)
