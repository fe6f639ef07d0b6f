"""Solid spherical harmonics, translation identities, and sphere quadrature.

Everything downstream of the multipole backend reduces to three ingredients
collected here:

* Cartesian monomial expansions of the solid harmonics ``r^l Y_lm`` (orthonormal,
  Condon-Shortley phase), which let us evaluate harmonics at arbitrary point
  clouds without trigonometric bookkeeping.
* The translation theorem for irregular solid harmonics, which turns the
  sphere-to-sphere coupling of the Laplace kernel into a finite algebraic
  contraction.
* Exact product quadrature on the sphere (Gauss-Legendre x trapezoid), used for
  band-limited surface integrals and as an independent check on the algebra.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

__all__ = [
    "solid_harmonic_monomials",
    "eval_solid_harmonics",
    "eval_irregular_harmonics",
    "real_harmonic_transform",
    "sphere_quadrature",
    "translation_weight",
    "num_harmonics",
]


def num_harmonics(lmax: int) -> int:
    """Number of (l, m) pairs with l <= lmax."""
    return (lmax + 1) ** 2


def harmonic_index(l: int, m: int) -> int:
    """Flat index of (l, m) in the canonical l-major, m ascending ordering."""
    return l * l + l + m


@lru_cache(maxsize=None)
def solid_harmonic_monomials(l: int, m: int) -> tuple[tuple[int, int, int, complex], ...]:
    """Monomial expansion of the solid harmonic r^l Y_lm.

    Returns tuples (a, b, c, coeff) with r^l Y_lm = sum coeff * x^a y^b z^c.
    Uses the closed form

        r^l Y_lm = N_lm sum_{p-q=m, p+q+s=l} (-(x+iy)/2)^p ((x-iy)/2)^q z^s / (p! q! s!)

    with N_lm = sqrt((2l+1)/(4 pi) * (l+m)! (l-m)!), valid for m >= 0; negative
    m follows from Y_{l,-m} = (-1)^m conj(Y_lm).
    """
    if m < 0:
        conj = solid_harmonic_monomials(l, -m)
        sign = (-1) ** m
        return tuple((a, b, c, sign * coeff.conjugate()) for a, b, c, coeff in conj)
    norm = math.sqrt(
        (2 * l + 1) / (4 * math.pi) * math.factorial(l + m) * math.factorial(l - m)
    )
    terms: dict[tuple[int, int, int], complex] = {}
    for p in range(m, l + 1):
        q = p - m
        s = l - p - q
        if s < 0:
            continue
        pref = norm / (math.factorial(p) * math.factorial(q) * math.factorial(s))
        # (-(x+iy)/2)^p ((x-iy)/2)^q expanded binomially
        for jp in range(p + 1):
            for jq in range(q + 1):
                a = jp + jq
                b = (p - jp) + (q - jq)
                coeff = (
                    pref
                    * (-0.5) ** p
                    * 0.5**q
                    * math.comb(p, jp)
                    * math.comb(q, jq)
                    * (1j) ** (p - jp)
                    * (-1j) ** (q - jq)
                )
                key = (a, b, s)
                terms[key] = terms.get(key, 0.0) + coeff
    return tuple((a, b, c, v) for (a, b, c), v in sorted(terms.items()) if v != 0)


def eval_solid_harmonics(points: np.ndarray, lmax: int) -> np.ndarray:
    """Evaluate all solid harmonics r^l Y_lm(x) for l <= lmax.

    points: (..., 3). Returns complex array of shape (num_harmonics(lmax), ...).
    """
    points = np.asarray(points, dtype=float)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    # Precompute monomial powers up to lmax.
    xp = [np.ones_like(x)]
    yp = [np.ones_like(y)]
    zp = [np.ones_like(z)]
    for _ in range(lmax):
        xp.append(xp[-1] * x)
        yp.append(yp[-1] * y)
        zp.append(zp[-1] * z)
    out = np.empty((num_harmonics(lmax),) + x.shape, dtype=complex)
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            acc = np.zeros(x.shape, dtype=complex)
            for a, b, c, coeff in solid_harmonic_monomials(l, m):
                acc += coeff * xp[a] * yp[b] * zp[c]
            out[harmonic_index(l, m)] = acc
    return out


def eval_irregular_harmonics(points: np.ndarray, lmax: int) -> np.ndarray:
    """Evaluate Y_lm(x^)/|x|^(l+1) for all l <= lmax at nonzero points."""
    points = np.asarray(points, dtype=float)
    r2 = np.sum(points * points, axis=-1)
    solid = eval_solid_harmonics(points, lmax)
    out = np.empty_like(solid)
    for l in range(lmax + 1):
        scale = r2 ** (-(2 * l + 1) / 2.0)
        for m in range(-l, l + 1):
            k = harmonic_index(l, m)
            out[k] = solid[k] * scale
    return out


@lru_cache(maxsize=None)
def real_harmonic_transform(lmax: int) -> np.ndarray:
    """Unitary map U with real-basis functions Z_n = sum_m Y_(l,m) U[m, n].

    Columns are ordered like the complex basis; for each l the column at
    (l, -|m|) is the sine harmonic and (l, +|m|) the cosine harmonic.
    """
    n = num_harmonics(lmax)
    U = np.zeros((n, n), dtype=complex)
    s = 1.0 / math.sqrt(2.0)
    for l in range(lmax + 1):
        U[harmonic_index(l, 0), harmonic_index(l, 0)] = 1.0
        for m in range(1, l + 1):
            ip, im = harmonic_index(l, m), harmonic_index(l, -m)
            cs = (-1) ** m
            # cosine-type column at +m, sine-type at -m
            U[im, ip] = s
            U[ip, ip] = cs * s
            U[im, im] = 1j * s
            U[ip, im] = -cs * 1j * s
    return U


@lru_cache(maxsize=None)
def _sphere_nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    t, wt = np.polynomial.legendre.leggauss(order)
    phi = 2.0 * math.pi * np.arange(2 * order) / (2 * order)
    ct = t[:, None]
    st = np.sqrt(1.0 - ct * ct)
    dirs = np.stack(
        [
            np.broadcast_to(st * np.cos(phi)[None, :], (order, 2 * order)),
            np.broadcast_to(st * np.sin(phi)[None, :], (order, 2 * order)),
            np.broadcast_to(ct, (order, 2 * order)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    w = (wt[:, None] * (math.pi / order)).repeat(2 * order).reshape(order, 2 * order)
    return dirs, w.reshape(-1)


def sphere_quadrature(center: np.ndarray, radius: float, order: int):
    """Surface quadrature on a sphere, exact for spherical-harmonic band 2*order-1.

    Returns (points (P,3), weights (P,)) with weights summing to 4 pi R^2.
    """
    dirs, w = _sphere_nodes(order)
    return np.asarray(center, dtype=float) + radius * dirs, w * radius * radius


@lru_cache(maxsize=None)
def _k_norm(l: int, m: int) -> float:
    """Normalization K_lm with Y_lm = K_lm P_l^m(cos t) e^(i m phi)."""
    return math.sqrt(
        (2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m)
    )


@lru_cache(maxsize=None)
def translation_weight(l_src: int, m_src: int, l_tgt: int, m_tgt: int) -> float:
    """Scalar weight w such that the Galerkin element of the 1/(4 pi |x-y|)
    kernel between source density Y_(l_src,m_src) and target test function
    conj(Y_(l_tgt,m_tgt)) on spheres with displacement d = c_tgt - c_src is

        w * R_src^(l_src+2) * R_tgt^(l_tgt+2)
          * Y_(l_src+l_tgt, m_src-m_tgt)(d^) / |d|^(l_src+l_tgt+1)

    (zero whenever |m_src - m_tgt| > l_src + l_tgt).  Derived from the
    irregular-harmonic translation theorem; validated against brute-force
    surface quadrature in the test suite.
    """
    l, m = l_src, m_src
    j, k = l_tgt, m_tgt
    L, M = l + j, m - k
    if abs(M) > L:
        return 0.0

    # Work with the scaled harmonics I~_l^m = (l-m)! P_l^m e^{im phi} / r^{l+1}
    # and R~_j^k = r^j P_j^k e^{ik phi} / (j+k)!, for which the translation
    # theorem takes the form
    #     I~_l^m(d + r) = sum_{j,k} (-1)^{j+k} R~_j^k(r) I~_{l+j}^{m-k}(d)
    # for |r| < |d|.  Both relate to the orthonormal basis by factors uniform
    # in |m|:
    #     I~_l^m = (l-|m|)!/K_{l,|m|} * Y_lm / r^{l+1}
    #     R~_j^k = 1/((j+|k|)! K_{j,|k|}) * (r^j Y_jk)
    def itilde(l_, m_):
        return math.factorial(l_ - abs(m_)) / _k_norm(l_, abs(m_))

    def rtilde(j_, k_):
        return 1.0 / (math.factorial(j_ + abs(k_)) * _k_norm(j_, abs(k_)))

    # Exterior potential of the density Y_lm on a unit source sphere is
    # R^{l+2}/(2l+1) * Y_lm(rho^)/rho^{l+1}; projecting the translated field on
    # conj(Y_jk) over the target sphere picks the single (j, k) term, since
    # conj(Y_jk) pairs with the Y_jk inside R~_j^k.
    src = 1.0 / ((2 * l + 1) * itilde(l, m))
    tgt = rtilde(j, k)
    emit = itilde(L, M)
    return (-1) ** (j + k) * src * tgt * emit
