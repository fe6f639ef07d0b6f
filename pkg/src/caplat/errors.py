"""Exception types shared across the package."""


class CaplatError(Exception):
    """Base class for all library errors."""


class DegenerateLattice(CaplatError):
    """Lattice generators are numerically linearly dependent."""


class OverlapDetected(CaplatError):
    """Two resonator spheres intersect (or violate the disjointness margin)."""


class LevelTooLarge(CaplatError):
    """Requested mesh refinement level exceeds the supported bound."""


class IllConditioned(CaplatError):
    """Discrete single-layer operator too ill-conditioned to invert reliably."""


class GammaPointRequested(CaplatError):
    """Quasi-momentum alpha = 0 requested; the Gamma point is excluded."""


class CutoffInsufficient(CaplatError):
    """Lattice-sum truncation error estimate exceeds the requested tolerance."""


class QuadratureUnconverged(CaplatError):
    """Brillouin-zone quadrature failed its refinement check."""


class MissingCoefficient(CaplatError):
    """A required real-space capacitance coefficient was not supplied."""


class LengthMismatch(CaplatError):
    """Vector length inconsistent with the structure's block layout."""


class SupportOutsideTruncation(CaplatError):
    """Defect specification touches lattice points outside the truncation."""


class NonPositiveDefect(CaplatError):
    """Defect/material diagonal has a non-positive entry."""


class NegativeEigenvalue(CaplatError):
    """Eigenvalue is negative where a nonnegative one is required."""


class ZeroVector(CaplatError):
    """A zero vector was supplied where a nonzero one is required."""


class BandDataInsufficient(CaplatError):
    """Band samples too coarse near the band edge for the root solve."""


class NoInGapEigenvalue(CaplatError):
    """No eigenvalue found above the band window (defect or size too small)."""


class InsufficientData(CaplatError):
    """Not enough data points for a rate fit."""
