"""Exception hierarchy.

Two families matter to callers: validation errors (bad inputs, malformed
configs) and numerical diagnostics (the computation ran but a sanity
condition failed).  The CLI maps them to exit codes 2 and 3.
"""

from __future__ import annotations


class SvphError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(SvphError):
    """Malformed input: bad config, broken symmetry, violated precondition."""


class NumericalDiagnostic(SvphError):
    """A numerical sanity check failed; results would not be trustworthy."""


class NonPositiveDeterminant(NumericalDiagnostic):
    """det DF <= 0 at a sampled point (orientation assumption broken)."""


class RootCountMismatch(NumericalDiagnostic):
    """Preimage search found a number of roots different from the degree."""

    def __init__(self, expected: int, found: int, where=None):
        self.expected = expected
        self.found = found
        self.where = where
        msg = f"expected {expected} preimages, found {found}"
        if where is not None:
            msg += f" at {where}"
        super().__init__(msg)


class ConeNotInvariant(NumericalDiagnostic):
    """DF maps a boundary vector of the horizontal cone outside the cone."""


class BudgetExceeded(ValidationError):
    """Requested enumeration is larger than the configured budget."""


class AliasingSuspected(NumericalDiagnostic):
    """Doubling the quadrature grid moved matrix entries beyond tolerance."""


class EigenSolverDiverged(NumericalDiagnostic):
    """Eigensolver failed to converge or residuals exceed tolerance."""


class BranchMatchingFailed(NumericalDiagnostic):
    """Eigenvalue branches could not be continued across the twist grid."""


class DecompositionInconsistent(NumericalDiagnostic):
    """Spectral multiplicity and orbit clustering disagree."""

    def __init__(self, spectral_count: int, cluster_count: int, detail: str = ""):
        self.spectral_count = spectral_count
        self.cluster_count = cluster_count
        msg = (f"eigenvalue-1 multiplicity {spectral_count} vs "
               f"{cluster_count} orbit clusters")
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class WeightMismatch(NumericalDiagnostic):
    """Spectral CLT weights disagree with direct basin-mass quadrature."""


class NonDecayingCorrelations(NumericalDiagnostic):
    """Green-Kubo terms do not decay geometrically; sum would be unreliable."""


class DegenerateComponent(NumericalDiagnostic):
    """A component has sigma ~ 0; scaled limit laws are meaningless for it."""

    def __init__(self, k: int, sigma2: float):
        self.k = k
        self.sigma2 = sigma2
        super().__init__(f"component {k} has sigma^2 = {sigma2:.3e}")
