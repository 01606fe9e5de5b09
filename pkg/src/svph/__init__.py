"""Spectral and statistical toolkit for partially hyperbolic torus maps."""

from .errors import (AliasingSuspected, BranchMatchingFailed, BudgetExceeded,
                     ConeNotInvariant, DecompositionInconsistent,
                     DegenerateComponent, EigenSolverDiverged,
                     NonDecayingCorrelations, NonPositiveDeterminant,
                     NumericalDiagnostic, RootCountMismatch, SvphError,
                     ValidationError, WeightMismatch)
from .fourier import CoeffTable
from .maps import Jacobian2, MapSpec, Observable

__version__ = "0.1.0"
