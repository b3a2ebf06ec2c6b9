"""Monte Carlo solvers for linear Fredholm integral equations of the second kind.

The package pairs a recursive (stage-by-stage) Monte Carlo estimator with the
classical dependent-trial estimator, a deterministic grid oracle, and
uniform-norm confidence bands.
"""

from fredholm_mc.problem import (
    ConstantKernel,
    ContractionError,
    Domain,
    FredholmProblem,
    GaussianKernel,
    IdentityFreeTerm,
    OneFreeTerm,
    SeparableKernel,
    TabulatedFreeTerm,
    TabulatedKernel,
)
from fredholm_mc.reference import GridFunction, neumann_iterate, solve_reference
from fredholm_mc.dtm import Allocation, SolutionEstimate, dtm_allocate, dtm_solve
from fredholm_mc.recursive import geometric_allocate, recursive_solve
from fredholm_mc.confidence import ConfidenceBand, asymptotic_band, subgaussian_band

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "ConfidenceBand",
    "ConstantKernel",
    "ContractionError",
    "Domain",
    "FredholmProblem",
    "GaussianKernel",
    "GridFunction",
    "IdentityFreeTerm",
    "OneFreeTerm",
    "SeparableKernel",
    "SolutionEstimate",
    "TabulatedFreeTerm",
    "TabulatedKernel",
    "asymptotic_band",
    "dtm_allocate",
    "dtm_solve",
    "geometric_allocate",
    "neumann_iterate",
    "recursive_solve",
    "solve_reference",
    "subgaussian_band",
]
