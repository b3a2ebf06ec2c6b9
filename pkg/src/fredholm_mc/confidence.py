"""Uniform-norm confidence bands around a Monte Carlo solution.

Both band kinds have a constant half-width: a band contains the target at
every grid point exactly when the sup-norm error is below the half-width.

* Asymptotic: the normalised error field is approximately a centred
  Gaussian field. Its covariance is estimated from replicates and the
  quantile of its sup is simulated.
* Non-asymptotic: a subgaussian tail ``P(sup > u) <= exp(-c3 u^2)`` is
  inverted for a given constant ``c3`` (supplied, or fitted on pilot runs).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import linalg

from fredholm_mc import rng as rngmod
from fredholm_mc._parallel import ordered_map
from fredholm_mc.dtm import Allocation, SolutionEstimate
from fredholm_mc.problem import FredholmProblem
from fredholm_mc.recursive import recursive_solve
from fredholm_mc.reference import GridFunction, neumann_iterate, truncation_bound, write_grid_csv

JITTER_REL = 1e-10
JITTER_RETRIES = 3
INFINITE_C3 = math.inf


class FactorizationError(np.linalg.LinAlgError):
    pass


class BandKind(str, enum.Enum):
    ASYMPTOTIC = "asymptotic_clt"
    SUBGAUSSIAN = "nonasymptotic_subgaussian"


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    matrix: np.ndarray
    source: str
    jitter: float = 0.0


@dataclass(frozen=True, eq=False)
class ConfidenceBand:
    """``estimate -/+ half_width`` on the grid.

    ``half_width_scale`` is the quantile ``u`` on the normalised scale;
    ``target`` says what the band covers: the depth-M partial sum
    (``"x_M"``) or the full solution after truncation inflation (``"z"``).
    """

    level: float
    estimate: GridFunction
    lower: GridFunction
    upper: GridFunction
    kind: BandKind
    half_width_scale: float
    half_width: float
    target: str = "x_M"

    @property
    def label(self) -> str:
        if self.target == "z":
            return "solution band (truncation-inflated)"
        return "partial-sum band"

    def contains(self, values) -> bool:
        v = np.asarray(values, dtype=float)
        return bool(np.all(self.lower.values <= v) and np.all(v <= self.upper.values))

    def to_csv(self, path) -> None:
        write_grid_csv(
            path,
            self.estimate.domain,
            {
                "estimate": self.estimate.values,
                "lower": self.lower.values,
                "upper": self.upper.values,
            },
            extra={"kind": self.kind.value, "level": repr(self.level)},
        )

    def summary(self) -> dict:
        return {
            "kind": self.kind.value,
            "level": self.level,
            "half_width": self.half_width,
            "half_width_scale": self.half_width_scale,
            "target": self.target,
            "label": self.label,
        }


def _band(estimate: GridFunction, hw: float, level, kind, u, target="x_M") -> ConfidenceBand:
    dom = estimate.domain
    return ConfidenceBand(
        level=float(level),
        estimate=estimate,
        lower=GridFunction(estimate.values - hw, dom),
        upper=GridFunction(estimate.values + hw, dom),
        kind=kind,
        half_width_scale=float(u),
        half_width=float(hw),
        target=target,
    )


def _as_matrix(replicates: Union[np.ndarray, Sequence[GridFunction]]) -> np.ndarray:
    if isinstance(replicates, np.ndarray):
        return np.asarray(replicates, dtype=float)
    reps = list(replicates)
    if reps and isinstance(reps[0], GridFunction):
        if any(g.domain != reps[0].domain for g in reps):
            raise ValueError("replicates live on different grids")
        return np.stack([g.values for g in reps])
    return np.asarray(reps, dtype=float)


def empirical_covariance(replicates, scale: float = 1.0) -> CovarianceEstimate:
    """``scale`` times the replicate covariance (centred by the replicate mean, divisor R).

    A jitter of ``1e-10 * max diagonal`` is added to the diagonal.
    """
    x = _as_matrix(replicates)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("empirical covariance needs at least 2 replicates")
    centred = x - x.mean(axis=0)
    cov = scale * (centred.T @ centred) / len(x)
    cov = 0.5 * (cov + cov.T)
    jitter = JITTER_REL * float(np.max(np.diag(cov)))
    cov[np.diag_indices_from(cov)] += jitter
    return CovarianceEstimate(cov, f"empirical(R={len(x)})", jitter)


def theoretical_covariance(matrix: np.ndarray, label: str = "theoretical") -> CovarianceEstimate:
    m = 0.5 * (np.asarray(matrix, float) + np.asarray(matrix, float).T)
    jitter = JITTER_REL * float(max(np.max(np.diag(m)), 0.0))
    m = m.copy()
    m[np.diag_indices_from(m)] += jitter
    return CovarianceEstimate(m, label, jitter)


def _factor(cov: CovarianceEstimate) -> np.ndarray:
    m = cov.matrix
    try:
        return linalg.cholesky(m, lower=True)
    except linalg.LinAlgError:
        pass
    jitter = max(cov.jitter, JITTER_REL * float(np.max(np.abs(np.diag(m)))))
    for _ in range(JITTER_RETRIES):
        jitter *= 10.0
        try:
            return linalg.cholesky(m + jitter * np.eye(len(m)), lower=True)
        except linalg.LinAlgError:
            continue
    raise FactorizationError("covariance not factorizable after jitter escalation")


def gaussian_sup_quantile(
    cov: CovarianceEstimate, level: float, sims: int, rng: np.random.Generator
) -> float:
    """Empirical ``level``-quantile of ``max_t |G(t)|`` for ``G ~ N(0, cov)``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if sims < 1000:
        raise ValueError("sims must be >= 1000")
    if float(np.max(np.diag(cov.matrix))) <= 0.0:
        return 0.0
    chol = _factor(cov)
    maxima = np.empty(sims)
    step = max(1, (1 << 22) // len(chol))
    for lo in range(0, sims, step):
        hi = min(sims, lo + step)
        z = rng.standard_normal((hi - lo, len(chol)))
        maxima[lo:hi] = np.max(np.abs(z @ chol.T), axis=1)
    return float(np.quantile(maxima, level))


def asymptotic_band(
    estimate: SolutionEstimate, level: float, sims: int, rng: np.random.Generator
) -> ConfidenceBand:
    if estimate.replicates is None or len(estimate.replicates) < 2:
        raise ValueError("asymptotic band needs an estimate with at least 2 replicates")
    scale = estimate.allocation.normalization
    cov = empirical_covariance(estimate.replicates, scale=scale)
    u = gaussian_sup_quantile(cov, level, sims, rng)
    return _band(estimate.mean, u / math.sqrt(scale), level, BandKind.ASYMPTOTIC, u)


def subgaussian_quantile(level: float, c3: float) -> float:
    """``u`` with ``exp(-c3 u^2) = 1 - level``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if not c3 > 0:
        raise ValueError("c3 must be positive")
    if math.isinf(c3):
        return 0.0
    return math.sqrt(math.log(1.0 / (1.0 - level)) / c3)


def subgaussian_band(estimate: SolutionEstimate, level: float, c3: float) -> ConfidenceBand:
    scale = estimate.allocation.normalization
    u = subgaussian_quantile(level, c3)
    return _band(estimate.mean, u / math.sqrt(scale), level, BandKind.SUBGAUSSIAN, u)


def inflate_for_truncation(band: ConfidenceBand, problem: FredholmProblem, depth: int) -> ConfidenceBand:
    """Widen a partial-sum band by the Neumann tail bound so it covers the solution."""
    extra = truncation_bound(problem.rho, problem.f_norm, depth)
    return _band(
        band.estimate,
        band.half_width + extra,
        band.level,
        band.kind,
        band.half_width_scale,
        target="z",
    )


def fit_subgaussian_constant(u: Sequence[float]) -> float:
    """Largest ``c`` with empirical ``P(U > u_i) <= exp(-c u_i^2)`` at every observation.

    Returns ``inf`` when all observations are zero.
    """
    u = np.sort(np.abs(np.asarray(u, dtype=float)))
    n = len(u)
    if n == 0:
        raise ValueError("no pilot values")
    if not np.any(u > 0):
        return INFINITE_C3
    # fraction strictly above each observation (ties share the smallest rank)
    above = n - np.searchsorted(u, u, side="right")
    surv = above / n
    ok = (surv > 0) & (u > 0)
    if not np.any(ok):
        return INFINITE_C3
    return float(np.min(-np.log(surv[ok]) / u[ok] ** 2))


def pilot_errors(
    problem: FredholmProblem,
    alloc: Allocation,
    pilot_trials: int,
    seed: int,
    solver: Callable = recursive_solve,
) -> np.ndarray:
    """Normalised sup errors ``sqrt(s) * max|x_{M,n} - z^{(M)}|`` over pilot runs."""
    _, target = neumann_iterate(problem, alloc.depth)
    scale = math.sqrt(alloc.normalization)

    def one(i):
        est = solver(problem, alloc, rngmod.derive_seed(seed, rngmod.PILOT, i))
        return scale * float(np.max(np.abs(est.mean.values - target.values)))

    return np.array(ordered_map(one, range(pilot_trials)))


def calibrate_c3(
    problem: FredholmProblem,
    alloc: Allocation,
    pilot_trials: int,
    seed: int,
    solver: Callable = recursive_solve,
) -> float:
    """Fit the subgaussian constant on pilot runs (recursive estimator by default).

    Returns ``math.inf`` when every pilot error vanishes (deterministic problem).
    """
    if pilot_trials < 100:
        raise ValueError("pilot_trials must be >= 100")
    errs = pilot_errors(problem, alloc, pilot_trials, seed, solver)
    raw = float(np.max(errs)) / math.sqrt(alloc.normalization)
    # round-off level: the estimator is deterministic for this problem
    if raw <= 1e-12 * max(1.0, problem.f_norm / (1.0 - problem.rho)):
        return INFINITE_C3
    return fit_subgaussian_constant(errs)


def band_for(
    estimate: SolutionEstimate,
    kind: str,
    level: float,
    *,
    sims: int = 10_000,
    c3: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> ConfidenceBand:
    if kind == "asymptotic":
        if rng is None:
            rng = rngmod.stream(estimate.seed, rngmod.GAUSS)
        return asymptotic_band(estimate, level, sims, rng)
    if kind == "subgaussian":
        if c3 is None:
            raise ValueError("subgaussian band needs c3")
        return subgaussian_band(estimate, level, c3)
    raise ValueError(f"unknown band kind {kind!r}")


__all__ = [
    "BandKind",
    "ConfidenceBand",
    "CovarianceEstimate",
    "asymptotic_band",
    "calibrate_c3",
    "empirical_covariance",
    "fit_subgaussian_constant",
    "gaussian_sup_quantile",
    "inflate_for_truncation",
    "subgaussian_band",
]
