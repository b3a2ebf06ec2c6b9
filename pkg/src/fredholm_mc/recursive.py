"""Recursive stage estimator with geometric sample allocation.

Stage ``m`` draws its own ``n(m)`` fresh uniform points ``xi`` and defines

    x_m(t) = f(t) + (1 / n(m)) * sum_l K(t, xi_l) * x_{m-1}(xi_l),

starting from ``x_0 = f``. The previous stage is evaluated exactly at the new
points through its own stored samples; no interpolation is involved. Each
stage function is needed only at the next stage's points, so a single
forward sweep evaluates every point once.

Draw cost is ``sum_m n(m)`` against ``sum_d d * n(d)`` for the dependent
trial method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from fredholm_mc import rng as rngmod
from fredholm_mc._parallel import ordered_map
from fredholm_mc.dtm import (
    Allocation,
    BudgetError,
    DrawCounter,
    Scheme,
    SolutionEstimate,
    kernel_average,
)
from fredholm_mc.problem import FredholmProblem
from fredholm_mc.reference import GridFunction, partial_sums

GATE_FACTOR = 4


def _recursive_replicate(problem: FredholmProblem, alloc: Allocation, seed: int, r: int):
    dom = problem.domain
    kern = problem.kernel
    M = alloc.depth
    counter = DrawCounter()
    prev_samples = prev_weights = None
    stages = []
    for m in range(1, M + 1):
        n = alloc.n(m)
        # keyed by distance from the final stage: deeper runs reuse the outer stages
        xi = dom.sample(rngmod.stream(seed, rngmod.SAMPLES, r, M - m + 1), n)
        counter.add(n)
        at_xi = problem.free_term(xi)
        if prev_samples is not None:
            at_xi = at_xi + kernel_average(kern, xi, prev_samples, prev_weights)
        weights = at_xi / n
        stages.append(problem.free_values + kernel_average(kern, dom.points, xi, weights))
        prev_samples, prev_weights = xi, weights
    return stages, counter.draws


def recursive_solve(problem: FredholmProblem, alloc: Allocation, seed: int, replicates: int = 1) -> SolutionEstimate:
    """Run the stage recursion ``replicates`` times with keyed streams.

    ``per_order[m - 1]`` is the stage-``m`` function ``x_{m, n(m)}`` on the
    grid; ``mean`` is the final stage.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    results = ordered_map(
        lambda r: _recursive_replicate(problem, alloc, seed, r), range(replicates)
    )
    counter = DrawCounter()
    for _, k in results:
        counter.add(k)
    dom = problem.domain
    stages0 = results[0][0]
    reps = np.stack([s[-1] for s, _ in results]) if replicates >= 2 else None
    return SolutionEstimate(
        mean=GridFunction(stages0[-1], dom),
        per_order=[GridFunction(v, dom) for v in stages0],
        draws=counter,
        seed=int(seed),
        allocation=alloc,
        method="recursive",
        replicates=reps,
    )


def geometric_allocate(M: int, budget: int) -> Allocation:
    """Halving allocation ``n(M - k) = max(2, budget // 2**(k+1))``.

    Requires ``budget >= 4 * 2**(M+1)``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    gate = GATE_FACTOR * 2 ** (M + 1)
    if budget < gate:
        raise BudgetError(
            f"budget {budget} violates N >> 2^(M+1): need N >= {gate} for M={M}"
        )
    counts = tuple(max(2, budget // 2 ** (M - m + 1)) for m in range(1, M + 1))
    return Allocation(counts, Scheme.RECURSIVE_GEOMETRIC, int(budget))


@dataclass(frozen=True)
class VarianceDecomposition:
    """Coefficients of the stage-noise expansion of ``x_{M, n(M)}``.

    ``sigma_terms[k] = 1 / sqrt(n(M) n(M-1) ... n(M-k))`` multiplies the
    noise field ``tau_{M, M-1, ..., M-k}``; ``bound`` is
    ``constant_slot * sum(sigma_terms**2)``.
    """

    sigma_terms: Tuple[float, ...]
    bound: float
    constant_slot: float = 1.0


def recursive_variance_bound(
    problem: FredholmProblem, alloc: Allocation, constant: float = 1.0
) -> VarianceDecomposition:
    if not constant > 0:
        raise ValueError("constant must be positive")
    sigmas = []
    prod = 1
    for m in range(alloc.depth, 0, -1):
        prod *= alloc.n(m)
        sigmas.append(1.0 / math.sqrt(prod))
    bound = constant * sum(s * s for s in sigmas)
    return VarianceDecomposition(tuple(sigmas), bound, constant)


def product_series(alloc: Allocation) -> float:
    """``1/n(M) + 1/(n(M) n(M-1)) + ... + 1/(n(M) ... n(1))``."""
    return recursive_variance_bound(None, alloc, 1.0).bound


def fit_variance_constant(replicates: np.ndarray, alloc: Allocation) -> float:
    """Pilot fit of the slot constant: grid-max replicate variance over the product series."""
    var = np.var(np.asarray(replicates), axis=0, ddof=1)
    return float(np.max(var) / product_series(alloc))


def _vk(kw: np.ndarray, k: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """``V_K[R](t1, t2) = int K(t1, s) K(t2, s) R(s, s) mu(ds)``."""
    return (kw * np.diag(cov)) @ k.T


@dataclass
class CovarianceFamilies:
    """Grid covariance surfaces keyed by stage path.

    ``surfaces[(m,)]`` is ``R_m`` and ``surfaces[(m, m-1, ..., m-k)]`` is the
    covariance of the noise field that enters stage ``m`` from stage
    ``m - k``, i.e. ``V_K`` applied ``k`` times to ``R_{m-k}``.
    """

    surfaces: Dict[Tuple[int, ...], np.ndarray]

    def primary(self, m: int) -> np.ndarray:
        return self.surfaces[(m,)]

    def matrices(self) -> List[np.ndarray]:
        return list(self.surfaces.values())


def covariance_recursion(problem: FredholmProblem, M: int) -> CovarianceFamilies:
    """Theoretical stage covariances on the grid, using the oracle ``x_m = z^{(m)}``.

    ``R_{m+1} = int K1 K2 x_m^2 - int K1 x_m * int K2 x_m`` for ``m < M``;
    chained families follow by repeated ``V_K``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    k = problem.kernel_matrix
    kw = k * problem.weights
    xs = partial_sums(problem, M - 1)
    surfaces: Dict[Tuple[int, ...], np.ndarray] = {}
    for m in range(M):
        xm = xs[m]
        km = kw @ xm
        r = (kw * xm**2) @ k.T - np.outer(km, km)
        surfaces[(m + 1,)] = 0.5 * (r + r.T)
    for top in range(2, M + 1):
        for length in range(1, top):
            prev = surfaces[tuple(range(top - 1, top - 1 - length, -1))]
            v = _vk(kw, k, prev)
            surfaces[tuple(range(top, top - length - 1, -1))] = 0.5 * (v + v.T)
    return CovarianceFamilies(surfaces)


def recursive_predicted_covariance(problem: FredholmProblem, alloc: Allocation) -> np.ndarray:
    """Covariance of :func:`recursive_solve`'s output on the grid, by quadrature.

    With ``C_m`` the stage-``m`` covariance and ``n = n(m+1)``:

        C_{m+1} = (R_{m+1} + V_K[C_m]) / n + (1 - 1/n) * K C_m K^T

    The last term carries the earlier stages' noise through the kernel
    without the ``1/n`` damping.
    """
    k = problem.kernel_matrix
    kw = k * problem.weights
    size = problem.domain.size
    cov = np.zeros((size, size))
    xm = np.array(problem.free_values)
    for m in range(1, alloc.depth + 1):
        n = alloc.n(m)
        km = kw @ xm
        r = (kw * (xm**2 + np.diag(cov))) @ k.T - np.outer(km, km)
        cov = r / n + (1.0 - 1.0 / n) * (kw @ cov @ kw.T)
        cov = 0.5 * (cov + cov.T)
        xm = problem.free_values + km
    return cov
