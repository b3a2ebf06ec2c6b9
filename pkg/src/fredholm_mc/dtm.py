"""Dependent Trial Method: one shared sample set per Neumann order.

For order ``d`` the estimator averages ``K_d(t, xi) f(xi_d)`` over ``n(d)``
independent ``d``-vectors of uniform points, where
``K_d(t, s) = K(t, s_1) K(s_1, s_2) ... K(s_{d-1}, s_d)``. The same vectors
serve every grid point ``t``, so the output is a random function.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from fredholm_mc import rng as rngmod
from fredholm_mc._parallel import ordered_map
from fredholm_mc.problem import FredholmProblem, Kernel
from fredholm_mc.reference import GridFunction

# max kernel entries held in memory at once by the dense path
_CHUNK_ENTRIES = 1 << 22


class BudgetError(ValueError):
    """Sample budget too small for the requested allocation."""


class Scheme(str, enum.Enum):
    DTM_OPTIMAL = "dtm_optimal"
    RECURSIVE_GEOMETRIC = "recursive_geometric"
    MANUAL = "manual"


@dataclass(frozen=True)
class Allocation:
    """Per-order sample counts ``counts[d - 1] = n(d)`` for ``d = 1..depth``."""

    counts: tuple
    scheme: Scheme = Scheme.MANUAL
    budget: Optional[int] = None

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) < 1:
            raise ValueError("allocation needs depth >= 1")
        if min(counts) < 2:
            raise ValueError(f"every n(d) must be >= 2, got {counts}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def depth(self) -> int:
        return len(self.counts)

    def n(self, d: int) -> int:
        return self.counts[d - 1]

    def dtm_draws(self) -> int:
        return sum(d * n for d, n in enumerate(self.counts, start=1))

    def recursive_draws(self) -> int:
        return sum(self.counts)

    @property
    def normalization(self) -> float:
        """Squared scale ``s`` of the error field ``sqrt(s) * (estimate - target)``.

        ``budget / 2`` for the geometric scheme, the budget for the DTM
        allocator, and ``n(M)`` otherwise.
        """
        if self.scheme is Scheme.RECURSIVE_GEOMETRIC and self.budget:
            return self.budget / 2.0
        if self.scheme is Scheme.DTM_OPTIMAL and self.budget:
            return float(self.budget)
        return float(self.counts[-1])

    def to_dict(self) -> dict:
        return {"scheme": self.scheme.value, "budget": self.budget, "counts": list(self.counts)}


class DrawCounter:
    """Number of uniform points consumed; only ever increases."""

    def __init__(self, draws: int = 0):
        self._draws = int(draws)

    @property
    def draws(self) -> int:
        return self._draws

    def add(self, k: int) -> None:
        if k < 0:
            raise ValueError("draw counts only increase")
        self._draws += int(k)

    def __int__(self):
        return self._draws

    def __repr__(self):
        return f"DrawCounter({self._draws})"


@dataclass
class SolutionEstimate:
    """Output of a Monte Carlo solve.

    ``mean`` is the estimate from replicate 0. ``replicates`` (shape
    ``(R, grid size)``) holds all ``R`` independent repetitions when
    ``R >= 2``; they feed covariance estimation.
    """

    mean: GridFunction
    per_order: List[GridFunction]
    draws: DrawCounter
    seed: int
    allocation: Allocation
    method: str
    replicates: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_replicates(self) -> int:
        return 1 if self.replicates is None else len(self.replicates)


def kernel_average(kernel: Kernel, points: np.ndarray, samples: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_l K(points, samples_l) * weights_l`` evaluated exactly.

    Uses the kernel's low-rank split when it has one, otherwise dense
    blocks over the samples.
    """
    split = kernel.factors()
    if split is not None:
        a, b = split
        return a(points) @ (b(samples).T @ weights)
    out = np.zeros(len(points))
    step = max(1, _CHUNK_ENTRIES // max(1, len(points)))
    for lo in range(0, len(samples), step):
        hi = lo + step
        out += kernel.pairwise(points, samples[lo:hi]) @ weights[lo:hi]
    return out


def dtm_order_estimate(
    problem: FredholmProblem,
    d: int,
    n: int,
    rng: np.random.Generator,
    counter: Optional[DrawCounter] = None,
) -> GridFunction:
    """Order-``d`` estimate of ``K^d[f]`` on the grid from ``n`` shared ``d``-vectors."""
    if d < 1 or n < 2:
        raise ValueError("need d >= 1 and n >= 2")
    dom = problem.domain
    xi = dom.sample(rng, n * d).reshape(n, d, dom.dim)
    if counter is not None:
        counter.add(n * d)
    kern = problem.kernel
    chain = problem.free_term(xi[:, d - 1])
    for r in range(d - 2, -1, -1):
        chain = chain * kern.diagonal(xi[:, r], xi[:, r + 1])
    vals = kernel_average(kern, dom.points, xi[:, 0], chain / n)
    return GridFunction(vals, dom)


def _dtm_replicate(problem: FredholmProblem, alloc: Allocation, seed: int, r: int):
    counter = DrawCounter()
    orders = [
        dtm_order_estimate(problem, d, alloc.n(d), rngmod.stream(seed, rngmod.SAMPLES, r, d), counter)
        for d in range(1, alloc.depth + 1)
    ]
    total = np.array(problem.free_values)
    for g in orders:
        total = total + g.values
    return total, orders, counter.draws


def dtm_solve(problem: FredholmProblem, alloc: Allocation, seed: int, replicates: int = 1) -> SolutionEstimate:
    """``f + sum_d x_{d, n(d)}`` with independent keyed streams per (replicate, order)."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    results = ordered_map(lambda r: _dtm_replicate(problem, alloc, seed, r), range(replicates))
    counter = DrawCounter()
    for _, _, k in results:
        counter.add(k)
    reps = np.stack([r[0] for r in results]) if replicates >= 2 else None
    return SolutionEstimate(
        mean=GridFunction(results[0][0], problem.domain),
        per_order=results[0][1],
        draws=counter,
        seed=int(seed),
        allocation=alloc,
        method="dtm",
        replicates=reps,
    )


def dtm_variance_bound(problem: FredholmProblem, alloc: Allocation) -> float:
    """``||f||^2 * sum_d rho2^d / n(d)``."""
    r2 = problem.rho2
    return problem.f_norm**2 * sum(r2**d / n for d, n in enumerate(alloc.counts, start=1))


def _order_weights(rho2: float, M: int) -> np.ndarray:
    d = np.arange(1, M + 1, dtype=float)
    if rho2 <= 0.0:
        return 1.0 / d
    return np.sqrt(rho2**d / d)


def dtm_continuous_optimum(problem: FredholmProblem, M: int, budget: float):
    """Unconstrained real minimiser of the variance bound under ``sum d n(d) = budget``.

    Returns ``(n, bound)`` with ``n`` a float array.
    """
    w = _order_weights(problem.rho2, M)
    d = np.arange(1, M + 1)
    n = budget * w / np.sum(d * w)
    bound = problem.f_norm**2 * float(np.sum(problem.rho2**d / n))
    return n, bound


def dtm_allocate(problem: FredholmProblem, M: int, budget: int) -> Allocation:
    """Variance-bound minimising counts with ``sum d n(d) <= budget``.

    Lagrange solution ``n(d) ~ sqrt(rho2^d / d)``, clamped at 2 with the
    remainder refilled, floored, then leftover budget handed out one sample
    at a time to the order with the largest bound reduction per unit cost.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    minimum = M * (M + 1)
    if budget < minimum:
        raise BudgetError(f"DTM budget {budget} below the minimum feasible {minimum} for M={M}")
    d = np.arange(1, M + 1)
    w = _order_weights(problem.rho2, M)
    fixed = np.zeros(M, dtype=bool)
    while True:
        free_cost = np.sum(d[~fixed] * w[~fixed])
        c = (budget - 2 * np.sum(d[fixed])) / free_cost
        newly = (~fixed) & (c * w < 2.0)
        if not newly.any():
            break
        fixed |= newly
        if fixed.all():
            break
    counts = np.where(fixed, 2, np.floor(c * w)).astype(np.int64)
    counts = np.maximum(counts, 2)
    leftover = budget - int(np.sum(d * counts))
    r2 = problem.rho2
    while True:
        best, best_gain = -1, -1.0
        for k in range(M):
            if d[k] > leftover:
                continue
            nk = int(counts[k])
            gain = (r2 ** d[k]) / (nk * (nk + 1)) / d[k]
            if gain > best_gain:
                best, best_gain = k, gain
        if best < 0:
            break
        counts[best] += 1
        leftover -= int(d[best])
    return Allocation(tuple(int(c) for c in counts), Scheme.DTM_OPTIMAL, int(budget))


def dtm_order_variance(problem: FredholmProblem, d: int) -> np.ndarray:
    """Grid variance of a single order-``d`` trial: ``(K^2)^d[f^2] - (K^d[f])^2``.

    Quadrature prediction, used as an oracle and for budget matching.
    """
    w = problem.weights
    k = problem.kernel_matrix
    kw, k2w = k * w, (k * k) * w
    second = problem.free_values**2
    first = np.array(problem.free_values)
    for _ in range(d):
        second = k2w @ second
        first = kw @ first
    return np.maximum(second - first**2, 0.0)


def dtm_predicted_variance(problem: FredholmProblem, alloc: Allocation) -> np.ndarray:
    """Pointwise variance of :func:`dtm_solve` on the grid, by quadrature."""
    out = np.zeros(problem.domain.size)
    for d, n in enumerate(alloc.counts, start=1):
        out += dtm_order_variance(problem, d) / n
    return out


__all__ = [
    "Allocation",
    "BudgetError",
    "DrawCounter",
    "Scheme",
    "SolutionEstimate",
    "dtm_allocate",
    "dtm_continuous_optimum",
    "dtm_order_estimate",
    "dtm_order_variance",
    "dtm_predicted_variance",
    "dtm_solve",
    "dtm_variance_bound",
    "kernel_average",
]
