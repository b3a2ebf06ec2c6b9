"""Deterministic grid oracle: Neumann iteration with the grid quadrature.

``K^d[f]`` is built by ``d`` successive applications of the one-dimensional
quadrature operator. On the grid this is the same number as the explicit
``d``-fold kernel-product integral, at ``O(M * size**2)`` cost.

Notation: the Neumann terms are sometimes written ``z_d`` and sometimes
``x_d``; both refer to ``terms[d]`` here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from fredholm_mc.problem import Domain, FredholmProblem

DEPTH_CAP = 10_000


class DepthCapError(RuntimeError):
    """Neumann depth needed for the tolerance exceeds the cap (rho too close to 1)."""


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real values on the grid of ``domain``."""

    values: np.ndarray
    domain: Domain

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.domain.size,):
            raise ValueError(f"expected {self.domain.size} grid values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function has non-finite values")
        object.__setattr__(self, "values", v)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def to_csv(self, path) -> None:
        write_grid_csv(path, self.domain, {"value": self.values})


def write_grid_csv(path, domain: Domain, columns: dict, extra: dict | None = None) -> None:
    """One row per grid point: coordinates ``x1..xd`` then the given columns.

    ``extra`` holds constant columns (e.g. band kind) repeated on every row.
    A column given as ``None`` is written as ``NA`` (unavailable).
    """
    pts = domain.points
    coord_names = [f"x{i + 1}" for i in range(domain.dim)]
    extra = extra or {}
    cols = [None if c is None else np.asarray(c, dtype=float) for c in columns.values()]
    tail = [str(v) for v in extra.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(coord_names + list(columns) + list(extra))
        for i, p in enumerate(pts):
            vals = ["NA" if c is None else format(c[i], ".17g") for c in cols]
            w.writerow([format(x, ".17g") for x in p] + vals + tail)


def read_grid_csv(path, domain: Domain, column: str = "value") -> GridFunction:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return GridFunction(np.array([float(r[column]) for r in rows]), domain)


def _check_domain(problem: FredholmProblem, g: GridFunction) -> None:
    if g.domain != problem.domain:
        raise ValueError("grid function lives on a different domain than the problem")


def apply_operator(problem: FredholmProblem, g: GridFunction) -> GridFunction:
    """``t -> sum_s w_s K(t, s) g(s)`` on the grid."""
    _check_domain(problem, g)
    return GridFunction((problem.kernel_matrix * problem.weights) @ g.values, problem.domain)


def neumann_iterate(problem: FredholmProblem, depth: int) -> Tuple[List[GridFunction], GridFunction]:
    """Terms ``K^d[f]`` for ``d = 0..depth`` and their partial sum."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    kw = problem.kernel_matrix * problem.weights
    cur = np.array(problem.free_values)
    terms = [GridFunction(cur, problem.domain)]
    total = cur.copy()
    for _ in range(depth):
        cur = kw @ cur
        terms.append(GridFunction(cur, problem.domain))
        total = total + cur
    return terms, GridFunction(total, problem.domain)


def partial_sums(problem: FredholmProblem, depth: int) -> List[np.ndarray]:
    """``z^{(m)}`` on the grid for ``m = 0..depth``."""
    terms, _ = neumann_iterate(problem, depth)
    return list(np.cumsum([t.values for t in terms], axis=0))


def truncation_bound(rho: float, f_norm: float, depth: int) -> float:
    """``||f|| rho^(M+1) / (1 - rho)``: sup distance from the depth-M partial sum to the solution."""
    return f_norm * rho ** (depth + 1) / (1.0 - rho)


def depth_for(rho: float, f_norm: float, eps: float, minimum: int = 1) -> int:
    """Smallest ``M >= minimum`` with ``truncation_bound(rho, f_norm, M) <= eps``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    M = minimum
    while truncation_bound(rho, f_norm, M) > eps:
        M += 1
        if M > DEPTH_CAP:
            raise DepthCapError(
                f"depth cap {DEPTH_CAP} exceeded: rho={rho:.6g} too close to 1 for eps={eps:g}"
            )
    return M


def choose_depth(problem: FredholmProblem, eps: float) -> int:
    return depth_for(problem.rho, problem.f_norm, eps, minimum=1)


def solve_reference(problem: FredholmProblem, tol: float = 1e-12) -> Tuple[GridFunction, int]:
    """Grid fixed point to within ``tol`` in the grid sup-norm.

    Returns the partial sum ``z^{(M)}`` and the depth ``M`` used.
    """
    M = depth_for(problem.rho, problem.f_norm, tol, minimum=0)
    _, total = neumann_iterate(problem, M)
    return total, M
