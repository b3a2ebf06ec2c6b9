"""Equation definition: domain, kernel, free term and operator constants.

The domain is the unit cube ``[0, 1]**dim`` with the uniform probability
measure. Integrals over the measure are replaced by a fixed quadrature on the
regular evaluation grid, and sup-norms by maxima over the same grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

QUADRATURES = ("trapezoid", "equal")


class ContractionError(ValueError):
    """Raised when the kernel operator is not a contraction on the grid."""


@lru_cache(maxsize=32)
def _grid_points(dim: int, G: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, G)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    pts.setflags(write=False)
    return pts


@lru_cache(maxsize=32)
def _grid_weights(dim: int, G: int, quadrature: str) -> np.ndarray:
    if quadrature == "trapezoid":
        w1 = np.full(G, 1.0 / (G - 1))
        w1[0] = w1[-1] = 0.5 / (G - 1)
    else:
        w1 = np.full(G, 1.0 / G)
    w = w1
    for _ in range(dim - 1):
        w = np.multiply.outer(w, w1).ravel()
    w.setflags(write=False)
    return w


@dataclass(frozen=True)
class Domain:
    """Unit cube with uniform probability measure and a regular grid.

    ``quadrature`` selects the grid weights used for every integral:
    ``"trapezoid"`` (tensor trapezoid rule, the default) or ``"equal"``
    (plain average over grid points).
    """

    dim: int = 1
    grid_points_per_axis: int = 33
    quadrature: str = "trapezoid"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.grid_points_per_axis < 2:
            raise ValueError(
                f"grid_points_per_axis must be >= 2, got {self.grid_points_per_axis}"
            )
        if self.quadrature not in QUADRATURES:
            raise ValueError(f"quadrature must be one of {QUADRATURES}")

    @property
    def size(self) -> int:
        return self.grid_points_per_axis**self.dim

    @property
    def points(self) -> np.ndarray:
        """Grid points, shape ``(size, dim)``, C order over axes."""
        return _grid_points(self.dim, self.grid_points_per_axis)

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights summing to one (total measure)."""
        return _grid_weights(self.dim, self.grid_points_per_axis, self.quadrature)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` independent points from the uniform measure."""
        return rng.random((n, self.dim))


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


class Kernel:
    """Base class for kernels ``K(t, s)`` on the unit cube.

    Subclasses implement :meth:`pairwise`; :meth:`diagonal` and
    :meth:`factors` have generic fallbacks.
    """

    form: str = ""

    def pairwise(self, t, s) -> np.ndarray:
        """Matrix ``K(t_i, s_j)`` for point arrays of shape ``(a, dim)``, ``(b, dim)``."""
        raise NotImplementedError

    def diagonal(self, t, s) -> np.ndarray:
        """Vector ``K(t_i, s_i)`` for two point arrays of equal length."""
        t, s = _as_points(t), _as_points(s)
        return np.array([self.pairwise(t[i : i + 1], s[i : i + 1])[0, 0] for i in range(len(t))])

    def factors(self) -> Optional[Tuple[Callable, Callable]]:
        """Exact low-rank split ``K(t, s) = A(t) @ B(s).T`` when one exists."""
        return None

    def params(self) -> dict:
        return {}


@dataclass(frozen=True)
class ConstantKernel(Kernel):
    lam: float
    form = "constant"

    def pairwise(self, t, s):
        return np.full((len(_as_points(t)), len(_as_points(s))), float(self.lam))

    def diagonal(self, t, s):
        return np.full(len(_as_points(t)), float(self.lam))

    def factors(self):
        lam = float(self.lam)
        return (
            lambda t: np.full((len(_as_points(t)), 1), lam),
            lambda s: np.ones((len(_as_points(s)), 1)),
        )

    def params(self):
        return {"lambda": float(self.lam)}


@dataclass(frozen=True)
class SeparableKernel(Kernel):
    """``K(t, s) = lam * prod_i t_i * s_i`` (a rank-one kernel)."""

    lam: float
    form = "separable"

    def pairwise(self, t, s):
        t, s = _as_points(t), _as_points(s)
        return self.lam * np.outer(t.prod(axis=1), s.prod(axis=1))

    def diagonal(self, t, s):
        t, s = _as_points(t), _as_points(s)
        return self.lam * t.prod(axis=1) * s.prod(axis=1)

    def factors(self):
        lam = float(self.lam)
        return (
            lambda t: lam * _as_points(t).prod(axis=1)[:, None],
            lambda s: _as_points(s).prod(axis=1)[:, None],
        )

    def params(self):
        return {"lambda": float(self.lam)}


@dataclass(frozen=True)
class GaussianKernel(Kernel):
    """``K(t, s) = lam * exp(-|t - s|**2 / width**2)``."""

    lam: float
    width: float = 1.0
    form = "gaussian"

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("width must be positive")

    def pairwise(self, t, s):
        t, s = _as_points(t), _as_points(s)
        sq = (t * t).sum(1)[:, None] + (s * s).sum(1)[None, :] - 2.0 * t @ s.T
        return self.lam * np.exp(-np.maximum(sq, 0.0) / self.width**2)

    def diagonal(self, t, s):
        t, s = _as_points(t), _as_points(s)
        return self.lam * np.exp(-((t - s) ** 2).sum(1) / self.width**2)

    def params(self):
        return {"lambda": float(self.lam), "w": float(self.width)}


def _interpolator(values: np.ndarray, G: int, ndim: int) -> RegularGridInterpolator:
    axis = np.linspace(0.0, 1.0, G)
    return RegularGridInterpolator([axis] * ndim, values.reshape((G,) * ndim), method="linear")


@dataclass(frozen=True, eq=False)
class TabulatedKernel(Kernel):
    """Kernel given by its values on ``grid x grid``; multilinear in between.

    ``values`` has shape ``(G**dim, G**dim)`` ordered like :attr:`Domain.points`.
    """

    values: np.ndarray
    grid_points_per_axis: int
    dim: int = 1
    form = "tabulated"
    _interp: RegularGridInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n = self.grid_points_per_axis**self.dim
        if v.shape != (n, n):
            raise ValueError(f"tabulated kernel needs shape {(n, n)}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("tabulated kernel has non-finite entries")
        object.__setattr__(self, "values", v)
        object.__setattr__(
            self, "_interp", _interpolator(v, self.grid_points_per_axis, 2 * self.dim)
        )

    def pairwise(self, t, s):
        t, s = _as_points(t), _as_points(s)
        a, b = len(t), len(s)
        pts = np.concatenate(
            [np.repeat(t, b, axis=0), np.tile(s, (a, 1))], axis=1
        )
        return self._interp(np.clip(pts, 0.0, 1.0)).reshape(a, b)

    def diagonal(self, t, s):
        t, s = _as_points(t), _as_points(s)
        return self._interp(np.clip(np.concatenate([t, s], axis=1), 0.0, 1.0))


class FreeTerm:
    form: str = ""

    def __call__(self, t) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class OneFreeTerm(FreeTerm):
    form = "one"

    def __call__(self, t):
        return np.ones(len(_as_points(t)))


@dataclass(frozen=True)
class IdentityFreeTerm(FreeTerm):
    """``f(t) = t_1`` (first coordinate)."""

    form = "identity"

    def __call__(self, t):
        return _as_points(t)[:, 0].astype(float, copy=True)


@dataclass(frozen=True, eq=False)
class TabulatedFreeTerm(FreeTerm):
    values: np.ndarray
    grid_points_per_axis: int
    dim: int = 1
    form = "tabulated"
    _interp: RegularGridInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.shape != (self.grid_points_per_axis**self.dim,):
            raise ValueError("tabulated free term does not match grid size")
        if not np.all(np.isfinite(v)):
            raise ValueError("tabulated free term has non-finite entries")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_interp", _interpolator(v, self.grid_points_per_axis, self.dim))

    def __call__(self, t):
        return self._interp(np.clip(_as_points(t), 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class FredholmProblem:
    """The equation ``z = f + K[z]`` on a gridded unit cube.

    Construction tabulates the kernel on ``grid x grid`` and caches the
    operator constants. A kernel whose grid operator norm ``rho`` is not
    below one raises :class:`ContractionError`.
    """

    domain: Domain
    kernel: Kernel
    free_term: FreeTerm
    require_nonzero_free_term: bool = True
    kernel_matrix: np.ndarray = field(init=False, repr=False)
    free_values: np.ndarray = field(init=False, repr=False)
    rho: float = field(init=False)
    rho_bar: float = field(init=False)
    rho2: float = field(init=False)
    beta: float = field(init=False)

    def __post_init__(self):
        pts = self.domain.points
        kmat = np.asarray(self.kernel.pairwise(pts, pts), dtype=float)
        fvals = np.asarray(self.free_term(pts), dtype=float)
        if not np.all(np.isfinite(kmat)):
            raise ValueError("kernel is not finite on the grid")
        if not np.all(np.isfinite(fvals)):
            raise ValueError("free term is not finite on the grid")
        if self.require_nonzero_free_term and not np.any(fvals):
            raise ValueError("free term vanishes on the whole grid")
        kmat.setflags(write=False)
        fvals.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "kernel_matrix", kmat)
        set_(self, "free_values", fvals)
        set_(self, "rho", compute_rho(self))
        set_(self, "rho_bar", float(np.max(np.abs(kmat))))
        set_(self, "rho2", compute_rho2(self))
        set_(self, "beta", compute_beta(self))
        if not self.rho < 1.0:
            raise ContractionError(
                f"operator norm rho={self.rho:.6g} is not below 1 (contraction required)"
            )

    @property
    def weights(self) -> np.ndarray:
        return self.domain.weights

    @property
    def f_norm(self) -> float:
        """Grid maximum of ``|f|``."""
        return float(np.max(np.abs(self.free_values)))

    def constants(self) -> dict:
        return {
            "rho": self.rho,
            "rho_bar": self.rho_bar,
            "rho2": self.rho2,
            "beta": self.beta,
        }


def compute_rho(problem: FredholmProblem) -> float:
    """Grid maximum over ``t`` of the quadrature of ``|K(t, .)|``."""
    return float(np.max(np.abs(problem.kernel_matrix) @ problem.weights))


def compute_rho2(problem: FredholmProblem) -> float:
    """Grid maximum over ``t`` of the quadrature of ``K(t, .)**2``."""
    return float(np.max(problem.kernel_matrix**2 @ problem.weights))


def compute_beta(problem: FredholmProblem) -> float:
    absk = np.abs(problem.kernel_matrix)
    return float(np.max((absk * problem.weights) @ absk.T))


def kernel_distance(problem: FredholmProblem, t1: int, t2: int) -> float:
    """L2(mu) distance between the kernel slices at grid indices ``t1`` and ``t2``."""
    diff = problem.kernel_matrix[t1] - problem.kernel_matrix[t2]
    return float(np.sqrt(np.dot(diff * diff, problem.weights)))


def kernel_distance_matrix(problem: FredholmProblem) -> np.ndarray:
    k = problem.kernel_matrix
    w = problem.weights
    sq = (k * k) @ w
    gram = (k * w) @ k.T
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass(frozen=True)
class HolderFit:
    alpha: float
    c: float
    degenerate: bool
    pairs: int


def holder_diagnostic(problem: FredholmProblem) -> HolderFit:
    """Fit ``d(t1, t2) ~ c * |t1 - t2|**alpha`` over all distinct grid pairs.

    Purely diagnostic. Returns ``degenerate=True`` (with NaN estimates) when
    every kernel distance vanishes, e.g. for a kernel constant in ``t``.
    """
    if problem.domain.grid_points_per_axis < 8:
        raise ValueError("holder diagnostic needs at least 8 grid points per axis")
    pts = problem.domain.points
    dist = kernel_distance_matrix(problem)
    iu = np.triu_indices(len(pts), k=1)
    d = dist[iu]
    sep = np.linalg.norm(pts[iu[0]] - pts[iu[1]], axis=1)
    scale = max(float(np.max(np.abs(problem.kernel_matrix))), 1e-300)
    keep = d > 1e-12 * scale
    if not np.any(keep):
        return HolderFit(float("nan"), float("nan"), True, 0)
    x, y = np.log(sep[keep]), np.log(d[keep])
    slope, intercept = np.polyfit(x, y, 1)
    return HolderFit(float(slope), float(np.exp(intercept)), False, int(keep.sum()))
