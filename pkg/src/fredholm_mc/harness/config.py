"""Experiment configuration: flat TOML files with dotted keys.

Example::

    domain.dim = 1
    domain.grid = 33
    kernel.form = "separable"
    kernel.lambda = 0.9
    free_term.form = "identity"

    method = "recursive"
    depth.M = 3
    budget = 1024
    replicates = 200
    band.kind = "asymptotic"
    band.level = 0.95
    seed = 12345

The problem keys (``domain.*``, ``kernel.*``, ``free_term.*``) may instead
live in a separate file named by ``problem.file``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from fredholm_mc.problem import (
    ConstantKernel,
    Domain,
    FredholmProblem,
    GaussianKernel,
    IdentityFreeTerm,
    OneFreeTerm,
    SeparableKernel,
    TabulatedFreeTerm,
    TabulatedKernel,
)

METHODS = ("dtm", "recursive", "reference")
SCHEMES = ("auto", "geometric", "dtm", "manual")
BAND_KINDS = ("none", "asymptotic", "subgaussian")
KERNEL_FORMS = ("constant", "separable", "gaussian", "tabulated")
FREE_FORMS = ("one", "identity", "tabulated")

PROBLEM_KEYS = {
    "domain.dim",
    "domain.grid",
    "domain.quadrature",
    "kernel.form",
    "kernel.lambda",
    "kernel.w",
    "kernel.table",
    "free_term.form",
    "free_term.table",
}
EXPERIMENT_KEYS = {
    "problem.file",
    "method",
    "depth.M",
    "depth.eps",
    "budget",
    "allocation.scheme",
    "allocation.counts",
    "replicates",
    "band.kind",
    "band.level",
    "band.sims",
    "band.c3",
    "band.target",
    "band.pilot_trials",
    "seed",
    "sweep.budgets",
    "trials",
    "reference.enabled",
    "reference.tol",
}


class ConfigError(ValueError):
    """The configuration does not parse or is inconsistent."""


def _flatten(d: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _load_flat(path: str) -> Dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return _flatten(tomllib.load(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


@dataclass(frozen=True)
class ProblemSpec:
    dim: int = 1
    grid: int = 33
    quadrature: str = "trapezoid"
    kernel_form: str = "separable"
    kernel_lambda: float = 0.5
    kernel_w: float = 1.0
    kernel_table: Optional[str] = None
    free_form: str = "identity"
    free_table: Optional[str] = None

    def __post_init__(self):
        if self.kernel_form not in KERNEL_FORMS:
            raise ConfigError(f"kernel.form must be one of {KERNEL_FORMS}")
        if self.free_form not in FREE_FORMS:
            raise ConfigError(f"free_term.form must be one of {FREE_FORMS}")
        if self.kernel_form == "tabulated" and not self.kernel_table:
            raise ConfigError("kernel.form = tabulated needs kernel.table")
        if self.free_form == "tabulated" and not self.free_table:
            raise ConfigError("free_term.form = tabulated needs free_term.table")

    def build(self) -> FredholmProblem:
        """Construct the problem; may raise ContractionError."""
        try:
            domain = Domain(self.dim, self.grid, self.quadrature)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        lam = self.kernel_lambda
        if self.kernel_form == "constant":
            kernel = ConstantKernel(lam)
        elif self.kernel_form == "separable":
            kernel = SeparableKernel(lam)
        elif self.kernel_form == "gaussian":
            kernel = GaussianKernel(lam, self.kernel_w)
        else:
            kernel = TabulatedKernel(_read_table(self.kernel_table), self.grid, self.dim)
        if self.free_form == "one":
            free = OneFreeTerm()
        elif self.free_form == "identity":
            free = IdentityFreeTerm()
        else:
            free = TabulatedFreeTerm(_read_table(self.free_table).ravel(), self.grid, self.dim)
        return FredholmProblem(domain, kernel, free)

    def to_dict(self) -> dict:
        out = {
            "domain.dim": self.dim,
            "domain.grid": self.grid,
            "domain.quadrature": self.quadrature,
            "kernel.form": self.kernel_form,
            "kernel.lambda": self.kernel_lambda,
            "free_term.form": self.free_form,
        }
        if self.kernel_form == "gaussian":
            out["kernel.w"] = self.kernel_w
        if self.kernel_table:
            out["kernel.table"] = self.kernel_table
        if self.free_table:
            out["free_term.table"] = self.free_table
        return out


def _read_table(path: str) -> np.ndarray:
    try:
        return np.atleast_1d(np.loadtxt(path, delimiter=",", ndmin=2))
    except OSError as exc:
        raise ConfigError(f"cannot read table {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"malformed table {path}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    method: str = "recursive"
    depth_M: Optional[int] = None
    depth_eps: Optional[float] = None
    budget: Optional[int] = None
    scheme: str = "auto"
    counts: Optional[Tuple[int, ...]] = None
    replicates: int = 1
    band_kind: str = "none"
    level: float = 0.95
    sims: int = 10_000
    c3: Union[float, str, None] = None
    band_target: str = "x_M"
    pilot_trials: int = 200
    seed: Optional[int] = None
    sweep: Tuple[int, ...] = ()
    trials: int = 0
    reference_enabled: bool = True
    tol: float = 1e-12

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"allocation.scheme must be one of {SCHEMES}")
        if self.band_kind not in BAND_KINDS:
            raise ConfigError(f"band.kind must be one of {BAND_KINDS}")
        if self.band_target not in ("x_M", "z"):
            raise ConfigError("band.target must be 'x_M' or 'z'")
        if self.method != "reference":
            if (self.depth_M is None) == (self.depth_eps is None):
                raise ConfigError("give exactly one of depth.M and depth.eps")
            if self.depth_M is not None and self.depth_M < 1:
                raise ConfigError("depth.M must be >= 1")
            if self.depth_eps is not None and not self.depth_eps > 0:
                raise ConfigError("depth.eps must be positive")
            if self.scheme == "manual":
                if not self.counts:
                    raise ConfigError("allocation.scheme = manual needs allocation.counts")
            elif self.budget is None and not self.sweep:
                raise ConfigError("budget is required unless the allocation is manual")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("band.level must be in (0, 1)")
        if self.band_kind == "asymptotic" and self.replicates < 2 and self.method != "reference":
            raise ConfigError("asymptotic band needs replicates >= 2")
        if self.band_kind == "subgaussian" and self.c3 is None:
            raise ConfigError("subgaussian band needs band.c3 (a number or 'calibrate')")
        if isinstance(self.c3, str) and self.c3 != "calibrate":
            raise ConfigError("band.c3 must be a positive number or 'calibrate'")
        if isinstance(self.c3, (int, float)) and not self.c3 > 0:
            raise ConfigError("band.c3 must be positive")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return dataclasses.replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        """Flat dotted-key echo; feeding it to :func:`from_flat` rebuilds the config."""
        out: Dict[str, Any] = dict(self.problem.to_dict())
        out["method"] = self.method
        if self.depth_M is not None:
            out["depth.M"] = self.depth_M
        if self.depth_eps is not None:
            out["depth.eps"] = self.depth_eps
        if self.budget is not None:
            out["budget"] = self.budget
        out["allocation.scheme"] = self.scheme
        if self.counts:
            out["allocation.counts"] = list(self.counts)
        out["replicates"] = self.replicates
        out["band.kind"] = self.band_kind
        out["band.level"] = self.level
        out["band.sims"] = self.sims
        if self.c3 is not None:
            out["band.c3"] = self.c3
        out["band.target"] = self.band_target
        out["band.pilot_trials"] = self.pilot_trials
        out["seed"] = self.seed
        if self.sweep:
            out["sweep.budgets"] = list(self.sweep)
        out["trials"] = self.trials
        out["reference.enabled"] = self.reference_enabled
        out["reference.tol"] = self.tol
        return out


def _get(flat, key, kind, default):
    if key not in flat:
        return default
    v = flat[key]
    try:
        if kind is int:
            if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                raise TypeError
            return int(v)
        if kind is float:
            if isinstance(v, bool):
                raise TypeError
            return float(v)
        if kind is bool:
            if not isinstance(v, bool):
                raise TypeError
            return v
        if kind is str:
            if not isinstance(v, str):
                raise TypeError
            return v
        if kind is tuple:
            return tuple(int(x) for x in v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}") from exc
    raise AssertionError(kind)


def from_flat(flat: Dict[str, Any], base_dir: str = ".") -> ExperimentConfig:
    flat = dict(flat)
    if "problem.file" in flat:
        path = flat.pop("problem.file")
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        inner = _load_flat(path)
        extra = set(inner) - PROBLEM_KEYS
        if extra:
            raise ConfigError(f"unknown keys in problem file: {sorted(extra)}")
        base_dir_problem = os.path.dirname(os.path.abspath(path))
        for k, v in inner.items():
            flat.setdefault(k, v)
    else:
        base_dir_problem = base_dir
    unknown = set(flat) - PROBLEM_KEYS - EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def table(key):
        p = _get(flat, key, str, None)
        if p and not os.path.isabs(p):
            p = os.path.abspath(os.path.join(base_dir_problem, p))
        return p

    problem = ProblemSpec(
        dim=_get(flat, "domain.dim", int, 1),
        grid=_get(flat, "domain.grid", int, 33),
        quadrature=_get(flat, "domain.quadrature", str, "trapezoid"),
        kernel_form=_get(flat, "kernel.form", str, "separable"),
        kernel_lambda=_get(flat, "kernel.lambda", float, 0.5),
        kernel_w=_get(flat, "kernel.w", float, 1.0),
        kernel_table=table("kernel.table"),
        free_form=_get(flat, "free_term.form", str, "identity"),
        free_table=table("free_term.table"),
    )
    c3 = flat.get("band.c3")
    if c3 is not None and not isinstance(c3, str):
        c3 = _get(flat, "band.c3", float, None)
    seed = flat.get("seed")
    if seed is not None:
        seed = _get(flat, "seed", int, None)
    return ExperimentConfig(
        problem=problem,
        method=_get(flat, "method", str, "recursive"),
        depth_M=_get(flat, "depth.M", int, None),
        depth_eps=_get(flat, "depth.eps", float, None),
        budget=_get(flat, "budget", int, None),
        scheme=_get(flat, "allocation.scheme", str, "auto"),
        counts=_get(flat, "allocation.counts", tuple, None),
        replicates=_get(flat, "replicates", int, 1),
        band_kind=_get(flat, "band.kind", str, "none"),
        level=_get(flat, "band.level", float, 0.95),
        sims=_get(flat, "band.sims", int, 10_000),
        c3=c3,
        band_target=_get(flat, "band.target", str, "x_M"),
        pilot_trials=_get(flat, "band.pilot_trials", int, 200),
        seed=seed,
        sweep=_get(flat, "sweep.budgets", tuple, ()),
        trials=_get(flat, "trials", int, 0),
        reference_enabled=_get(flat, "reference.enabled", bool, True),
        tol=_get(flat, "reference.tol", float, 1e-12),
    )


def load_config(path: str) -> ExperimentConfig:
    return from_flat(_load_flat(path), base_dir=os.path.dirname(os.path.abspath(path)))
