"""Experiment pipelines behind the CLI.

Every command writes a ``report.json`` that echoes the resolved config and
lists its artifacts, so :func:`replay` can re-run it and compare bytes.
Wall time goes to a separate ``timing.json``; everything else is a pure
function of the config.
"""

from __future__ import annotations

import csv
import filecmp
import json
import math
import os
import platform
import tempfile
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy

import fredholm_mc
from fredholm_mc import rng as rngmod
from fredholm_mc._parallel import ordered_map
from fredholm_mc.confidence import (
    band_for,
    calibrate_c3,
    inflate_for_truncation,
    pilot_errors,
)
from fredholm_mc.dtm import (
    Allocation,
    BudgetError,
    Scheme,
    dtm_allocate,
    dtm_order_variance,
    dtm_solve,
)
from fredholm_mc.harness.config import ConfigError, ExperimentConfig, from_flat
from fredholm_mc.problem import FredholmProblem
from fredholm_mc.recursive import (
    geometric_allocate,
    recursive_predicted_covariance,
    recursive_solve,
)
from fredholm_mc.reference import (
    choose_depth,
    neumann_iterate,
    solve_reference,
    write_grid_csv,
)

SCHEMA_VERSION = 1
SOLVERS = {"dtm": dtm_solve, "recursive": recursive_solve}


def versions() -> dict:
    return {
        "fredholm_mc": fredholm_mc.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def resolve_seed(config: ExperimentConfig) -> ExperimentConfig:
    if config.seed is None:
        return config.with_overrides(seed=rngmod.fresh_seed())
    return config


def _json_float(x: Optional[float]):
    if x is None:
        return None
    if math.isinf(x):
        return "inf"
    return float(x)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _write_timing(out_dir: str, seconds: float) -> None:
    _write_json(os.path.join(out_dir, "timing.json"), {"wall_time_s": seconds})


def depth_of(config: ExperimentConfig, problem: FredholmProblem) -> int:
    if config.scheme == "manual" and config.counts and config.depth_M is None:
        return len(config.counts)
    if config.depth_M is not None:
        return config.depth_M
    return choose_depth(problem, config.depth_eps)


def make_allocation(
    config: ExperimentConfig, problem: FredholmProblem, M: int, budget: Optional[int] = None
) -> Allocation:
    budget = config.budget if budget is None else budget
    scheme = config.scheme
    if scheme == "auto":
        scheme = "geometric" if config.method == "recursive" else "dtm"
    if scheme == "manual":
        if len(config.counts) != M:
            raise ConfigError(f"allocation.counts has {len(config.counts)} entries, depth is {M}")
        try:
            return Allocation(config.counts, Scheme.MANUAL)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if scheme == "geometric":
        return geometric_allocate(M, budget)
    return dtm_allocate(problem, M, budget)


def grid_max_rmse(replicates: np.ndarray, target: np.ndarray) -> float:
    """``max_t sqrt(mean_r (x_r(t) - target(t))^2)``."""
    err = np.asarray(replicates) - target
    return float(np.sqrt(np.max(np.mean(err * err, axis=0))))


@dataclass
class RunReport:
    config: dict
    constants: dict
    depth: int
    allocation: Optional[dict]
    draws: int
    replicates: int
    max_abs_error: Optional[float]
    max_abs_error_solution: Optional[float]
    band: Optional[dict]
    artifacts: List[str]
    wall_time: float = 0.0
    versions: dict = field(default_factory=versions)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "command": "solve",
            "config": self.config,
            "constants": self.constants,
            "depth": self.depth,
            "allocation": self.allocation,
            "draws": self.draws,
            "replicates": self.replicates,
            "max_abs_error": _json_float(self.max_abs_error),
            "max_abs_error_solution": _json_float(self.max_abs_error_solution),
            "band": self.band,
            "artifacts": self.artifacts,
            "versions": self.versions,
        }


def _c3_for(config, problem, alloc) -> float:
    if config.c3 == "calibrate":
        solver = SOLVERS[config.method]
        return calibrate_c3(
            problem, alloc, config.pilot_trials, rngmod.derive_seed(config.seed, rngmod.PILOT), solver
        )
    return float(config.c3)


def run(config: ExperimentConfig, out_dir: str) -> RunReport:
    """Solve once: reference oracle, chosen method, optional band, artifacts."""
    t0 = time.perf_counter()
    config = resolve_seed(config)
    problem = config.problem.build()
    os.makedirs(out_dir, exist_ok=True)
    dom = problem.domain
    artifacts = ["solution.csv"]
    band_summary = None

    if config.method == "reference":
        sol, M = solve_reference(problem, config.tol)
        write_grid_csv(
            os.path.join(out_dir, "solution.csv"),
            dom,
            {"estimate": sol.values, "reference": sol.values, "abs_error": np.zeros(dom.size)},
        )
        report = RunReport(
            config=config.to_dict(),
            constants=problem.constants(),
            depth=M,
            allocation=None,
            draws=0,
            replicates=0,
            max_abs_error=0.0,
            max_abs_error_solution=0.0,
            band=None,
            artifacts=artifacts + ["report.json"],
        )
    else:
        M = depth_of(config, problem)
        alloc = make_allocation(config, problem, M)
        est = SOLVERS[config.method](problem, alloc, config.seed, config.replicates)
        target = z = None
        if config.reference_enabled:
            _, target = neumann_iterate(problem, M)
            z, _ = solve_reference(problem, config.tol)
        cols: Dict[str, Any] = {"estimate": est.mean.values}
        if target is not None:
            cols["reference"] = target.values
            cols["abs_error"] = np.abs(est.mean.values - target.values)
        else:
            cols["reference"] = None
            cols["abs_error"] = None
        write_grid_csv(os.path.join(out_dir, "solution.csv"), dom, cols)
        if config.band_kind != "none":
            c3 = _c3_for(config, problem, alloc) if config.band_kind == "subgaussian" else None
            band = band_for(
                est,
                config.band_kind,
                config.level,
                sims=config.sims,
                c3=c3,
                rng=rngmod.stream(config.seed, rngmod.GAUSS),
            )
            if config.band_target == "z":
                band = inflate_for_truncation(band, problem, M)
            band.to_csv(os.path.join(out_dir, "band.csv"))
            artifacts.append("band.csv")
            band_summary = band.summary()
            band_summary["c3"] = _json_float(c3)
            oracle = z if config.band_target == "z" else target
            band_summary["covered"] = None if oracle is None else band.contains(oracle.values)
        report = RunReport(
            config=config.to_dict(),
            constants=problem.constants(),
            depth=M,
            allocation=alloc.to_dict(),
            draws=est.draws.draws,
            replicates=est.n_replicates,
            max_abs_error=None if target is None else float(np.max(cols["abs_error"])),
            max_abs_error_solution=(
                None if z is None else float(np.max(np.abs(est.mean.values - z.values)))
            ),
            band=band_summary,
            artifacts=artifacts + ["report.json"],
        )
    report.wall_time = time.perf_counter() - t0
    _write_json(os.path.join(out_dir, "report.json"), report.to_json())
    _write_timing(out_dir, report.wall_time)
    return report


def _max_dtm_variance(order_vars: List[np.ndarray], alloc: Allocation) -> float:
    total = np.zeros_like(order_vars[0])
    for v, n in zip(order_vars, alloc.counts):
        total += v / n
    return float(np.max(total))


def match_dtm_budget(problem: FredholmProblem, M: int, target: float) -> Allocation:
    """Smallest DTM budget whose predicted grid-max variance is at most ``target``."""
    order_vars = [dtm_order_variance(problem, d) for d in range(1, M + 1)]
    lo_budget = M * (M + 1)
    tol = target * (1.0 + 1e-9)

    def var_at(N):
        return _max_dtm_variance(order_vars, dtm_allocate(problem, M, N))

    if var_at(lo_budget) <= tol:
        return dtm_allocate(problem, M, lo_budget)
    ref = max(lo_budget, 10_000)
    hi = max(lo_budget + 1, int(math.ceil(var_at(ref) * ref / target)))
    while var_at(hi) > tol:
        hi = int(hi * 1.02) + 1
    lo = max(lo_budget, int(hi * 0.97))
    while lo > lo_budget and var_at(lo) <= tol:
        hi, lo = lo, max(lo_budget, int(lo * 0.97))
    # invariant: var_at(lo) > tol >= var_at(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if var_at(mid) <= tol:
            hi = mid
        else:
            lo = mid
    return dtm_allocate(problem, M, hi)


COMPARE_FIELDS = [
    "budget",
    "depth",
    "status",
    "target_variance",
    "recursive_counts",
    "recursive_draws_per_run",
    "recursive_draws_formula",
    "recursive_rmse",
    "dtm_budget",
    "dtm_counts",
    "dtm_draws_per_run",
    "dtm_draws_formula",
    "dtm_rmse",
    "rmse_rel_diff",
    "matched",
    "draw_ratio",
    "accounting_ok",
]


def _compare_row(problem, M, N, R, seed, i, target_values) -> dict:
    row: Dict[str, Any] = {"budget": N, "depth": M}
    try:
        ra = geometric_allocate(M, N)
        v_star = float(np.max(np.diag(recursive_predicted_covariance(problem, ra))))
        da = match_dtm_budget(problem, M, v_star)
    except BudgetError as exc:
        row["status"] = f"infeasible: {exc}"
        return row
    rec = recursive_solve(problem, ra, rngmod.derive_seed(seed, rngmod.TRIAL, i, 0), R)
    dtm = dtm_solve(problem, da, rngmod.derive_seed(seed, rngmod.TRIAL, i, 1), R)
    rec_reps = rec.replicates if rec.replicates is not None else rec.mean.values[None]
    dtm_reps = dtm.replicates if dtm.replicates is not None else dtm.mean.values[None]
    r_rmse = grid_max_rmse(rec_reps, target_values)
    d_rmse = grid_max_rmse(dtm_reps, target_values)
    rel = abs(r_rmse - d_rmse) / max(r_rmse, d_rmse) if max(r_rmse, d_rmse) > 0 else 0.0
    rec_per = rec.draws.draws // R
    dtm_per = dtm.draws.draws // R
    row.update(
        status="ok",
        target_variance=v_star,
        recursive_counts=" ".join(map(str, ra.counts)),
        recursive_draws_per_run=rec_per,
        recursive_draws_formula=ra.recursive_draws(),
        recursive_rmse=r_rmse,
        dtm_budget=da.budget,
        dtm_counts=" ".join(map(str, da.counts)),
        dtm_draws_per_run=dtm_per,
        dtm_draws_formula=da.dtm_draws(),
        dtm_rmse=d_rmse,
        rmse_rel_diff=rel,
        matched=rel <= 0.2,
        draw_ratio=rec_per / dtm_per,
        accounting_ok=(
            rec.draws.draws == R * ra.recursive_draws() and dtm.draws.draws == R * da.dtm_draws()
        ),
    )
    return row


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return format(v, ".17g")
    return "" if v is None else str(v)


def _write_rows(path: str, fields: List[str], rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in fields])


def compare_budgets(config: ExperimentConfig, out_dir: str) -> List[dict]:
    """Recursive vs DTM draws at matched predicted variance, one row per sweep budget.

    For each budget ``N`` the recursive run uses the geometric allocation;
    the DTM budget is the smallest whose predicted grid-max variance does
    not exceed the recursive one. Both are then run with ``R`` replicates
    and their empirical grid-max RMSE against ``z^{(M)}`` compared.
    """
    t0 = time.perf_counter()
    config = resolve_seed(config)
    sweep = config.sweep or ((config.budget,) if config.budget else ())
    if not sweep:
        raise ConfigError("compare needs sweep.budgets (or budget)")
    problem = config.problem.build()
    M = depth_of(config, problem)
    _, target = neumann_iterate(problem, M)
    R = config.replicates
    rows = ordered_map(
        lambda item: _compare_row(problem, M, item[1], R, config.seed, item[0], target.values),
        list(enumerate(sweep)),
    )
    os.makedirs(out_dir, exist_ok=True)
    _write_rows(os.path.join(out_dir, "compare.csv"), COMPARE_FIELDS, rows)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "compare",
        "config": config.to_dict(),
        "constants": problem.constants(),
        "depth": M,
        "rows": rows,
        "artifacts": ["compare.csv", "report.json"],
        "versions": versions(),
    }
    _write_json(os.path.join(out_dir, "report.json"), payload)
    _write_timing(out_dir, time.perf_counter() - t0)
    return rows


@dataclass
class CoverageResult:
    coverage: float
    trials: int
    level: float
    kind: str
    c3: Optional[float]
    rows: List[dict]


def coverage_study(config: ExperimentConfig, out_dir: str) -> CoverageResult:
    """Fraction of independent full runs whose band contains the oracle at every grid point."""
    t0 = time.perf_counter()
    config = resolve_seed(config)
    if config.method == "reference":
        raise ConfigError("coverage needs a Monte Carlo method")
    if config.band_kind == "none":
        raise ConfigError("coverage needs band.kind")
    if config.trials < 100:
        raise ConfigError("coverage needs trials >= 100")
    problem = config.problem.build()
    M = depth_of(config, problem)
    alloc = make_allocation(config, problem, M)
    _, xm = neumann_iterate(problem, M)
    oracle = xm.values
    if config.band_target == "z":
        oracle = solve_reference(problem, config.tol)[0].values
    c3 = _c3_for(config, problem, alloc) if config.band_kind == "subgaussian" else None
    solver = SOLVERS[config.method]

    def trial(i):
        s = rngmod.derive_seed(config.seed, rngmod.TRIAL, i)
        est = solver(problem, alloc, s, config.replicates)
        band = band_for(
            est, config.band_kind, config.level, sims=config.sims, c3=c3,
            rng=rngmod.stream(s, rngmod.GAUSS),
        )
        if config.band_target == "z":
            band = inflate_for_truncation(band, problem, M)
        return {
            "trial": i,
            "seed": s,
            "sup_error": float(np.max(np.abs(est.mean.values - oracle))),
            "half_width": band.half_width,
            "covered": band.contains(oracle),
        }

    rows = ordered_map(trial, range(config.trials))
    cov = sum(r["covered"] for r in rows) / len(rows)
    os.makedirs(out_dir, exist_ok=True)
    _write_rows(os.path.join(out_dir, "coverage.csv"), ["trial", "seed", "sup_error", "half_width", "covered"], rows)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "coverage",
        "config": config.to_dict(),
        "constants": problem.constants(),
        "depth": M,
        "allocation": alloc.to_dict(),
        "c3": _json_float(c3),
        "coverage": cov,
        "trials": len(rows),
        "artifacts": ["coverage.csv", "report.json"],
        "versions": versions(),
    }
    _write_json(os.path.join(out_dir, "report.json"), payload)
    _write_timing(out_dir, time.perf_counter() - t0)
    return CoverageResult(cov, len(rows), config.level, config.band_kind, c3, rows)


def calibrate(config: ExperimentConfig, out_dir: str) -> Tuple[float, np.ndarray]:
    """Fit ``c3`` on pilot runs and record the pilot error quantiles."""
    t0 = time.perf_counter()
    config = resolve_seed(config)
    if config.method == "reference":
        raise ConfigError("calibrate needs a Monte Carlo method")
    problem = config.problem.build()
    M = depth_of(config, problem)
    alloc = make_allocation(config, problem, M)
    seed = rngmod.derive_seed(config.seed, rngmod.PILOT)
    solver = SOLVERS[config.method]
    c3 = calibrate_c3(problem, alloc, config.pilot_trials, seed, solver)
    u = pilot_errors(problem, alloc, config.pilot_trials, seed, solver)
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "calibrate",
        "config": config.to_dict(),
        "depth": M,
        "allocation": alloc.to_dict(),
        "normalization": alloc.normalization,
        "c3": _json_float(c3),
        "pilot_trials": config.pilot_trials,
        "pilot_u_quantiles": {
            str(q): float(np.quantile(u, q)) for q in (0.5, 0.9, 0.95, 0.99)
        },
        "artifacts": ["report.json"],
        "versions": versions(),
    }
    _write_json(os.path.join(out_dir, "report.json"), payload)
    _write_timing(out_dir, time.perf_counter() - t0)
    return c3, u


COMMANDS = {
    "solve": run,
    "compare": compare_budgets,
    "coverage": coverage_study,
    "calibrate": calibrate,
}


def replay(out_dir: str) -> List[str]:
    """Re-run the command recorded in ``out_dir/report.json``; return mismatching artifacts."""
    path = os.path.join(out_dir, "report.json")
    try:
        with open(path) as fh:
            report = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    command = report.get("command", "solve")
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r} in {path}")
    config = from_flat(report["config"])
    with tempfile.TemporaryDirectory() as tmp:
        COMMANDS[command](config, tmp)
        bad = []
        for name in report["artifacts"]:
            a, b = os.path.join(out_dir, name), os.path.join(tmp, name)
            if not (os.path.exists(a) and os.path.exists(b) and filecmp.cmp(a, b, shallow=False)):
                bad.append(name)
    return bad
