import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant, separable
from fredholm_mc.dtm import Allocation, BudgetError, Scheme, dtm_solve
from fredholm_mc.recursive import (
    covariance_recursion,
    fit_variance_constant,
    geometric_allocate,
    product_series,
    recursive_predicted_covariance,
    recursive_solve,
    recursive_variance_bound,
)
from fredholm_mc.reference import neumann_iterate


def test_constant_kernel_exact():
    est = recursive_solve(constant(0.5), Allocation((3, 5, 2)), seed=4, replicates=3)
    np.testing.assert_allclose(est.mean.values, 1.875, rtol=1e-14)
    np.testing.assert_allclose(est.replicates, 1.875, rtol=1e-14)


def test_depth_one_bit_identical_to_dtm(sep09):
    alloc = Allocation((37,))
    a = recursive_solve(sep09, alloc, seed=77, replicates=5)
    b = dtm_solve(sep09, alloc, seed=77, replicates=5)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    np.testing.assert_array_equal(a.mean.values, b.mean.values)


def test_draw_accounting(sep09):
    alloc = geometric_allocate(3, 1024)
    est = recursive_solve(sep09, alloc, seed=1, replicates=6)
    assert est.draws.draws == 6 * 896
    assert est.method == "recursive"
    assert len(est.per_order) == 3
    np.testing.assert_array_equal(est.per_order[-1].values, est.mean.values)


def test_deterministic(sep09):
    alloc = geometric_allocate(3, 256)
    a = recursive_solve(sep09, alloc, seed=5, replicates=3)
    b = recursive_solve(sep09, alloc, seed=5, replicates=3)
    np.testing.assert_array_equal(a.replicates, b.replicates)


def test_dense_path_matches_factored(sep09):
    from fredholm_mc.problem import FredholmProblem, IdentityFreeTerm, TabulatedKernel

    # a tabulated copy of the separable kernel has no factor split; multilinear
    # interpolation of t*s is exact along each axis so the estimates agree
    dom = sep09.domain
    tab = FredholmProblem(dom, TabulatedKernel(sep09.kernel_matrix, dom.grid_points_per_axis), IdentityFreeTerm())
    alloc = Allocation((20, 30))
    a = recursive_solve(sep09, alloc, seed=8).mean.values
    b = recursive_solve(tab, alloc, seed=8).mean.values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_geometric_examples():
    a = geometric_allocate(3, 1024)
    assert a.counts == (128, 256, 512)
    assert a.recursive_draws() == 896 <= 1024
    assert a.scheme is Scheme.RECURSIVE_GEOMETRIC
    assert geometric_allocate(1, 100).counts == (50,)
    big = geometric_allocate(10, 1024 * 4096)
    assert min(big.counts) >= 2
    assert all(big.n(m + 1) == 2 * big.n(m) for m in range(1, 10))


def test_geometric_gate():
    with pytest.raises(BudgetError, match="N >= 64"):
        geometric_allocate(3, 63)
    geometric_allocate(3, 64)


def test_variance_bound_examples():
    assert recursive_variance_bound(None, Allocation((40,))).bound == pytest.approx(1 / 40, rel=1e-15)
    vd = recursive_variance_bound(None, geometric_allocate(3, 1024))
    expected = 1 / 512 + 1 / (512 * 256) + 1 / (512 * 256 * 128)
    assert vd.bound == pytest.approx(expected, rel=1e-14)
    assert round(vd.bound, 7) == 0.0019608
    assert recursive_variance_bound(None, geometric_allocate(3, 1024), 3.0).bound == pytest.approx(3 * expected)
    with pytest.raises(ValueError):
        recursive_variance_bound(None, geometric_allocate(3, 1024), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(2, 10_000), min_size=1, max_size=8))
def test_sigma_terms(counts):
    alloc = Allocation(tuple(counts))
    vd = recursive_variance_bound(None, alloc)
    M = len(counts)
    assert vd.sigma_terms[0] == 1 / math.sqrt(counts[-1])
    for k, s in enumerate(vd.sigma_terms):
        prod = math.prod(counts[M - 1 - j] for j in range(k + 1))
        assert abs(s - 1 / math.sqrt(prod)) <= 1e-15
    assert all(a > b for a, b in zip(vd.sigma_terms, vd.sigma_terms[1:]))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10**6))
def test_geometric_bound_majorized(M, extra):
    N = 4 * 2 ** (M + 1) + extra
    bound = recursive_variance_bound(None, geometric_allocate(M, N)).bound
    assert bound <= (2 / N) * (1 + 8 / N)


def test_covariance_recursion_constant_zero():
    fam = covariance_recursion(constant(0.7), 3)
    for m in fam.matrices():
        assert np.max(np.abs(m)) <= 1e-15


def test_covariance_recursion_closed_form():
    p = separable(1.0, G=128)
    t = p.domain.points[:, 0]
    r1 = covariance_recursion(p, 1).primary(1)
    # K(t, s) f(s) = t s^2, so R1 = t1 t2 (E xi^4 - (E xi^2)^2) = t1 t2 (1/5 - 1/9)
    assert np.max(np.abs(r1 - (4 / 45) * np.outer(t, t))) <= 1e-3


def test_covariance_recursion_psd_and_keys(sep09):
    fam = covariance_recursion(sep09, 4)
    assert (4, 3, 2, 1) in fam.surfaces and (3, 2) in fam.surfaces
    assert len(fam.surfaces) == 4 + 3 + 2 + 1
    for m in fam.matrices():
        ev = np.linalg.eigvalsh(m)
        assert ev.min() >= -1e-8 * max(ev.max(), 0.0) - 1e-300


def test_predicted_covariance_depth_one_is_r1_over_n(sep09):
    alloc = Allocation((50,))
    np.testing.assert_allclose(
        recursive_predicted_covariance(sep09, alloc), covariance_recursion(sep09, 1).primary(1) / 50, atol=1e-15
    )


@pytest.fixture(scope="module")
def replicate_run():
    p = separable(0.9, G=17)
    alloc = geometric_allocate(3, 512)
    return p, alloc, recursive_solve(p, alloc, seed=21, replicates=2000)


def test_unbiased(replicate_run):
    p, alloc, est = replicate_run
    _, target = neumann_iterate(p, alloc.depth)
    se = est.replicates.std(axis=0, ddof=1) / np.sqrt(len(est.replicates))
    assert np.all(np.abs(est.replicates.mean(axis=0) - target.values) <= 5 * se + 1e-15)


def test_predicted_covariance_matches_replicates(replicate_run):
    p, alloc, est = replicate_run
    emp = np.cov(est.replicates.T)
    pred = recursive_predicted_covariance(p, alloc)
    assert np.max(np.abs(emp - pred)) <= 0.15 * np.max(pred)


def test_pointwise_variance_within_fitted_bound(replicate_run):
    _, alloc, est = replicate_run
    c = fit_variance_constant(est.replicates, alloc)
    var = est.replicates.var(axis=0, ddof=1)
    assert np.all(var <= 1.5 * c * product_series(alloc))


def _doubled(alloc):
    return Allocation(alloc.counts[:-1] + (2 * alloc.counts[-1],))


def test_doubling_final_stage_halves_variance():
    p = separable(0.5, G=17)
    alloc = geometric_allocate(3, 256)
    R = 4000
    v1 = recursive_solve(p, alloc, seed=31, replicates=R).replicates.var(axis=0, ddof=1)
    v2 = recursive_solve(p, _doubled(alloc), seed=32, replicates=R).replicates.var(axis=0, ddof=1)
    ratio = v1.max() / v2.max()
    predicted = np.max(np.diag(recursive_predicted_covariance(p, alloc))) / np.max(
        np.diag(recursive_predicted_covariance(p, _doubled(alloc)))
    )
    assert 1.8 <= predicted <= 2.2
    assert 1.8 <= ratio <= 2.2
