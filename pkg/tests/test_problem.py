import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant, separable
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
    compute_beta,
    compute_rho,
    compute_rho2,
    holder_diagnostic,
    kernel_distance,
    kernel_distance_matrix,
)

QUADS = ["trapezoid", "equal"]


def test_domain_grid_includes_boundary():
    d = Domain(2, 5)
    assert d.size == 25
    assert d.points.min() == 0.0 and d.points.max() == 1.0
    assert d.weights.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("quad", QUADS)
def test_weights_are_probability(quad):
    assert Domain(3, 4, quad).weights.sum() == pytest.approx(1.0, abs=1e-14)


def test_domain_rejects_tiny_grid():
    with pytest.raises(ValueError):
        Domain(1, 1)
    with pytest.raises(ValueError):
        Domain(0, 5)


def test_sample_shape_and_range():
    x = Domain(2, 5).sample(np.random.default_rng(0), 100)
    assert x.shape == (100, 2)
    assert np.all((x >= 0) & (x < 1))


@pytest.mark.parametrize("quad", QUADS)
def test_constant_kernel_constants(quad):
    p = FredholmProblem(Domain(1, 9, quad), ConstantKernel(0.5), OneFreeTerm())
    assert compute_rho(p) == pytest.approx(0.5, abs=1e-15)
    assert compute_rho2(p) == pytest.approx(0.25, abs=1e-15)
    assert compute_beta(p) == pytest.approx(0.25, abs=1e-15)


def test_zero_kernel_constants():
    p = FredholmProblem(Domain(1, 9), ConstantKernel(0.0), OneFreeTerm())
    assert (p.rho, p.rho2, p.beta, p.rho_bar) == (0.0, 0.0, 0.0, 0.0)


@pytest.mark.parametrize("quad", QUADS)
@pytest.mark.parametrize("G", [16, 64])
def test_separable_constants_closed_form(quad, G):
    p = FredholmProblem(Domain(1, G, quad), SeparableKernel(0.99), IdentityFreeTerm())
    lam = 0.99
    assert abs(p.rho - lam * 0.5) <= 1.0 / G
    assert abs(p.rho2 - lam**2 / 3) <= 2.0 / G
    assert abs(p.beta - lam**2 / 3) <= 2.0 / G


def test_contraction_enforced():
    with pytest.raises(ContractionError):
        FredholmProblem(Domain(1, 9), ConstantKernel(1.0), OneFreeTerm())
    with pytest.raises(ContractionError):
        FredholmProblem(Domain(1, 9), GaussianKernel(2.0, 1.0), OneFreeTerm())


def test_zero_free_term_rejected_unless_allowed():
    zero = TabulatedFreeTerm(np.zeros(9), 9)
    with pytest.raises(ValueError):
        FredholmProblem(Domain(1, 9), ConstantKernel(0.5), zero)
    p = FredholmProblem(Domain(1, 9), ConstantKernel(0.5), zero, require_nonzero_free_term=False)
    assert p.f_norm == 0.0


def test_separable_is_product_over_axes():
    k = SeparableKernel(0.5)
    t = np.array([[0.5, 0.4]])
    s = np.array([[1.0, 0.5]])
    assert k.pairwise(t, s)[0, 0] == pytest.approx(0.5 * 0.2 * 0.5)


def test_gaussian_kernel_values():
    k = GaussianKernel(0.7, 0.5)
    t, s = np.array([[0.1]]), np.array([[0.6]])
    assert k.pairwise(t, s)[0, 0] == pytest.approx(0.7 * np.exp(-1.0))


@pytest.mark.parametrize("kernel", [ConstantKernel(0.3), SeparableKernel(0.8)])
def test_factors_reproduce_pairwise(kernel):
    a, b = kernel.factors()
    rng = np.random.default_rng(1)
    t, s = rng.random((7, 2)), rng.random((5, 2))
    np.testing.assert_allclose(a(t) @ b(s).T, kernel.pairwise(t, s), rtol=1e-14)


def test_diagonal_matches_pairwise():
    rng = np.random.default_rng(2)
    t, s = rng.random((6, 1)), rng.random((6, 1))
    for k in (ConstantKernel(0.3), SeparableKernel(0.8), GaussianKernel(0.5, 0.3)):
        np.testing.assert_allclose(k.diagonal(t, s), np.diag(k.pairwise(t, s)), rtol=1e-14)


def test_tabulated_kernel_reproduces_grid_and_interpolates():
    G = 9
    dom = Domain(1, G)
    sep = SeparableKernel(0.6)
    tab = TabulatedKernel(sep.pairwise(dom.points, dom.points), G)
    np.testing.assert_allclose(tab.pairwise(dom.points, dom.points), sep.pairwise(dom.points, dom.points), atol=1e-15)
    # bilinear in (t, s) reproduces t*s only at grid lines; midpoints of cells are averages
    val = tab.pairwise(np.array([[1 / 16]]), np.array([[1.0]]))[0, 0]
    assert val == pytest.approx(0.6 / 16)
    assert np.all(np.isfinite(tab.pairwise(np.array([[1.5]]), np.array([[-0.2]]))))


def test_tabulated_kernel_shape_checked():
    with pytest.raises(ValueError):
        TabulatedKernel(np.zeros((3, 4)), 3)


def test_tabulated_free_term():
    G = 5
    f = TabulatedFreeTerm(np.linspace(0, 1, G) ** 2, G)
    assert f(np.array([[0.5]]))[0] == pytest.approx(0.25)
    assert f(np.array([[0.125]]))[0] == pytest.approx(0.5 * 0.0625)


def test_identity_free_term_uses_first_axis():
    f = IdentityFreeTerm()
    np.testing.assert_array_equal(f(np.array([[0.2, 0.9], [0.7, 0.1]])), [0.2, 0.7])


def test_kernel_distance_examples():
    p = FredholmProblem(Domain(1, 65), SeparableKernel(0.99), IdentityFreeTerm())
    assert kernel_distance(p, 3, 3) == 0.0
    assert kernel_distance(p, 0, 64) == pytest.approx(0.99 / np.sqrt(3), abs=1.0 / 65)
    c = constant(0.5)
    assert kernel_distance(c, 0, 5) == 0.0


def test_distance_matrix_matches_pointwise():
    p = FredholmProblem(Domain(1, 9), GaussianKernel(0.8, 0.4), OneFreeTerm())
    dm = kernel_distance_matrix(p)
    for i, j in [(0, 8), (2, 5), (4, 4)]:
        assert dm[i, j] == pytest.approx(kernel_distance(p, i, j), abs=1e-7)


def test_holder_constant_kernel_degenerate():
    fit = holder_diagnostic(constant(0.5))
    assert fit.degenerate and np.isnan(fit.alpha)


def test_holder_separable_lipschitz():
    fit = holder_diagnostic(FredholmProblem(Domain(1, 33), SeparableKernel(0.99), IdentityFreeTerm()))
    assert not fit.degenerate
    assert abs(fit.alpha - 1.0) <= 0.05


def test_holder_gaussian():
    fit = holder_diagnostic(FredholmProblem(Domain(1, 33), GaussianKernel(0.9, 1.0), OneFreeTerm()))
    assert 0.0 < fit.alpha <= 1.0 + 1e-9
    assert np.isfinite(fit.c)


def test_holder_needs_fine_grid():
    with pytest.raises(ValueError):
        holder_diagnostic(constant(0.5, G=5))


def _tabulated_problem(vals, G):
    return FredholmProblem(Domain(1, G), TabulatedKernel(vals, G), OneFreeTerm())


kernel_tables = st.integers(3, 7).flatmap(
    lambda G: st.tuples(
        st.just(G),
        st.lists(st.floats(-0.9, 0.9), min_size=G * G, max_size=G * G),
    )
)


@settings(max_examples=60, deadline=None)
@given(kernel_tables)
def test_constant_ordering(table):
    G, vals = table
    p = _tabulated_problem(np.reshape(vals, (G, G)), G)
    assert 0.0 <= p.rho <= p.rho_bar + 1e-15
    assert p.rho2 <= p.rho_bar**2 + 1e-15
    assert p.beta <= p.rho_bar**2 + 1e-15


@settings(max_examples=60, deadline=None)
@given(kernel_tables)
def test_kernel_distance_semimetric(table):
    G, vals = table
    p = _tabulated_problem(np.reshape(vals, (G, G)), G)
    d = np.array([[kernel_distance(p, i, j) for j in range(G)] for i in range(G)])
    assert np.all(np.diag(d) == 0.0)
    np.testing.assert_allclose(d, d.T, atol=1e-15)
    for i, j, k in itertools.product(range(G), repeat=3):
        assert d[i, k] <= d[i, j] + d[j, k] + 1e-9


@pytest.mark.parametrize(
    "make",
    [
        lambda G: separable(0.9, G),
        lambda G: FredholmProblem(Domain(1, G), GaussianKernel(0.8, 0.5), OneFreeTerm()),
    ],
)
def test_grid_refinement_converges(make):
    consts = np.array([[p.rho, p.rho2, p.beta] for p in (make(G) for G in (8, 16, 32, 64, 128))])
    diffs = np.abs(np.diff(consts, axis=0)).max(axis=1)
    assert np.all(np.diff(diffs) <= 1e-15)


def test_problem_is_immutable(sep09):
    with pytest.raises(ValueError):
        sep09.kernel_matrix[0, 0] = 1.0
