import numpy as np
import pytest

from minsurf.errors import SelectionFail
from minsurf.geometry import FermiGrid, GraphFunction, MetricField
from minsurf.runge import (DirichletBasis, basis_from_boundary, bolker_check, boundary_derivatives,
                           candidate_pool, poisson_row, select_embedding_basis, surrogate_norm)
from minsurf.solver import assemble_stability


def traces(grid, fns):
    xb = grid.points.reshape(-1, grid.n)[grid.boundary_ids]
    return np.array([fn(xb) for fn in fns])


HARMONIC = [lambda x: np.ones(len(x)), lambda x: x[:, 0], lambda x: x[:, 1],
            lambda x: x[:, 0] ** 2 - x[:, 1] ** 2, lambda x: x[:, 0] * x[:, 1],
            lambda x: x[:, 0] ** 2 + x[:, 1] ** 2]


def test_pool_deterministic_and_structured(flat_grid):
    a = candidate_pool(flat_grid, 11, 20)
    b = candidate_pool(flat_grid, 11, 20)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    xb = flat_grid.points.reshape(-1, 2)[flat_grid.boundary_ids]
    assert np.all(a[0] == 1.0)
    for i in range(2):
        assert np.allclose(a[1 + i], xb[:, i] / np.max(np.abs(xb[:, i])))
    c = candidate_pool(flat_grid, 12, 20)
    assert not np.array_equal(a[-1], c[-1])


def test_pool_low_pass(flat_grid):
    L = max(flat_grid.base_extent)
    for f in candidate_pool(flat_grid, 3, 30, lap_bound=50.0):
        assert boundary_derivatives(flat_grid, f)[1] * L**2 <= 50.0 + 1e-9
        assert np.isclose(np.max(np.abs(f)), 1.0)


def test_surrogate_norm_of_linear_trace(flat_grid):
    xb = flat_grid.points.reshape(-1, 2)[flat_grid.boundary_ids]
    # sup |x1| + sup |d/ds x1| + 0
    assert surrogate_norm(flat_grid, xb[:, 0]) == pytest.approx(1.5, abs=1e-12)


def test_selected_flat_basis_passes(flat_basis, flat_grid):
    rep = flat_basis.report
    assert flat_basis.N == 6
    assert rep.passed and rep.separation_ok and rep.immersion_ok and rep.origin_ok
    assert rep.boundary_rank == 6 and not rep.degenerate
    # exhaustive below 1e4 nodes: every pair at distance >= 2h is examined
    pts = flat_grid.points.reshape(-1, 2)
    from scipy.spatial.distance import pdist
    assert rep.pairs_checked == int(np.sum(pdist(pts) >= 2 * flat_grid.spacing[0] - 1e-12))
    assert np.allclose(flat_basis.norms, 0.05 * flat_grid.tube_half_width)


def test_cached_solutions_solve_stability(flat_basis, flat_grid, flat_metric):
    op = assemble_stability(GraphFunction.zeros(flat_grid), flat_metric)
    for v in flat_basis.solutions:
        r = op.apply(v)
        assert np.max(np.abs(r)) < 1e-9 * max(1.0, np.max(np.abs(v)) / flat_grid.spacing[0] ** 2)


def test_harmonic_basis_passes(flat_grid, flat_metric):
    B = basis_from_boundary(traces(flat_grid, HARMONIC), GraphFunction.zeros(flat_grid), flat_metric)
    assert bolker_check(B).passed
    # x1, x2 alone already immerse
    B2 = basis_from_boundary(traces(flat_grid, HARMONIC[1:3]), GraphFunction.zeros(flat_grid), flat_metric)
    assert bolker_check(B2).immersion > 0.1


def test_constants_only_fail_immersion(flat_grid, flat_metric):
    one = traces(flat_grid, [HARMONIC[0]] * 6) * np.arange(1, 7)[:, None]
    rep = bolker_check(basis_from_boundary(one, GraphFunction.zeros(flat_grid), flat_metric))
    assert not rep.immersion_ok and not rep.passed
    assert rep.immersion < 1e-12


def test_duplicate_trace_flags_degenerate(flat_basis, flat_grid, flat_metric):
    bd = flat_basis.boundary.copy()
    bd[-1] = bd[0]
    rep = bolker_check(basis_from_boundary(bd, GraphFunction.zeros(flat_grid), flat_metric))
    assert rep.degenerate and rep.boundary_rank == 5
    assert rep.immersion_ok
    assert rep.origin == pytest.approx(flat_basis.report.origin, rel=0.5)


def test_warped_selection_with_two_seeds(flat_grid):
    g = MetricField(2, "warped", {"b": -1.0, "c": 0.5})
    for seed in (3, 8):
        b = select_embedding_basis(candidate_pool(flat_grid, seed, 24), GraphFunction.zeros(flat_grid), g)
        assert b.report.passed


def test_one_dimensional_base():
    grid = FermiGrid(1, 0.5, 65, 0.5)
    g = MetricField(1)
    b = select_embedding_basis(candidate_pool(grid, 1, 8), GraphFunction.zeros(grid), g)
    assert b.N == 4 and b.report.passed


def test_selection_fails_on_poor_pool(flat_grid, flat_metric):
    pool = [np.ones(flat_grid.boundary_ids.size)] * 8
    with pytest.raises(SelectionFail):
        select_embedding_basis(pool, GraphFunction.zeros(flat_grid), flat_metric)


def test_poisson_row_properties(flat_basis, flat_grid, flat_metric):
    node = flat_grid.interior_ids[100]
    row = poisson_row(node, flat_basis)
    assert row.shape == (6,)
    B = basis_from_boundary(traces(flat_grid, HARMONIC[:3]), GraphFunction.zeros(flat_grid), flat_metric)
    assert np.allclose(poisson_row(node, B)[0], 1.0)
    c, d = 0.7, -1.3
    mix = basis_from_boundary(np.array([c * flat_basis.boundary[0] + d * flat_basis.boundary[1]]),
                              GraphFunction.zeros(flat_grid), flat_metric)
    expect = c * row[0] + d * row[1]
    assert abs(poisson_row(node, mix)[0] - expect) <= 1e-10 * max(abs(expect), 1e-300)


def test_poisson_row_dense_oracle():
    grid = FermiGrid(2, 0.5, 9, 0.5)
    g = MetricField(2, "warped", {"b": -2.0, "c": 0.4})
    bd = traces(grid, HARMONIC[3:] + [lambda x: np.sin(3 * x[:, 0] + x[:, 1])])
    B = basis_from_boundary(bd, GraphFunction.zeros(grid), g)
    op = assemble_stability(GraphFunction.zeros(grid), g)
    A = op.matrix.toarray()
    Bb = op.boundary_block.toarray()
    V = -np.linalg.solve(A, Bb @ bd.T)                      # interior values per trace
    for k, node in enumerate(grid.interior_ids):
        assert np.allclose(poisson_row(node, B), V[k], rtol=1e-10, atol=1e-13)


def test_basis_round_trip(flat_basis, flat_metric):
    d = flat_basis.to_dict()
    b2 = DirichletBasis.from_dict(d, flat_metric)
    assert b2.digest() == flat_basis.digest()
    assert np.allclose(b2.solutions, flat_basis.solutions, atol=1e-14)
    assert b2.report.passed
    d["boundary"][0][0] += 1e-9
    with pytest.raises(ValueError):
        DirichletBasis.from_dict(d, flat_metric)
