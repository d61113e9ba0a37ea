from dataclasses import replace

import numpy as np
import pytest

from conftest import problem_text
from expression import parse_expression
from hjb import (AgeGrid, Grid1D, MMatrixError, assemble_operator, dpp_step, extract_policy, free_boundary,
                 residual_check, smooth_fit_report, solve, solve_homogeneous, solve_truncated_inhomogeneous)
from problem import load_problem
from psor import OMEGA_MAX, ObstacleSystem, gauss_seidel_update, projected_sor, regime_order, relaxation_factor
from verify import perpetual_put_oracle


def small_system(rhs: float) -> ObstacleSystem:
    k, n = 2, 7
    coupling = np.zeros((k, k, n))
    coupling[0, 1, :] = 0.5
    coupling[1, 0, :] = 0.25
    return ObstacleSystem(
        lower=np.ones((k, n)),
        diag=np.full((k, n), 3.0),
        upper=np.ones((k, n)),
        coupling=coupling,
        rhs=np.full((k, n), rhs),
        obstacle=np.zeros((k, n)),
    )


def test_psor_solves_the_complementarity_problem():
    system = small_system(0.2)
    v = np.zeros((2, 7))
    result = projected_sor(system, v, 1e-13, 10000, residual_tol=1e-12)
    assert result.converged
    assert result.residual <= 1e-12
    assert 1.0 <= result.omega <= OMEGA_MAX
    assert np.all(v >= system.obstacle)
    for i in range(2):
        for n in range(1, 6):
            gs = gauss_seidel_update(system, v, i, n)
            if v[i, n] > 0:
                assert v[i, n] == pytest.approx(gs, abs=1e-10)
            else:
                assert gs <= 1e-10


def test_psor_with_negative_source_stays_on_the_obstacle():
    system = small_system(-1.0)
    v = np.full((2, 7), 5.0)
    projected_sor(system, v, 1e-12, 1000)
    assert np.all(v == 0.0)


def test_gauss_seidel_update_is_monotone():
    system = small_system(0.2)
    low = np.zeros((2, 7))
    high = low + np.linspace(0.0, 0.3, 7)
    for i in range(2):
        for n in range(1, 6):
            assert gauss_seidel_update(system, high, i, n) >= gauss_seidel_update(system, low, i, n)


def test_relaxation_factor_and_order():
    assert 1.0 <= relaxation_factor(small_system(0.0)) <= OMEGA_MAX
    assert list(regime_order(3, 'descending')) == [2, 1, 0]
    with pytest.raises(ValueError):
        regime_order(3, 'sideways')


def test_operator_rows_are_m_matrix_rows(two_regime_spec):
    grid = Grid1D.from_spec(two_regime_spec)
    op = assemble_operator(two_regime_spec, grid, 2)
    inner = slice(1, -1)
    assert np.all(op.lower[inner] <= 0) and np.all(op.upper[inner] <= 0)
    assert np.array_equal(op.coupling, [2.0, 0.0])
    slack = op.diag[inner] - np.abs(op.lower[inner]) - np.abs(op.upper[inner]) - op.coupling.sum()
    assert np.allclose(slack, 1.5)


STENCIL = problem_text("""
    name = stencil
    k = 2
    domain.a = 0
    domain.b = 4
    region.lo = 0
    region.hi = 4
    grid.M = 4
    alpha.1 = 0
    alpha.2 = 1
    sigma.1 = sqrt(2)
    sigma.2 = 0
    pi.1 = 0
    pi.2 = 0
    h.1 = 0
    h.2 = 0
    r.1 = 1
    r.2 = 1
    eps.1 = 0.5
    eps.2 = 0.5
    lambda.1 = 0.5
    lambda.2 = 0.25
    p.1.2 = 1
    p.2.1 = 1
""")


def test_operator_stencil_values():
    spec = load_problem(STENCIL)
    grid = Grid1D.from_spec(spec)
    assert grid.dx == 1.0

    diffusive = assemble_operator(spec, grid, 1)
    assert diffusive.lower[2] == pytest.approx(-1.0)
    assert diffusive.diag[2] == pytest.approx(3.5)
    assert diffusive.upper[2] == pytest.approx(-1.0)
    assert np.array_equal(diffusive.coupling, [0.0, 0.5])

    drift = assemble_operator(spec, grid, 2)
    assert (drift.lower[2], drift.diag[2], drift.upper[2]) == (0.0, 2.25, -1.0)
    assert np.array_equal(drift.coupling, [0.25, 0.0])


def test_operator_maps_constants_to_discounted_constants():
    spec = load_problem(STENCIL)
    grid = Grid1D.from_spec(spec)
    c = 1.7
    flat = np.full((2, grid.nodes.size), c)
    for i in (1, 2):
        op = assemble_operator(spec, grid, i)
        assert np.allclose(op.apply(flat[i - 1], flat), c)


def test_negative_volatility_is_not_an_m_matrix(put_spec):
    broken = replace(put_spec, diffusion=replace(put_spec.diffusion, vol=(parse_expression('-0.1'),)))
    with pytest.raises(MMatrixError, match='negative volatility'):
        solve_homogeneous(broken)


def test_put_matches_truncated_closed_form(put_spec):
    field, boundary = solve(put_spec)
    assert field.converged
    x = field.grid.nodes
    oracle = perpetual_put_oracle(0.02, 0.3, 0.05, 1.0, x, upper=5.0)
    assert np.max(np.abs(field.values[:, 0, 0] - oracle.value)) < 1e-2

    levels, side = boundary.thresholds(1)
    assert side == 'below'
    assert levels[0] == pytest.approx(oracle.boundary, abs=2 * field.grid.dx + 5e-3)
    assert all(row.ok for row in smooth_fit_report(field, boundary))


def test_solved_field_satisfies_the_complementarity_conditions(put_spec):
    field, _ = solve(put_spec)
    report = residual_check(field, put_spec)
    assert report.max_residual <= put_spec.solver.residual_tol
    assert field.residual == report.max_residual
    assert np.min(field.gap) >= -1e-12
    assert np.all(field.gap[[0, -1], :, :] == 0.0)


@pytest.mark.parametrize('fixture', ['put_spec', 'two_regime_spec'])
def test_converged_residual_is_within_the_unscaled_bound(fixture, request):
    spec = request.getfixturevalue(fixture)
    field, _ = solve(spec)
    report = residual_check(field, spec)
    assert field.converged
    assert report.max_residual <= spec.solver.residual_tol
    assert np.max(np.abs(report.pointwise)) == report.max_residual


def test_residual_detects_a_tampered_node(put_spec):
    field, _ = solve(put_spec)
    x = field.grid.nodes
    n = int(np.argmin(np.abs(x - 1.0)))
    assert not field.stop_flag[n, 0, 0]
    tampered = replace(field, values=field.values.copy())
    tampered.values[n, 0, 0] += 1.0
    report = residual_check(tampered, put_spec)
    assert report.max_residual > 1.0
    assert abs(report.x - x[n]) <= field.grid.dx + 1e-12


def test_residual_of_the_constant_solution_is_zero(constant_spec):
    field, _ = solve(constant_spec)
    exact = replace(field, values=np.full_like(field.values, 2.0))
    assert residual_check(exact, constant_spec).max_residual <= 1e-12


def test_value_is_monotone_in_the_data(two_regime_spec):
    base, _ = solve(two_regime_spec)
    payoff = two_regime_spec.payoff
    richer = replace(two_regime_spec, payoff=replace(
        payoff, running=(parse_expression('0.3'), parse_expression('0.2'))))
    cheaper = replace(two_regime_spec, payoff=replace(
        payoff, terminal_cost=tuple(parse_expression('-max(1 - x, 0) - 0.05') for _ in range(2))))
    for changed in (richer, cheaper):
        field, _ = solve(changed)
        assert np.all(field.values >= base.values - 1e-9)
        assert np.max(field.values - base.values) > 1e-3


def test_constant_payoff_value_is_constant(constant_spec):
    field, _ = solve(constant_spec)
    assert np.max(np.abs(field.values - 2.0)) <= 1e-9
    stepped, distance = dpp_step(field, constant_spec, 0.1)
    assert distance <= 1e-9


def test_stop_everywhere(stop_spec):
    field, boundary = solve(stop_spec)
    assert np.all(field.values == 0.0)
    assert field.stop_flag.all()
    assert boundary.points == []
    stepped, distance = dpp_step(field, stop_spec, 0.05)
    assert distance == 0.0


def test_regime_order_does_not_change_the_value(two_regime_spec):
    ascending, _ = solve_homogeneous(two_regime_spec, order='ascending')
    descending, _ = solve_homogeneous(two_regime_spec, order='descending')
    assert np.max(np.abs(ascending.values - descending.values)) < 1e-7


def test_age_dependent_solver_agrees_with_homogeneous_one(two_regime_spec):
    homogeneous, _ = solve_homogeneous(two_regime_spec)
    aged = solve_truncated_inhomogeneous(two_regime_spec)
    assert aged.converged
    assert aged.values.shape == (121, 121, 2)
    assert np.max(np.abs(aged.slice_at_age0() - homogeneous.slice_at_age0())) < 1e-4
    # the terminal layer is pinned to -h
    assert np.array_equal(aged.values[:, -1, :], aged.minus_h[:, -1, :])


def test_aging_problem_converges(aging_spec):
    field, boundary = solve(aging_spec)
    assert not field.is_homogeneous
    assert field.converged
    assert field.history[-1] < aging_spec.solver.tol_fp
    assert field.residual <= aging_spec.solver.residual_tol
    assert field.fp_iterations <= len(field.history)
    assert np.min(field.gap) >= -1e-12
    assert all(point.t is not None for point in boundary.points)


def test_dpp_step_on_a_solved_field_is_small(put_spec):
    field, _ = solve(put_spec)
    delta = 0.05
    stepped, distance = dpp_step(field, put_spec, delta)
    assert np.all(stepped >= field.minus_h)
    assert distance <= delta * max(1.0, 0.05 * np.max(np.abs(field.values)))


def test_extracted_policy_reproduces_stop_flags(put_spec):
    field, _ = solve(put_spec)
    rule = extract_policy(field)
    x = field.grid.nodes
    decided = rule(0.0, x, 0.0, np.ones_like(x, dtype=int))
    assert np.array_equal(decided, field.stop_flag[:, 0, 0])


def test_free_boundary_of_age_dependent_field(aging_spec):
    field = solve_truncated_inhomogeneous(aging_spec)
    boundary = free_boundary(field)
    ages = {point.t for point in boundary.points}
    assert field.age_nodes[-1] not in ages
    assert ages <= set(field.age_nodes.tolist())


def test_grid_validation(put_spec):
    with pytest.raises(ValueError):
        Grid1D.from_spec(put_spec, M=2)
    with pytest.raises(ValueError):
        AgeGrid.from_spec(put_spec, N=0)
    grid = AgeGrid.from_spec(put_spec, N=10, upsilon=5.0)
    assert grid.dt == 0.5 and grid.upsilon == 5.0
