import math
from dataclasses import replace

import pytest

from conftest import CONSTANT_PAYOFF, GBM_PUT, LINEAR_HAZARD
from config import Config
from expression import parse_expression
from guards import DegenerateDiscountError, ProblemValidationError, reject_degenerate_discount
from problem import load_problem, parse_problem_text


def _keys(error):
    return {key for key, _ in error.violations}


def test_loads_put_problem_with_defaults(put_spec):
    assert put_spec.name == 'gbm_put'
    assert put_spec.k == 1
    assert put_spec.mode == 'homogeneous'
    assert put_spec.diffusion.interval == (0.01, 5.0)
    assert put_spec.diffusion.true_boundary == (True, False)
    assert put_spec.solver.N == Config.GRID_N
    assert put_spec.solver.upsilon == pytest.approx(-math.log(Config.UPSILON_TAIL) / 0.04)
    assert put_spec.solver.tol_stop == pytest.approx(10 * put_spec.solver.tol)
    assert put_spec.chain.lam[0].constant_value() == 0.0


def test_stop_tolerance_follows_config(monkeypatch):
    monkeypatch.setattr(Config, 'TOL_STOP', 1e-7)
    assert load_problem(GBM_PUT).solver.tol_stop == pytest.approx(1e-7)
    tighter = load_problem(GBM_PUT + 'solver.tol = 1e-12\n')
    assert tighter.solver.tol_stop == pytest.approx(1e-9)
    explicit = load_problem(GBM_PUT + 'solver.tol_stop = 1e-6\n')
    assert explicit.solver.tol_stop == 1e-6
    assert explicit.effective['solver.tol_stop'] == '1e-06'
    with pytest.raises(ProblemValidationError) as info:
        load_problem(GBM_PUT + 'solver.tol_stop = -1\n')
    assert 'solver.tol_stop' in _keys(info.value)


def test_mode_defaults_follow_the_chain(constant_spec, linear_hazard_spec):
    assert constant_spec.mode == 'homogeneous'
    assert linear_hazard_spec.mode == 'inhomogeneous'


def test_load_is_deterministic(problem_file):
    path = problem_file(CONSTANT_PAYOFF)
    first, second = load_problem(path), load_problem(path)
    assert first.digest == second.digest
    assert first.effective == second.effective


def test_overrides_win_and_are_recorded(problem_file):
    path = problem_file(GBM_PUT)
    spec = load_problem(path, {'grid.M': '800', 'mc.seed': '7'})
    assert spec.solver.M == 800
    assert spec.effective['grid.M'] == '800'
    assert spec.effective['mc.seed'] == '7'


def test_comments_and_blank_lines_are_ignored():
    entries, errors = parse_problem_text("# header\n\nk = 2  # regimes\nname = x\n")
    assert entries == {'k': '2', 'name': 'x'}
    assert errors == []


def test_every_problem_is_reported_at_once():
    text = GBM_PUT.replace('sigma.1 = 0.3 * x', 'sigma.1 = 0.3 * y').replace('grid.M = 400', 'grid.M = lots')
    text += 'bogus.key = 1\nk = 1\n'
    with pytest.raises(ProblemValidationError) as info:
        load_problem(text)
    keys = _keys(info.value)
    assert {'sigma.1', 'grid.M', 'bogus.key', 'k'} <= keys


def test_missing_required_keys():
    with pytest.raises(ProblemValidationError) as info:
        load_problem(GBM_PUT.replace('r.1 = 0.05\n', ''))
    assert 'r.1' in _keys(info.value)


def test_infinite_region_needs_a_truncation_point():
    with pytest.raises(ProblemValidationError) as info:
        load_problem(GBM_PUT.replace('trunc.hi = 5\n', ''))
    assert 'trunc.hi' in _keys(info.value)


def test_self_transition_is_forbidden():
    with pytest.raises(ProblemValidationError) as info:
        load_problem(CONSTANT_PAYOFF + 'p.1.1 = 0.5\n')
    assert 'p.1.1' in _keys(info.value)
    assert 'self-transition forbidden' in str(info.value)
    assert load_problem(CONSTANT_PAYOFF + 'p.1.1 = 0\n').k == 2


def test_weights_must_sum_to_one():
    text = CONSTANT_PAYOFF.replace('p.1.2 = 1', 'p.1.2 = 0.9')
    with pytest.raises(ProblemValidationError) as info:
        load_problem(text)
    assert 'p.1' in _keys(info.value)


def test_homogeneous_mode_needs_constant_positive_rates():
    text = LINEAR_HAZARD + 'mode = homogeneous\n'
    with pytest.raises(ProblemValidationError) as info:
        load_problem(text)
    assert 'lambda.1' in _keys(info.value)


def test_expression_variables_are_restricted():
    with pytest.raises(ProblemValidationError) as info:
        load_problem(GBM_PUT.replace('r.1 = 0.05', 'r.1 = 0.05 + t'))
    assert 'r.1' in _keys(info.value)
    with pytest.raises(ProblemValidationError) as info:
        load_problem(LINEAR_HAZARD.replace('lambda.1 = t', 'lambda.1 = x'))
    assert 'lambda.1' in _keys(info.value)


def test_negative_volatility_and_bad_region():
    text = GBM_PUT.replace('sigma.1 = 0.3 * x', 'sigma.1 = -0.3 * x')
    with pytest.raises(ProblemValidationError) as info:
        load_problem(text)
    assert 'sigma.1' in _keys(info.value)
    with pytest.raises(ProblemValidationError):
        load_problem(GBM_PUT.replace('region.lo = 0.01', 'region.lo = -1'))


def test_zero_discount_is_degenerate():
    text = CONSTANT_PAYOFF.replace('r.1 = 0.5', 'r.1 = 0').replace('pi.1 = 1', 'pi.1 = 0')
    with pytest.raises(DegenerateDiscountError) as info:
        load_problem(text)
    assert 'discount guard' in str(info.value)


def test_discount_touching_zero_is_degenerate():
    text = GBM_PUT.replace('r.1 = 0.05', 'r.1 = x')
    with pytest.raises(DegenerateDiscountError):
        load_problem(text)


def test_reject_degenerate_discount_on_a_loaded_problem(put_spec):
    reject_degenerate_discount(put_spec)
    weak = replace(put_spec, payoff=replace(put_spec.payoff, discount=(parse_expression('0.01'),)))
    with pytest.raises(DegenerateDiscountError):
        reject_degenerate_discount(weak)


def test_with_grid_and_truncation_copies(put_spec):
    finer = put_spec.with_grid(M=800)
    assert finer.solver.M == 800 and put_spec.solver.M == 400
    wider = put_spec.with_truncation(None, 10.0)
    assert wider.diffusion.interval == (0.01, 10.0)
