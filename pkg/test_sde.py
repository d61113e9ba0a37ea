import math

import numpy as np
import pandas as pd
import pytest

from conftest import problem_text
from policy import FixedTimeRule, NeverStop, StopImmediately, ThresholdRule
from problem import load_problem
from sde import (censor_tail_bound, evaluate_payoff, mc_estimate, resolve_threads, simulate_batch, simulate_path,
                 write_path_csv)


def test_immediate_stop_returns_minus_h_exactly(constant_spec):
    estimate = mc_estimate(constant_spec, 0.3, 0.0, 2, StopImmediately(), n_paths=100, dt=0.01, horizon=1.0)
    assert estimate.mean == 2.0
    assert estimate.stderr == 0.0
    assert estimate.n_paths == 100
    assert estimate.censored_fraction == 0.0


def test_constant_payoff_identity_holds_for_any_rule(constant_spec):
    # π_i = 2 r_i and h ≡ -2, so every stopping time is worth exactly 2
    estimate = mc_estimate(constant_spec, 0.0, 0.0, 1, FixedTimeRule(1.0), n_paths=200, dt=1e-3, horizon=2.0)
    assert estimate.mean == pytest.approx(2.0, abs=1e-5)
    assert estimate.stderr < 1e-5
    assert estimate.censored_fraction == 0.0


def test_batch_is_independent_of_thread_count(put_spec):
    policy = ThresholdRule([0.8])
    single = simulate_batch(put_spec, 1.0, 0.0, 1, policy, 300, 0.01, 5.0, seed=17, threads=1, chunk_size=64)
    pooled = simulate_batch(put_spec, 1.0, 0.0, 1, policy, 300, 0.01, 5.0, seed=17, threads=4, chunk_size=64)
    assert np.array_equal(single[0], pooled[0])
    assert np.array_equal(single[1], pooled[1])
    other = simulate_batch(put_spec, 1.0, 0.0, 1, policy, 300, 0.01, 5.0, seed=18, threads=1, chunk_size=64)
    assert not np.array_equal(single[0], other[0])


def test_estimate_is_reproducible(put_spec):
    policy = ThresholdRule([0.7])
    first = mc_estimate(put_spec, 1.0, 0.0, 1, policy, n_paths=200, dt=0.01, horizon=5.0, seed=3)
    second = mc_estimate(put_spec, 1.0, 0.0, 1, policy, n_paths=200, dt=0.01, horizon=5.0, seed=3, threads=2)
    assert first == second


def test_unstopped_paths_are_counted_as_censored(linear_hazard_spec):
    estimate = mc_estimate(linear_hazard_spec, 0.5, 0.0, 1, NeverStop(), n_paths=20, dt=0.01, horizon=0.5)
    assert estimate.censored_fraction == 1.0
    assert estimate.mean == 0.0


def test_estimate_rejects_bad_start(put_spec):
    with pytest.raises(ValueError):
        mc_estimate(put_spec, 10.0, 0.0, 1, StopImmediately(), n_paths=10)
    with pytest.raises(ValueError):
        mc_estimate(put_spec, 1.0, 0.0, 2, StopImmediately(), n_paths=10)
    with pytest.raises(ValueError):
        mc_estimate(put_spec, 1.0, 0.0, 1, StopImmediately(), n_paths=1)


def test_path_mesh_contains_jumps_and_policy_times(linear_hazard_spec):
    dt, horizon = 0.05, 1.0
    path = simulate_path(linear_hazard_spec, 0.5, 0.0, 1, dt, horizon, seed=4, mesh_times=(0.37,))
    assert path.exit_index is None
    assert path.mesh[0] == 0.0 and path.mesh[-1] == horizon
    assert 0.37 in path.mesh
    assert np.all(np.diff(path.mesh) > 0)
    assert np.all(np.diff(path.mesh) <= dt * (1 + 1e-9))
    # r ≡ 1 in both regimes
    assert np.allclose(path.rho, path.mesh)
    jumps = np.flatnonzero(np.diff(path.regime))
    for n in jumps:
        assert path.age[n + 1] == 0.0


def test_path_stops_at_interval_edge(constant_spec):
    path = simulate_path(constant_spec, 0.9, 0.0, 1, 0.1, 200.0, seed=2)
    assert path.exit_index == len(path) - 1
    assert path.x[path.exit_index] in (-1.0, 1.0)
    assert np.all(np.abs(path.x[:-1]) < 1.0)

    at_edge = simulate_path(constant_spec, 1.0, 0.0, 1, 0.1, 5.0, seed=2)
    assert at_edge.exit_index == 0
    assert len(at_edge) == 1


def test_path_payoff_under_rules(constant_spec, linear_hazard_spec):
    payoff = constant_spec.payoff
    path = simulate_path(constant_spec, 0.0, 0.0, 1, 0.01, 10.0, seed=8, mesh_times=(5.0,))
    immediate = evaluate_payoff(path, StopImmediately(), payoff)
    assert immediate.value == 2.0 and immediate.stop_index == 0
    fixed = evaluate_payoff(path, FixedTimeRule(5.0), payoff)
    assert not fixed.censored
    assert fixed.value == pytest.approx(2.0, abs=1e-3)

    quiet = simulate_path(linear_hazard_spec, 0.5, 0.0, 1, 0.05, 0.5, seed=1)
    never = evaluate_payoff(quiet, NeverStop(), linear_hazard_spec.payoff)
    assert never.censored
    assert never.value == 0.0


def test_censor_tail_bound(put_spec):
    assert censor_tail_bound(put_spec, 50.0) == pytest.approx(math.exp(-0.04 * 50.0))


def test_write_path_csv(linear_hazard_spec, tmp_path):
    path = simulate_path(linear_hazard_spec, 0.5, 0.0, 1, 0.1, 1.0, seed=6)
    destination = write_path_csv(path, tmp_path / 'path.csv')
    frame = pd.read_csv(destination, float_precision='round_trip')
    assert list(frame.columns) == ['s', 'x', 'age', 'regime', 'rho']
    assert len(frame) == len(path)
    assert np.array_equal(frame['x'].to_numpy(), path.x)
    assert destination.read_bytes().count(b'\r') == 0


def test_resolve_threads():
    assert resolve_threads('3') == 3
    assert resolve_threads(0) == 1
    assert resolve_threads('auto') >= 1


def gbm_problem(mu: float, sigma: float):
    return load_problem(problem_text(f"""
        name = gbm
        k = 1
        domain.a = 0
        domain.b = inf
        region.lo = 0.001
        region.hi = inf
        trunc.hi = 100
        grid.M = 100
        alpha.1 = {mu} * x
        sigma.1 = {sigma} * x
        pi.1 = 0
        h.1 = -x
        r.1 = 0.05
        eps.1 = 0.04
    """))


TELEGRAPH = problem_text("""
    name = telegraph
    k = 2
    domain.a = -inf
    domain.b = inf
    region.lo = -5
    region.hi = 5
    grid.M = 100
    alpha.1 = 1
    alpha.2 = -1
    sigma.1 = 0
    sigma.2 = 0
    pi.1 = 0
    pi.2 = 0
    h.1 = -x
    h.2 = -x
    r.1 = 0.05
    r.2 = 0.05
    eps.1 = 0.04
    eps.2 = 0.04
    lambda.1 = 50
    lambda.2 = 50
    p.1.2 = 1
    p.2.1 = 1
""")


def terminal_states(spec, x0: float, i0: int, T: float, n_paths: int, dt: float, seed: int) -> np.ndarray:
    values, censored = simulate_batch(spec, x0, 0.0, i0, FixedTimeRule(T), n_paths, dt, 2 * T, seed)
    assert not censored.any()
    # h = -x with a constant discount: the payoff at T is e^{-rT} X_T
    return values * math.exp(spec.payoff.discount[0].constant_value() * T)


def stderr_of(sample: np.ndarray) -> float:
    return float(sample.std(ddof=1) / math.sqrt(sample.size))


def test_gbm_mean_matches_the_moment_formula():
    x_T = terminal_states(gbm_problem(0.05, 0.2), 1.0, 1, 1.0, 100_000, 0.01, seed=11)
    assert abs(x_T.mean() - math.exp(0.05)) <= 3 * stderr_of(x_T)


def test_fast_switching_averages_the_drift():
    x_T = terminal_states(load_problem(TELEGRAPH), 0.0, 1, 1.0, 100_000, 0.01, seed=9)
    assert np.all(np.abs(x_T) <= 1.0 + 1e-9)
    # from regime 1 the mean drift is e^{-2λs}, so E[X_T] = (1 - e^{-2λT}) / (2λ)
    expected = (1.0 - math.exp(-100.0)) / 100.0
    assert abs(x_T.mean() - expected) <= 3 * stderr_of(x_T)
    assert abs(x_T.mean()) < 0.02


@pytest.mark.slow
def test_euler_weak_error_is_first_order():
    spec = gbm_problem(1.0, 0.01)
    steps = [1e-2, 5e-3, 2.5e-3]
    errors = [abs(terminal_states(spec, 1.0, 1, 1.0, 100_000, dt, seed=5).mean() - math.e) for dt in steps]
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert 0.9 <= slope <= 1.1
