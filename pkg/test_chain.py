import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from chain import (HazardDomainError, RegimeChain, TransitionWeightError, empirical_transition_frequencies,
                   holding_time_sample, ks_reference_cdf, path_rng)
from expression import parse_expression
from problem import RegimeChainSpec


def chain_of(lam, weights):
    return RegimeChain(RegimeChainSpec(
        k=len(lam),
        lam=tuple(parse_expression(e) for e in lam),
        trans_prob={key: parse_expression(e) for key, e in weights.items()},
    ))


# three regimes; leaving regime 1 the weights drift from regime 3 towards regime 2 with age
DECAYING = chain_of(
    ('1 / (1 + t)', '2', 't'),
    {(1, 2): 't / (1 + t)', (1, 3): '1 / (1 + t)', (2, 1): '1', (2, 3): '0', (3, 1): '0.25', (3, 2): '0.75'},
)


def test_cumulative_hazard_examples():
    assert DECAYING.cumulative_hazard(1, 0.0, 1.0) == pytest.approx(math.log(2.0), abs=1e-10)
    assert DECAYING.cumulative_hazard(2, 5.0, 3.0) == pytest.approx(6.0, abs=1e-10)
    # λ(t) = t integrated over [1, 3]
    assert DECAYING.cumulative_hazard(3, 1.0, 2.0) == pytest.approx(4.0, abs=1e-10)


def test_holding_time_examples():
    # ln((2 + s) / 2) = ln 2 at s = 2
    assert DECAYING.sample_holding_time(1, 1.0, 0.5) == pytest.approx(2.0, rel=1e-8)
    assert DECAYING.sample_holding_time(2, 0.0, -math.expm1(-6.0)) == pytest.approx(3.0, rel=1e-8)


def test_next_regime_examples():
    # at age 1 both targets weigh 1/2
    assert DECAYING.sample_next_regime(1, 1.0, 0.6) == 3
    assert DECAYING.sample_next_regime(1, 1.0, 0.4) == 2
    # at age 9 regime 2 weighs 0.9
    assert DECAYING.sample_next_regime(1, 9.0, 0.85) == 2
    assert DECAYING.sample_next_regime(2, 0.5, 0.99) == 1
    assert DECAYING.sample_next_regime(3, 2.0, 0.2) == 1
    assert DECAYING.sample_next_regime(3, 2.0, 0.3) == 2


def test_transition_rate_examples():
    assert DECAYING.transition_rate(1, 2, 1.0) == pytest.approx(0.25)
    assert DECAYING.transition_rate(1, 3, 3.0) == pytest.approx(1.0 / 16.0)
    assert DECAYING.transition_rate(2, 3, 1.0) == 0.0
    assert DECAYING.transition_rate(3, 2, 2.0) == pytest.approx(1.5)


def test_constant_hazard_inverts_in_closed_form(constant_spec):
    chain = RegimeChain(constant_spec.chain)
    assert chain.sample_holding_time(1, 0.0, 0.5) == pytest.approx(math.log(2.0))
    assert chain.cumulative_hazard(2, 3.0, 2.0) == pytest.approx(2.0)
    assert np.array_equal(chain.constant_rates(), [1.0, 1.0])


def test_single_regime_never_jumps(put_spec):
    chain = RegimeChain(put_spec.chain)
    assert math.isinf(chain.sample_holding_time(1, 0.0, 0.9))
    path = chain.simulate_chain(1, 0.0, 50.0, seed=3)
    assert path.n_jumps == 0
    assert path.regime_at(49.0) == 1
    with pytest.raises(TransitionWeightError):
        chain.sample_next_regime(1, 1.0, 0.5)


def test_linear_hazard_inversion_matches_quadratic_integral(linear_hazard_spec):
    chain = RegimeChain(linear_hazard_spec.chain)
    # Λ(0, s) = s^2 / 2 for λ(t) = t
    assert chain.cumulative_hazard(1, 0.0, 2.0) == pytest.approx(2.0, rel=1e-10)
    u = 0.7
    expected = math.sqrt(-2.0 * math.log1p(-u))
    assert chain.sample_holding_time(1, 0.0, u) == pytest.approx(expected, rel=1e-8)
    # entering with age 1: Λ(1, s) = s + s^2/2
    s = chain.sample_holding_time(1, 1.0, u)
    assert s + s * s / 2 == pytest.approx(-math.log1p(-u), rel=1e-8)


def test_constant_holding_times_pass_ks(constant_spec):
    chain = RegimeChain(constant_spec.chain)
    draws = holding_time_sample(chain, 1, 0.0, 20000, seed=11)
    assert stats.kstest(draws, 'expon', args=(0, 1.0)).pvalue > 0.01


def test_linear_hazard_first_jumps_pass_ks(linear_hazard_spec):
    chain = RegimeChain(linear_hazard_spec.chain)
    draws = holding_time_sample(chain, 1, 0.0, 1500, seed=5)
    reference = lambda s: 1.0 - np.exp(-np.square(s) / 2.0)
    assert stats.kstest(draws, reference).pvalue > 0.01
    assert stats.kstest(draws, ks_reference_cdf(chain, 1, 0.0)).pvalue > 0.01


@pytest.mark.slow
def test_constant_holding_times_pass_ks_at_full_size(constant_spec):
    chain = RegimeChain(constant_spec.chain)
    draws = holding_time_sample(chain, 2, 0.0, 100_000, seed=17)
    assert stats.kstest(draws, 'expon', args=(0, 1.0)).pvalue > 0.01


@pytest.mark.slow
def test_linear_hazard_first_jumps_pass_ks_at_full_size(linear_hazard_spec):
    chain = RegimeChain(linear_hazard_spec.chain)
    draws = holding_time_sample(chain, 1, 0.0, 100_000, seed=23)
    reference = lambda s: 1.0 - np.exp(-np.square(s) / 2.0)
    assert stats.kstest(draws, reference).pvalue > 0.01


def test_next_regime_follows_age_dependent_weights(aging_spec):
    chain = RegimeChain(aging_spec.chain)
    rng = path_rng(9)
    n, age = 6000, 3.0
    draws = np.array([chain.sample_next_regime(1, age, rng.random()) for _ in range(n)])
    # p.1.2 = 1/(1+t), p.1.3 = t/(1+t) at t = 3
    observed = np.mean(draws == 3)
    assert abs(observed - 0.75) <= 3 * math.sqrt(0.75 * 0.25 / n)
    assert not np.any(draws == 1)
    # p.3.2 = 0: regime 3 always moves to 1
    assert {chain.sample_next_regime(3, 0.5, u) for u in np.linspace(0.01, 0.99, 25)} == {1}


def test_weights_are_never_read_at_age_zero(aging_spec):
    chain = RegimeChain(aging_spec.chain)
    weights = chain.transition_weights(1, 0.0)
    assert weights.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        chain.sample_next_regime(1, 0.0, 0.5)


def test_transition_rates(aging_spec):
    chain = RegimeChain(aging_spec.chain)
    rates = chain.rate_matrix(1.0)
    assert rates[0, 1] == pytest.approx(0.5 * (0.5 + 0.5))
    assert rates[0, 2] == pytest.approx(0.5 * (0.5 + 0.5))
    assert np.all(np.diag(rates) == 0)
    with pytest.raises(HazardDomainError):
        chain.transition_rate(2, 2, 1.0)


def test_simulated_chain_is_reproducible_and_consistent(aging_spec):
    chain = RegimeChain(aging_spec.chain)
    a = chain.simulate_chain(1, 0.0, 20.0, seed=42, stream=3)
    b = chain.simulate_chain(1, 0.0, 20.0, seed=42, stream=3)
    c = chain.simulate_chain(1, 0.0, 20.0, seed=42, stream=4)
    assert a == b
    assert a != c
    assert all(s1 < s2 for s1, s2 in zip(a.jump_times, a.jump_times[1:]))
    assert all(prev != nxt for prev, nxt in zip((1,) + a.states, a.states))
    if a.n_jumps:
        assert a.age_at(a.jump_times[0]) == 0.0


def test_empirical_frequencies(constant_spec):
    chain = RegimeChain(constant_spec.chain)
    paths = [chain.simulate_chain(1, 0.0, 10.0, seed=1, stream=n) for n in range(50)]
    counts, freqs = empirical_transition_frequencies(paths, 2)
    assert counts[0, 0] == 0 and counts[1, 1] == 0
    assert freqs[0, 1] == 1.0 and freqs[1, 0] == 1.0


def test_negative_hazard_is_reported(linear_hazard_spec):
    bad = replace(linear_hazard_spec.chain, lam=(parse_expression('1 - t'), parse_expression('2')))
    chain = RegimeChain(bad)
    with pytest.raises(HazardDomainError):
        chain.cumulative_hazard(1, 0.0, 5.0)
