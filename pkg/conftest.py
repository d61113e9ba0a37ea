import textwrap

import pytest

from problem import load_problem


def problem_text(body: str) -> str:
    return textwrap.dedent(body).strip() + '\n'


GBM_PUT = problem_text("""
    name = gbm_put
    k = 1
    domain.a = 0
    domain.b = inf
    region.lo = 0.01
    region.hi = inf
    trunc.hi = 5
    grid.M = 400
    alpha.1 = 0.02 * x
    sigma.1 = 0.3 * x
    pi.1 = 0
    h.1 = -max(1 - x, 0)
    r.1 = 0.05
    eps.1 = 0.04
    mc.dt = 0.01
    mc.horizon = 50
    mc.paths = 2000
""")

CONSTANT_PAYOFF = problem_text("""
    name = constant_payoff
    k = 2
    domain.a = -inf
    domain.b = inf
    region.lo = -1
    region.hi = 1
    grid.M = 80
    alpha.1 = 0.5
    alpha.2 = -0.5
    sigma.1 = 0.3
    sigma.2 = 0.3
    r.1 = 0.5
    r.2 = 1
    pi.1 = 1
    pi.2 = 2
    h.1 = -2
    h.2 = -2
    eps.1 = 0.4
    eps.2 = 0.4
    lambda.1 = 1
    lambda.2 = 1
    p.1.2 = 1
    p.2.1 = 1
    mc.dt = 1e-3
    mc.paths = 500
""")

STOP_EVERYWHERE = problem_text("""
    name = stop_everywhere
    k = 2
    domain.a = 0
    domain.b = 1
    region.lo = 0
    region.hi = 1
    grid.M = 40
    alpha.1 = 0.1
    alpha.2 = -0.1
    sigma.1 = 0.2
    sigma.2 = 0.5
    pi.1 = -1
    pi.2 = -1
    h.1 = 0
    h.2 = 0
    r.1 = 1
    r.2 = 1
    eps.1 = 0.5
    eps.2 = 0.5
    lambda.1 = 1
    lambda.2 = 1
    p.1.2 = 1
    p.2.1 = 1
""")

TWO_REGIME = problem_text("""
    name = two_regime
    k = 2
    mode = homogeneous
    domain.a = 0
    domain.b = inf
    region.lo = 0.05
    region.hi = 3
    grid.M = 120
    alpha.1 = 0.05 * x
    alpha.2 = -0.05 * x
    sigma.1 = 0.3 * x
    sigma.2 = 0.5 * x
    pi.1 = 0.2
    pi.2 = 0.1
    h.1 = -max(1 - x, 0)
    h.2 = -max(1 - x, 0)
    r.1 = 1
    r.2 = 1.5
    eps.1 = 0.9
    eps.2 = 0.9
    lambda.1 = 1
    lambda.2 = 2
    p.1.2 = 1
    p.2.1 = 1
    grid.N = 120
    mc.dt = 0.01
    mc.paths = 2000
""")

AGING = problem_text("""
    name = aging_small
    k = 3
    domain.a = 0
    domain.b = inf
    region.lo = 0.05
    region.hi = 3
    grid.M = 40
    grid.N = 40
    alpha.1 = 0.02 * x
    alpha.2 = 0
    alpha.3 = -0.02 * x
    sigma.1 = 0.3 * x
    sigma.2 = 0.4 * x
    sigma.3 = 0.2 * x
    pi.1 = 0
    pi.2 = 0
    pi.3 = 0
    h.1 = -max(1 - x, 0)
    h.2 = -max(1 - x, 0)
    h.3 = -max(1 - x, 0)
    r.1 = 0.5
    r.2 = 0.6
    r.3 = 0.7
    eps.1 = 0.4
    eps.2 = 0.4
    eps.3 = 0.4
    lambda.1 = t / (1 + t) + 0.5
    lambda.2 = 1
    lambda.3 = 0.8
    p.1.2 = 1 / (1 + t)
    p.1.3 = t / (1 + t)
    p.2.1 = 0.5
    p.2.3 = 0.5
    p.3.1 = 1
    p.3.2 = 0
""")

LINEAR_HAZARD = problem_text("""
    name = linear_hazard
    k = 2
    domain.a = 0
    domain.b = 1
    region.lo = 0
    region.hi = 1
    grid.M = 20
    alpha.1 = 0
    alpha.2 = 0
    sigma.1 = 0.1
    sigma.2 = 0.1
    pi.1 = 0
    pi.2 = 0
    h.1 = 0
    h.2 = 0
    r.1 = 1
    r.2 = 1
    eps.1 = 0.5
    eps.2 = 0.5
    lambda.1 = t
    lambda.2 = 2
    p.1.2 = 1
    p.2.1 = 1
""")


@pytest.fixture
def put_spec():
    return load_problem(GBM_PUT)


@pytest.fixture
def constant_spec():
    return load_problem(CONSTANT_PAYOFF)


@pytest.fixture
def stop_spec():
    return load_problem(STOP_EVERYWHERE)


@pytest.fixture
def two_regime_spec():
    return load_problem(TWO_REGIME)


@pytest.fixture
def aging_spec():
    return load_problem(AGING)


@pytest.fixture
def linear_hazard_spec():
    return load_problem(LINEAR_HAZARD)


@pytest.fixture
def problem_file(tmp_path):
    def write(text: str, name: str = 'problem.prob'):
        path = tmp_path / name
        path.write_text(text, encoding='utf-8')
        return path
    return write
