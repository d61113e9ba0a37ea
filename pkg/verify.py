"""
Independent oracles and cross-checks for the solver and the simulator.

Every check produces `CheckRow` records (`case,check,point,expected,got,tolerance,pass`).
The shipped corpus is registered in `CORPUS`; each `BenchmarkCase` names the checks
that apply to it and the provenance of every expected value.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

from chain import RegimeChain, holding_time_sample, ks_reference_cdf, open_uniform, path_rng
from config import Config
from guards import DegenerateDiscountError, ProblemValidationError, reject_degenerate_discount
from hjb import (AgeGrid, FreeBoundary, ValueField, dpp_step, extract_policy,
                 residual_check, smooth_fit_report, solve, solve_homogeneous, solve_truncated_inhomogeneous)
from policy import ThresholdRule
from problem import load_problem
from sde import mc_estimate, resolve_threads

logger = logging.getLogger(__name__)

__all__ = [
    'BenchmarkCase', 'CheckRow', 'CORPUS', 'PutOracle', 'perpetual_put_oracle', 'policy_value_check',
    'dpp_statistical_check', 'reject_degenerate_discount', 'perturbed_policy_check', 'grid_convergence_ladder',
    'truncation_sensitivity', 'upsilon_sensitivity', 'field_audit', 'homogeneous_agreement', 'chain_law_check',
    'run_case', 'run_corpus', 'verify_problem',
]

Point = Tuple[float, float, int]


@dataclass(frozen=True)
class CheckRow:
    case: str
    check: str
    point: str
    expected: float
    got: float
    tolerance: float
    passed: bool

    def as_row(self) -> dict:
        return {
            'case': self.case,
            'check': self.check,
            'point': self.point,
            'expected': self.expected,
            'got': self.got,
            'tolerance': self.tolerance,
            'pass': self.passed,
        }


def _label(x: Optional[float] = None, t: Optional[float] = None, i: Optional[int] = None, **extra) -> str:
    parts = []
    if x is not None:
        parts.append(f"x={x:.6g}")
    if t is not None:
        parts.append(f"t={t:.6g}")
    if i is not None:
        parts.append(f"i={i}")
    parts.extend(f"{key}={value}" for key, value in extra.items())
    return ';'.join(parts) or '-'


@dataclass(frozen=True)
class PutOracle:
    value: np.ndarray
    boundary: float
    beta: float
    upper: float = math.inf


def _put_roots(mu: float, sigma: float, r0: float) -> Tuple[float, float]:
    """Roots of 0.5 sigma^2 b (b - 1) + mu b - r0 = 0, negative first."""
    a = 0.5 * sigma * sigma
    b = mu - a
    root = math.sqrt(b * b + 4.0 * a * r0)
    return (-b - root) / (2.0 * a), (-b + root) / (2.0 * a)


def perpetual_put_oracle(mu: float, sigma: float, r0: float, K: float, x, upper: Optional[float] = None) -> PutOracle:
    """Closed-form perpetual American put under GBM.

    Without `upper` the exercise boundary is K beta / (beta - 1), beta the negative root
    of the characteristic quadratic. With a finite `upper` > K the value is pinned to 0
    there (the truncated problem the grid actually solves): on (b, upper) the value is
    A x^beta + B x^beta2 and the boundary b solves the smooth-fit condition by brentq.
    """
    if not (sigma > 0 and K > 0 and r0 > max(mu, 0.0)):
        raise ValueError(f"perpetual put needs sigma > 0, K > 0 and r0 > max(mu, 0); got "
                         f"mu={mu}, sigma={sigma}, r0={r0}, K={K}")
    beta, beta2 = _put_roots(mu, sigma, r0)
    x = np.asarray(x, dtype=float)

    if upper is None or math.isinf(upper):
        boundary = K * beta / (beta - 1.0)
        value = np.where(x <= boundary, K - x, (K - boundary) * np.power(np.maximum(x, 1e-300) / boundary, beta))
        return PutOracle(value if value.ndim else float(value), boundary, beta)

    if not upper > K:
        raise ValueError(f"truncation point {upper} must exceed the strike {K}")
    spread = beta2 - beta

    def smooth_fit(b):
        q = (b / upper) ** spread
        return (K - b) * (beta - beta2 * q) + b * (1.0 - q)

    boundary = optimize.brentq(smooth_fit, K * 1e-9, K, xtol=1e-15, rtol=1e-14)
    inside = np.clip(x, boundary, upper)
    shape = np.power(inside / boundary, beta) * (1.0 - np.power(inside / upper, spread))
    value = np.where(x <= boundary, K - x, (K - boundary) * shape / (1.0 - (boundary / upper) ** spread))
    value = np.where(x >= upper, 0.0, value)
    return PutOracle(value if value.ndim else float(value), boundary, beta, upper)


def _allowance(field: ValueField, dt: float) -> float:
    return field.grid.dx + dt


def policy_value_check(spec, field: ValueField, points: Sequence[Point], n_paths: Optional[int] = None,
                       seed: Optional[int] = None, threads=1, case: str = '') -> List[CheckRow]:
    """MC value of the solver's own stopping rule against v at each point."""
    policy = extract_policy(field)
    rows = []
    for x, t, i in points:
        estimate = mc_estimate(spec, x, t, i, policy, n_paths=n_paths, seed=seed, threads=threads)
        expected = field.value_at(x, t, i)
        tolerance = Config.STAT_SIGMAS * estimate.stderr + _allowance(field, estimate.dt)
        passed = abs(estimate.mean - expected) <= tolerance
        rows.append(CheckRow(case or spec.name, 'mc-policy', _label(x, t, i), expected, estimate.mean, tolerance, passed))
    return rows


def perturbed_policy_check(spec, field: ValueField, boundary: FreeBoundary, points: Sequence[Point],
                           n_paths: Optional[int] = None, factor: float = Config.PERTURBATION,
                           seed: Optional[int] = None, threads=1, case: str = '') -> List[CheckRow]:
    """Threshold rules moved by +-factor must not beat v beyond the statistical allowance."""
    levels, side = boundary.thresholds(spec.k)
    if side is None or np.all(np.isnan(levels)):
        logger.info(f"{spec.name}: free boundary is not of threshold form; perturbation check skipped")
        return []
    rows = []
    for scale in (1.0 - factor, 1.0 + factor):
        rule = ThresholdRule(levels * scale, side)
        for x, t, i in points:
            estimate = mc_estimate(spec, x, t, i, rule, n_paths=n_paths, seed=seed, threads=threads)
            expected = field.value_at(x, t, i)
            tolerance = Config.STAT_SIGMAS * estimate.stderr + _allowance(field, estimate.dt)
            rows.append(CheckRow(case or spec.name, 'mc-perturbed', _label(x, t, i, scale=f"{scale:g}"),
                                 expected, estimate.mean, tolerance, estimate.mean - expected <= tolerance))
    return rows


def dpp_statistical_check(spec, field: ValueField, point: Point, delta: float, n_paths: Optional[int] = None,
                          seed: Optional[int] = None, threads=1, case: str = '') -> CheckRow:
    """MC of the one-step DPP functional at horizon delta under the solver's rule."""
    x, t, i = point
    estimate = mc_estimate(spec, x, t, i, extract_policy(field), n_paths=n_paths, horizon=delta, seed=seed,
                           threads=threads, terminal_value=field.terminal_value())
    expected = field.value_at(x, t, i)
    tolerance = Config.STAT_SIGMAS * estimate.stderr + _allowance(field, estimate.dt)
    return CheckRow(case or spec.name, 'dpp-mc', _label(x, t, i, delta=f"{delta:g}"), expected, estimate.mean,
                    tolerance, abs(estimate.mean - expected) <= tolerance)


def dpp_discrete_check(spec, field: ValueField, delta: Optional[float] = None, case: str = '') -> CheckRow:
    """One implicit continuation step plus projection must move v by O(delta) only."""
    stepped, distance = dpp_step(field, spec, delta)
    if field.is_homogeneous:
        delta = delta if delta is not None else spec.solver.upsilon / spec.solver.N
    else:
        delta = field.age_grid.dt
    x = field.grid.nodes
    scale = 1.0
    for i in range(spec.k):
        scale = max(scale,
                    float(np.max(np.abs(spec.payoff.running[i].evaluate(x=x)))),
                    float(np.max(np.abs(spec.payoff.discount[i].evaluate(x=x)))) * float(np.max(np.abs(field.values))))
    tolerance = delta * scale
    return CheckRow(case or spec.name, 'dpp-discrete', _label(delta=f"{delta:g}"), 0.0, distance, tolerance,
                    distance <= tolerance)


def _window_mask(field: ValueField, window: Optional[Tuple[float, float]]) -> np.ndarray:
    x = field.grid.nodes
    if window is None:
        return np.ones(x.size, dtype=bool)
    return (x >= window[0] - 1e-12) & (x <= window[1] + 1e-12)


def _put_oracle(spec, put: Dict[str, float], x) -> PutOracle:
    """Closed form of the problem as posed on the computational interval (upper end pinned)."""
    return perpetual_put_oracle(put['mu'], put['sigma'], put['r0'], put['K'], x, upper=spec.diffusion.interval[1])


def _sup_error(field: ValueField, oracle: PutOracle, mask=None) -> float:
    values = field.values[:, 0, 0] if mask is None else field.values[mask, 0, 0]
    return float(np.max(np.abs(values - oracle.value)))


def closed_form_check(spec, field: ValueField, boundary: FreeBoundary, put: Dict[str, float],
                      window: Optional[Tuple[float, float]], tol: float, boundary_rtol: float,
                      case: str = '') -> List[CheckRow]:
    """Distance to the closed-form put, and the exercise boundary against x* = K beta/(beta - 1).

    `closed-form` compares against the pinned problem on the whole grid, so it measures
    discretisation error only; `closed-form-perpetual` compares the window against the
    untruncated value and also carries the truncation effect.
    """
    name = case or spec.name
    x = field.grid.nodes
    error = _sup_error(field, _put_oracle(spec, put, x))
    rows = [CheckRow(name, 'closed-form', _label(M=field.grid.M), 0.0, error, tol, error <= tol)]

    mask = _window_mask(field, window)
    perpetual = perpetual_put_oracle(put['mu'], put['sigma'], put['r0'], put['K'], x[mask])
    error = _sup_error(field, perpetual, mask)
    span = 'all' if window is None else f"[{window[0]:g},{window[1]:g}]"
    rows.append(CheckRow(name, 'closed-form-perpetual', _label(M=field.grid.M, window=span), 0.0, error, tol,
                         error <= tol))

    levels, _ = boundary.thresholds(1)
    got = float(levels[0])
    rel = abs(got - perpetual.boundary) / perpetual.boundary if np.isfinite(got) else math.inf
    rows.append(CheckRow(name, 'free-boundary', _label(i=1), perpetual.boundary, got,
                         boundary_rtol * perpetual.boundary, rel <= boundary_rtol))
    return rows


def grid_convergence_ladder(spec, put: Dict[str, float], levels: Sequence[int], case: str = '',
                            fields: Optional[Dict[int, ValueField]] = None) -> List[CheckRow]:
    """Sup error against the pinned closed form at each M; each refinement must reduce it."""
    rows, previous = [], None
    fields = fields or {}
    lo, hi = spec.diffusion.interval
    span = f"[{lo:g},{hi:g}]"
    for M in levels:
        level_field = fields.get(M) or solve_homogeneous(spec.with_grid(M=M))[0]
        error = _sup_error(level_field, _put_oracle(spec, put, level_field.grid.nodes))
        label = _label(M=M, on=span)
        if previous is None:
            rows.append(CheckRow(case or spec.name, 'grid-ladder', label, math.nan, error, math.nan, True))
        else:
            rows.append(CheckRow(case or spec.name, 'grid-ladder', label, previous, error, previous, error < previous))
        previous = error
    return rows


def truncation_sensitivity(spec, field: ValueField, window: Optional[Tuple[float, float]] = None,
                           tol: float = Config.TRUNCATION_TOL, case: str = '') -> List[CheckRow]:
    """Double every artificial truncation width (same spacing) and compare on the window."""
    region = spec.diffusion.region
    lo, hi = spec.diffusion.interval
    if not (math.isinf(region[0]) or math.isinf(region[1])):
        return []
    width = hi - lo
    new_lo = lo - width if math.isinf(region[0]) else None
    new_hi = hi + width if math.isinf(region[1]) else None
    wider = spec.with_truncation(new_lo, new_hi)
    new_lo_eff, new_hi_eff = wider.diffusion.interval
    M = int(round(field.grid.M * (new_hi_eff - new_lo_eff) / width))
    wider = wider.with_grid(M=M)
    wide_field, _ = solve(wider)
    mask = _window_mask(field, window)
    x = field.grid.nodes[mask]
    change = 0.0
    for i in range(1, spec.k + 1):
        for ia, t in enumerate(field.age_nodes[:1]):
            mine = field.values[mask, ia, i - 1]
            theirs = np.array([wide_field.value_at(xx, t, i) for xx in x])
            change = max(change, float(np.max(np.abs(mine - theirs))))
    label = _label(trunc=f"[{new_lo_eff:g},{new_hi_eff:g}]")
    if change > tol:
        logger.warning(f"{spec.name}: doubling the truncation width moved v by {change:.3e}")
    return [CheckRow(case or spec.name, 'truncation', label, 0.0, change, tol, change <= tol)]


def upsilon_sensitivity(spec, field: ValueField, case: str = '') -> List[CheckRow]:
    """Report how far the age-zero slice moves when the age horizon doubles (same age step)."""
    if field.is_homogeneous:
        return []
    age_grid = field.age_grid
    doubled = AgeGrid.from_spec(spec, N=2 * age_grid.N, upsilon=2 * age_grid.upsilon)
    other = solve_truncated_inhomogeneous(spec, field.grid, doubled)
    change = float(np.max(np.abs(other.slice_at_age0() - field.slice_at_age0())))
    logger.info(f"{spec.name}: doubling upsilon to {doubled.upsilon:g} moved the age-zero slice by {change:.3e}")
    return [CheckRow(case or spec.name, 'upsilon', _label(upsilon=f"{doubled.upsilon:g}"), 0.0, change, math.nan, True)]


def field_audit(spec, field: ValueField, case: str = '') -> List[CheckRow]:
    """Complementarity residual, obstacle bound and boundary pinning of a solved field."""
    name = case or spec.name
    report = residual_check(field, spec)
    tol = spec.solver.residual_tol
    rows = [CheckRow(name, 'residual', _label(report.x, report.t, report.regime), 0.0, report.max_residual, tol,
                     report.max_residual <= tol),
            CheckRow(name, 'residual-scaled', 'row diagonal', 0.0, report.max_scaled, math.nan, True)]
    slack = float(np.min(field.gap))
    rows.append(CheckRow(name, 'obstacle', 'min(v+h)', 0.0, slack, 1e-12, slack >= -1e-12))
    ends = np.abs(field.gap[[0, -1], :, :])
    pinned = float(np.max(ends))
    rows.append(CheckRow(name, 'boundary', 'end nodes', 0.0, pinned, 0.0, pinned == 0.0))
    return rows


def smooth_fit_rows(spec, field: ValueField, boundary: FreeBoundary, case: str = '') -> List[CheckRow]:
    if not field.is_homogeneous:
        return []
    return [CheckRow(case or spec.name, 'smooth-fit', _label(row.x, row.t, row.regime), 0.0, row.jump,
                     row.tolerance, row.ok) for row in smooth_fit_report(field, boundary)]


def homogeneous_agreement(spec, case: str = '', tol: float = 1e-4, max_outer: int = 50,
                          field_i: Optional[ValueField] = None) -> List[CheckRow]:
    """Cross-solver oracle: with constant rates the age-dependent solve must not depend on age."""
    name = case or spec.name
    field_h, _ = solve_homogeneous(spec)
    field_i = field_i if field_i is not None else solve_truncated_inhomogeneous(spec)
    slice0 = field_i.slice_at_age0()
    disagreement = float(np.max(np.abs(field_h.slice_at_age0() - slice0)))
    # the forced stop at the age horizon is felt near it; compare the lower half of the age axis
    half = field_i.age_grid.N // 2 + 1
    variation = float(np.max(np.abs(field_i.values[:, :half, :] - slice0[:, None, :])))
    # contraction record up to tol_fp; polishing runs at rounding level
    history = field_i.history[:field_i.fp_iterations]
    monotone = all(b < a for a, b in zip(history, history[1:]))
    return [
        CheckRow(name, 'cross-solver', 't=0', 0.0, disagreement, tol, disagreement <= tol),
        CheckRow(name, 'age-variation', f"t<={field_i.age_nodes[half - 1]:.6g}", 0.0, variation, tol, variation <= tol),
        CheckRow(name, 'outer-iterations', '-', float(max_outer), float(field_i.fp_iterations), float(max_outer),
                 field_i.converged and field_i.fp_iterations <= max_outer),
        CheckRow(name, 'outer-monotone', '-', 1.0, float(monotone), 0.0, monotone),
    ]


def chain_law_check(spec, n: int, seed: int, case: str = '', alpha: float = 0.01) -> List[CheckRow]:
    """KS test of first sojourns from age 0 and binomial test of transition frequencies."""
    name = case or spec.name
    chain = RegimeChain(spec.chain, spec.mc.horizon)
    rows = []
    for j in range(1, spec.k + 1):
        draws = holding_time_sample(chain, j, 0.0, n, seed + j)
        finite = draws[np.isfinite(draws)]
        if finite.size < 2:
            continue
        result = stats.kstest(finite, ks_reference_cdf(chain, j, 0.0))
        rows.append(CheckRow(name, 'chain-ks', _label(i=j), alpha, float(result.pvalue), alpha,
                             result.pvalue >= alpha))
        if spec.k == 1:
            continue
        rng = path_rng(seed + j, 0, 2)
        targets = np.array([chain.sample_next_regime(j, s, open_uniform(rng)) for s in finite])
        for m in range(1, spec.k + 1):
            if m == j:
                continue
            expected = float(np.mean([spec.chain.trans_prob[(j, m)].evaluate(t=s) for s in finite]))
            observed = float(np.mean(targets == m))
            tolerance = Config.STAT_SIGMAS * math.sqrt(max(expected * (1 - expected), 0.0) / finite.size) + 1e-12
            rows.append(CheckRow(name, 'chain-transition', f"j={j};m={m}", expected, observed, tolerance,
                                 abs(observed - expected) <= tolerance))
    return rows


@dataclass(frozen=True)
class BenchmarkCase:
    """A shipped problem with the checks that apply to it.

    `note` records where every expected value comes from.
    """

    name: str
    filename: str
    oracle: str
    note: str
    must_reject: bool = False
    points: Tuple[Point, ...] = ()
    perturb_points: Tuple[Point, ...] = ()
    dpp_point: Optional[Point] = None
    dpp_delta: float = 0.1
    put: Optional[Dict[str, float]] = None
    window: Optional[Tuple[float, float]] = None
    ladder: Tuple[int, ...] = ()
    # second ladder on a shorter truncation: (upper end, levels)
    short_ladder: Optional[Tuple[float, Tuple[int, ...]]] = None
    constant: Optional[float] = None
    chain_draws: int = 0
    tolerances: Dict[str, float] = field(default_factory=dict)
    # overrides applied by a full-scale run
    full_scale: Dict[str, str] = field(default_factory=dict)

    def path(self, corpus_dir=None) -> Path:
        return Path(corpus_dir or Config.CORPUS_DIR) / self.filename


PUT = {'mu': 0.02, 'sigma': 0.3, 'r0': 0.05, 'K': 1.0}
FULL_SCALE_MC = {'mc.paths': '200000', 'mc.dt': '0.001'}

CORPUS: Tuple[BenchmarkCase, ...] = (
    BenchmarkCase(
        name='put', filename='put.prob', oracle='closed-form',
        note='closed form: beta from the characteristic quadratic, x* = K beta/(beta-1); MC under the solved rule',
        points=((0.3, 0.0, 1), (0.6, 0.0, 1), (0.8, 0.0, 1), (1.0, 0.0, 1), (1.5, 0.0, 1)),
        perturb_points=((1.0, 0.0, 1),), dpp_point=(1.0, 0.0, 1), dpp_delta=0.1,
        put=PUT, window=(0.01, 5.0), ladder=(3000, 6000, 12000),
        short_ladder=(5.0, (500, 1000, 2000)),
        full_scale=FULL_SCALE_MC,
        tolerances={'closed-form': 5e-3, 'free-boundary': 0.01, 'truncation': 5e-3},
    ),
    BenchmarkCase(
        name='const', filename='const.prob', oracle='pathwise-identity',
        note='pathwise identity: pi = c r and h = -c give J = c for every stopping time',
        points=((0.0, 0.0, 1), (0.5, 0.0, 2)), dpp_point=(0.0, 0.0, 1), constant=2.0,
        tolerances={'constant': 1e-9},
    ),
    BenchmarkCase(
        name='stop_all', filename='stop_all.prob', oracle='pathwise-identity',
        note='obstacle binds everywhere: negative running payoff, zero stopping cost',
        points=((0.5, 0.0, 1), (0.25, 0.0, 2)), dpp_point=(0.5, 0.0, 1), constant=0.0,
        tolerances={'constant': 1e-12},
    ),
    BenchmarkCase(
        name='two_regime_put', filename='two_regime_put.prob', oracle='mc-policy',
        note='no closed form: PDE value against MC under the PDE rule and under +-10% boundary rules',
        points=((0.4, 0.0, 1), (0.7, 0.0, 1), (1.0, 0.0, 1), (0.7, 0.0, 2), (1.0, 0.0, 2)),
        perturb_points=((1.0, 0.0, 1), (1.0, 0.0, 2)), dpp_point=(1.0, 0.0, 1), dpp_delta=0.1,
        window=(0.01, 2.0), tolerances={'truncation': 1e-2},
        full_scale=FULL_SCALE_MC,
    ),
    BenchmarkCase(
        name='agree', filename='agree.prob', oracle='cross-solver',
        note='cross-solver: constant rates make the age-dependent value age-independent',
        tolerances={'cross-solver': 1e-4},
    ),
    BenchmarkCase(
        name='aging', filename='aging.prob', oracle='chain-law',
        note='age-dependent hazard and weights: chain law against the analytic sojourn CDF, field audit',
        chain_draws=2000,
    ),
    BenchmarkCase(
        name='example1', filename='example1.prob', oracle='must-reject',
        note='zero discount: every constant solves the system, so the problem must be refused',
        must_reject=True,
    ),
    BenchmarkCase(
        name='bad_r', filename='bad_r.prob', oracle='must-reject',
        note='r(x) = x falls below its floor near 0', must_reject=True,
    ),
)


def find_case(name_or_path) -> Optional[BenchmarkCase]:
    stem = Path(str(name_or_path)).stem
    return next((case for case in CORPUS if case.name == stem), None)


def _load_check(case: BenchmarkCase, path: Path) -> List[CheckRow]:
    first, second = load_problem(path), load_problem(path)
    same = first.digest == second.digest and first.effective == second.effective
    return [CheckRow(case.name, 'load', path.name, 1.0, float(same), 0.0, same)]


def _reject_check(case: BenchmarkCase, path: Path) -> List[CheckRow]:
    try:
        load_problem(path)
    except DegenerateDiscountError as e:
        logger.info(f"{case.name}: rejected by the discount guard as expected ({len(e.violations)} violations)")
        return [CheckRow(case.name, 'must-reject', 'discount guard', 1.0, 1.0, 0.0, True)]
    except ProblemValidationError as e:
        logger.warning(f"{case.name}: rejected, but not by the discount guard: {e}")
        return [CheckRow(case.name, 'must-reject', 'validation', 1.0, 0.0, 0.0, False)]
    logger.error(f"{case.name}: must-reject problem was accepted")
    return [CheckRow(case.name, 'must-reject', 'accepted', 1.0, 0.0, 0.0, False)]


def case_spec(case: BenchmarkCase, corpus_dir=None, full_scale: bool = False):
    """Load the problem of `case`, with its full-scale Monte Carlo settings on request."""
    overrides = case.full_scale if full_scale else None
    return load_problem(case.path(corpus_dir), overrides)


def run_case(case: BenchmarkCase, corpus_dir=None, seed: Optional[int] = None, threads=1,
             spec=None, full_scale: bool = False) -> List[CheckRow]:
    """Run every check registered for `case`.

    Monte Carlo checks use the problem's `mc.*` settings; `full_scale` swaps in the
    case's acceptance-scale path count and step.
    """
    path = case.path(corpus_dir)
    if case.must_reject:
        return _reject_check(case, path)
    rows = _load_check(case, path)
    spec = spec or case_spec(case, corpus_dir, full_scale)
    if full_scale and case.full_scale:
        logger.info(f"{case.name}: full scale, {spec.mc.paths} paths at dt={spec.mc.dt:g}")
    seed = seed if seed is not None else spec.mc.seed
    logger.info(f"Verifying case '{case.name}' ({case.oracle})")

    if case.oracle == 'cross-solver':
        field_i = solve_truncated_inhomogeneous(spec)
        rows.extend(homogeneous_agreement(spec, case.name, case.tolerances.get('cross-solver', 1e-4), field_i=field_i))
        rows.extend(field_audit(spec, field_i, case.name))
        rows.extend(upsilon_sensitivity(spec, field_i, case.name))
        return rows

    value_field, boundary = solve(spec)
    rows.extend(field_audit(spec, value_field, case.name))
    rows.extend(smooth_fit_rows(spec, value_field, boundary, case.name))

    if case.constant is not None:
        tol = case.tolerances.get('constant', 1e-9)
        error = float(np.max(np.abs(value_field.values - case.constant)))
        rows.append(CheckRow(case.name, 'constant-value', 'all nodes', case.constant, case.constant + error, tol,
                             error <= tol))
        if case.constant == 0.0:
            all_stopped = bool(np.all(value_field.stop_flag))
            rows.append(CheckRow(case.name, 'stop-everywhere', 'all nodes', 1.0, float(all_stopped), 0.0, all_stopped))

    if case.put is not None:
        rows.extend(closed_form_check(spec, value_field, boundary, case.put, case.window,
                                      case.tolerances.get('closed-form', 5e-3),
                                      case.tolerances.get('free-boundary', 0.01), case.name))
        if case.ladder:
            rows.extend(grid_convergence_ladder(spec, case.put, case.ladder, case.name,
                                                {value_field.grid.M: value_field}))
        if case.short_ladder:
            short_hi, levels = case.short_ladder
            rows.extend(grid_convergence_ladder(spec.with_truncation(None, short_hi), case.put, levels, case.name))
    rows.extend(truncation_sensitivity(spec, value_field, case.window,
                                       case.tolerances.get('truncation', Config.TRUNCATION_TOL), case.name))
    rows.extend(upsilon_sensitivity(spec, value_field, case.name))

    if case.points:
        rows.extend(policy_value_check(spec, value_field, case.points, None, seed, threads, case.name))
    if case.perturb_points:
        rows.extend(perturbed_policy_check(spec, value_field, boundary, case.perturb_points, None,
                                           Config.PERTURBATION, seed, threads, case.name))
    if case.dpp_point is not None:
        rows.append(dpp_statistical_check(spec, value_field, case.dpp_point, case.dpp_delta, None,
                                          seed, threads, case.name))
        rows.append(dpp_discrete_check(spec, value_field, case.dpp_delta, case.name))
    if case.chain_draws:
        rows.extend(chain_law_check(spec, case.chain_draws, seed, case.name))
    return rows


def verify_problem(path, seed: Optional[int] = None, threads=1, overrides=None,
                   full_scale: bool = False) -> List[CheckRow]:
    """Checks for one problem file: its registered case if it has one, generic checks otherwise."""
    case = find_case(path)
    if case is not None and overrides:
        merged = {**case.full_scale, **overrides} if full_scale else overrides
        return run_case(case, Path(path).parent, seed, threads, spec=load_problem(path, merged))
    if case is not None:
        return run_case(case, Path(path).parent, seed, threads, full_scale=full_scale)
    spec = load_problem(path, overrides)
    seed = seed if seed is not None else spec.mc.seed
    generic = BenchmarkCase(name=spec.name, filename=Path(path).name, oracle='generic', note='field audit only')
    rows = _load_check(generic, Path(path))
    value_field, boundary = solve(spec)
    rows.extend(field_audit(spec, value_field, spec.name))
    rows.extend(smooth_fit_rows(spec, value_field, boundary, spec.name))
    lo, hi = spec.diffusion.interval
    # the pinned ends distort v near them; judge truncation on the inner half
    inner = (lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
    rows.extend(truncation_sensitivity(spec, value_field, inner, Config.TRUNCATION_TOL, spec.name))
    rows.extend(upsilon_sensitivity(spec, value_field, spec.name))
    midpoint = (0.5 * (lo + hi), 0.0, 1)
    rows.extend(policy_value_check(spec, value_field, [midpoint], None, seed, threads, spec.name))
    return rows


def run_corpus(corpus_dir=None, seed: Optional[int] = None, threads=1,
               names: Optional[Sequence[str]] = None, full_scale: bool = False) -> List[CheckRow]:
    """Run the registered corpus; cases run in parallel, each on its own seed stream."""
    cases = [case for case in CORPUS if names is None or case.name in names]
    workers = max(1, min(resolve_threads(threads), len(cases)))

    def work(case):
        try:
            return run_case(case, corpus_dir, seed, 1, full_scale=full_scale)
        except Exception as e:
            logger.error(f"Case '{case.name}' crashed: {e}")
            return [CheckRow(case.name, 'crash', type(e).__name__, 1.0, 0.0, 0.0, False)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, cases))
    else:
        results = [work(case) for case in cases]
    rows = [row for result in results for row in result]
    failed = sum(not row.passed for row in rows)
    logger.info(f"Corpus verification: {len(rows)} checks, {failed} failed")
    return rows
