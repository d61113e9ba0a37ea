import logging
from typing import List, Sequence, Tuple

import numpy as np

from config import Config
from expression import Expression, ExpressionError

logger = logging.getLogger(__name__)

Violation = Tuple[str, str]

CONTINUITY_JUMP = 1e3
ROW_SUM_TOL = 1e-12
AGE_SAMPLES = 101


class ProblemValidationError(ValueError):
    """Aggregated load-time report: every violated invariant with its key."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        lines = [f"  {key}: {message}" for key, message in self.violations]
        super().__init__("invalid problem definition:\n" + "\n".join(lines))


class DegenerateDiscountError(ProblemValidationError):
    pass


def sample_nodes(spec, refine: int = 4) -> np.ndarray:
    """Fine grid on the computational interval used for sampled invariant checks."""
    lo, hi = spec.diffusion.interval
    return np.linspace(lo, hi, refine * max(spec.solver.M, 3) + 1)


def sample_ages(spec) -> np.ndarray:
    span = max(spec.solver.upsilon, spec.mc.horizon)
    ages = np.linspace(0.0, span, AGE_SAMPLES)
    ages[0] = Config.AGE_FLOOR
    return ages


def _evaluate(expr: Expression, key: str, violations: List[Violation], **kwargs):
    try:
        values = np.atleast_1d(expr.evaluate(**kwargs))
    except ExpressionError as e:
        violations.append((key, f"cannot be evaluated: {e}"))
        return None
    if not np.all(np.isfinite(values)):
        violations.append((key, "evaluates to a non-finite value"))
        return None
    return values


def discount_violations(discount: Sequence[Expression], epsilon: Sequence[float],
                        nodes: np.ndarray) -> List[Violation]:
    """Check r(x,i) > eps_i at every sampled node."""
    violations: List[Violation] = []
    for i, (r, eps) in enumerate(zip(discount, epsilon), start=1):
        if not eps > 0:
            violations.append((f"eps.{i}", f"must be strictly positive, got {eps}"))
            continue
        values = _evaluate(r, f"r.{i}", violations, x=nodes)
        if values is None:
            continue
        bad = np.flatnonzero(values <= eps)
        if bad.size:
            n = bad[0]
            violations.append((
                f"r.{i}",
                f"discount guard: r({nodes[n]:.6g}) = {values[n]:.6g} does not exceed eps.{i} = {eps:.6g}; "
                "without a strictly positive discount floor the HJB system can admit "
                "many solutions (any constant may solve it), so the problem is rejected",
            ))
    return violations


def reject_degenerate_discount(spec, nodes: np.ndarray = None) -> None:
    """Raise DegenerateDiscountError if r fails its eps bound at a sampled node."""
    if nodes is None:
        nodes = sample_nodes(spec)
    violations = discount_violations(spec.payoff.discount, spec.payoff.epsilon_r, nodes)
    if violations:
        for key, message in violations:
            logger.warning(f"Rejected {key}: {message}")
        raise DegenerateDiscountError(violations)


def _continuity_violations(values: np.ndarray, key: str, nodes: np.ndarray) -> List[Violation]:
    jumps = np.abs(np.diff(values))
    scale = 1.0 + np.minimum(np.abs(values[:-1]), np.abs(values[1:]))
    bad = np.flatnonzero(jumps > CONTINUITY_JUMP * scale)
    if bad.size:
        n = bad[0]
        return [(key, f"looks discontinuous between x={nodes[n]:.6g} and x={nodes[n + 1]:.6g}")]
    return []


def diffusion_violations(spec, nodes: np.ndarray) -> List[Violation]:
    violations: List[Violation] = []
    diffusion = spec.diffusion
    a, b = diffusion.domain
    lo, hi = diffusion.region
    if not a < b:
        violations.append(("domain.a", f"domain must satisfy a < b, got ({a}, {b})"))
    if not lo < hi:
        violations.append(("region.lo", f"region must satisfy lo < hi, got ({lo}, {hi})"))
    if lo < a or hi > b:
        violations.append(("region.lo", "region must lie inside the closure of the domain"))
    for side, end, trunc in (("lo", lo, diffusion.truncation[0]), ("hi", hi, diffusion.truncation[1])):
        if np.isinf(end):
            if trunc is None or not np.isfinite(trunc):
                violations.append((f"trunc.{side}", f"required and finite when region.{side} is infinite"))
            elif not a <= trunc <= b:
                violations.append((f"trunc.{side}", "truncation point must lie inside the domain"))
    if violations:
        return violations
    for i in range(1, spec.k + 1):
        _evaluate(diffusion.drift[i - 1], f"alpha.{i}", violations, x=nodes)
        sigma = _evaluate(diffusion.vol[i - 1], f"sigma.{i}", violations, x=nodes)
        if sigma is not None and np.any(sigma < 0):
            n = int(np.flatnonzero(sigma < 0)[0])
            violations.append((f"sigma.{i}", f"negative volatility {sigma[n]:.6g} at x={nodes[n]:.6g}"))
    return violations


def payoff_violations(spec, nodes: np.ndarray) -> List[Violation]:
    violations: List[Violation] = []
    payoff = spec.payoff
    for i in range(1, spec.k + 1):
        for key, expr in ((f"pi.{i}", payoff.running[i - 1]),
                          (f"h.{i}", payoff.terminal_cost[i - 1]),
                          (f"r.{i}", payoff.discount[i - 1])):
            values = _evaluate(expr, key, violations, x=nodes)
            if values is not None:
                violations.extend(_continuity_violations(values, key, nodes))
    return violations


def chain_violations(spec, ages: np.ndarray) -> List[Violation]:
    violations: List[Violation] = []
    chain = spec.chain
    k = chain.k
    for j in range(1, k + 1):
        lam = _evaluate(chain.lam[j - 1], f"lambda.{j}", violations, t=ages)
        if lam is None:
            continue
        if np.any(lam < 0):
            violations.append((f"lambda.{j}", "hazard rate must be nonnegative"))
        if k == 1 and np.any(lam != 0):
            violations.append((f"lambda.{j}", "a single regime cannot switch; hazard must be 0"))
        if spec.mode == 'homogeneous':
            if not chain.lam[j - 1].is_constant:
                violations.append((f"lambda.{j}", "homogeneous mode requires a constant hazard"))
            elif k > 1 and not lam[0] > 0:
                violations.append((f"lambda.{j}", "homogeneous mode requires a strictly positive hazard"))
        if k == 1:
            continue
        total = np.zeros_like(ages)
        for m in range(1, k + 1):
            if m == j:
                continue
            key = f"p.{j}.{m}"
            weights = _evaluate(chain.trans_prob[(j, m)], key, violations, t=ages)
            if weights is None:
                total = None
                break
            if np.any((weights < 0) | (weights > 1)):
                violations.append((key, "transition weight must lie in [0, 1]"))
            if spec.mode == 'homogeneous' and not chain.trans_prob[(j, m)].is_constant:
                violations.append((key, "homogeneous mode requires constant transition weights"))
            total = total + weights
        if total is not None and np.any(np.abs(total - 1.0) > ROW_SUM_TOL):
            violations.append((f"p.{j}", f"transition weights out of regime {j} must sum to 1"))
    return violations


def validate_problem(spec) -> None:
    """Run every load-time invariant check and raise one aggregated report."""
    nodes = sample_nodes(spec)
    violations: List[Violation] = []

    settings = spec.solver
    if settings.M < 3:
        violations.append(("grid.M", "must be at least 3"))
    if settings.N < 1:
        violations.append(("grid.N", "must be at least 1"))
    if not settings.upsilon > 0:
        violations.append(("upsilon", "must be positive"))
    if not settings.tol > 0:
        violations.append(("solver.tol", "must be positive"))
    if not settings.tol_stop >= 0:
        violations.append(("solver.tol_stop", "must be non-negative"))
    if not spec.mc.dt > 0:
        violations.append(("mc.dt", "must be positive"))
    if not spec.mc.horizon > 0:
        violations.append(("mc.horizon", "must be positive"))
    if spec.mc.paths < 2:
        violations.append(("mc.paths", "must be at least 2"))

    diffusion_problems = diffusion_violations(spec, nodes)
    violations.extend(diffusion_problems)
    discount_problems = []
    if not diffusion_problems:
        violations.extend(payoff_violations(spec, nodes))
        discount_problems = discount_violations(spec.payoff.discount, spec.payoff.epsilon_r, nodes)
        violations.extend(discount_problems)
    violations.extend(chain_violations(spec, sample_ages(spec)))

    if violations:
        for key, message in violations:
            logger.error(f"Validation failed for {key}: {message}")
        if discount_problems:
            raise DegenerateDiscountError(violations)
        raise ProblemValidationError(violations)
