"""
Finite-difference solvers for the coupled HJB variational inequalities.

Row n of regime i encodes -(L v)_n with central second differences for diffusion,
first-order upwinding for drift (forward difference when alpha >= 0, backward
otherwise), the discount r on the diagonal and the switching rates λ_{i,j}(t) moved
into a coupling list. Every row is an M-matrix row, so the projected iteration is
monotone. Both ends of the computational interval are pinned to -h.

The homogeneous solver couples the k regimes at the same node. The inhomogeneous
solver sweeps backward in age from Υ (where v = -h) with an implicit age difference,
and handles the reset coupling λ_{i,j}(t)(v(x,0,j) - v(x,t,i)) by an outer fixed point
on the age-zero slice.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from chain import RegimeChain
from config import Config
from policy import FieldRule
from psor import ObstacleSystem, SorResult, projected_sor

logger = logging.getLogger(__name__)

# treats an unconstrained solve as an obstacle solve with an unreachable obstacle
_NO_OBSTACLE = -1e300


class MMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class Grid1D:
    nodes: np.ndarray
    dx: float
    true_boundary: Tuple[bool, bool]

    @property
    def M(self) -> int:
        return self.nodes.size - 1

    @classmethod
    def from_spec(cls, spec, M: Optional[int] = None) -> 'Grid1D':
        M = M if M is not None else spec.solver.M
        if M < 3:
            raise ValueError(f"grid needs M >= 3, got {M}")
        lo, hi = spec.diffusion.interval
        nodes = np.linspace(lo, hi, M + 1)
        return cls(nodes, (hi - lo) / M, spec.diffusion.true_boundary)


@dataclass(frozen=True)
class AgeGrid:
    nodes: np.ndarray
    dt: float

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def upsilon(self) -> float:
        return float(self.nodes[-1])

    @classmethod
    def from_spec(cls, spec, N: Optional[int] = None, upsilon: Optional[float] = None) -> 'AgeGrid':
        N = N if N is not None else spec.solver.N
        upsilon = upsilon if upsilon is not None else spec.solver.upsilon
        if N < 1 or not upsilon > 0:
            raise ValueError(f"age grid needs N >= 1 and upsilon > 0, got N={N}, upsilon={upsilon}")
        return cls(np.linspace(0.0, upsilon, N + 1), upsilon / N)


@dataclass
class ValueField:
    """Discrete value function.

    `values` and `minus_h` are shaped (M+1, n_ages, k): one age node for homogeneous
    fields. Regime index on the last axis is 0-based; labels in exports are 1-based.
    """

    grid: Grid1D
    age_grid: Optional[AgeGrid]
    values: np.ndarray
    minus_h: np.ndarray
    tol_stop: float
    residual: float = float('nan')
    converged: bool = True
    iterations: int = 0
    history: List[float] = field(default_factory=list)
    # outer iterations needed to reach tol_fp (age-dependent fields)
    fp_iterations: int = 0

    @property
    def k(self) -> int:
        return self.values.shape[2]

    @property
    def is_homogeneous(self) -> bool:
        return self.age_grid is None

    @property
    def gap(self) -> np.ndarray:
        """v + h."""
        return self.values - self.minus_h

    @property
    def stop_flag(self) -> np.ndarray:
        return self.values <= self.minus_h + self.tol_stop

    @property
    def age_nodes(self) -> np.ndarray:
        return np.zeros(1) if self.age_grid is None else self.age_grid.nodes

    def slice_at_age0(self) -> np.ndarray:
        """(M+1, k) values on the age-zero slice."""
        return self.values[:, 0, :]

    def value_at(self, x: float, t: float, regime: int) -> float:
        """Interpolated v(x, t, regime)."""
        rule = FieldRule(self.grid.nodes, self.values, None if self.is_homogeneous else self.age_grid.nodes)
        return float(rule.interpolate(x, t, regime))

    def terminal_value(self):
        """Vectorised v(x, age, regime) for Monte Carlo terminal functionals."""
        rule = FieldRule(self.grid.nodes, self.values, None if self.is_homogeneous else self.age_grid.nodes)
        return rule.interpolate


@dataclass(frozen=True)
class BoundaryPoint:
    regime: int
    x: float
    t: Optional[float]
    # 'below': stopping on the left of x, 'above': stopping on the right
    side: str


@dataclass
class FreeBoundary:
    points: List[BoundaryPoint]

    def for_regime(self, regime: int, t: Optional[float] = None) -> List[BoundaryPoint]:
        return [p for p in self.points if p.regime == regime and (t is None or p.t == t)]

    def thresholds(self, k: int, t: Optional[float] = None) -> Tuple[np.ndarray, Optional[str]]:
        """One level per regime when every regime has a single switch of the same side.

        Regimes without a switch get NaN. Returns (levels, side); side is None when the
        boundary is not of single-threshold form.
        """
        levels = np.full(k, np.nan)
        sides = set()
        for regime in range(1, k + 1):
            points = [p for p in self.for_regime(regime) if p.t == t or (t is None and p.t in (None, 0.0))]
            if len(points) > 1:
                return levels, None
            if points:
                levels[regime - 1] = points[0].x
                sides.add(points[0].side)
        if len(sides) != 1:
            return levels, None
        return levels, sides.pop()


@dataclass(frozen=True)
class Operator:
    """Stencil of -(L v) for one regime at one age.

    lower/diag/upper multiply v[n-1], v[n], v[n+1]; diag already includes sum_j λ_{i,j}(t).
    `coupling[j]` is λ_{i,j}(t), entering the row as -λ_{i,j} v(x_n, ., j). End rows are identity.
    """

    regime: int
    age: float
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    coupling: np.ndarray

    def apply(self, v_i: np.ndarray, v_coupled: np.ndarray) -> np.ndarray:
        """-(L v) at interior nodes; v_coupled is (k, M+1) values the jump terms reach."""
        out = self.lower[1:-1] * v_i[:-2] + self.diag[1:-1] * v_i[1:-1] + self.upper[1:-1] * v_i[2:]
        return out - self.coupling @ v_coupled[:, 1:-1]


@dataclass(frozen=True)
class _Coefficients:
    """Coefficient samples on the grid, each shaped (k, M+1)."""

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    running: np.ndarray
    minus_h: np.ndarray


def _coefficients(spec, grid: Grid1D) -> _Coefficients:
    x, dx = grid.nodes, grid.dx
    k = spec.k
    lower = np.zeros((k, x.size))
    diag = np.ones((k, x.size))
    upper = np.zeros((k, x.size))
    running = np.zeros((k, x.size))
    minus_h = np.zeros((k, x.size))
    for i in range(k):
        alpha = np.asarray(spec.diffusion.drift[i].evaluate(x=x), dtype=float)
        sigma = np.asarray(spec.diffusion.vol[i].evaluate(x=x), dtype=float)
        r = np.asarray(spec.payoff.discount[i].evaluate(x=x), dtype=float)
        if np.any(sigma < 0):
            n = int(np.flatnonzero(sigma < 0)[0])
            raise MMatrixError(f"regime {i + 1}: negative volatility at x={x[n]:.6g}")
        diffusion = 0.5 * sigma * sigma / (dx * dx)
        inner = slice(1, -1)
        lower[i, inner] = (-diffusion + np.minimum(alpha, 0.0) / dx)[inner]
        upper[i, inner] = (-diffusion - np.maximum(alpha, 0.0) / dx)[inner]
        diag[i, inner] = (2.0 * diffusion + np.abs(alpha) / dx + r)[inner]
        running[i] = spec.payoff.running[i].evaluate(x=x)
        minus_h[i] = -np.asarray(spec.payoff.terminal_cost[i].evaluate(x=x), dtype=float)
    return _Coefficients(lower, diag, upper, running, minus_h)


def _check_m_matrix(lower, diag, upper, rates, regime: int, grid: Grid1D):
    inner = slice(1, -1)
    if np.any(lower[inner] > 0) or np.any(upper[inner] > 0) or np.any(rates < 0):
        raise MMatrixError(f"regime {regime}: positive off-diagonal entry in the stencil")
    slack = diag[inner] - (np.abs(lower[inner]) + np.abs(upper[inner]) + rates.sum())
    if np.any(slack <= 0):
        n = int(np.flatnonzero(slack <= 0)[0]) + 1
        raise MMatrixError(f"regime {regime}: row at x={grid.nodes[n]:.6g} is not strictly diagonally dominant")


def assemble_operator(spec, grid: Grid1D, i: int, t: float = 0.0, _coeffs: Optional[_Coefficients] = None) -> Operator:
    """Stencil and coupling weights of -(L v) for regime i (1-based) at age t."""
    coeffs = _coeffs if _coeffs is not None else _coefficients(spec, grid)
    rates = RegimeChain(spec.chain).rate_matrix(t)[i - 1]
    lower, upper = coeffs.lower[i - 1].copy(), coeffs.upper[i - 1].copy()
    diag = coeffs.diag[i - 1].copy()
    diag[1:-1] += rates.sum()
    _check_m_matrix(lower, diag, upper, rates, i, grid)
    return Operator(i, t, lower, diag, upper, rates)


def _homogeneous_system(spec, grid: Grid1D, coeffs: _Coefficients) -> ObstacleSystem:
    k, n_nodes = spec.k, grid.nodes.size
    ops = [assemble_operator(spec, grid, i, 0.0, coeffs) for i in range(1, k + 1)]
    coupling = np.zeros((k, k, n_nodes))
    for i, op in enumerate(ops):
        coupling[i, :, 1:-1] = op.coupling[:, None]
    return ObstacleSystem(
        lower=-np.array([op.lower for op in ops]),
        diag=np.array([op.diag for op in ops]),
        upper=-np.array([op.upper for op in ops]),
        coupling=coupling,
        rhs=coeffs.running.copy(),
        obstacle=coeffs.minus_h.copy(),
    )


def _run_psor(system: ObstacleSystem, v: np.ndarray, spec, order: str) -> SorResult:
    settings = spec.solver
    # half of the audit bound; the age-dependent solver spends the rest on the reset term
    target = 0.5 * settings.residual_tol
    result = projected_sor(system, v, settings.tol, settings.iteration_cap(spec.k), settings.omega, order, target)
    if not result.converged and settings.omega is None and result.omega > 1.0:
        omega = 1.0 + 0.5 * (result.omega - 1.0)
        logger.warning(f"Retrying with omega={omega:.4f} (omega={result.omega:.4f} did not converge)")
        retry = projected_sor(system, v, settings.tol, settings.iteration_cap(spec.k), omega, order, target)
        return SorResult(result.iterations + retry.iterations, retry.change, retry.converged, omega, retry.residual)
    return result


def solve_homogeneous(spec, grid: Optional[Grid1D] = None, order: str = 'ascending') -> Tuple[ValueField, FreeBoundary]:
    """Solve the time-independent k-coupled obstacle problem by projected SOR."""
    grid = grid or Grid1D.from_spec(spec)
    coeffs = _coefficients(spec, grid)
    system = _homogeneous_system(spec, grid, coeffs)
    v = system.obstacle.copy()
    result = _run_psor(system, v, spec, order)

    field = ValueField(
        grid=grid,
        age_grid=None,
        values=v.T[:, None, :].copy(),
        minus_h=coeffs.minus_h.T[:, None, :].copy(),
        tol_stop=spec.solver.tol_stop,
        converged=result.converged,
        iterations=result.iterations,
    )
    field.residual = residual_check(field, spec).max_residual
    status = 'converged' if result.converged else 'did NOT converge'
    logger.info(f"Homogeneous solve {status}: M={grid.M}, k={spec.k}, sweeps={result.iterations}, "
                f"omega={result.omega:.4f}, residual={field.residual:.3e}")
    return field, free_boundary(field)


def solve_truncated_inhomogeneous(spec, grid: Optional[Grid1D] = None, age_grid: Optional[AgeGrid] = None,
                                  order: str = 'ascending') -> ValueField:
    """Solve the age-truncated system by backward age sweeps inside an outer fixed point."""
    grid = grid or Grid1D.from_spec(spec)
    age_grid = age_grid or AgeGrid.from_spec(spec)
    settings = spec.solver
    chain = RegimeChain(spec.chain)
    coeffs = _coefficients(spec, grid)
    k, n_nodes, N = spec.k, grid.nodes.size, age_grid.N
    inv_dt = 1.0 / age_grid.dt

    rates = [chain.rate_matrix(t) for t in age_grid.nodes]
    for n, t in enumerate(age_grid.nodes):
        for i in range(k):
            diag = coeffs.diag[i].copy()
            diag[1:-1] += rates[n][i].sum()
            _check_m_matrix(coeffs.lower[i], diag, coeffs.upper[i], rates[n][i], i + 1, grid)

    # values[n] is the (k, M+1) slice at age node n
    values = np.repeat(coeffs.minus_h[None, :, :], N + 1, axis=0)
    w = coeffs.minus_h.copy()
    max_rate = max(float(np.max(rate.sum(axis=1))) for rate in rates)
    history: List[float] = []
    damping, stalled = 1.0, 0
    total_sweeps, converged = 0, False
    reached: Optional[int] = None
    no_coupling = np.zeros((k, k, n_nodes))

    for outer in range(1, settings.max_outer + 1):
        values[N] = coeffs.minus_h
        for n in range(N - 1, -1, -1):
            reset = rates[n]
            diag = coeffs.diag.copy()
            diag[:, 1:-1] += inv_dt + reset.sum(axis=1)[:, None]
            rhs = coeffs.running + inv_dt * values[n + 1] + reset @ w
            system = ObstacleSystem(-coeffs.lower, diag, -coeffs.upper, no_coupling, rhs, coeffs.minus_h)
            # warm start: previous outer iterate at this level (or the level above on the first pass)
            v = values[n].copy() if outer > 1 else values[n + 1].copy()
            result = _run_psor(system, v, spec, order)
            total_sweeps += result.iterations
            values[n] = v

        distance = float(np.max(np.abs(values[0] - w)))
        history.append(distance)
        logger.debug(f"Outer iteration {outer}: slice distance {distance:.3e} (damping {damping})")
        if reached is None and distance < settings.tol_fp:
            reached = outer
        if reached is not None:
            # the reset term read w while the field's own slice is values[0]: keep going
            # until that mismatch fits in the residual bound
            mismatch = max_rate * distance
            if mismatch <= 0.5 * settings.residual_tol or outer - reached >= Config.POLISH_ITERATIONS:
                if mismatch > 0.5 * settings.residual_tol:
                    logger.warning(f"Reset mismatch {mismatch:.3e} after {outer - reached} polishing iterations")
                break
        stalled = stalled + 1 if len(history) > 1 and distance >= history[-2] else 0
        if damping == 1.0 and stalled >= Config.DAMPING_PATIENCE:
            damping = Config.DAMPING
            logger.warning(f"Slice distance not contracting for {stalled} iterations; damping with {damping}")
        w = w + damping * (values[0] - w)

    if reached is not None:
        converged = True
    else:
        last = ', '.join(f"{d:.3e}" for d in history[-2:])
        logger.error(f"Outer fixed point did not converge in {settings.max_outer} iterations (last distances: {last})")

    field = ValueField(
        grid=grid,
        age_grid=age_grid,
        values=np.transpose(values, (2, 0, 1)).copy(),
        minus_h=np.repeat(coeffs.minus_h.T[:, None, :], N + 1, axis=1),
        tol_stop=settings.tol_stop,
        converged=converged,
        iterations=total_sweeps,
        history=history,
        fp_iterations=reached if reached is not None else len(history),
    )
    field.residual = residual_check(field, spec).max_residual
    logger.info(f"Inhomogeneous solve {'converged' if converged else 'did NOT converge'}: M={grid.M}, N={N}, "
                f"outer={len(history)}, residual={field.residual:.3e}")
    return field


def solve(spec, grid: Optional[Grid1D] = None, order: str = 'ascending') -> Tuple[ValueField, FreeBoundary]:
    """Dispatch on the problem's mode."""
    if spec.mode == 'homogeneous':
        return solve_homogeneous(spec, grid, order)
    field = solve_truncated_inhomogeneous(spec, grid, order=order)
    return field, free_boundary(field)


@dataclass(frozen=True)
class ResidualReport:
    max_residual: float
    x: float
    t: Optional[float]
    regime: int
    pointwise: np.ndarray
    # same residual with the PDE part divided by the row diagonal
    max_scaled: float = float('nan')


def residual_check(field: ValueField, spec, grid: Optional[Grid1D] = None,
                   age_grid: Optional[AgeGrid] = None) -> ResidualReport:
    """Max of |min(-(L v) - Π, v + h)| over interior nodes, recomputed from the coefficients.

    In the age-dependent case the reset term uses the field's own age-zero slice; the last
    age node is the pinned terminal layer and carries no residual.
    """
    grid = grid or field.grid
    age_grid = age_grid if age_grid is not None else field.age_grid
    x, dx = grid.nodes, grid.dx
    k = field.k
    v = field.values
    n_ages = v.shape[1]
    chain = RegimeChain(spec.chain)
    pointwise = np.zeros_like(v)
    scaled = np.zeros_like(v)

    for i in range(k):
        alpha = np.asarray(spec.diffusion.drift[i].evaluate(x=x), dtype=float)[1:-1]
        sigma = np.asarray(spec.diffusion.vol[i].evaluate(x=x), dtype=float)[1:-1]
        r = np.asarray(spec.payoff.discount[i].evaluate(x=x), dtype=float)[1:-1]
        pi = np.asarray(spec.payoff.running[i].evaluate(x=x), dtype=float)[1:-1]
        h = np.asarray(spec.payoff.terminal_cost[i].evaluate(x=x), dtype=float)[1:-1]
        half_var = 0.5 * sigma ** 2
        ages = range(n_ages - 1) if age_grid is not None else range(1)
        for n in ages:
            t = 0.0 if age_grid is None else age_grid.nodes[n]
            vi = v[:, n, i]
            centre = vi[1:-1]
            second = (vi[2:] - 2.0 * centre + vi[:-2]) / dx ** 2
            forward = (vi[2:] - centre) / dx
            backward = (centre - vi[:-2]) / dx
            first = np.where(alpha >= 0, forward, backward)
            generator = half_var * second + alpha * first - r * centre
            scale = r + 2.0 * half_var / dx ** 2 + np.abs(alpha) / dx
            targets = v[1:-1, 0, :]
            if age_grid is not None:
                generator = generator + (v[1:-1, n + 1, i] - centre) / age_grid.dt
                scale = scale + 1.0 / age_grid.dt
            for j in range(k):
                if j != i:
                    rate = chain.transition_rate(i + 1, j + 1, t)
                    generator = generator + rate * (targets[:, j] - centre)
                    scale = scale + rate
            pde = -generator - pi
            pointwise[1:-1, n, i] = np.minimum(pde, centre + h)
            scaled[1:-1, n, i] = np.minimum(pde / scale, centre + h)

    magnitude = np.abs(pointwise)
    flat = int(np.argmax(magnitude))
    ix, ia, ir = np.unravel_index(flat, magnitude.shape)
    t_at = None if age_grid is None else float(age_grid.nodes[ia])
    return ResidualReport(float(magnitude.flat[flat]), float(x[ix]), t_at, int(ir) + 1, pointwise,
                          float(np.max(np.abs(scaled))))


def extract_policy(field: ValueField) -> FieldRule:
    """Feedback rule: stop iff interpolated v + h <= tol_stop."""
    ages = None if field.is_homogeneous else field.age_grid.nodes
    return FieldRule(field.grid.nodes, field.gap, ages, field.tol_stop)


def free_boundary(field: ValueField) -> FreeBoundary:
    """Stop/continue switches between interior nodes, located where interpolated v + h = tol_stop."""
    x = field.grid.nodes
    gap = field.gap
    stop = field.stop_flag
    points: List[BoundaryPoint] = []
    for ia, t in enumerate(field.age_nodes):
        if not field.is_homogeneous and ia == field.age_nodes.size - 1:
            continue
        t_label = None if field.is_homogeneous else float(t)
        for i in range(field.k):
            for n in range(1, x.size - 2):
                a, b = stop[n, ia, i], stop[n + 1, ia, i]
                if a == b:
                    continue
                ga, gb = gap[n, ia, i], gap[n + 1, ia, i]
                weight = (field.tol_stop - ga) / (gb - ga) if gb != ga else 0.5
                crossing = x[n] + min(max(weight, 0.0), 1.0) * (x[n + 1] - x[n])
                points.append(BoundaryPoint(i + 1, float(crossing), t_label, 'below' if a else 'above'))
    return FreeBoundary(points)


def dpp_step(field: ValueField, spec, delta: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """One implicit continuation step of length delta followed by projection onto v >= -h.

    Homogeneous fields: solve c/δ - L c = Π + v/δ, return max(-h, c).
    Age-dependent fields: δ is the age step; every level is recomputed from the level
    above without projection, then projected. Returns (stepped values, sup distance to v).
    """
    grid = field.grid
    coeffs = _coefficients(spec, grid)
    chain = RegimeChain(spec.chain)
    k = spec.k
    no_coupling = np.zeros((k, k, grid.nodes.size))
    cap = spec.solver.iteration_cap(k)
    # end nodes stay pinned to -h
    no_obstacle = np.full_like(coeffs.minus_h, _NO_OBSTACLE)
    no_obstacle[:, 0], no_obstacle[:, -1] = coeffs.minus_h[:, 0], coeffs.minus_h[:, -1]

    if field.is_homogeneous:
        delta = delta if delta is not None else spec.solver.upsilon / spec.solver.N
        system = _homogeneous_system(spec, grid, coeffs)
        v_now = field.values[:, 0, :].T
        system.diag[:, 1:-1] += 1.0 / delta
        system.rhs = coeffs.running + v_now / delta
        system.obstacle = no_obstacle
        c = v_now.copy()
        projected_sor(system, c, spec.solver.tol, cap, None)
        stepped = np.maximum(c, coeffs.minus_h).T[:, None, :]
    else:
        age_grid = field.age_grid
        delta = age_grid.dt
        values = np.transpose(field.values, (1, 2, 0))
        w = values[0]
        stepped_levels = values.copy()
        for n in range(age_grid.N - 1, -1, -1):
            reset = chain.rate_matrix(age_grid.nodes[n])
            diag = coeffs.diag.copy()
            diag[:, 1:-1] += 1.0 / delta + reset.sum(axis=1)[:, None]
            rhs = coeffs.running + values[n + 1] / delta + reset @ w
            system = ObstacleSystem(-coeffs.lower, diag, -coeffs.upper, no_coupling, rhs, no_obstacle)
            c = values[n].copy()
            projected_sor(system, c, spec.solver.tol, cap, None)
            stepped_levels[n] = np.maximum(c, coeffs.minus_h)
        stepped = np.transpose(stepped_levels, (2, 0, 1))

    distance = float(np.max(np.abs(stepped - field.values)))
    logger.debug(f"DPP step (delta={delta:.4g}) moved the field by {distance:.3e}")
    return stepped, distance


@dataclass(frozen=True)
class SmoothFitRow:
    regime: int
    x: float
    t: Optional[float]
    jump: float
    tolerance: float
    ok: bool


def smooth_fit_report(field: ValueField, boundary: Optional[FreeBoundary] = None,
                      factor: float = 10.0) -> List[SmoothFitRow]:
    """Derivative jump v'(x+) - v'(x-) across each free-boundary point.

    The singular part of v'' may only be a nonpositive measure on the stopping set, so a
    positive jump larger than O(dx) is flagged.
    """
    boundary = boundary or free_boundary(field)
    x, dx = field.grid.nodes, field.grid.dx
    rows = []
    for point in boundary.points:
        ia = 0 if point.t is None else int(np.argmin(np.abs(field.age_nodes - point.t)))
        v = field.values[:, ia, point.regime - 1]
        n = int(np.clip(np.searchsorted(x, point.x) - 1, 1, x.size - 3))
        left = (v[n] - v[n - 1]) / dx
        right = (v[n + 2] - v[n + 1]) / dx
        jump = right - left
        tolerance = factor * dx * (1.0 + abs(left) + abs(right))
        rows.append(SmoothFitRow(point.regime, point.x, point.t, float(jump), float(tolerance), bool(jump <= tolerance)))
    return rows
