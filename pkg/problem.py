"""
Problem definitions.

A problem file is UTF-8, line oriented: `#` starts a comment, every other non-blank
line is `key = value`. Regime-indexed keys carry 1-based suffixes (`alpha.1`,
`p.1.2`). See `load_problem` for the full key list.
"""

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from config import Config
from expression import Expression, ExpressionError, parse_expression
from guards import ProblemValidationError, Violation, validate_problem

logger = logging.getLogger(__name__)

MODES = ('homogeneous', 'inhomogeneous')

SCALAR_KEYS = {
    'name', 'mode', 'k', 'domain.a', 'domain.b', 'region.lo', 'region.hi', 'trunc.lo', 'trunc.hi',
    'grid.M', 'grid.N', 'upsilon', 'mc.dt', 'mc.horizon', 'mc.paths', 'mc.seed',
    'solver.tol', 'solver.tol_stop', 'solver.max_iter', 'solver.tol_fp', 'solver.max_outer', 'solver.omega',
}
REGIME_KEYS = ('alpha', 'sigma', 'pi', 'h', 'r', 'eps', 'lambda')


@dataclass(frozen=True)
class RegimeChainSpec:
    k: int
    lam: Tuple[Expression, ...]
    trans_prob: Dict[Tuple[int, int], Expression] = field(hash=False)

    @property
    def is_homogeneous(self) -> bool:
        return all(e.is_constant for e in self.lam) and all(e.is_constant for e in self.trans_prob.values())

    def hazard(self, j: int, t):
        return self.lam[j - 1].evaluate(t=t)

    def weight(self, j: int, m: int, s):
        if j == m:
            return 0.0 if np.ndim(s) == 0 else np.zeros(np.shape(s))
        return self.trans_prob[(j, m)].evaluate(t=s)


@dataclass(frozen=True)
class DiffusionSpec:
    domain: Tuple[float, float]
    region: Tuple[float, float]
    drift: Tuple[Expression, ...]
    vol: Tuple[Expression, ...]
    truncation: Tuple[Optional[float], Optional[float]] = (None, None)

    @property
    def interval(self) -> Tuple[float, float]:
        """Computational interval: the region, with infinite ends replaced by truncation points."""
        lo, hi = self.region
        if math.isinf(lo) and self.truncation[0] is not None:
            lo = self.truncation[0]
        if math.isinf(hi) and self.truncation[1] is not None:
            hi = self.truncation[1]
        return lo, hi

    @property
    def true_boundary(self) -> Tuple[bool, bool]:
        """Whether each end of the computational interval is a point of the boundary of I."""
        return (not math.isinf(self.region[0]), not math.isinf(self.region[1]))


@dataclass(frozen=True)
class PayoffSpec:
    running: Tuple[Expression, ...]
    terminal_cost: Tuple[Expression, ...]
    discount: Tuple[Expression, ...]
    epsilon_r: Tuple[float, ...]

    def reward(self, x, i: int):
        """Stopping reward -h(x, i)."""
        return -self.terminal_cost[i - 1].evaluate(x=x)

    @property
    def epsilon(self) -> float:
        return min(self.epsilon_r)


@dataclass(frozen=True)
class SolverSettings:
    M: int
    N: int
    upsilon: float
    tol: float = Config.TOL_SOLVE
    max_iter: Optional[int] = None
    tol_fp: float = Config.TOL_FP
    max_outer: int = Config.MAX_OUTER
    omega: Optional[float] = None
    tol_stop: float = Config.TOL_STOP

    def iteration_cap(self, k: int) -> int:
        return self.max_iter if self.max_iter is not None else 200 * self.M * k

    @property
    def residual_tol(self) -> float:
        """Bound on the unscaled complementarity residual of a solved field."""
        return 10 * self.tol


@dataclass(frozen=True)
class MonteCarloSettings:
    dt: float
    horizon: float
    paths: int
    seed: int


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    mode: str
    chain: RegimeChainSpec
    diffusion: DiffusionSpec
    payoff: PayoffSpec
    solver: SolverSettings
    mc: MonteCarloSettings
    text: str = field(default='', repr=False, compare=False)
    effective: Dict[str, str] = field(default_factory=dict, repr=False, compare=False, hash=False)

    @property
    def k(self) -> int:
        return self.chain.k

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode('utf-8')).hexdigest()

    def with_grid(self, M: Optional[int] = None, N: Optional[int] = None,
                  upsilon: Optional[float] = None) -> 'ProblemSpec':
        """Copy with a different discretisation (refinement ladders, sensitivity runs)."""
        solver = replace(
            self.solver,
            M=M if M is not None else self.solver.M,
            N=N if N is not None else self.solver.N,
            upsilon=upsilon if upsilon is not None else self.solver.upsilon,
            max_iter=None if M is not None else self.solver.max_iter,
        )
        return replace(self, solver=solver)

    def with_truncation(self, lo: Optional[float], hi: Optional[float]) -> 'ProblemSpec':
        return replace(self, diffusion=replace(self.diffusion, truncation=(lo, hi)))

    def with_mc(self, **changes) -> 'ProblemSpec':
        return replace(self, mc=replace(self.mc, **changes))


def parse_problem_text(text: str) -> Tuple[Dict[str, str], List[Violation]]:
    """Split problem text into a key -> raw value mapping."""
    entries: Dict[str, str] = {}
    errors: List[Violation] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            errors.append((f"line {line_no}", f"expected 'key = value', got {raw.strip()!r}"))
            continue
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            errors.append((f"line {line_no}", "missing key"))
        elif key in entries:
            errors.append((key, f"duplicate key on line {line_no}"))
        else:
            entries[key] = value
    return entries, errors


class _Reader:
    """Typed access to raw entries that records every problem instead of stopping at the first."""

    def __init__(self, entries: Mapping[str, str]):
        self.entries = entries
        self.errors: List[Violation] = []
        self.used = set()

    def raw(self, key: str) -> Optional[str]:
        self.used.add(key)
        return self.entries.get(key)

    def number(self, key: str, default: Optional[float] = None, required: bool = False) -> Optional[float]:
        value = self.raw(key)
        if value is None:
            if required:
                self.errors.append((key, "required key is missing"))
            return default
        try:
            number = float(value)
        except ValueError:
            self.errors.append((key, f"not a number: {value!r}"))
            return default
        if math.isnan(number):
            self.errors.append((key, "NaN is not allowed"))
            return default
        return number

    def integer(self, key: str, default: Optional[int] = None, required: bool = False) -> Optional[int]:
        value = self.raw(key)
        if value is None:
            if required:
                self.errors.append((key, "required key is missing"))
            return default
        try:
            return int(value)
        except ValueError:
            self.errors.append((key, f"not an integer: {value!r}"))
            return default

    def expression(self, key: str, allowed: frozenset, default: Optional[str] = None) -> Optional[Expression]:
        value = self.raw(key)
        if value is None:
            if default is None:
                self.errors.append((key, "required key is missing"))
                return None
            value = default
        try:
            expr = parse_expression(value)
        except ExpressionError as e:
            self.errors.append((key, str(e)))
            return None
        extra = expr.variables - allowed
        if extra:
            names = ', '.join(sorted(extra))
            self.errors.append((key, f"may only depend on {', '.join(sorted(allowed)) or 'constants'}; found {names}"))
            return None
        return expr


def _read_source(source: Union[str, Path]) -> Tuple[str, str]:
    if isinstance(source, Path) or ('\n' not in source and '=' not in source and os.path.exists(source)):
        path = Path(source)
        return path.read_text(encoding='utf-8'), path.stem
    return str(source), 'inline'


def load_problem(source: Union[str, Path], overrides: Optional[Mapping[str, str]] = None) -> ProblemSpec:
    """Parse, default and validate a problem file (path) or problem text.

    Required keys: k, domain.a, domain.b, region.lo, region.hi, grid.M and, per regime i,
    alpha.i, sigma.i, pi.i, h.i, r.i, eps.i, lambda.i; per pair i != j, p.i.j.
    Optional: name, mode, trunc.lo, trunc.hi, grid.N, upsilon, mc.dt, mc.horizon,
    mc.paths, mc.seed, solver.tol, solver.tol_stop, solver.max_iter, solver.tol_fp,
    solver.max_outer, solver.omega. `overrides` replace file keys (command-line flags win).
    """
    text, stem = _read_source(source)
    entries, errors = parse_problem_text(text)
    for key, value in (overrides or {}).items():
        entries[key] = str(value)
    reader = _Reader(entries)
    reader.errors.extend(errors)

    name = reader.raw('name') or stem
    k = reader.integer('k', required=True)
    if k is None or k < 1:
        if k is not None:
            reader.errors.append(('k', "must be a positive integer"))
        raise ProblemValidationError(reader.errors)

    x_only, t_only = frozenset({'x'}), frozenset({'t'})
    per_regime = {key: [] for key in REGIME_KEYS}
    for i in range(1, k + 1):
        for key in ('alpha', 'sigma', 'pi', 'h', 'r'):
            per_regime[key].append(reader.expression(f"{key}.{i}", x_only))
        per_regime['lambda'].append(reader.expression(f"lambda.{i}", t_only, default='0' if k == 1 else None))
        per_regime['eps'].append(reader.number(f"eps.{i}", required=True))

    trans_prob: Dict[Tuple[int, int], Expression] = {}
    for j in range(1, k + 1):
        self_key = f"p.{j}.{j}"
        if reader.raw(self_key) is not None:
            expr = reader.expression(self_key, t_only)
            if expr is None or not (expr.is_constant and expr.constant_value() == 0.0):
                reader.errors.append((self_key, "self-transition forbidden (p.j.j must be 0)"))
        for m in range(1, k + 1):
            if m != j:
                expr = reader.expression(f"p.{j}.{m}", t_only)
                if expr is not None:
                    trans_prob[(j, m)] = expr

    domain = (reader.number('domain.a', required=True), reader.number('domain.b', required=True))
    region = (reader.number('region.lo', required=True), reader.number('region.hi', required=True))
    truncation = (reader.number('trunc.lo'), reader.number('trunc.hi'))
    M = reader.integer('grid.M', required=True)

    chain_exprs = per_regime['lambda'] + list(trans_prob.values())
    default_mode = 'homogeneous' if all(e is not None and e.is_constant for e in chain_exprs) else 'inhomogeneous'
    mode = reader.raw('mode') or default_mode
    if mode not in MODES:
        reader.errors.append(('mode', f"must be one of {', '.join(MODES)}, got {mode!r}"))

    eps_values = [e for e in per_regime['eps'] if e is not None]
    eps_floor = min(eps_values) if eps_values and min(eps_values) > 0 else None
    default_upsilon = -math.log(Config.UPSILON_TAIL) / eps_floor if eps_floor else 1.0
    if Config.MC_HORIZON is not None:
        default_horizon = float(Config.MC_HORIZON)
    else:
        default_horizon = -math.log(Config.CENSOR_TAIL) / eps_floor if eps_floor else 1.0

    tol = reader.number('solver.tol', default=Config.TOL_SOLVE)
    # the stop tolerance keeps its ratio to the solve tolerance unless set explicitly
    stop_default = Config.TOL_STOP * (tol / Config.TOL_SOLVE if tol else 1.0)
    solver = SolverSettings(
        M=M if M is not None else 0,
        N=reader.integer('grid.N', default=Config.GRID_N),
        upsilon=reader.number('upsilon', default=default_upsilon),
        tol=tol,
        max_iter=reader.integer('solver.max_iter'),
        tol_fp=reader.number('solver.tol_fp', default=Config.TOL_FP),
        max_outer=reader.integer('solver.max_outer', default=Config.MAX_OUTER),
        omega=_omega(reader),
        tol_stop=reader.number('solver.tol_stop', default=stop_default),
    )
    mc = MonteCarloSettings(
        dt=reader.number('mc.dt', default=Config.MC_DT),
        horizon=reader.number('mc.horizon', default=default_horizon),
        paths=reader.integer('mc.paths', default=Config.MC_PATHS),
        seed=reader.integer('mc.seed', default=Config.MC_SEED),
    )

    known = SCALAR_KEYS | {f"{key}.{i}" for key in REGIME_KEYS for i in range(1, k + 1)}
    known |= {f"p.{j}.{m}" for j in range(1, k + 1) for m in range(1, k + 1)}
    for key in entries:
        if key not in known:
            reader.errors.append((key, "unknown key"))

    if reader.errors:
        for key, message in reader.errors:
            logger.error(f"Problem file error in {key}: {message}")
        raise ProblemValidationError(reader.errors)

    spec = ProblemSpec(
        name=name,
        mode=mode,
        chain=RegimeChainSpec(k=k, lam=tuple(per_regime['lambda']), trans_prob=trans_prob),
        diffusion=DiffusionSpec(domain=domain, region=region,
                                drift=tuple(per_regime['alpha']), vol=tuple(per_regime['sigma']),
                                truncation=truncation),
        payoff=PayoffSpec(running=tuple(per_regime['pi']), terminal_cost=tuple(per_regime['h']),
                          discount=tuple(per_regime['r']), epsilon_r=tuple(per_regime['eps'])),
        solver=solver,
        mc=mc,
        text=text,
        effective=_effective(entries, solver, mc, mode),
    )
    validate_problem(spec)
    logger.info(f"Loaded problem '{spec.name}' (k={k}, mode={mode}, M={solver.M})")
    return spec


def _omega(reader: _Reader) -> Optional[float]:
    value = reader.raw('solver.omega') or (None if Config.SOR_OMEGA == 'auto' else Config.SOR_OMEGA)
    if value is None or value == 'auto':
        return None
    try:
        omega = float(value)
    except ValueError:
        reader.errors.append(('solver.omega', f"not a number: {value!r}"))
        return None
    if not 0 < omega < 2:
        reader.errors.append(('solver.omega', "relaxation factor must lie in (0, 2)"))
    return omega


def _effective(entries: Mapping[str, str], solver: SolverSettings, mc: MonteCarloSettings,
               mode: str) -> Dict[str, str]:
    """Every parameter after defaulting, as recorded in run manifests."""
    effective = dict(entries)
    effective.update({
        'mode': mode,
        'grid.M': str(solver.M),
        'grid.N': str(solver.N),
        'upsilon': repr(solver.upsilon),
        'solver.tol': repr(solver.tol),
        'solver.tol_stop': repr(solver.tol_stop),
        'solver.tol_fp': repr(solver.tol_fp),
        'solver.max_outer': str(solver.max_outer),
        'solver.omega': 'auto' if solver.omega is None else repr(solver.omega),
        'mc.dt': repr(mc.dt),
        'mc.horizon': repr(mc.horizon),
        'mc.paths': str(mc.paths),
        'mc.seed': str(mc.seed),
    })
    return dict(sorted(effective.items()))
