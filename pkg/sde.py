"""
Switching-diffusion simulation and Monte Carlo payoff estimation.

Euler–Maruyama between chain jumps, with jump times, policy mesh times and the horizon
inserted as exact mesh points. The discount integral and the running payoff use the
trapezoidal rule on the same mesh, each step evaluated in the regime that holds on it.
Leaving the computational interval is a forced stop at the linearly interpolated
crossing point.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import psutil

from chain import RegimeChain, path_rng
from config import Config
from policy import StoppingRule

logger = logging.getLogger(__name__)

TerminalValue = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

# relative slack under which a step is snapped onto the next breakpoint
_SNAP = 1e-9


@dataclass(frozen=True)
class DiffusionPath:
    mesh: np.ndarray
    x: np.ndarray
    age: np.ndarray
    regime: np.ndarray
    rho: np.ndarray
    exit_index: Optional[int]

    def __len__(self):
        return self.mesh.size


@dataclass(frozen=True)
class PathPayoff:
    value: float
    stop_index: int
    censored: bool


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_paths: int
    seed: int
    censored_fraction: float = 0.0
    dt: float = float('nan')
    horizon: float = float('nan')

    def as_row(self) -> dict:
        return {
            'mean': self.mean,
            'stderr': self.stderr,
            'n_paths': self.n_paths,
            'seed': self.seed,
            'censored_fraction': self.censored_fraction,
            'dt': self.dt,
            'horizon': self.horizon,
        }


def _per_regime(exprs, x: np.ndarray, regime: np.ndarray) -> np.ndarray:
    """Evaluate expression exprs[regime] at x, elementwise (regime 0-based)."""
    if len(exprs) == 1:
        return np.asarray(exprs[0].evaluate(x=x), dtype=float)
    out = np.empty_like(x, dtype=float)
    for r, expr in enumerate(exprs):
        mask = regime == r
        if mask.any():
            out[mask] = expr.evaluate(x=x[mask])
    return out


def _check_start(spec, x0: float, i0: int) -> Tuple[float, float]:
    lo, hi = spec.diffusion.interval
    if not lo <= x0 <= hi:
        raise ValueError(f"x0={x0} lies outside the computational interval [{lo}, {hi}]")
    if not 1 <= i0 <= spec.k:
        raise ValueError(f"initial regime must be in 1..{spec.k}, got {i0}")
    return lo, hi


def _breakpoints(horizon: float, extra: Sequence[float]) -> np.ndarray:
    marks = sorted({float(m) for m in extra if 0.0 < m < horizon} | {float(horizon)})
    return np.asarray(marks)


def simulate_path(spec, x0: float, t0: float, i0: int, dt: float, horizon: float, seed: int,
                  stream: int = 0, mesh_times: Sequence[float] = ()) -> DiffusionPath:
    """Simulate one path of (X, age, regime, rho) on [0, horizon]."""
    lo, hi = _check_start(spec, x0, i0)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    chain_path = RegimeChain(spec.chain, horizon).simulate_chain(i0, t0, horizon, seed, stream)
    rng = path_rng(seed, stream, 1)
    diffusion, discount = spec.diffusion, spec.payoff.discount

    marks = sorted({0.0, float(horizon)} | {float(m) for m in mesh_times if 0.0 < m < horizon}
                   | set(chain_path.jump_times))
    mesh: List[float] = []
    for a, b in zip(marks[:-1], marks[1:]):
        steps = max(1, math.ceil((b - a) / dt - _SNAP))
        mesh.extend(a + (b - a) * np.arange(steps) / steps)
    mesh.append(marks[-1])

    xs, ages, regimes, rhos = [x0], [t0], [i0], [0.0]
    exit_index = 0 if x0 <= lo or x0 >= hi else None
    s_out = [0.0]
    if exit_index is None:
        x, rho = x0, 0.0
        for s, s_next in zip(mesh[:-1], mesh[1:]):
            regime = chain_path.regime_at(s)
            h = s_next - s
            drift = diffusion.drift[regime - 1].evaluate(x=x)
            vol = diffusion.vol[regime - 1].evaluate(x=x)
            x_next = x + drift * h + vol * math.sqrt(h) * rng.standard_normal()
            exited = x_next <= lo or x_next >= hi
            if exited:
                edge = lo if x_next <= lo else hi
                frac = (edge - x) / (x_next - x) if x_next != x else 1.0
                h *= frac
                s_next = s + h
                x_next = edge
            r = discount[regime - 1]
            rho += 0.5 * h * (r.evaluate(x=x) + r.evaluate(x=x_next))
            x = x_next
            s_out.append(s_next)
            xs.append(x)
            rhos.append(rho)
            regimes.append(regime if exited else chain_path.regime_at(s_next))
            ages.append(ages[-1] + h if exited else chain_path.age_at(s_next))
            if exited:
                exit_index = len(xs) - 1
                break

    return DiffusionPath(
        mesh=np.asarray(s_out),
        x=np.asarray(xs, dtype=float),
        age=np.asarray(ages, dtype=float),
        regime=np.asarray(regimes, dtype=int),
        rho=np.asarray(rhos, dtype=float),
        exit_index=exit_index,
    )


def evaluate_payoff(path: DiffusionPath, policy: StoppingRule, payoff) -> PathPayoff:
    """Discounted payoff of one recorded path under `policy`, with a forced stop at exit."""
    last = path.exit_index if path.exit_index is not None else len(path) - 1
    stop_index, censored = last, path.exit_index is None
    for n in range(last + 1):
        if n == path.exit_index or policy.decide(path.mesh[n], path.x[n], path.age[n], int(path.regime[n])):
            stop_index, censored = n, False
            break

    running = 0.0
    discount = np.exp(-path.rho)
    for n in range(stop_index):
        # the step [s_n, s_{n+1}) is governed by the regime holding at s_n
        pi = payoff.running[path.regime[n] - 1]
        h = path.mesh[n + 1] - path.mesh[n]
        running += 0.5 * h * (discount[n] * pi.evaluate(x=path.x[n]) + discount[n + 1] * pi.evaluate(x=path.x[n + 1]))
    if censored:
        return PathPayoff(running, stop_index, True)
    terminal = payoff.terminal_cost[path.regime[stop_index] - 1].evaluate(x=path.x[stop_index])
    return PathPayoff(running - discount[stop_index] * terminal, stop_index, False)


def write_path_csv(path: DiffusionPath, destination) -> Path:
    """Dump a path as `s,x,age,regime,rho`."""
    destination = Path(destination)
    frame = pd.DataFrame({'s': path.mesh, 'x': path.x, 'age': path.age, 'regime': path.regime, 'rho': path.rho})
    frame.to_csv(destination, index=False, float_format='%.17g', lineterminator='\n')
    return destination


def censor_tail_bound(spec, horizon: float) -> float:
    """Upper bound e^{-eps*horizon} on the discount weight left after the horizon."""
    return math.exp(-spec.payoff.epsilon * horizon)


@dataclass
class ChunkResult:
    values: np.ndarray
    censored: np.ndarray


class MonteCarloEngine:
    """Vectorised path simulator: one chunk of paths advances in lock-step."""

    def __init__(self, spec, policy: StoppingRule, dt: float, horizon: float,
                 terminal_value: Optional[TerminalValue] = None):
        self.spec = spec
        self.policy = policy
        self.dt = dt
        self.horizon = horizon
        self.terminal_value = terminal_value
        self.chain = RegimeChain(spec.chain, horizon)
        self.lo, self.hi = spec.diffusion.interval
        self.marks = _breakpoints(horizon, policy.mesh_times)
        self.logger = logging.getLogger(__name__)

        rates = self.chain.constant_rates()
        self._rates = rates
        self._cum_weights = None
        if rates is not None and self.chain.is_homogeneous and spec.k > 1:
            weights = np.array([self.chain.transition_weights(j, 1.0) for j in range(1, spec.k + 1)])
            cumulative = np.cumsum(weights / weights.sum(axis=1, keepdims=True), axis=1)
            for j in range(spec.k):
                cumulative[j, np.flatnonzero(weights[j] > 0)[-1]:] = 1.0
            self._cum_weights = cumulative

    def _draw_jumps(self, regime: np.ndarray, age: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Holding times and next regimes (0-based) for paths entering `regime` with `age`."""
        n = regime.size
        if self.spec.k == 1:
            return np.full(n, np.inf), regime.copy()
        if self._cum_weights is not None:
            u = 1.0 - rng.random(n)
            lam = self._rates[regime]
            with np.errstate(divide='ignore'):
                holding = np.where(lam > 0, -np.log1p(-u) / np.where(lam > 0, lam, 1.0), np.inf)
            v = rng.random(n)
            nxt = np.argmax(v[:, None] < self._cum_weights[regime], axis=1)
            return holding, nxt
        holding = np.empty(n)
        nxt = np.empty(n, dtype=int)
        for p in range(n):
            hold, target = self.chain.next_jump(int(regime[p]) + 1, float(age[p]), rng, self.horizon)
            holding[p] = hold
            nxt[p] = regime[p] if target is None else target - 1
        return holding, nxt

    def run_chunk(self, x0: float, t0: float, i0: int, n: int, seed: int, chunk: int) -> ChunkResult:
        spec, payoff = self.spec, self.spec.payoff
        rng = path_rng(seed, chunk, 0)
        values = np.zeros(n)
        censored = np.zeros(n, dtype=bool)

        ids = np.arange(n)
        x = np.full(n, float(x0))
        age = np.full(n, float(t0))
        regime = np.full(n, i0 - 1, dtype=int)
        s = np.zeros(n)
        rho = np.zeros(n)
        running = np.zeros(n)

        at_edge = x0 <= self.lo or x0 >= self.hi
        if at_edge or np.all(self.policy.decide(s, x, age, regime + 1)):
            values[:] = -payoff.terminal_cost[i0 - 1].evaluate(x=x0)
            return ChunkResult(values, censored)

        holding, next_regime = self._draw_jumps(regime, age, rng)
        next_jump = holding

        while ids.size:
            next_mark = self.marks[np.minimum(np.searchsorted(self.marks, s, side='right'), self.marks.size - 1)]
            limit = np.minimum(next_jump, next_mark)
            gap = limit - s
            snap = gap <= self.dt * (1 + _SNAP)
            h = np.where(snap, gap, self.dt)

            drift = _per_regime(spec.diffusion.drift, x, regime)
            vol = _per_regime(spec.diffusion.vol, x, regime)
            x_new = x + drift * h + vol * np.sqrt(h) * rng.standard_normal(ids.size)

            below, above = x_new <= self.lo, x_new >= self.hi
            exited = below | above
            if exited.any():
                edge = np.where(below, self.lo, self.hi)
                moved = x_new - x
                frac = np.where(exited & (moved != 0), (edge - x) / np.where(moved != 0, moved, 1.0), 1.0)
                h = np.where(exited, h * frac, h)
                x_new = np.where(exited, edge, x_new)
                snap = snap & ~exited

            r_start = _per_regime(payoff.discount, x, regime)
            r_end = _per_regime(payoff.discount, x_new, regime)
            pi_start = _per_regime(payoff.running, x, regime)
            pi_end = _per_regime(payoff.running, x_new, regime)
            rho_new = rho + 0.5 * h * (r_start + r_end)
            running += 0.5 * h * (np.exp(-rho) * pi_start + np.exp(-rho_new) * pi_end)
            rho = rho_new
            x = x_new
            s = np.where(snap, limit, s + h)
            age = age + h

            jumped = snap & (next_jump <= next_mark) & np.isfinite(next_jump)
            if jumped.any():
                regime = np.where(jumped, next_regime, regime)
                age = np.where(jumped, 0.0, age)
                idx = np.flatnonzero(jumped)
                hold, nxt = self._draw_jumps(regime[idx], age[idx], rng)
                next_jump[idx] = s[idx] + hold
                next_regime[idx] = nxt

            decided = ~exited & self.policy.decide(s, x, age, regime + 1)
            at_horizon = ~exited & ~decided & (s >= self.horizon)
            stopped = exited | decided
            done = stopped | at_horizon

            if done.any():
                stop_idx = np.flatnonzero(stopped)
                if stop_idx.size:
                    cost = _per_regime(payoff.terminal_cost, x[stop_idx], regime[stop_idx])
                    values[ids[stop_idx]] = running[stop_idx] - np.exp(-rho[stop_idx]) * cost
                end_idx = np.flatnonzero(at_horizon)
                if end_idx.size:
                    tail = running[end_idx]
                    if self.terminal_value is not None:
                        tail = tail + np.exp(-rho[end_idx]) * self.terminal_value(
                            x[end_idx], age[end_idx], regime[end_idx] + 1)
                    else:
                        censored[ids[end_idx]] = True
                    values[ids[end_idx]] = tail
                keep = ~done
                ids, x, age, regime, s, rho, running = (a[keep] for a in (ids, x, age, regime, s, rho, running))
                next_jump, next_regime = next_jump[keep], next_regime[keep]

        return ChunkResult(values, censored)


def _chunk_moments(values: np.ndarray) -> Tuple[int, float, float]:
    """(count, mean, sum of squared deviations) of one chunk."""
    n = values.size
    if np.all(values == values[0]):
        return n, float(values[0]), 0.0
    mean = float(np.mean(values))
    return n, mean, float(np.sum((values - mean) ** 2))


def _merge_moments(a: Tuple[int, float, float], b: Tuple[int, float, float]) -> Tuple[int, float, float]:
    """Pairwise (Chan) combination of two moment triples."""
    n_a, mean_a, m2_a = a
    n_b, mean_b, m2_b = b
    n = n_a + n_b
    if n_a == 0:
        return b
    delta = mean_b - mean_a
    mean = mean_a + delta * n_b / n
    return n, mean, m2_a + m2_b + delta * delta * n_a * n_b / n


def resolve_threads(threads) -> int:
    if threads in (None, 'auto'):
        return psutil.cpu_count(logical=False) or 1
    return max(1, int(threads))


def simulate_batch(spec, x0: float, t0: float, i0: int, policy: StoppingRule, n_paths: int, dt: float,
                   horizon: float, seed: int, threads=1, terminal_value: Optional[TerminalValue] = None,
                   chunk_size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Per-path payoffs and censoring flags, in stream order.

    Paths are grouped into fixed-size chunks; chunk c draws from stream (seed, c), so the
    result does not depend on the number of worker threads.
    """
    _check_start(spec, x0, i0)
    chunk_size = chunk_size or Config.MC_CHUNK
    engine = MonteCarloEngine(spec, policy, dt, horizon, terminal_value)
    sizes = [min(chunk_size, n_paths - start) for start in range(0, n_paths, chunk_size)]
    workers = min(resolve_threads(threads), len(sizes))

    def work(job):
        chunk, size = job
        return engine.run_chunk(x0, t0, i0, size, seed, chunk)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, enumerate(sizes)))
    else:
        results = [work(job) for job in enumerate(sizes)]
    return (np.concatenate([r.values for r in results]), np.concatenate([r.censored for r in results]))


def mc_estimate(spec, x0: float, t0: float, i0: int, policy: StoppingRule, n_paths: Optional[int] = None,
                dt: Optional[float] = None, horizon: Optional[float] = None, seed: Optional[int] = None,
                threads=1, terminal_value: Optional[TerminalValue] = None) -> McEstimate:
    """Monte Carlo estimate of the payoff functional for one stopping rule."""
    n_paths = n_paths if n_paths is not None else spec.mc.paths
    dt = dt if dt is not None else spec.mc.dt
    horizon = horizon if horizon is not None else spec.mc.horizon
    seed = seed if seed is not None else spec.mc.seed
    if n_paths < 2:
        raise ValueError(f"need at least 2 paths, got {n_paths}")

    chunk_size = Config.MC_CHUNK
    values, censored = simulate_batch(spec, x0, t0, i0, policy, n_paths, dt, horizon, seed,
                                      threads, terminal_value, chunk_size)
    moments = (0, 0.0, 0.0)
    for start in range(0, n_paths, chunk_size):
        moments = _merge_moments(moments, _chunk_moments(values[start:start + chunk_size]))
    n, mean, m2 = moments
    stderr = math.sqrt(m2 / (n - 1) / n)
    censored_fraction = float(censored.mean())

    if censored_fraction > Config.CENSOR_WARN:
        logger.warning(
            f"{censored_fraction:.1%} of paths did not stop by horizon {horizon:g} "
            f"(tail bound {censor_tail_bound(spec, horizon):.2e}); estimate may be biased"
        )
    logger.debug(f"MC {policy.describe()} at x0={x0}: mean={mean:.8g} stderr={stderr:.3g} n={n}")
    return McEstimate(mean, stderr, n, seed, censored_fraction, dt, horizon)
