"""
Regime chain sampling.

Holding times are drawn by inverting the cumulative hazard, next regimes by
cumulative-sum inversion over the transition weights. Every random draw comes from a
counter-based stream keyed by (seed, stream) so paths can be simulated in any order.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize

from config import Config

logger = logging.getLogger(__name__)

DEFAULT_HORIZON = 1e3
WEIGHT_SUM_TOL = 1e-9
_HAZARD_SAMPLES = 33


class HazardDomainError(ValueError):
    pass


class TransitionWeightError(ValueError):
    pass


def path_rng(seed: int, stream: int = 0, substream: int = 0) -> np.random.Generator:
    """Independent generator for (stream, substream) of `seed`."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream, substream))))


def open_uniform(rng: np.random.Generator) -> float:
    """Uniform variate on (0, 1)."""
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return u


@dataclass(frozen=True)
class ChainPath:
    initial_regime: int
    initial_age: float
    horizon: float
    jump_times: Tuple[float, ...]
    states: Tuple[int, ...]

    def regime_at(self, s: float) -> int:
        """Regime at time s (right-continuous)."""
        n = int(np.searchsorted(self.jump_times, s, side='right'))
        return self.initial_regime if n == 0 else self.states[n - 1]

    def age_at(self, s: float) -> float:
        n = int(np.searchsorted(self.jump_times, s, side='right'))
        return self.initial_age + s if n == 0 else s - self.jump_times[n - 1]

    def holding_times(self) -> np.ndarray:
        """Completed sojourns; the first one excludes the initial age."""
        return np.diff(np.concatenate(([0.0], self.jump_times)))

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)


class RegimeChain:
    """Law of the regime chain: hazards λ_j(t) and transition weights p_{j,m}(t)."""

    def __init__(self, spec, horizon: Optional[float] = None):
        self.spec = spec
        self.k = spec.k
        self.horizon = horizon if horizon is not None else DEFAULT_HORIZON
        self.logger = logging.getLogger(__name__)
        self._constant = [e.constant_value() if e.is_constant else None for e in spec.lam]

    @property
    def is_homogeneous(self) -> bool:
        return self.spec.is_homogeneous

    def constant_rates(self) -> Optional[np.ndarray]:
        """Per-regime hazards when every hazard is constant, else None."""
        if any(c is None for c in self._constant):
            return None
        return np.array(self._constant, dtype=float)

    def hazard(self, j: int, t):
        return self.spec.lam[j - 1].evaluate(t=t)

    def cumulative_hazard(self, j: int, t0: float, s: float) -> float:
        """Integral of λ_j over [t0, t0 + s]."""
        if s < 0 or t0 < 0:
            raise ValueError(f"cumulative hazard needs s >= 0 and t0 >= 0, got s={s}, t0={t0}")
        constant = self._constant[j - 1]
        if constant is not None:
            if constant < 0:
                raise HazardDomainError(f"lambda.{j} is negative ({constant})")
            return constant * s
        if s == 0:
            return 0.0
        sampled = self.hazard(j, np.linspace(t0, t0 + s, _HAZARD_SAMPLES))
        if np.any(sampled < 0):
            raise HazardDomainError(f"lambda.{j} is negative on [{t0}, {t0 + s}]")

        def integrand(u):
            value = self.hazard(j, u)
            if value < 0:
                raise HazardDomainError(f"lambda.{j}({u:.6g}) = {value:.6g} is negative")
            return value

        value, _ = integrate.quad(integrand, t0, t0 + s, epsabs=Config.HAZARD_TOL, epsrel=1e-12, limit=200)
        return max(value, 0.0)

    def sample_holding_time(self, j: int, t0: float, u: float, horizon: Optional[float] = None) -> float:
        """Sojourn length in regime j entered with age t0, by hazard inversion of u.

        Returns inf when the hazard accumulated over ten simulation horizons never
        reaches -log(1 - u).
        """
        if not 0.0 < u < 1.0:
            raise ValueError(f"uniform variate must lie in (0, 1), got {u}")
        target = -math.log1p(-u)
        constant = self._constant[j - 1]
        if constant is not None:
            if constant < 0:
                raise HazardDomainError(f"lambda.{j} is negative ({constant})")
            return math.inf if constant == 0 else target / constant

        cap = Config.HOLDING_CAP_FACTOR * (horizon if horizon is not None else self.horizon)
        if self.cumulative_hazard(j, t0, cap) < target:
            return math.inf

        lo, hi = 0.0, min(1.0, cap)
        while self.cumulative_hazard(j, t0, hi) < target:
            lo, hi = hi, min(2.0 * hi, cap)

        return optimize.brentq(lambda s: self.cumulative_hazard(j, t0, s) - target, lo, hi,
                               xtol=1e-14, rtol=Config.HOLDING_RTOL)

    def transition_weights(self, j: int, age: float) -> np.ndarray:
        """p_{j,m}(age) for m = 1..k (zero at m = j)."""
        age = max(age, Config.AGE_FLOOR)
        weights = np.zeros(self.k)
        for m in range(1, self.k + 1):
            if m != j:
                weights[m - 1] = self.spec.trans_prob[(j, m)].evaluate(t=age)
        return weights

    def sample_next_regime(self, j: int, holding: float, u: float) -> int:
        if holding <= 0:
            raise ValueError(f"transition weights are evaluated at positive ages only, got {holding}")
        if self.k == 1:
            raise TransitionWeightError("a single-regime chain has no transitions")
        weights = self.transition_weights(j, holding)
        total = weights.sum()
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise TransitionWeightError(f"weights out of regime {j} sum to {total:.12g} at age {holding:.6g}")
        cumulative = np.cumsum(weights)
        index = int(np.searchsorted(cumulative, u, side='right'))
        index = min(index, self.k - 1)
        # skip zero-weight targets (including j itself) landed on by rounding
        while weights[index] == 0.0 and index > 0:
            index -= 1
        return index + 1

    def transition_rate(self, i: int, j: int, t: float) -> float:
        """λ_{i,j}(t) = p_{i,j}(t) λ_i(t)."""
        if i == j:
            raise HazardDomainError("transition rate is defined for distinct regimes only")
        t = max(t, Config.AGE_FLOOR)
        return float(self.spec.trans_prob[(i, j)].evaluate(t=t) * self.hazard(i, t))

    def rate_matrix(self, t: float) -> np.ndarray:
        """Matrix of λ_{i,j}(t) with zero diagonal, 0-based."""
        rates = np.zeros((self.k, self.k))
        if self.k == 1:
            return rates
        for i in range(1, self.k + 1):
            for j in range(1, self.k + 1):
                if i != j:
                    rates[i - 1, j - 1] = self.transition_rate(i, j, t)
        return rates

    def next_jump(self, regime: int, age: float, rng: np.random.Generator,
                  horizon: Optional[float] = None) -> Tuple[float, Optional[int]]:
        """Draw (holding, next regime); next regime is None when no jump occurs."""
        holding = self.sample_holding_time(regime, age, open_uniform(rng), horizon)
        if math.isinf(holding):
            return holding, None
        return holding, self.sample_next_regime(regime, age + holding, open_uniform(rng))

    def simulate_chain(self, i0: int, t0: float, horizon: float, seed: int, stream: int = 0) -> ChainPath:
        """Sample jump times and regimes on [0, horizon]."""
        if not horizon > 0:
            raise ValueError(f"horizon must be positive, got {horizon}")
        rng = path_rng(seed, stream)
        jump_times, states = [], []
        s, age, regime = 0.0, t0, i0
        while True:
            holding, nxt = self.next_jump(regime, age, rng, horizon)
            if nxt is None or s + holding > horizon:
                break
            s += holding
            jump_times.append(s)
            states.append(nxt)
            regime, age = nxt, 0.0
        return ChainPath(i0, t0, horizon, tuple(jump_times), tuple(states))


def empirical_transition_frequencies(paths: Iterable[ChainPath], k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Count observed j -> m transitions; returns (counts, row-normalised frequencies)."""
    counts = np.zeros((k, k), dtype=np.int64)
    for path in paths:
        previous = path.initial_regime
        for state in path.states:
            counts[previous - 1, state - 1] += 1
            previous = state
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid='ignore', divide='ignore'):
        freqs = np.where(totals > 0, counts / np.maximum(totals, 1), 0.0)
    return counts, freqs


def holding_time_sample(chain: RegimeChain, j: int, t0: float, n: int, seed: int) -> np.ndarray:
    """n first-sojourn draws in regime j entered with age t0 (law checks)."""
    rng = path_rng(seed, 0)
    return np.array([chain.sample_holding_time(j, t0, open_uniform(rng)) for _ in range(n)])


def ks_reference_cdf(chain: RegimeChain, j: int, t0: float):
    """Analytic CDF of the first sojourn: 1 - exp(-Λ_j(t0, s))."""
    def cdf(s: Sequence[float]):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.array([1.0 - math.exp(-chain.cumulative_hazard(j, t0, max(v, 0.0))) if np.isfinite(v) else 1.0
                         for v in s])
    return cdf
