"""
Stopping rules.

A rule maps (elapsed time s, state x, age, regime) to stop/continue. Every rule works
on scalars and on numpy arrays of equal shape so the batched simulator can evaluate a
whole chunk of paths at once. Regimes are 1-based.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config

logger = logging.getLogger(__name__)


class PolicyParseError(ValueError):
    pass


class StoppingRule:
    """Base class; subclasses implement `decide`."""

    name = 'rule'
    # times that must appear on every simulation mesh
    mesh_times: Tuple[float, ...] = ()

    def decide(self, s, x, age, regime):
        raise NotImplementedError

    def __call__(self, s, x, age, regime):
        return self.decide(s, x, age, regime)

    def describe(self) -> str:
        return self.name


class StopImmediately(StoppingRule):
    name = 'immediate'

    def decide(self, s, x, age, regime):
        return np.ones(np.shape(x), dtype=bool) if np.ndim(x) else True


class NeverStop(StoppingRule):
    name = 'never'

    def decide(self, s, x, age, regime):
        return np.zeros(np.shape(x), dtype=bool) if np.ndim(x) else False


class FixedTimeRule(StoppingRule):
    """Stop at elapsed time T."""

    name = 'fixed-time'

    def __init__(self, T: float):
        if T < 0:
            raise PolicyParseError(f"stopping time must be nonnegative, got {T}")
        self.T = float(T)
        self.mesh_times = (self.T,)

    def decide(self, s, x, age, regime):
        result = np.asarray(s) >= self.T
        if np.ndim(x) and not np.ndim(result):
            return np.full(np.shape(x), bool(result))
        return result if np.ndim(result) else bool(result)

    def describe(self):
        return f"fixed-time:{self.T!r}"


class ThresholdRule(StoppingRule):
    """Stop when x crosses a per-regime level: x <= b_i ('below') or x >= b_i ('above').

    A NaN level means the rule never stops in that regime.
    """

    name = 'threshold'

    def __init__(self, levels: Sequence[float], side: str = 'below'):
        if side not in ('below', 'above'):
            raise PolicyParseError(f"threshold side must be 'below' or 'above', got {side!r}")
        self.levels = np.asarray(levels, dtype=float)
        self.side = side

    def decide(self, s, x, age, regime):
        level = self.levels[np.asarray(regime, dtype=int) - 1]
        with np.errstate(invalid='ignore'):
            hit = np.asarray(x) <= level if self.side == 'below' else np.asarray(x) >= level
        hit = hit & ~np.isnan(level)
        return hit if np.ndim(hit) else bool(hit)

    def scaled(self, factor: float) -> 'ThresholdRule':
        return ThresholdRule(self.levels * factor, self.side)

    def describe(self):
        prefix = 'threshold' if self.side == 'below' else 'threshold-above'
        return f"{prefix}:{','.join(repr(float(b)) for b in self.levels)}"


class FieldRule(StoppingRule):
    """Stop where the interpolated gap g = v + h is at most tol_stop.

    `gap` has shape (len(x_nodes), len(age_nodes), k); homogeneous fields use a single
    age node. States outside the grid are clamped to its hull.
    """

    name = 'field'

    def __init__(self, x_nodes: np.ndarray, gap: np.ndarray, age_nodes: Optional[np.ndarray] = None,
                 tol_stop: float = Config.TOL_STOP, source: str = 'solver'):
        self.x_nodes = np.asarray(x_nodes, dtype=float)
        self.age_nodes = np.zeros(1) if age_nodes is None else np.asarray(age_nodes, dtype=float)
        self.gap = np.asarray(gap, dtype=float)
        if self.gap.ndim == 2:
            self.gap = self.gap[:, None, :]
        if self.gap.shape[:2] != (self.x_nodes.size, self.age_nodes.size):
            raise PolicyParseError(f"gap shape {self.gap.shape} does not match the grid")
        self.tol_stop = tol_stop
        self.source = source

    @property
    def k(self) -> int:
        return self.gap.shape[2]

    @property
    def has_age(self) -> bool:
        return self.age_nodes.size > 1

    def interpolate(self, x, age, regime):
        """Linear in x, and linear in age when the field carries an age axis."""
        x = np.asarray(x, dtype=float)
        r = np.asarray(regime, dtype=int) - 1
        ix, wx = _bracket(self.x_nodes, x)
        if self.has_age:
            ia, wa = _bracket(self.age_nodes, np.asarray(age, dtype=float))
        else:
            ia, wa = np.zeros_like(ix), np.zeros_like(wx)
        g = self.gap
        lower = (1 - wx) * g[ix, ia, r] + wx * g[ix + 1, ia, r]
        if not self.has_age:
            return lower
        upper = (1 - wx) * g[ix, ia + 1, r] + wx * g[ix + 1, ia + 1, r]
        return (1 - wa) * lower + wa * upper

    def decide(self, s, x, age, regime):
        stop = self.interpolate(x, age, regime) <= self.tol_stop
        return stop if np.ndim(stop) else bool(stop)

    def describe(self):
        return f"from-field:{self.source}"

    @classmethod
    def from_csv(cls, path, tol_stop: float = Config.TOL_STOP) -> 'FieldRule':
        """Rebuild a rule from a value CSV (`x[,t],regime,v,minus_h,...`)."""
        try:
            frame = pd.read_csv(path, float_precision='round_trip')
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise PolicyParseError(f"cannot read value field {path}: {e}") from e
        missing = {'x', 'regime', 'v', 'minus_h'} - set(frame.columns)
        if missing:
            raise PolicyParseError(f"value field {path} lacks columns: {', '.join(sorted(missing))}")
        x_nodes = np.sort(frame['x'].unique())
        regimes = np.sort(frame['regime'].unique())
        if 't' in frame.columns:
            age_nodes = np.sort(frame['t'].unique())
        else:
            age_nodes = np.zeros(1)
            frame = frame.assign(t=0.0)
        if not np.array_equal(regimes, np.arange(1, regimes.size + 1)):
            raise PolicyParseError(f"value field {path} must list regimes 1..k")
        gap = np.full((x_nodes.size, age_nodes.size, regimes.size), np.nan)
        ix = np.searchsorted(x_nodes, frame['x'].to_numpy())
        ia = np.searchsorted(age_nodes, frame['t'].to_numpy())
        gap[ix, ia, frame['regime'].to_numpy() - 1] = (frame['v'] - frame['minus_h']).to_numpy()
        if np.isnan(gap).any():
            raise PolicyParseError(f"value field {path} is not a complete grid")
        logger.info(f"Loaded field policy from {path} ({x_nodes.size} nodes, {regimes.size} regimes)")
        return cls(x_nodes, gap, age_nodes if age_nodes.size > 1 else None, tol_stop, source=str(path))


def _bracket(nodes: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Left cell index and in-cell weight for each value, clamped to the node hull."""
    clamped = np.clip(values, nodes[0], nodes[-1])
    index = np.clip(np.searchsorted(nodes, clamped, side='right') - 1, 0, nodes.size - 2)
    weight = (clamped - nodes[index]) / (nodes[index + 1] - nodes[index])
    return index, weight


def _levels(text: str, k: Optional[int]) -> np.ndarray:
    try:
        levels = [float(part) for part in text.split(',') if part.strip()]
    except ValueError as e:
        raise PolicyParseError(f"threshold levels must be numbers: {text!r}") from e
    if k is not None and len(levels) != k:
        raise PolicyParseError(f"expected {k} threshold levels (one per regime), got {len(levels)}")
    return np.asarray(levels)


def parse_policy(text: str, k: Optional[int] = None, tol_stop: float = Config.TOL_STOP) -> StoppingRule:
    """Parse `immediate | never | fixed-time:T | threshold[-above]:b1,..,bk | from-field:<csv>`."""
    text = text.strip()
    kind, _, argument = text.partition(':')
    if kind == 'immediate' and not argument:
        return StopImmediately()
    if kind == 'never' and not argument:
        return NeverStop()
    if kind == 'fixed-time':
        try:
            return FixedTimeRule(float(argument))
        except ValueError as e:
            raise PolicyParseError(f"bad stopping time in {text!r}") from e
    if kind == 'threshold':
        return ThresholdRule(_levels(argument, k), 'below')
    if kind == 'threshold-above':
        return ThresholdRule(_levels(argument, k), 'above')
    if kind == 'from-field':
        path = Path(argument)
        if not path.is_file():
            raise PolicyParseError(f"value field file not found: {argument}")
        rule = FieldRule.from_csv(path, tol_stop)
        if k is not None and rule.k != k:
            raise PolicyParseError(f"value field has {rule.k} regimes, problem has {k}")
        return rule
    raise PolicyParseError(f"unknown policy {text!r}")
