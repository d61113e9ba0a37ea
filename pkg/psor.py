"""
Projected SOR for the k-coupled discrete obstacle problem.

Each interior row (regime i, node n) reads

    d v[i,n] - l v[i,n-1] - u v[i,n+1] - sum_j c[i,j,n] v[j,n] = b[i,n],   v >= psi

with l, u, c >= 0 and d strictly dominant. The update at (i, n) is

    v[i,n] <- max(v[i,n] + omega * (gs - v[i,n]), psi[i,n])

where gs is the Gauss-Seidel value using the freshest neighbours. End nodes are
pinned to psi and never touched.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

OMEGA_MAX = 1.9999
STALL_FACTOR = 0.99


@dataclass
class ObstacleSystem:
    """Coefficient arrays of one discrete obstacle problem, shaped (k, M+1) or (k, k, M+1)."""

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    coupling: np.ndarray
    rhs: np.ndarray
    obstacle: np.ndarray

    @property
    def k(self) -> int:
        return self.diag.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.diag.shape[1]


@dataclass(frozen=True)
class SorResult:
    iterations: int
    change: float
    converged: bool
    omega: float
    residual: float = 0.0


@njit(cache=True)
def _sweep(v, lower, diag, upper, coupling, rhs, obstacle, omega, order):
    k, n_nodes = v.shape
    change = 0.0
    for idx in range(k):
        i = order[idx]
        for n in range(1, n_nodes - 1):
            acc = rhs[i, n] + lower[i, n] * v[i, n - 1] + upper[i, n] * v[i, n + 1]
            for j in range(k):
                if j != i:
                    acc += coupling[i, j, n] * v[j, n]
            old = v[i, n]
            new = old + omega * (acc / diag[i, n] - old)
            if new < obstacle[i, n]:
                new = obstacle[i, n]
            delta = abs(new - old)
            if delta > change:
                change = delta
            v[i, n] = new
    return change


@njit(cache=True)
def _residual(v, lower, diag, upper, coupling, rhs, obstacle):
    k, n_nodes = v.shape
    worst = 0.0
    for i in range(k):
        for n in range(1, n_nodes - 1):
            row = diag[i, n] * v[i, n] - lower[i, n] * v[i, n - 1] - upper[i, n] * v[i, n + 1] - rhs[i, n]
            for j in range(k):
                if j != i:
                    row -= coupling[i, j, n] * v[j, n]
            value = abs(min(row, v[i, n] - obstacle[i, n]))
            if value > worst:
                worst = value
    return worst


@njit(cache=True)
def _iterate(v, lower, diag, upper, coupling, rhs, obstacle, omega, tol, residual_tol, max_iter, order):
    change = 0.0
    residual = np.inf
    best = np.inf
    stalled = 0
    patience = v.shape[1]
    for it in range(1, max_iter + 1):
        change = _sweep(v, lower, diag, upper, coupling, rhs, obstacle, omega, order)
        if change >= tol:
            continue
        residual = _residual(v, lower, diag, upper, coupling, rhs, obstacle)
        if residual <= residual_tol:
            return it, change, residual
        if residual < STALL_FACTOR * best:
            best = residual
            stalled = 0
        else:
            stalled += 1
            # rounding noise: the residual stopped improving
            if stalled > patience:
                return it, change, residual
    return max_iter, change, _residual(v, lower, diag, upper, coupling, rhs, obstacle)


def relaxation_factor(system: ObstacleSystem) -> float:
    """SOR factor 2/(1 + sqrt(1 - rho_J^2)) from a Jacobi radius estimate.

    rho_J is bounded by cos(pi/M) times the largest off-diagonal to diagonal ratio.
    """
    interior = slice(1, system.n_nodes - 1)
    off = system.lower[:, interior] + system.upper[:, interior] + system.coupling[:, :, interior].sum(axis=1)
    ratio = float(np.max(off / system.diag[:, interior]))
    rho = min(np.cos(np.pi / (system.n_nodes - 1)) * ratio, 1.0)
    return float(min(2.0 / (1.0 + np.sqrt(1.0 - rho * rho)), OMEGA_MAX))


def regime_order(k: int, order: str = 'ascending') -> np.ndarray:
    if order == 'ascending':
        return np.arange(k, dtype=np.int64)
    if order == 'descending':
        return np.arange(k - 1, -1, -1, dtype=np.int64)
    raise ValueError(f"regime order must be 'ascending' or 'descending', got {order!r}")


def projected_sor(system: ObstacleSystem, v: np.ndarray, tol: float, max_iter: int,
                  omega: Optional[float] = None, order: str = 'ascending',
                  residual_tol: float = np.inf) -> SorResult:
    """Solve in place, starting from `v`. End nodes are reset to the obstacle first.

    Sweeps until the sup-norm update is below `tol` and the unscaled complementarity
    residual |min(A v - b, v - psi)| is at most `residual_tol`.
    """
    if omega is None:
        omega = relaxation_factor(system)
    v[:, 0] = system.obstacle[:, 0]
    v[:, -1] = system.obstacle[:, -1]
    np.maximum(v, system.obstacle, out=v)
    iterations, change, residual = _iterate(
        v, system.lower, system.diag, system.upper, system.coupling, system.rhs, system.obstacle,
        float(omega), float(tol), float(residual_tol), int(max_iter), regime_order(system.k, order),
    )
    converged = change < tol and residual <= residual_tol
    if not converged:
        logger.warning(f"PSOR stopped after {iterations} sweeps with update {change:.3e} (tol {tol:.1e}), "
                       f"residual {residual:.3e} (tol {residual_tol:.1e})")
    return SorResult(int(iterations), float(change), bool(converged), float(omega), float(residual))


def gauss_seidel_update(system: ObstacleSystem, v: np.ndarray, i: int, n: int) -> float:
    """Unprojected, unrelaxed update value at (i, n) given the current iterate."""
    acc = system.rhs[i, n] + system.lower[i, n] * v[i, n - 1] + system.upper[i, n] * v[i, n + 1]
    acc += sum(system.coupling[i, j, n] * v[j, n] for j in range(system.k) if j != i)
    return acc / system.diag[i, n]
