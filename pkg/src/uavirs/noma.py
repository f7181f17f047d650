"""SIC decoding orders, power allocations and NOMA rates.

``w[i, j] = 1`` means user i is decoded before user j, so user j's signal is
interference for user i (``w[j, i]`` weights p_j in user i's denominator).
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "rates",
    "sum_rate",
    "initial_order",
    "initial_power",
    "is_tournament",
    "validate",
    "interference",
    "order_from_permutation",
]

LOG2E = 1.0 / np.log(2.0)


def interference(p, w) -> np.ndarray:
    """Sum_j w[j, i] p_j for every user i."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    return w.T @ p - np.diag(w) * p


def rates(p, w, gains, noise: float) -> np.ndarray:
    """Per-user achievable rate in bit/s/Hz."""
    p = np.asarray(p, dtype=float)
    g = np.asarray(gains, dtype=float)
    den = g * interference(p, w) + noise
    return np.log2(1.0 + p * g / den)


def sum_rate(p, w, gains, noise: float) -> float:
    return float(np.sum(rates(p, w, gains, noise)))


def initial_order(gains) -> np.ndarray:
    """Decode strongest first; equal gains fall back to index order."""
    g = np.asarray(gains, dtype=float)
    n = g.size
    idx = np.arange(n)
    w = (g[:, None] > g[None, :]) | ((g[:, None] == g[None, :]) & (idx[:, None] < idx[None, :]))
    return w.astype(float)


def order_from_permutation(perm) -> np.ndarray:
    """Tournament where users earlier in ``perm`` are decoded first."""
    n = len(perm)
    rank = np.empty(n, dtype=int)
    rank[list(perm)] = np.arange(n)
    return (rank[:, None] < rank[None, :]).astype(float)


def initial_power(N: int, p_max: float) -> np.ndarray:
    return np.full(N, p_max / N)


def is_tournament(w, tol: float = 1e-9) -> bool:
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    off = ~np.eye(n, dtype=bool)
    return bool(np.all(np.abs(np.diag(w)) <= tol)
                and np.all(np.abs((w + w.T)[off] - 1.0) <= tol))


def validate(p, w, p_max: float, tol: float = 1e-9) -> list:
    """Return a list of violated constraints (empty when feasible)."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    eps = tol * p_max
    problems = []
    if not is_tournament(w, tol):
        problems.append("decoding order is not a tournament")
    if np.any((w < -tol) | (w > 1 + tol)):
        problems.append("order entries outside [0, 1]")
    if np.any(p < -eps):
        problems.append("negative power")
    if abs(p.sum() - p_max) > eps:
        problems.append("powers do not sum to p_max")
    # p_j >= w_ij p_i
    gap = w * p[:, None] - p[None, :]
    np.fill_diagonal(gap, 0.0)
    if np.any(gap > eps):
        problems.append("fairness constraint violated")
    return problems
