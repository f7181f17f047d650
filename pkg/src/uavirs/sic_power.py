"""Joint SIC decoding order and power allocation by penalty SCA.

The binary order matrix is relaxed to [0, 1] with a penalty
``zeta * sum(w - w^2)`` that vanishes only at binary points. Each iteration
linearises the penalised sum rate and the bilinear fairness constraint
``p_j >= w_ij p_i`` around the current point, which leaves a linear program in
(p, w). The LP vertex is used as a search direction with a backtracking line
search on the true penalised objective, so iterates never lose objective value
and always satisfy the original constraints.

After the loop the order is rounded, repaired to a tournament and the powers
are re-optimised for that fixed order. The result is compared with the
fixed-order optimum of the initial order and the better of the two is kept.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .convex import (ConvexProgram, LinearProgram, SolverError, solve_convex, solve_lp)
from .noma import LOG2E, interference, order_from_permutation, rates
from .scenario import PenaltyConfig

log = logging.getLogger(__name__)

__all__ = [
    "SicResult",
    "offdiag_index",
    "pack",
    "unpack",
    "penalised_objective",
    "build_p3_lp",
    "project_fair_power",
    "optimize_fixed_order",
    "optimize_sic_power",
    "fairness_violation",
]


@dataclass
class SicResult:
    w: np.ndarray
    p: np.ndarray
    sum_rate: float
    relaxed_w: np.ndarray = None
    trace: list = field(default_factory=list)  # (zeta, before, after) per accepted step
    source: str = "joint"


def offdiag_index(N: int):
    """Row-major list of off-diagonal (i, j) pairs."""
    return [(i, j) for i in range(N) for j in range(N) if i != j]


def pack(p, w) -> np.ndarray:
    N = len(p)
    return np.concatenate([np.asarray(p, float), [w[i, j] for i, j in offdiag_index(N)]])


def unpack(x, N: int):
    p = np.asarray(x[:N], dtype=float)
    w = np.zeros((N, N))
    for k, (i, j) in enumerate(offdiag_index(N)):
        w[i, j] = x[N + k]
    return p, w


def penalised_objective(p, w, gains, noise, zeta) -> float:
    """Sum rate minus zeta times the binariness penalty."""
    w = np.asarray(w, dtype=float)
    off = ~np.eye(w.shape[0], dtype=bool)
    pen = float(np.sum(w[off] - w[off] ** 2))
    return float(np.sum(rates(p, w, gains, noise))) - zeta * pen


def fairness_violation(p, w) -> float:
    """Largest amount by which p_j >= w_ij p_i fails (0 when satisfied)."""
    p = np.asarray(p, dtype=float)
    gap = np.asarray(w) * p[:, None] - p[None, :]
    np.fill_diagonal(gap, -np.inf)
    return float(max(np.max(gap), 0.0)) if p.size > 1 else 0.0


def build_p3_lp(w_bar, p_bar, gains, noise, p_max, zeta) -> LinearProgram:
    """First-order model of the penalised sum rate around (w_bar, p_bar) as an LP.

    The offset makes the LP objective equal the penalised objective at the
    expansion point.
    """
    w_bar = np.asarray(w_bar, dtype=float)
    p_bar = np.asarray(p_bar, dtype=float)
    K = np.asarray(gains, dtype=float)
    N = p_bar.size
    pairs = offdiag_index(N)
    n = N + len(pairs)
    I_bar = interference(p_bar, w_bar)
    D1 = K * (I_bar + p_bar) + noise
    D2 = K * I_bar + noise
    # d/dI_i of the rate of user i, and d/dp_i through the signal term
    dI = LOG2E * K * (1.0 / D1 - 1.0 / D2)
    c = np.zeros(n)
    c[:N] = LOG2E * K / D1
    for k, (j, i) in enumerate(pairs):
        # w[j, i] couples p_j into the interference of user i
        c[j] += dI[i] * w_bar[j, i]
        c[N + k] = dI[i] * p_bar[j] - zeta * (1.0 - 2.0 * w_bar[j, i])
    x_bar = pack(p_bar, w_bar)
    offset = penalised_objective(p_bar, w_bar, K, noise, zeta) - float(c @ x_bar)

    pos = {pair: N + k for k, pair in enumerate(pairs)}
    A_eq = []
    b_eq = []
    for i in range(N):
        for j in range(i + 1, N):
            row = np.zeros(n)
            row[pos[(i, j)]] = 1.0
            row[pos[(j, i)]] = 1.0
            A_eq.append(row)
            b_eq.append(1.0)
    row = np.zeros(n)
    row[:N] = 1.0
    A_eq.append(row)
    b_eq.append(p_max)
    A_ub, b_ub = [], []
    for i, j in pairs:
        # w_bar p_i + p_bar_i w_ij - p_j <= w_bar p_bar_i
        row = np.zeros(n)
        row[i] += w_bar[i, j]
        row[pos[(i, j)]] += p_bar[i]
        row[j] -= 1.0
        A_ub.append(row)
        b_ub.append(w_bar[i, j] * p_bar[i])
    lower = np.zeros(n)
    upper = np.concatenate([np.full(N, p_max), np.ones(len(pairs))])
    return LinearProgram(c=c, A_ub=np.array(A_ub).reshape(-1, n), b_ub=np.array(b_ub),
                         A_eq=np.array(A_eq), b_eq=np.array(b_eq), lower=lower,
                         upper=upper, offset=offset)


# --------------------------------------------------------------------------
# fixed-order power allocation
# --------------------------------------------------------------------------


def _reachability(w) -> np.ndarray:
    """reach[i, j] True when a chain of decoded-before relations leads from i to j."""
    R = np.asarray(w) > 0.5
    N = R.shape[0]
    for k in range(N):
        R = R | (R[:, [k]] & R[[k], :])
    return R


def _fair_structure(w):
    """Equal-power groups (cycles of the order) and a strictly fair starting point.

    Returns (equality rows, inequality pairs (i, j) meaning p_i <= p_j, start weights).
    """
    N = w.shape[0]
    R = _reachability(w)
    same = R & R.T
    eq_rows = []
    for i in range(N):
        for j in range(i + 1, N):
            if same[i, j]:
                row = np.zeros(N)
                row[i], row[j] = 1.0, -1.0
                eq_rows.append(row)
    ineq = [(i, j) for i in range(N) for j in range(N)
            if i != j and w[i, j] > 0.5 and not same[i, j]]
    # level = number of groups that must not exceed this one
    level = np.array([np.sum(R[:, i] & ~same[:, i]) for i in range(N)], dtype=float)
    start = level + 1.0
    return eq_rows, ineq, start / start.sum()


def optimize_fixed_order(gains, w, noise, p_max, p_start=None, tol=1e-12, max_iter=200):
    """Maximise the sum rate over powers for a fixed binary order.

    The rate is a difference of concave functions of p; each step keeps the
    concave part and linearises the other (a global minoriser), then solves the
    resulting concave program. Works in normalised powers q = p / p_max.
    """
    K = np.asarray(gains, dtype=float)
    w = np.asarray(w, dtype=float)
    N = K.size
    if N == 1:
        p = np.array([p_max])
        return p, float(np.sum(rates(p, w, K, noise)))
    eq_rows, ineq, q = _fair_structure(w)
    Wt = w.T.copy()
    np.fill_diagonal(Wt, 0.0)
    a = K * p_max / noise  # normalised gains, noise becomes 1

    def total(qq):
        I = Wt @ qq
        return LOG2E * float(np.sum(np.log1p(a * (I + qq)) - np.log1p(a * I)))

    A_eq = np.vstack([np.ones(N)] + eq_rows)
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[0] = 1.0
    G = np.zeros((len(ineq), N))
    for k, (i, j) in enumerate(ineq):
        G[k, i], G[k, j] = 1.0, -1.0

    def ineq_fn(x, order):
        g = G @ x
        return g if order == 0 else (g, G, None)

    candidates = [q]
    if p_start is not None:
        q0 = np.asarray(p_start, float) / p_max
        if np.all(q0 >= 0) and abs(q0.sum() - 1) < 1e-9 and np.all(G @ q0 <= 1e-12) \
                and (not eq_rows or np.max(np.abs(np.array(eq_rows) @ q0)) < 1e-12):
            candidates.append(q0)
    best_q = max(candidates, key=total)
    val = total(best_q)
    # the barrier needs a strictly interior start: blend towards the level start
    cur = best_q if np.all(best_q > 0) and np.all(G @ best_q < 0) else q
    if total(cur) < val:
        cur = 0.999 * best_q + 0.001 * q
    cur_val = total(cur)
    for _ in range(max_iter):
        I_bar = Wt @ cur
        slope = a / (1.0 + a * I_bar)  # derivative of log1p(a I) w.r.t. I
        lin = Wt @ slope  # gradient of sum_i slope_i * I_i w.r.t. q

        def obj(x, order):
            I = Wt @ x
            z = 1.0 + a * (I + x)
            v = float(np.sum(np.log(z)) - lin @ x)
            if order == 0:
                return v
            dz = a / z
            grad = dz + Wt.T @ dz - lin
            if order == 1:
                return v, grad
            M = np.eye(N) + Wt
            H = -(M.T * dz**2) @ M
            return v, grad, H

        try:
            sol = solve_convex(ConvexProgram(obj, cur, ineq=ineq_fn if len(ineq) else None,
                                             A_eq=A_eq, b_eq=b_eq, lower=np.zeros(N)),
                               tol=1e-10)
        except SolverError as exc:
            log.debug("fixed-order power step failed: %s", exc)
            break
        nxt = np.maximum(sol.x, 0.0)
        nxt = nxt / nxt.sum()
        nv = total(nxt)
        if nv <= cur_val + tol * max(1.0, abs(cur_val)):
            if nv > cur_val:
                cur, cur_val = nxt, nv
            break
        cur, cur_val = nxt, nv
    if cur_val < val:
        cur, cur_val = best_q, val
    p = cur * p_max
    return p, float(np.sum(rates(p, w, K, noise)))


def project_fair_power(p, w, p_max, slack=1e-10):
    """Least-squares projection of p onto {p >= 0, sum p = p_max, p_j >= w_ij p_i}.

    The fairness rows are relaxed by ``slack * p_max`` so that cyclic orders,
    which force equal powers, still have a strictly feasible start (uniform).
    """
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    N = p.size
    scale = p_max
    target = p / scale
    pairs = [(i, j) for i in range(N) for j in range(N) if i != j and w[i, j] > 0]
    G = np.zeros((len(pairs), N))
    h = np.full(len(pairs), slack)
    for k, (i, j) in enumerate(pairs):
        G[k, i] += w[i, j]
        G[k, j] -= 1.0

    def obj(x, order):
        d = x - target
        v = -float(d @ d)
        if order == 0:
            return v
        if order == 1:
            return v, -2.0 * d
        return v, -2.0 * d, -2.0 * np.eye(N)

    def ineq(x, order):
        g = G @ x - h
        return g if order == 0 else (g, G, None)

    x0 = np.full(N, 1.0 / N)
    sol = solve_convex(ConvexProgram(obj, x0, ineq=ineq if pairs else None,
                                     A_eq=np.ones((1, N)), b_eq=[1.0], lower=np.zeros(N)),
                       tol=1e-12)
    x = np.maximum(sol.x, 0.0)
    return x / x.sum() * p_max


# --------------------------------------------------------------------------
# joint order and power
# --------------------------------------------------------------------------


def _line_search(x_bar, x_lp, f_bar, pred, value, feasible, N):
    """Backtracking along the LP direction; returns the accepted point or None."""
    d = x_lp - x_bar
    s = 1.0
    for _ in range(30):
        x = x_bar + s * d
        if feasible(x):
            fx = value(x)
            if fx >= f_bar + 1e-4 * s * max(pred, 0.0) and fx > f_bar:
                return x, fx
        s *= 0.5
    return None


def _round_order(w_relaxed, w_ref):
    N = w_relaxed.shape[0]
    w = np.zeros((N, N))
    for i in range(N):
        for j in range(i + 1, N):
            v = w_relaxed[i, j]
            if v > 0.5:
                b = 1.0
            elif v < 0.5:
                b = 0.0
            else:
                b = float(w_ref[i, j] > 0.5)
            w[i, j], w[j, i] = b, 1.0 - b
    return w


def _penalty_sca(K, w_start, p_start, noise, p_max, cfg):
    """Penalty SCA from one starting point; returns (relaxed p, relaxed w, trace)."""
    N = K.size
    tol_c9 = 1e-9 * p_max

    def feasible(x):
        p, w = unpack(x, N)
        return (np.all(p >= -tol_c9) and np.all(w >= -1e-12) and np.all(w <= 1 + 1e-12)
                and fairness_violation(p, w) <= tol_c9)

    x = pack(p_start, w_start)
    zeta = min(cfg.zeta, cfg.zeta * cfg.zeta_start)
    trace = []
    for it in range(cfg.max_iter):
        p_bar, w_bar = unpack(x, N)

        def value(xx, z=zeta):
            pp, ww = unpack(xx, N)
            return penalised_objective(pp, ww, K, noise, z)

        f_bar = value(x)
        lp = build_p3_lp(w_bar, p_bar, K, noise, p_max, zeta)
        try:
            sol = solve_lp(lp)
        except SolverError as exc:
            log.debug("order/power LP failed at iteration %d: %s", it, exc)
            sol = None
        step = None
        if sol is not None:
            x_lp = sol.x.copy()
            # clean tiny bound violations from the interior-point solution
            x_lp[:N] = np.clip(x_lp[:N], 0.0, p_max)
            x_lp[N:] = np.clip(x_lp[N:], 0.0, 1.0)
            pred = lp.value(x_lp) - f_bar
            step = _line_search(x, x_lp, f_bar, pred, value, feasible, N)
        improved = 0.0
        if step is not None:
            x_new, f_new = step
            trace.append((zeta, f_bar, f_new))
            improved = f_new - f_bar
            x = x_new
        log.debug("penalty SCA it=%d zeta=%.3g obj=%.6g gain=%.3g", it, zeta, f_bar, improved)
        if improved <= cfg.eps:
            _, w_now = unpack(x, N)
            off = ~np.eye(N, dtype=bool)
            binary = np.all(np.minimum(w_now[off], 1.0 - w_now[off]) <= cfg.round_tol)
            # a binary point that cannot move now only gets stiffer as zeta grows
            if zeta >= cfg.zeta or binary:
                break
        zeta = min(cfg.zeta, zeta * cfg.zeta_growth)
    p_rel, w_rel = unpack(x, N)
    return p_rel, w_rel, trace


def _finish(K, p_rel, w_rel, w_ref, noise, p_max):
    """Round, repair and re-optimise powers for the rounded order."""
    w_bin = _round_order(w_rel, w_ref)
    p_fix = p_rel.copy()
    if fairness_violation(p_fix, w_bin) > 1e-9 * p_max or abs(p_fix.sum() - p_max) > 1e-9 * p_max:
        p_fix = project_fair_power(p_fix, w_bin, p_max)
    p, r = optimize_fixed_order(K, w_bin, noise, p_max, p_start=p_fix)
    return w_bin, p, r


def strongest_last_start(gains, p_max):
    """Order decoding the strongest user last, with all power on that user."""
    K = np.asarray(gains, dtype=float)
    k = int(np.argmax(K))
    perm = [i for i in np.argsort(-K, kind="stable") if i != k] + [k]
    p = np.zeros(K.size)
    p[k] = p_max
    return order_from_permutation(perm), p


def optimize_sic_power(gains, w0, p0, noise: float, p_max: float,
                       cfg: PenaltyConfig = PenaltyConfig()) -> SicResult:
    """Jointly choose the decoding order and the transmit powers of one slot.

    The penalty SCA is run from the given initial point and from a second,
    single-user start; each outcome is rounded and power-polished, and the
    best is compared against the fixed-order optimum of the initial order.
    """
    K = np.asarray(gains, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    N = K.size
    if N == 1:
        p = np.array([p_max])
        return SicResult(np.zeros((1, 1)), p, float(rates(p, np.zeros((1, 1)), K, noise)[0]),
                         relaxed_w=np.zeros((1, 1)), source="single")
    w_init = _round_order(w0, w0)
    p_init, r_init = optimize_fixed_order(K, w_init, noise, p_max, p_start=p0)
    best = SicResult(w_init, p_init, r_init, relaxed_w=w0.copy(), source="initial")
    starts = [("joint", w0, p0), ("single-user", *strongest_last_start(K, p_max))]
    for name, ws, ps in starts:
        p_rel, w_rel, trace = _penalty_sca(K, ws, ps, noise, p_max, cfg)
        w_bin, p, r = _finish(K, p_rel, w_rel, ws, noise, p_max)
        if name == "joint":
            best.trace = trace
            best.relaxed_w = w_rel
        if r > best.sum_rate:
            best = SicResult(w_bin, p, r, relaxed_w=w_rel, trace=best.trace, source=name)
    return best
