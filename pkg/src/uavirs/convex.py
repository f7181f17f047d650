"""Small dense convex solvers: log-barrier Newton for smooth programs and LPs.

Problems here are tiny (a few dozen variables), so the implementation favours
robustness and determinism over speed: dense linear algebra, no randomisation,
equalities eliminated through a fixed null-space basis.

Callbacks follow one convention. ``fun(x, order)`` returns the value when
``order == 0``, ``(value, grad)`` when ``order == 1`` and
``(value, grad, hess)`` when ``order == 2``. Inequality callbacks return the
stacked vector of constraint values ``g(x)`` (feasible iff every ``g <= 0``),
its Jacobian and a stack of Hessians (or ``None`` when all are zero).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

__all__ = [
    "SolverError",
    "Infeasible",
    "Unbounded",
    "IterationLimit",
    "InfeasibleStart",
    "NumericalFailure",
    "ConvexProgram",
    "LinearProgram",
    "Solution",
    "solve_convex",
    "solve_lp",
    "phase_one",
]

MU = 10.0
REG_FLOOR = 1e-10
ARMIJO = 0.01
BACKTRACK = 0.5
CENTER_TOL = 1e-8  # Newton decrement at which a barrier subproblem counts as centred


class SolverError(RuntimeError):
    """Base class for solver failures."""


class Infeasible(SolverError):
    pass


class Unbounded(SolverError):
    pass


class IterationLimit(SolverError):
    pass


class InfeasibleStart(SolverError):
    pass


class NumericalFailure(SolverError):
    pass


Callback = Callable[[np.ndarray, int], object]


@dataclass
class ConvexProgram:
    """Maximise a smooth concave objective subject to smooth convex constraints.

    ``lower``/``upper`` are treated as domain bounds: they are never relaxed,
    so callbacks may assume them (e.g. a variable stays positive).
    """

    objective: Callback
    x0: np.ndarray
    ineq: Optional[Callback] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        n = self.x0.size
        if self.A_eq is not None:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
            if self.A_eq.shape != (self.b_eq.size, n):
                raise ValueError("equality system has inconsistent dimensions")
        for name in ("lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                v = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
                setattr(self, name, v)


@dataclass
class LinearProgram:
    """maximise ``c @ x + offset`` s.t. ``A_ub x <= b_ub``, ``A_eq x = b_eq``, bounds."""

    c: np.ndarray
    A_ub: Optional[np.ndarray] = None
    b_ub: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    offset: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.A_ub is None:
            self.A_ub = np.zeros((0, n))
            self.b_ub = np.zeros(0)
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        self.A_ub = np.asarray(self.A_ub, dtype=float).reshape(-1, n)
        self.b_ub = np.asarray(self.b_ub, dtype=float).ravel()
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if self.A_ub.shape[0] != self.b_ub.size or self.A_eq.shape[0] != self.b_eq.size:
            raise ValueError("constraint matrices and right-hand sides disagree")
        lo = -np.inf if self.lower is None else self.lower
        hi = np.inf if self.upper is None else self.upper
        self.lower = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()

    def value(self, x) -> float:
        return float(self.c @ np.asarray(x, dtype=float) + self.offset)


@dataclass
class Solution:
    """Solver output; unpacks as ``x, objective``."""

    x: np.ndarray
    objective: float
    gap: float = 0.0
    newton_steps: int = 0
    kkt_residual: float = 0.0
    history: list = field(default_factory=list, repr=False)

    def __iter__(self):
        yield self.x
        yield self.objective


# --------------------------------------------------------------------------
# core barrier machinery
# --------------------------------------------------------------------------


def _nullspace(A: Optional[np.ndarray], n: int):
    if A is None or A.shape[0] == 0:
        return None
    Z = sla.null_space(A)
    return Z


def _box_constraints(lower, upper, n):
    """Return (rows, signs, rhs) such that sign*x[row] - rhs <= 0."""
    rows, signs, rhs = [], [], []
    if lower is not None:
        for j in np.flatnonzero(np.isfinite(lower)):
            rows.append(j)
            signs.append(-1.0)
            rhs.append(-lower[j])
    if upper is not None:
        for j in np.flatnonzero(np.isfinite(upper)):
            rows.append(j)
            signs.append(1.0)
            rhs.append(upper[j])
    return np.asarray(rows, dtype=int), np.asarray(signs), np.asarray(rhs)


class _Stacked:
    """Inequality callback combined with box rows into one ``g(x) <= 0`` system."""

    def __init__(self, ineq, lower, upper, n):
        self.ineq = ineq
        self.n = n
        self.rows, self.signs, self.rhs = _box_constraints(lower, upper, n)
        jac = np.zeros((self.rows.size, n))
        jac[np.arange(self.rows.size), self.rows] = self.signs
        self.box_jac = jac

    def __call__(self, x, order):
        box = self.signs * x[self.rows] - self.rhs
        if self.ineq is None:
            if order == 0:
                return box
            return box, self.box_jac, None
        out = self.ineq(x, order)
        if order == 0:
            return np.concatenate([np.atleast_1d(out), box])
        g, J = out[0], out[1]
        H = out[2] if order == 2 else None
        g = np.atleast_1d(np.asarray(g, dtype=float))
        J = np.asarray(J, dtype=float).reshape(g.size, self.n)
        if H is not None:
            H = np.asarray(H, dtype=float).reshape(g.size, self.n, self.n)
            H = np.concatenate([H, np.zeros((self.rows.size, self.n, self.n))])
        return np.concatenate([g, box]), np.vstack([J, self.box_jac]), H


def _newton_direction(H, g, scale):
    """Solve (H + lam I) d = -g, adding only as much regularisation as needed.

    The first attempt uses the absolute floor; on failure the shift restarts
    relative to the Hessian scale and grows tenfold per retry.
    """
    k = H.shape[0]
    eye = np.eye(k)
    lam = REG_FLOOR
    for attempt in range(40):
        try:
            c, low = sla.cho_factor(H + lam * eye, check_finite=False)
            d = -sla.cho_solve((c, low), g, check_finite=False)
            if np.all(np.isfinite(d)):
                return d
        except (np.linalg.LinAlgError, ValueError):
            pass
        lam = REG_FLOOR * max(scale, 1.0) if attempt == 0 else lam * 10.0
    raise NumericalFailure("Hessian not positive definite after regularisation")


def _barrier(objective, cons, x0, Z, tol, t0=1.0, max_newton=2000,
             stop=None, unbounded_scale=None, mu=MU):
    """Path-following log-barrier method (maximisation of ``objective``).

    Returns (x, gap, newton_steps, kkt_residual). ``stop(x)`` may end the run
    early (used by phase I).
    """
    x = np.array(x0, dtype=float)
    g0 = cons(x, 0)
    m = g0.size
    if np.any(~np.isfinite(g0)) or np.any(g0 >= 0):
        raise InfeasibleStart("starting point is not strictly feasible")
    f0 = objective(x, 0)
    if not np.isfinite(f0):
        raise InfeasibleStart("objective undefined at starting point")

    def phi(xx, t):
        gg = cons(xx, 0)
        if np.any(~np.isfinite(gg)) or np.any(gg >= 0):
            return np.inf
        ff = objective(xx, 0)
        if not np.isfinite(ff):
            return np.inf
        return -t * ff - np.sum(np.log(-gg))

    t = t0
    steps = 0
    resid = 0.0
    while True:
        # centering
        while True:
            if steps >= max_newton:
                raise IterationLimit(f"no convergence after {steps} Newton steps")
            f, gf, Hf = objective(x, 2)
            g, J, Hg = cons(x, 2)
            inv = 1.0 / (-g)
            grad = -t * gf + J.T @ inv
            hess = -t * Hf + (J.T * inv**2) @ J
            if Hg is not None:
                hess = hess + np.tensordot(inv, Hg, axes=1)
            if Z is not None:
                gz = Z.T @ grad
                hz = Z.T @ hess @ Z
            else:
                gz, hz = grad, hess
            scale = float(np.max(np.abs(np.diag(hz)))) if hz.size else 1.0
            dz = _newton_direction(hz, gz, scale)
            dec2 = float(-gz @ dz)
            resid = float(np.linalg.norm(gz)) / t
            if dec2 / 2.0 <= CENTER_TOL or not np.isfinite(dec2):
                break
            dx = Z @ dz if Z is not None else dz
            p0 = -t * f - np.sum(np.log(-g))
            s = 1.0
            slope = float(grad @ dx)
            while True:
                xn = x + s * dx
                pn = phi(xn, t)
                if pn <= p0 + ARMIJO * s * slope:
                    break
                s *= BACKTRACK
                if s < 1e-16:
                    break
            steps += 1
            if s < 1e-16 or not pn < p0 or np.array_equal(xn, x):
                # no progress possible at this precision: treat as centred
                break
            x = xn
            if unbounded_scale is not None and np.linalg.norm(x) > unbounded_scale:
                raise Unbounded("iterates diverge: problem appears unbounded")
            if stop is not None and stop(x):
                return x, m / t, steps, resid
        gap = m / t
        if stop is not None and stop(x):
            return x, gap, steps, resid
        if m == 0 or gap <= tol:
            return x, gap, steps, resid
        t *= mu


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------


def _eq_start(A, b, x):
    """Closest point to ``x`` satisfying A x = b."""
    if A is None or A.shape[0] == 0:
        return x
    r = b - A @ x
    dx, *_ = np.linalg.lstsq(A, r, rcond=None)
    return x + dx


def phase_one(ineq, x0, A_eq=None, b_eq=None, lower=None, upper=None, relax_bounds=False,
              tol=1e-8):
    """Find a point strictly satisfying ``ineq(x) < 0`` (and bounds).

    Bounds stay hard unless ``relax_bounds``; ``x0`` is first moved onto the
    equality set. Raises :class:`Infeasible` when no strictly feasible point
    exists.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    x0 = _eq_start(A_eq, b_eq, x0)
    if relax_bounds:
        soft = _Stacked(ineq, lower, upper, n)
        hard = _Stacked(None, None, None, n)
    else:
        soft = _Stacked(ineq, None, None, n)
        hard = _Stacked(None, lower, upper, n)
        if np.any(hard(x0, 0) >= 0):
            raise InfeasibleStart("start violates domain bounds")
    g0 = soft(x0, 0)
    if g0.size == 0 or np.max(g0) < 0:
        return x0
    s0 = float(np.max(g0)) + 1.0
    s_floor = -1.0 - abs(s0)

    def obj(z, order):
        if order == 0:
            return -z[-1]
        gr = np.zeros(n + 1)
        gr[-1] = -1.0
        if order == 1:
            return -z[-1], gr
        return -z[-1], gr, np.zeros((n + 1, n + 1))

    def cons(z, order):
        xx, s = z[:n], z[-1]
        if order == 0:
            return np.concatenate([soft(xx, 0) - s, hard(xx, 0), [s_floor - s]])
        g, J, H = soft(xx, 2)
        gh, Jh, _ = hard(xx, 2)
        m1, m2 = g.size, gh.size
        G = np.concatenate([g - s, gh, [s_floor - s]])
        JJ = np.zeros((m1 + m2 + 1, n + 1))
        JJ[:m1, :n] = J
        JJ[:m1, -1] = -1.0
        JJ[m1:m1 + m2, :n] = Jh
        JJ[-1, -1] = -1.0
        HH = None
        if H is not None:
            HH = np.zeros((m1 + m2 + 1, n + 1, n + 1))
            HH[:m1, :n, :n] = H
        return G, JJ, HH

    Z = _nullspace(A_eq, n)
    Zs = None
    if Z is not None:
        Zs = np.zeros((n + 1, Z.shape[1] + 1))
        Zs[:n, :-1] = Z
        Zs[-1, -1] = 1.0
    z0 = np.append(x0, s0)

    def done(z):
        return bool(np.max(soft(z[:n], 0)) < 0)

    z, *_ = _barrier(obj, cons, z0, Zs, tol, stop=done)
    x = z[:n]
    if not done(z):
        raise Infeasible("no strictly feasible point (phase I optimum >= 0)")
    return x


def _primal_dual(objective, cons, x0, Z, tol, max_iter=200, mu=MU):
    """Primal-dual interior-point iterations (maximisation of ``objective``).

    Primal iterates stay strictly feasible; the residual norm of the perturbed
    KKT system must drop at every step. Returns (x, gap, iterations, residual).
    """
    x = np.array(x0, dtype=float)
    g = cons(x, 0)
    m = g.size
    lam = 1.0 / (-g)

    def reduced(v):
        return Z.T @ v if Z is not None else v

    def residual(xx, ll, t):
        _, gf = objective(xx, 1)
        gg, J, _ = cons(xx, 1)
        return np.concatenate([reduced(-gf + J.T @ ll), -ll * gg - 1.0 / t])

    for it in range(max_iter):
        _, gf, Hf = objective(x, 2)
        g, J, Hg = cons(x, 2)
        eta = float(-g @ lam)
        rd = reduced(-gf + J.T @ lam)
        rd_norm = float(np.linalg.norm(rd))
        if eta <= tol and rd_norm <= 1e-9 * max(1.0, float(np.linalg.norm(gf))):
            return x, eta, it, rd_norm
        t = mu * m / eta
        d = 1.0 / (-g)
        H = -Hf + (J.T * (lam * d)) @ J
        if Hg is not None:
            H = H + np.tensordot(lam, Hg, axes=1)
        grad = -gf + J.T @ (d / t)
        if Z is not None:
            hz = Z.T @ H @ Z
            dx = Z @ _newton_direction(hz, Z.T @ grad, float(np.max(np.abs(np.diag(hz)))))
        else:
            dx = _newton_direction(H, grad, float(np.max(np.abs(np.diag(H)))))
        dlam = -lam + d / t + lam * d * (J @ dx)
        neg = dlam < 0
        s = min(1.0, 0.99 * float(np.min(-lam[neg] / dlam[neg]))) if np.any(neg) else 1.0
        while True:
            gn = cons(x + s * dx, 0)
            if np.all(np.isfinite(gn)) and np.all(gn < 0):
                break
            s *= BACKTRACK
            if s < 1e-16:
                raise NumericalFailure("primal-dual step cannot stay feasible")
        r0 = float(np.linalg.norm(np.concatenate([rd, -lam * g - 1.0 / t])))
        while True:
            r1 = residual(x + s * dx, lam + s * dlam, t)
            if np.all(np.isfinite(r1)) and np.linalg.norm(r1) <= (1.0 - ARMIJO * s) * r0:
                break
            s *= BACKTRACK
            if s < 1e-16:
                raise NumericalFailure("primal-dual residual stalls")
        x = x + s * dx
        lam = lam + s * dlam
    raise IterationLimit(f"primal-dual method did not converge in {max_iter} iterations")


def solve_convex(cp: ConvexProgram, tol: float = 1e-8, max_newton: int = 2000,
                 t0: float = 1.0, mu: float = MU, method: str = "barrier") -> Solution:
    """Maximise ``cp.objective`` with an interior-point method.

    ``method`` is ``"barrier"`` (log-barrier path following) or
    ``"primal-dual"``; the latter falls back to the barrier path if it stalls.
    ``cp.x0`` must be strictly feasible; call :func:`phase_one` first otherwise.
    """
    if method not in ("barrier", "primal-dual"):
        raise ValueError(f"unknown method {method!r}")
    n = cp.x0.size
    cons = _Stacked(cp.ineq, cp.lower, cp.upper, n)
    x0 = cp.x0
    if cp.A_eq is not None and np.max(np.abs(cp.A_eq @ x0 - cp.b_eq), initial=0) > 1e-9:
        raise InfeasibleStart("starting point violates equality constraints")
    g0 = cons(x0, 0)
    if g0.size and (np.any(~np.isfinite(g0)) or np.max(g0) >= 0):
        raise InfeasibleStart("starting point is not strictly feasible")
    Z = _nullspace(cp.A_eq, n)
    f_start = float(cp.objective(x0, 0))
    result = None
    if method == "primal-dual" and g0.size:
        try:
            result = _primal_dual(cp.objective, cons, x0, Z, tol, mu=mu)
        except SolverError:
            result = None
    if result is None:
        result = _barrier(cp.objective, cons, x0, Z, tol, t0=t0, max_newton=max_newton, mu=mu)
    x, gap, steps, resid = result
    f = float(cp.objective(x, 0))
    if f < f_start:
        # the iterates never beat the start here; keep the start
        x, f = x0.copy(), f_start
    return Solution(x=x, objective=f, gap=gap, newton_steps=steps, kkt_residual=resid)


def _lp_barrier(c, G, h, x0, Z, tol, max_newton, stop=None, big=None):
    """Barrier path for ``max c@x s.t. G x <= h`` on the affine set x0 + range(Z)."""
    x = np.array(x0, dtype=float)
    m = G.shape[0]
    r = h - G @ x
    if np.any(r <= 0):
        raise InfeasibleStart("starting point is not strictly feasible")
    t = 1.0
    steps = 0
    resid = 0.0
    while True:
        while True:
            if steps >= max_newton:
                raise IterationLimit(f"no convergence after {steps} Newton steps")
            r = h - G @ x
            inv = 1.0 / r
            grad = -t * c + G.T @ inv
            Gs = G * inv[:, None]
            hess = Gs.T @ Gs
            if Z is not None:
                gz, hz = Z.T @ grad, Z.T @ hess @ Z
            else:
                gz, hz = grad, hess
            scale = float(np.max(np.abs(np.diag(hz)))) if hz.size else 1.0
            dz = _newton_direction(hz, gz, scale)
            dec2 = float(-gz @ dz)
            resid = float(np.linalg.norm(gz)) / t
            if not np.isfinite(dec2) or dec2 / 2.0 <= 1e-12:
                break
            dx = Z @ dz if Z is not None else dz
            Gd = G @ dx
            pos = Gd > 0
            s = 1.0
            if np.any(pos):
                s = min(1.0, 0.99 * float(np.min(r[pos] / Gd[pos])))
            p0 = -t * float(c @ x) - float(np.sum(np.log(r)))
            slope = float(grad @ dx)
            while True:
                xn = x + s * dx
                rn = h - G @ xn
                if np.all(rn > 0):
                    pn = -t * float(c @ xn) - float(np.sum(np.log(rn)))
                    if pn <= p0 + ARMIJO * s * slope:
                        break
                s *= BACKTRACK
                if s < 1e-16:
                    break
            steps += 1
            if s < 1e-16 or not pn < p0 or np.array_equal(xn, x):
                break
            x = xn
            if big is not None and np.linalg.norm(x) > big:
                raise Unbounded("iterates diverge: problem appears unbounded")
            if stop is not None and stop(x):
                return x, m / t, steps, resid
        if stop is not None and stop(x):
            return x, m / t, steps, resid
        if m == 0 or m / t <= tol:
            return x, m / t, steps, resid
        t *= MU


def _lp_phase_one(G, h, x0, Z, tol, max_newton):
    """Strictly feasible point of G x < h on x0 + range(Z), or Infeasible."""
    r0 = h - G @ x0
    if r0.size == 0 or np.min(r0) > 0:
        return x0
    n = x0.size
    s0 = float(np.max(-r0)) + 1.0
    # variables (x, s): G x - s <= h, -s <= 1 + s0 (keeps the program bounded)
    Gs = np.block([[G, -np.ones((G.shape[0], 1))], [np.zeros((1, n)), -np.ones((1, 1))]])
    hs = np.append(h, 1.0 + s0)
    cs = np.zeros(n + 1)
    cs[-1] = -1.0
    Zs = None
    if Z is not None:
        Zs = np.zeros((n + 1, Z.shape[1] + 1))
        Zs[:n, :-1] = Z
        Zs[-1, -1] = 1.0
    z0 = np.append(x0, s0)

    def done(z):
        return bool(np.min(h - G @ z[:n]) > 0)

    z, *_ = _lp_barrier(cs, Gs, hs, z0, Zs, tol, max_newton, stop=done)
    if not done(z):
        raise Infeasible("linear program has no strictly feasible point")
    return z[:n]


def solve_lp(lp: LinearProgram, tol: float = 1e-8, max_newton: int = 2000) -> Solution:
    """Solve a linear program with the barrier method and a phase-I start.

    The cost vector is rescaled to unit max-norm internally, so ``tol`` bounds
    the duality gap relative to ``max|c|`` when that exceeds one.
    """
    n = lp.c.size
    lo, hi = lp.lower, lp.upper
    fin_lo, fin_hi = np.flatnonzero(np.isfinite(lo)), np.flatnonzero(np.isfinite(hi))
    G = np.vstack([lp.A_ub, -np.eye(n)[fin_lo], np.eye(n)[fin_hi]])
    h = np.concatenate([lp.b_ub, -lo[fin_lo], hi[fin_hi]])
    scale = max(float(np.max(np.abs(lp.c), initial=0.0)), 1.0)
    c = lp.c / scale

    x0 = np.zeros(n)
    both = np.isfinite(lo) & np.isfinite(hi)
    x0[both] = 0.5 * (lo[both] + hi[both])
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    x0[only_lo] = lo[only_lo] + 1.0
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    x0[only_hi] = hi[only_hi] - 1.0
    Z = None
    if lp.A_eq.shape[0]:
        aug = np.column_stack([lp.A_eq, lp.b_eq])
        if np.linalg.matrix_rank(aug) > np.linalg.matrix_rank(lp.A_eq):
            raise Infeasible("equality constraints are inconsistent")
        x0 = _eq_start(lp.A_eq, lp.b_eq, x0)
        Z = _nullspace(lp.A_eq, n)
    x_feas = _lp_phase_one(G, h, x0, Z, tol, max_newton)
    big = 1e9 * (1.0 + float(np.linalg.norm(x_feas)))
    x, gap, steps, resid = _lp_barrier(c, G, h, x_feas, Z, tol, max_newton, big=big)
    return Solution(x=x, objective=lp.value(x), gap=gap * scale, newton_steps=steps,
                    kkt_residual=resid * scale)
