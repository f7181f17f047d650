"""Per-slot UAV position update: Dinkelbach outer loop around an SCA inner loop.

For a fixed association, decoding order and power, the next position L
maximises  sum_i R_i(L) / (eta * sum p + P_Y(v)),  v = (L - L_t)_xy / tau.
The Dinkelbach loop turns the ratio into  sum R - varpi * P_sum  and updates
varpi to the achieved ratio. Each parametric problem is attacked by SCA: the
gain, the rate and the propulsion power are replaced by tight concave
minorants around an expansion point, giving a convex program in

    L (3), G (N, user distances), R (served IRS distances),
    H (N, interference plus scaled noise), B (N, gains), V (speed slack).

All slack variables are scaled by their expansion values so the solver sees
quantities of order one. :func:`build_p2_surrogate` builds that program as
stated; :func:`optimize_step` solves the equivalent
:func:`build_reduced_surrogate`, where every slack is replaced by its tight
value and only the step remains (same optimum, far cheaper per slot).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel import GainCoefficients, gain_coefficients, gain_from_distances
from .convex import ConvexProgram, SolverError, phase_one, solve_convex
from .energy import power_from_speed
from .noma import LOG2E, interference, rates
from .scenario import Association, Scenario

log = logging.getLogger(__name__)

__all__ = [
    "DinkelbachState",
    "SurrogatePoint",
    "StepResult",
    "TrajectoryError",
    "surrogate_gain_linearization",
    "rate_taylor_bound",
    "expansion_point",
    "build_p2_surrogate",
    "build_reduced_surrogate",
    "slot_objective",
    "optimize_step",
]

H_CAP = 1e6
SUB_TOL = 1e-10


class TrajectoryError(RuntimeError):
    pass


@dataclass
class DinkelbachState:
    varpi: float = 0.0
    eps_outer: float = 1e-4
    eps_inner: float = 1e-4
    max_outer: int = 15
    max_inner: int = 30


@dataclass
class SurrogatePoint:
    """Expansion point of the inner loop (SI units)."""

    L: np.ndarray     # (3,)
    v: np.ndarray     # (2,) expansion velocity for the speed slack
    G: np.ndarray     # (N,)
    R: np.ndarray     # (S,) all IRSs, unserved ones unused
    H: np.ndarray     # (N,)
    B: np.ndarray     # (N,)
    V: float


@dataclass
class StepResult:
    position: np.ndarray
    varpi: list                      # varpi used by each outer iteration, then the final ratio
    outer_values: list               # sum R - varpi * P_sum after each outer iteration
    inner: list                      # per outer iteration: list of (surrogate, true objective)
    sum_rate: float = 0.0
    p_sum: float = 0.0
    converged: bool = False

    @property
    def final_gap(self) -> float:
        return self.outer_values[-1] if self.outer_values else 0.0

    @property
    def energy_efficiency(self) -> float:
        return self.sum_rate / self.p_sum


# --------------------------------------------------------------------------
# surrogate pieces
# --------------------------------------------------------------------------


def _gain_and_grad(G, R, coef_i, xi):
    """Gain of one user as a function of (G, R) with its partial derivatives."""
    a, b, c = coef_i
    Gx = G ** xi
    Gh = G ** (xi / 2.0)
    val = a / Gx + np.sum(b / R**2) + np.sum(c / (Gh * R))
    dG = -xi * a / (Gx * G) - np.sum(xi / 2.0 * c / (Gh * G * R))
    dR = -2.0 * b / R**3 - c / (Gh * R**2)
    return val, dG, dR


def surrogate_gain_linearization(G, R, point_G, point_R, coef_i, xi):
    """First-order expansion of the slack-variable gain about (point_G, point_R).

    ``coef_i`` = (a, b (S,), c (S,)) for one user. The gain is convex in
    (G, R), so the expansion never exceeds it.
    """
    val, dG, dR = _gain_and_grad(point_G, np.asarray(point_R, float), coef_i, xi)
    return val + dG * (G - point_G) + float(np.sum(dR * (np.asarray(R, float) - point_R)))


def rate_taylor_bound(H, H_bar, p):
    """Linear lower bound of log2(1 + p / H) in H, tight at H_bar."""
    return np.log2(1.0 + p / H_bar) - p * LOG2E * (H - H_bar) / (H_bar * (H_bar + p))


def slot_objective(L, L_t, coef: GainCoefficients, w0, p0, varpi, scenario: Scenario):
    """True parametric objective sum R(L) - varpi * P_sum(L) and its parts."""
    sc = scenario
    L = np.asarray(L, dtype=float)
    d_ug = np.linalg.norm(sc.user_pos - L, axis=1)
    d_ur = np.linalg.norm(sc.irs_pos - L, axis=1)
    gain = gain_from_distances(d_ug, d_ur, coef)
    sr = float(np.sum(rates(p0, w0, gain, sc.noise)))
    speed = float(np.hypot(*(L - L_t)[:2])) / sc.tau
    p_sum = sc.eta * float(np.sum(p0)) + power_from_speed(speed, sc.propulsion, sc.solver.v_floor)
    return sr - varpi * p_sum, sr, p_sum


def _expansion_velocity(L, L_t, v_hint, scenario: Scenario):
    """Velocity used to linearise the speed slack; always faster than twice the floor."""
    sc = scenario
    v_floor = sc.solver.v_floor
    v = (np.asarray(L, float) - L_t)[:2] / sc.tau
    if np.linalg.norm(v) >= 2.0 * v_floor:
        return v
    for cand in (v, v_hint):
        if cand is not None and np.linalg.norm(cand) > 1e-12:
            return 2.0 * v_floor * np.asarray(cand[:2], float) / np.linalg.norm(cand[:2])
    toward = sc.user_pos.mean(axis=0)[:2] - L_t[:2]
    if np.linalg.norm(toward) > 1e-12:
        return 2.0 * v_floor * toward / np.linalg.norm(toward)
    return np.array([2.0 * v_floor, 0.0])


def expansion_point(L, L_t, coef: GainCoefficients, w0, p0, scenario: Scenario,
                    v_hint=None) -> SurrogatePoint:
    sc = scenario
    L = np.asarray(L, dtype=float)
    G = np.linalg.norm(sc.user_pos - L, axis=1)
    R = np.linalg.norm(sc.irs_pos - L, axis=1)
    if np.any(G <= 0) or np.any(R <= 0):
        raise TrajectoryError("expansion point coincides with a user or IRS")
    B = gain_from_distances(G, R, coef)
    H = interference(p0, w0) + sc.noise / B
    v = _expansion_velocity(L, L_t, v_hint, sc)
    V = max(float(np.linalg.norm(v)), sc.solver.v_floor)
    return SurrogatePoint(L=L, v=v, G=G, R=R, H=H, B=B, V=V)


# --------------------------------------------------------------------------
# the convex subproblem
# --------------------------------------------------------------------------


@dataclass
class _Layout:
    N: int
    served: np.ndarray  # indices of IRSs with nonzero coefficients
    fix_z: bool

    @property
    def S(self):
        return self.served.size

    @property
    def n(self):
        return 3 + 3 * self.N + self.S + 1

    def slices(self):
        N, S = self.N, self.S
        u = slice(0, 3)
        g = slice(3, 3 + N)
        r = slice(3 + N, 3 + N + S)
        h = slice(3 + N + S, 3 + 2 * N + S)
        b = slice(3 + 2 * N + S, 3 + 3 * N + S)
        vv = 3 + 3 * N + S
        return u, g, r, h, b, vv


@dataclass
class SurrogateProgram:
    program: ConvexProgram
    layout: _Layout
    step: float           # tau * V_max
    L_t: np.ndarray
    point: SurrogatePoint
    extras: dict = field(default_factory=dict)

    def position(self, y) -> np.ndarray:
        return self.L_t + self.step * np.asarray(y[:3])


def build_p2_surrogate(point: SurrogatePoint, varpi: float, L_t, coef: GainCoefficients,
                       w0, p0, scenario: Scenario, start=None) -> SurrogateProgram:
    """Convex restriction of the parametric trajectory problem around ``point``.

    ``start`` is the position used to build a strictly feasible initial point
    (defaults to the expansion position).
    """
    sc = scenario
    N = sc.N
    L_t = np.asarray(L_t, dtype=float)
    step = sc.tau * sc.v_max
    served = np.flatnonzero(np.any(coef.b > 0, axis=1) | np.any(coef.c > 0, axis=1))
    fix_z = sc.z_max - sc.z_min < 1e-9
    lay = _Layout(N=N, served=served, fix_z=fix_z)
    su, sg, sr, sh, sb, svv = lay.slices()
    n = lay.n

    p0 = np.asarray(p0, dtype=float)
    I0 = interference(p0, w0)
    Gk, Rk, Hk, Bk = point.G, point.R[served], point.H, point.B
    Vk = point.V
    vk = point.v
    xi = coef.xi
    prop = sc.propulsion
    V_max = sc.v_max

    # rate surrogate: c0 - kk * (h - 1)
    c0 = np.log2(1.0 + p0 / Hk)
    kk = p0 * LOG2E / (Hk + p0)
    e_comm = sc.eta * float(np.sum(p0))
    blade_q = prop.P_blade * 3.0 * V_max**2 / prop.tip_speed**2
    drag_c = 0.5 * prop.drag_ratio * prop.air_density * prop.solidity * prop.disk_area * V_max**3
    ind = prop.P_induced * prop.v_rotor / Vk

    def objective(y, order):
        u = y[su]
        ux = u[:2]
        s = float(np.sqrt(ux @ ux))
        h = y[sh]
        vv = y[svv]
        p_fly = prop.P_blade + blade_q * s * s + ind / vv + drag_c * s**3
        f = float(np.sum(c0 - kk * (h - 1.0))) - varpi * (e_comm + p_fly)
        if order == 0:
            return f
        grad = np.zeros(n)
        grad[0:2] = -varpi * (2.0 * blade_q * ux + 3.0 * drag_c * s * ux)
        grad[sh] = -kk
        grad[svv] = varpi * ind / vv**2
        if order == 1:
            return f, grad
        H = np.zeros((n, n))
        blk = 2.0 * blade_q * np.eye(2)
        if s > 0:
            blk = blk + 3.0 * drag_c * (s * np.eye(2) + np.outer(ux, ux) / s)
        H[0:2, 0:2] = -varpi * blk
        H[svv, svv] = -varpi * 2.0 * ind / vv**3
        return f, grad, H

    # gain linearisation coefficients per user, in scaled variables
    lin_dg = np.zeros(N)
    lin_dr = np.zeros((N, lay.S))
    for i in range(N):
        coef_i = (coef.a[i], coef.b[served, i], coef.c[served, i])
        val, dG, dR = _gain_and_grad(Gk[i], Rk, coef_i, xi[i])
        lin_dg[i] = dG * Gk[i] / Bk[i]
        lin_dr[i] = dR * Rk / Bk[i]
    kappa = sc.noise / (Bk * Hk)
    i0 = I0 / Hk
    vk2 = float(vk @ vk)

    U = sc.user_pos
    Rpos = sc.irs_pos[served]
    m_c4, m_g, m_r, m_lin, m_h, m_v = 1, N, lay.S, N, N, 1
    m = m_c4 + m_g + m_r + m_lin + m_h + m_v
    o_g = 1
    o_r = o_g + N
    o_lin = o_r + lay.S
    o_h = o_lin + N
    o_v = o_h + N

    # constant Jacobian rows and Hessians
    J_const = np.zeros((m, n))
    H_const = np.zeros((m, n, n))
    H_const[0, 0:3, 0:3] = 2.0 * np.eye(3)
    for i in range(N):
        J_const[o_g + i, 3 + i] = -2.0
        H_const[o_g + i, 0:3, 0:3] = 2.0 * step**2 / Gk[i] ** 2 * np.eye(3)
    for k in range(lay.S):
        J_const[o_r + k, sr.start + k] = -2.0
        H_const[o_r + k, 0:3, 0:3] = 2.0 * step**2 / Rk[k] ** 2 * np.eye(3)
    for i in range(N):
        row = o_lin + i
        J_const[row, sb.start + i] = 1.0
        J_const[row, 3 + i] = -lin_dg[i]
        J_const[row, sr] = -lin_dr[i]
        J_const[o_h + i, sh.start + i] = -1.0
    J_const[o_v, svv] = 2.0 * Vk**2 / vk2
    H_const[o_v, svv, svv] = 2.0 * Vk**2 / vk2
    J_const[o_v, 0:2] = -2.0 * V_max * vk / vk2

    def ineq(y, order):
        u = y[su]
        L = L_t + step * u
        g = y[sg]
        r = y[sr]
        h = y[sh]
        b = y[sb]
        vv = y[svv]
        dU = L - U
        dR = L - Rpos
        out = np.empty(m)
        out[0] = u @ u - 1.0
        out[o_g:o_g + N] = np.sum(dU * dU, axis=1) / Gk**2 - 2.0 * g + 1.0
        out[o_r:o_r + lay.S] = np.sum(dR * dR, axis=1) / Rk**2 - 2.0 * r + 1.0
        out[o_lin:o_lin + N] = b - 1.0 - lin_dg * (g - 1.0) - lin_dr @ (r - 1.0)
        out[o_h:o_h + N] = i0 + kappa / b - h
        v = V_max * u[:2]
        out[o_v] = ((Vk * vv) ** 2 - vk2 - 2.0 * vk @ (v - vk)) / vk2
        if order == 0:
            return out
        J = J_const.copy()
        J[0, 0:3] = 2.0 * u
        J[o_g:o_g + N, 0:3] = 2.0 * step * dU / Gk[:, None] ** 2
        J[o_r:o_r + lay.S, 0:3] = 2.0 * step * dR / Rk[:, None] ** 2
        J[o_h + np.arange(N), sb.start + np.arange(N)] = -kappa / b**2
        J[o_v, svv] = 2.0 * Vk**2 * vv / vk2
        if order == 1:
            return out, J, None
        H = H_const.copy()
        H[o_h + np.arange(N), sb.start + np.arange(N), sb.start + np.arange(N)] = 2.0 * kappa / b**3
        return out, J, H

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    lower[sb] = 0.0
    upper[sh] = H_CAP
    lower[svv] = sc.solver.v_floor / Vk
    A_eq = b_eq = None
    if fix_z:
        A_eq = np.zeros((1, n))
        A_eq[0, 2] = 1.0
        b_eq = np.array([(sc.z_min - L_t[2]) / step])
    else:
        lower[2] = (sc.z_min - L_t[2]) / step
        upper[2] = (sc.z_max - L_t[2]) / step

    y0 = _strict_start(point, start, L_t, step, lay, sc, lin_dg, lin_dr, i0, kappa, Vk, vk,
                       vk2, Gk, Rk, Rpos, lower, upper)
    prog = ConvexProgram(objective, y0 if y0 is not None else np.zeros(n), ineq=ineq,
                         A_eq=A_eq, b_eq=b_eq, lower=lower, upper=upper)
    return SurrogateProgram(program=prog, layout=lay, step=step, L_t=L_t, point=point,
                            extras={"strict_start": y0 is not None, "c0": c0, "kk": kk})


def _strict_start(point, start, L_t, step, lay, sc, lin_dg, lin_dr, i0, kappa, Vk, vk, vk2,
                  Gk, Rk, Rpos, lower, upper):
    """Heuristic strictly feasible point near ``start``; None when that fails."""
    su, sg, sr, sh, sb, svv = lay.slices()
    L0 = np.asarray(point.L if start is None else start, dtype=float)
    u = (L0 - L_t) / step
    if np.allclose(u[:2], 0.0):
        # from the slot start, move along the expansion velocity
        u = np.zeros(3)
        u[:2] = sc.tau * vk / step * (1.0 - 1e-3)
    nrm = float(np.linalg.norm(u))
    if nrm >= 1.0 - 1e-7:
        u = u * (1.0 - 1e-6) / nrm
    if lay.fix_z:
        u[2] = (sc.z_min - L_t[2]) / step
    else:
        lo, hi = lower[2], upper[2]
        pad = 1e-6 * (hi - lo)
        u[2] = min(max(u[2], lo + pad), hi - pad)
        if np.linalg.norm(u) >= 1.0:
            return None
    L = L_t + step * u
    y = np.zeros(lay.n)
    y[su] = u
    dU = np.sum((L - sc.user_pos) ** 2, axis=1) / Gk**2
    dR = np.sum((L - Rpos) ** 2, axis=1) / Rk**2
    g = (dU + 1.0) / 2.0 + 1e-7
    r = (dR + 1.0) / 2.0 + 1e-7
    b = (1.0 + lin_dg * (g - 1.0) + lin_dr @ (r - 1.0)) * (1.0 - 1e-6)
    if np.any(b <= 0):
        return None
    h = (i0 + kappa / b) * (1.0 + 1e-6) + 1e-12
    if np.any(h >= H_CAP):
        return None
    v = sc.v_max * u[:2]
    rhs = vk2 + 2.0 * float(vk @ (v - vk))
    floor = sc.solver.v_floor
    if rhs <= floor**2 * (1.0 + 1e-6):
        return None
    vv = np.sqrt(rhs) * (1.0 - 1e-7) / Vk
    if vv <= floor / Vk * (1.0 + 1e-9):
        return None
    y[sg], y[sr], y[sh], y[sb], y[svv] = g, r, h, b, vv
    return y


def _phase_one_start(sp: SurrogateProgram, sc: Scenario):
    """Fallback strictly feasible point by a phase-I solve."""
    lay = sp.layout
    su, sg, sr, sh, sb, svv = lay.slices()
    prog = sp.program
    y = np.zeros(lay.n)
    y[sg] = 1.0
    y[sr] = 1.0
    y[sb] = 0.5
    y[sh] = np.minimum(2.0, H_CAP / 2)
    y[svv] = max(1.0, prog.lower[svv] * 2.0)
    if not lay.fix_z:
        y[2] = 0.5 * (prog.lower[2] + prog.upper[2])
    else:
        y[2] = float(prog.b_eq[0])
    return phase_one(prog.ineq, y, prog.A_eq, prog.b_eq, prog.lower, prog.upper)


@dataclass
class ReducedProgram:
    """The surrogate with every slack at its optimal (tight) value.

    At the optimum of the full program G and R sit on their C14/C15 bounds,
    B on the linearised gain, H on the coupling bound and the speed slack on
    the C18 bound, so the program collapses to the step u = (L - L_t) / (tau V_max).
    Same optimum, three variables.
    """

    program: ConvexProgram
    step: float
    L_t: np.ndarray
    slacks: object          # u -> dict of slack values (G, R, B, H, V)
    strict_start: bool

    def position(self, y) -> np.ndarray:
        return self.L_t + self.step * np.asarray(y[:3])


def build_reduced_surrogate(point: SurrogatePoint, varpi: float, L_t, coef: GainCoefficients,
                            w0, p0, scenario: Scenario, start=None) -> ReducedProgram:
    sc = scenario
    N = sc.N
    L_t = np.asarray(L_t, dtype=float)
    step = sc.tau * sc.v_max
    served = np.flatnonzero(np.any(coef.b > 0, axis=1) | np.any(coef.c > 0, axis=1))
    fix_z = sc.z_max - sc.z_min < 1e-9
    p0 = np.asarray(p0, dtype=float)
    I0 = interference(p0, w0)
    Gk, Rk, Hk, Bk = point.G, point.R[served], point.H, point.B
    Vk, vk = point.V, point.v
    prop = sc.propulsion
    V_max = sc.v_max

    c0 = np.log2(1.0 + p0 / Hk)
    kk = p0 * LOG2E / (Hk + p0)
    e_comm = sc.eta * float(np.sum(p0))
    blade_q = prop.P_blade * 3.0 * V_max**2 / prop.tip_speed**2
    drag_c = 0.5 * prop.drag_ratio * prop.air_density * prop.solidity * prop.disk_area * V_max**3
    ind = prop.P_induced * prop.v_rotor / Vk

    lin_dg = np.zeros(N)
    lin_dr = np.zeros((N, served.size))
    for i in range(N):
        coef_i = (coef.a[i], coef.b[served, i], coef.c[served, i])
        _, dG, dR = _gain_and_grad(Gk[i], Rk, coef_i, coef.xi[i])
        lin_dg[i] = dG * Gk[i] / Bk[i]
        lin_dr[i] = dR * Rk / Bk[i]
    kappa = sc.noise / (Bk * Hk)
    i0 = I0 / Hk
    vk2 = float(vk @ vk)
    U = sc.user_pos
    Rpos = sc.irs_pos[served]
    # curvature of the scaled linearised gain: l_i is concave with Hessian lcurv_i * I
    lcurv = step**2 * (lin_dg / Gk**2 + lin_dr @ (1.0 / Rk**2))
    # speed slack squared, scaled: a(u) = a0 + a_lin . u_xy
    a_lin = 2.0 * V_max * vk / Vk**2
    a0 = -vk2 / Vk**2
    a_floor = (sc.solver.v_floor / Vk) ** 2

    cache = {}

    def parts(u):
        # objective and constraints are evaluated at the same points; share the work
        key = u.tobytes()
        hit = cache.get(key)
        if hit is not None:
            return hit
        out = _parts(u)
        cache.clear()
        cache[key] = out
        return out

    def _parts(u):
        L = L_t + step * u
        dU = L - U
        dR = L - Rpos
        g = (np.sum(dU * dU, axis=1) / Gk**2 + 1.0) / 2.0
        r = (np.sum(dR * dR, axis=1) / Rk**2 + 1.0) / 2.0
        ell = 1.0 + lin_dg * (g - 1.0) + lin_dr @ (r - 1.0)
        a = a0 + a_lin @ u[:2]
        return dU, dR, g, r, ell, a

    def objective(y, order):
        u = y
        ux = u[:2]
        s = float(np.sqrt(ux @ ux))
        dU, dR, g, r, ell, a = parts(u)
        if np.any(ell <= 0) or a <= 0:
            return -np.inf if order == 0 else (-np.inf, np.zeros(3), np.zeros((3, 3)))
        h = i0 + kappa / ell
        vv = np.sqrt(a)
        f = (float(np.sum(c0 - kk * (h - 1.0)))
             - varpi * (e_comm + prop.P_blade + blade_q * s * s + ind / vv + drag_c * s**3))
        if order == 0:
            return f
        # d ell / du (N, 3)
        dl = step * (lin_dg[:, None] * dU / Gk[:, None] ** 2
                     + lin_dr @ (dR / Rk[:, None] ** 2))
        dh = -(kappa / ell**2)[:, None] * dl
        grad = -kk @ dh
        grad[:2] -= varpi * (2.0 * blade_q * ux + 3.0 * drag_c * s * ux)
        grad[:2] += varpi * 0.5 * ind * a ** -1.5 * a_lin
        if order == 1:
            return f, grad
        wts = kk * kappa
        Hm = -(np.einsum("i,ij,ik->jk", 2.0 * wts / ell**3, dl, dl)
               - np.sum(wts / ell**2 * lcurv) * np.eye(3))
        blk = 2.0 * blade_q * np.eye(2)
        if s > 0:
            blk = blk + 3.0 * drag_c * (s * np.eye(2) + np.outer(ux, ux) / s)
        Hm[:2, :2] -= varpi * blk
        Hm[:2, :2] -= varpi * 0.75 * ind * a ** -2.5 * np.outer(a_lin, a_lin)
        return f, grad, Hm

    m = 2 + N
    H_const = np.zeros((m, 3, 3))
    H_const[0] = 2.0 * np.eye(3)
    H_const[2:] = -lcurv[:, None, None] * np.eye(3)

    def ineq(y, order):
        u = y
        dU, dR, g, r, ell, a = parts(u)
        out = np.empty(m)
        out[0] = u @ u - 1.0
        out[1] = a_floor - a
        out[2:] = -ell
        if order == 0:
            return out
        J = np.zeros((m, 3))
        J[0] = 2.0 * u
        J[1, :2] = -a_lin
        J[2:] = -step * (lin_dg[:, None] * dU / Gk[:, None] ** 2
                         + lin_dr @ (dR / Rk[:, None] ** 2))
        return out, J, (H_const if order == 2 else None)

    lower = np.full(3, -np.inf)
    upper = np.full(3, np.inf)
    A_eq = b_eq = None
    if fix_z:
        A_eq = np.array([[0.0, 0.0, 1.0]])
        b_eq = np.array([(sc.z_min - L_t[2]) / step])
    else:
        lower[2] = (sc.z_min - L_t[2]) / step
        upper[2] = (sc.z_max - L_t[2]) / step

    def slacks(y):
        dU, dR, g, r, ell, a = parts(np.asarray(y, float))
        R_all = point.R.copy()
        R_all[served] = r * Rk
        B = ell * Bk
        return {"G": g * Gk, "R": R_all, "B": B, "H": (i0 + kappa / ell) * Hk,
                "V": float(np.sqrt(max(a, 0.0))) * Vk}

    u0 = _reduced_start(point, start, L_t, step, sc, lower, upper, fix_z, parts, a_floor)
    prog = ConvexProgram(objective, u0 if u0 is not None else np.zeros(3), ineq=ineq,
                         A_eq=A_eq, b_eq=b_eq, lower=lower, upper=upper)
    return ReducedProgram(program=prog, step=step, L_t=L_t, slacks=slacks,
                          strict_start=u0 is not None)


def _reduced_start(point, start, L_t, step, sc, lower, upper, fix_z, parts, a_floor):
    """Strictly feasible step near ``start``; None when the heuristics fail.

    A start well inside the step ball and altitude box is tried first since
    interior-point iterations crawl when they begin next to a boundary.
    """
    L0 = np.asarray(point.L if start is None else start, dtype=float)
    base = (L0 - L_t) / step
    if np.allclose(base[:2], 0.0):
        base = np.zeros(3)
        base[:2] = sc.tau * point.v / step * (1.0 - 1e-3)
    for radius, frac in ((0.9, 0.05), (1.0 - 1e-6, 1e-6)):
        u = base.copy()
        nrm = float(np.linalg.norm(u))
        if nrm > radius:
            u = u * radius / nrm
        if fix_z:
            u[2] = (sc.z_min - L_t[2]) / step
        else:
            pad = frac * min(upper[2] - lower[2], 1.0)
            u[2] = min(max(u[2], lower[2] + pad), upper[2] - pad)
        if np.linalg.norm(u) >= 1.0:
            continue
        _, _, _, _, ell, a = parts(u)
        if np.all(ell > 0) and a > a_floor * (1.0 + 1e-9):
            return u
    return None


def _clamp_position(L, L_t, sc: Scenario):
    """Remove solver round-off so C4 and the altitude box hold exactly."""
    L = np.array(L, dtype=float)
    L[2] = min(max(L[2], sc.z_min), sc.z_max)
    d = L - L_t
    lim = sc.tau * sc.v_max
    nrm = float(np.linalg.norm(d))
    if nrm > lim:
        d = d * (lim / nrm)
        L = L_t + d
        L[2] = min(max(L[2], sc.z_min), sc.z_max)
    return L


# --------------------------------------------------------------------------
# Algorithm driver
# --------------------------------------------------------------------------


def optimize_step(L_t, assoc: Association, w0, p0, scenario: Scenario,
                  dk: Optional[DinkelbachState] = None, v_prev=None) -> StepResult:
    """Next UAV position for one slot.

    ``v_prev`` is the velocity of the previous leg; it seeds the speed-slack
    linearisation at the first expansion, where the candidate velocity is zero.
    """
    sc = scenario
    cfg = sc.solver
    if dk is None:
        dk = DinkelbachState(eps_outer=cfg.eps_outer, eps_inner=cfg.eps_inner,
                             max_outer=cfg.max_outer, max_inner=cfg.max_inner)
    L_t = np.asarray(L_t, dtype=float)
    if not (sc.z_min - 1e-9 <= L_t[2] <= sc.z_max + 1e-9):
        raise TrajectoryError("slot start violates the altitude bounds")
    coef = gain_coefficients(assoc, sc)
    w0 = np.asarray(w0, dtype=float)
    p0 = np.asarray(p0, dtype=float)

    if sc.tau * sc.v_max < 1e-9:
        _, sr, ps = slot_objective(L_t, L_t, coef, w0, p0, 0.0, sc)
        varpi = sr / ps
        return StepResult(position=L_t.copy(), varpi=[0.0, varpi], outer_values=[sr, 0.0],
                          inner=[[], []], sum_rate=sr, p_sum=ps, converged=True)

    varpi = dk.varpi
    L_cur = L_t.copy()
    varpis, outer_vals, inner_all = [], [], []
    converged = False
    for outer in range(dk.max_outer):
        L_cur, trace = _inner_sca(L_cur, L_t, varpi, coef, w0, p0, sc, dk, v_prev)
        inner_all.append(trace)
        F, sr, ps = slot_objective(L_cur, L_t, coef, w0, p0, varpi, sc)
        varpis.append(varpi)
        outer_vals.append(F)
        log.debug("dinkelbach outer=%d varpi=%.6g F=%.3g", outer, varpi, F)
        new_varpi = sr / ps
        if F <= dk.eps_outer:
            converged = True
            varpi = max(varpi, new_varpi)
            break
        varpi = new_varpi
    _, sr, ps = slot_objective(L_cur, L_t, coef, w0, p0, varpi, sc)
    varpis.append(sr / ps)
    return StepResult(position=L_cur, varpi=varpis, outer_values=outer_vals, inner=inner_all,
                      sum_rate=sr, p_sum=ps, converged=converged)


def _inner_sca(L_start, L_t, varpi, coef, w0, p0, sc, dk, v_prev):
    """SCA iterations for a fixed varpi; returns the best accepted position and a trace."""
    L_acc = np.asarray(L_start, dtype=float)
    f_acc, _, _ = slot_objective(L_acc, L_t, coef, w0, p0, varpi, sc)
    trace = [(float("nan"), f_acc)]
    for it in range(dk.max_inner):
        point = expansion_point(L_acc, L_t, coef, w0, p0, sc, v_hint=v_prev)
        rp = build_reduced_surrogate(point, varpi, L_t, coef, w0, p0, sc)
        prog = rp.program
        try:
            if not rp.strict_start:
                prog.x0 = phase_one(prog.ineq, prog.x0, prog.A_eq, prog.b_eq,
                                    prog.lower, prog.upper)
            sol = solve_convex(prog, tol=SUB_TOL, method="primal-dual")
        except SolverError as exc:
            log.debug("trajectory subproblem failed (varpi=%.4g, it=%d): %s", varpi, it, exc)
            break
        rp_pos = rp.position(sol.x)
        L_new = _clamp_position(rp_pos, L_t, sc)
        f_new, _, _ = slot_objective(L_new, L_t, coef, w0, p0, varpi, sc)
        log.debug("sca it=%d surrogate=%.8g true=%.8g", it, sol.objective, f_new)
        if not f_new >= f_acc:
            break
        trace.append((sol.objective, f_new))
        gain = f_new - f_acc
        L_acc, f_acc = L_new, f_new
        if gain <= dk.eps_inner:
            break
    return L_acc, trace
