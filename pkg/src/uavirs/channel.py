"""Line-of-sight geometry, IRS segmentation and composite channel gains.

Each IRS is a J_I x J_b planar array. When an IRS serves k users its rows are
split evenly, every user getting a J_I x floor(J_b / k) segment. With the
reflection phases aligned to the direct path the gain has a closed form
(direct term, reflected array term, cross term); :func:`phase_oracle_gain`
evaluates the same quantity by brute force from the steering vectors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .scenario import Association, Scenario

__all__ = [
    "GeometryError",
    "GeometrySlice",
    "GainVector",
    "GainCoefficients",
    "geometry",
    "segment_rows",
    "gain_coefficients",
    "gain_from_distances",
    "composite_gain",
    "steering_vector",
    "aligned_phases",
    "phase_oracle_gain",
]


class GeometryError(ValueError):
    pass


@dataclass
class GeometrySlice:
    d_ug: np.ndarray          # (N,)
    d_ur: np.ndarray          # (S,)
    d_rg: np.ndarray          # (S, N)
    sin_theta_ur: np.ndarray  # (S,)
    cos_theta_ur: np.ndarray
    sin_phi_ur: np.ndarray
    cos_phi_ur: np.ndarray
    sin_theta_rg: np.ndarray  # (S, N)
    cos_theta_rg: np.ndarray
    sin_phi_rg: np.ndarray
    cos_phi_rg: np.ndarray


@dataclass
class GainVector:
    gain: np.ndarray  # (N,) linear power ratio
    rows: np.ndarray  # (S, N) segment rows, 0 where not served


@dataclass
class GainCoefficients:
    """gain_i = a_i / d_ug^xi + sum_s b_si / d_ur_s^2 + sum_s c_si / (d_ur_s d_ug^(xi/2))."""

    a: np.ndarray    # (N,)
    b: np.ndarray    # (S, N)
    c: np.ndarray    # (S, N)
    xi: np.ndarray   # (N,)


def _azimuth(dx, dy):
    """sin/cos of an azimuth given its two horizontal legs; zero length maps to angle 0."""
    rho = np.hypot(dx, dy)
    safe = np.where(rho > 0, rho, 1.0)
    s = np.where(rho > 0, dx / safe, 0.0)
    c = np.where(rho > 0, dy / safe, 1.0)
    return s, c, rho


def _check(d, what):
    if np.any(d <= 0):
        raise GeometryError(f"UAV coincides with {what}")


def geometry(uav_pos, scenario: Scenario) -> GeometrySlice:
    """Distances and arrival angles for the UAV at ``uav_pos``."""
    L = np.asarray(uav_pos, dtype=float)
    U, R = scenario.user_pos, scenario.irs_pos
    d_ug = np.linalg.norm(U - L, axis=1)
    d_ur = np.linalg.norm(R - L, axis=1)
    diff_rg = U[None, :, :] - R[:, None, :]
    d_rg = np.linalg.norm(diff_rg, axis=2)
    _check(d_ug, "a user")
    _check(d_ur, "an IRS")
    _check(d_rg, "an IRS (user placed on an IRS)")

    sin_t_ur = (L[2] - R[:, 2]) / d_ur
    sin_p_ur, cos_p_ur, rho_ur = _azimuth(R[:, 0] - L[0], L[1] - R[:, 1])
    cos_t_ur = rho_ur / d_ur

    sin_t_rg = (R[:, None, 2] - U[None, :, 2]) / d_rg
    sin_p_rg, cos_p_rg, rho_rg = _azimuth(diff_rg[..., 0], diff_rg[..., 1])
    cos_t_rg = rho_rg / d_rg
    return GeometrySlice(d_ug, d_ur, d_rg, sin_t_ur, cos_t_ur, sin_p_ur, cos_p_ur,
                         sin_t_rg, cos_t_rg, sin_p_rg, cos_p_rg)


def segment_rows(assoc: Association, J_b: int) -> np.ndarray:
    """Rows per (IRS, user): floor(J_b / users on that IRS) for served pairs, else 0."""
    alpha = assoc.alpha
    served = alpha.sum(axis=1)
    per = np.floor_divide(J_b, np.maximum(served, 1).astype(int))
    return (alpha * per[:, None]).astype(int)


def gain_coefficients(assoc: Association, scenario: Scenario) -> GainCoefficients:
    """Position-independent coefficients of the closed-form gain."""
    sc = scenario
    alpha = assoc.alpha
    rows = segment_rows(assoc, sc.J_b)
    n_el = sc.J_I * rows  # elements in each user's segment
    U, R = sc.user_pos, sc.irs_pos
    d_rg = np.linalg.norm(U[None, :, :] - R[:, None, :], axis=2)
    _check(d_rg, "an IRS (user placed on an IRS)")
    xi_rg = sc.xi_rg_arr
    k_ug, k_rg = sc.kappa_ug, sc.kappa_rg
    A, beta = sc.A_amp, sc.beta
    a = beta * k_ug
    b = alpha * k_rg * A**2 * beta**2 * n_el**2 / d_rg**xi_rg
    c = (alpha * 2.0 * A * beta**1.5 * n_el * np.sqrt(k_ug)[None, :] * np.sqrt(k_rg)
         / d_rg ** (xi_rg / 2.0))
    return GainCoefficients(a=a, b=b, c=c, xi=sc.xi_ug_arr.copy())


def gain_from_distances(d_ug, d_ur, coef: GainCoefficients):
    """Evaluate the closed form; ``d_ug`` (..., N), ``d_ur`` (..., S)."""
    d_ug = np.asarray(d_ug, dtype=float)
    d_ur = np.asarray(d_ur, dtype=float)
    direct = coef.a / d_ug**coef.xi
    refl = np.einsum("...s,si->...i", 1.0 / d_ur**2, coef.b)
    cross = np.einsum("...s,si->...i", 1.0 / d_ur, coef.c) / d_ug ** (coef.xi / 2.0)
    return direct + refl + cross


def composite_gain(uav_pos, assoc: Association, scenario: Scenario) -> GainVector:
    """Per-user LoS power gain with aligned IRS phases."""
    if not assoc.feasible(scenario.J_b):
        raise ValueError("association exceeds IRS row budget")
    geo = geometry(uav_pos, scenario)
    coef = gain_coefficients(assoc, scenario)
    g = gain_from_distances(geo.d_ug, geo.d_ur, coef)
    return GainVector(gain=g, rows=segment_rows(assoc, scenario.J_b))


# --------------------------------------------------------------------------
# brute-force complex evaluation
# --------------------------------------------------------------------------


def steering_vector(n_cols: int, n_rows: int, d_col: float, d_row: float,
                    u_col: float, u_row: float, wavenumber: float) -> np.ndarray:
    """Planar-array response, column ramp (x) row ramp, flattened with index m*n_rows + n."""
    col = np.exp(-1j * wavenumber * np.arange(n_cols) * d_col * u_col)
    row = np.exp(-1j * wavenumber * np.arange(n_rows) * d_row * u_row)
    return np.kron(col, row)


def _direction_cosines(geo: GeometrySlice, s: int, i: int):
    u_c = geo.sin_theta_ur[s] * geo.cos_phi_ur[s]
    u_r = geo.sin_theta_ur[s] * geo.sin_phi_ur[s]
    r_c = geo.sin_theta_rg[s, i] * geo.cos_phi_rg[s, i]
    r_r = geo.sin_theta_rg[s, i] * geo.sin_phi_rg[s, i]
    return u_c, u_r, r_c, r_r


def aligned_phases(uav_pos, assoc: Association, scenario: Scenario) -> list:
    """Per-user phase arrays (J_I, rows) that co-phase the reflected and direct paths."""
    sc = scenario
    geo = geometry(uav_pos, sc)
    rows = segment_rows(assoc, sc.J_b)
    k = 2.0 * np.pi * sc.f_c / sc.c
    out = []
    for i, s in enumerate(assoc.assign):
        u_c, u_r, r_c, r_r = _direction_cosines(geo, s, i)
        m = np.arange(sc.J_I)[:, None]
        n = np.arange(rows[s, i])[None, :]
        out.append(k * (m * sc.D_I * (u_c - r_c) + n * sc.D_b * (u_r - r_r)))
    return out


def _reflected_parts(uav_pos, assoc, sc):
    """For each user: direct amplitude, reflected scale and conj(h_RG) * h_UR."""
    geo = geometry(uav_pos, sc)
    rows = segment_rows(assoc, sc.J_b)
    k = 2.0 * np.pi * sc.f_c / sc.c
    parts = []
    for i, s in enumerate(assoc.assign):
        u_c, u_r, r_c, r_r = _direction_cosines(geo, s, i)
        J_s = int(rows[s, i])
        h_ur = steering_vector(sc.J_I, J_s, sc.D_I, sc.D_b, u_c, u_r, k)
        h_rg = steering_vector(sc.J_I, J_s, sc.D_I, sc.D_b, r_c, r_r, k)
        direct = np.sqrt(sc.beta / geo.d_ug[i] ** sc.xi_ug[i]) * np.sqrt(sc.kappa_ug[i])
        scale = (sc.A_amp * np.sqrt(sc.beta) / geo.d_ur[s]
                 * np.sqrt(sc.beta / geo.d_rg[s, i] ** sc.xi_rg[s][i]) * np.sqrt(sc.kappa_rg[s, i]))
        parts.append((direct, scale, np.conj(h_rg) * h_ur, (sc.J_I, J_s)))
    return parts


def phase_oracle_gain(uav_pos, assoc: Association, scenario: Scenario,
                      phases: Optional[Sequence] = None, dtype=np.float64) -> np.ndarray:
    """|direct + reflected|^2 per user from explicit steering vectors and phases.

    ``phases[i]`` has shape (J_I, rows of user i) or a leading batch axis
    (K, J_I, rows) to evaluate K phase configurations at once; the result is
    then a list of (K,) arrays. ``None`` uses :func:`aligned_phases`.
    ``dtype=np.float32`` evaluates the element phasors in single precision,
    which is many times faster for large Monte-Carlo batches; the absolute
    error is then about 1e-6 of (|direct| + scale * elements) squared.
    """
    if phases is None:
        phases = aligned_phases(uav_pos, assoc, scenario)
    parts = _reflected_parts(uav_pos, assoc, scenario)
    if len(phases) != len(parts):
        raise ValueError("need one phase array per user")
    out = []
    batched = False
    for (direct, scale, prod, shape), ph in zip(parts, phases):
        ph = np.asarray(ph, dtype=float)
        if ph.shape[-2:] != shape:
            raise ValueError(f"phase array shape {ph.shape} does not match segment {shape}")
        flat = ph.reshape(ph.shape[:-2] + (-1,))
        if dtype == np.float64:
            total = direct + scale * (np.exp(1j * flat) @ prod)
        else:
            flat = flat.astype(dtype)
            cs, sn = np.cos(flat), np.sin(flat)
            pr, pi = prod.real.astype(dtype), prod.imag.astype(dtype)
            re = (cs @ pr - sn @ pi).astype(float)
            im = (sn @ pr + cs @ pi).astype(float)
            total = direct + scale * (re + 1j * im)
        batched = batched or ph.ndim == 3
        out.append(np.abs(total) ** 2)
    if batched:
        return out
    return np.array(out, dtype=float)
