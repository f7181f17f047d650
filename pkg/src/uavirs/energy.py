"""Rotary-wing propulsion power and per-slot energy efficiency."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .scenario import Propulsion, Scenario

__all__ = ["PowerBreakdown", "propulsion_power", "power_from_speed", "power_breakdown",
           "energy_efficiency", "V_FLOOR", "min_propulsion_power"]

V_FLOOR = 0.1


@dataclass
class PowerBreakdown:
    p_fly: float
    p_comm: float
    p_sum: float


def power_from_speed(speed, prop: Propulsion, v_floor: float = V_FLOOR):
    """Propulsion power for scalar (or array) horizontal speed, floored at ``v_floor``."""
    v = np.maximum(np.asarray(speed, dtype=float), v_floor)
    blade = prop.P_blade * (1.0 + 3.0 * v**2 / prop.tip_speed**2)
    induced = prop.P_induced * prop.v_rotor / v
    drag = 0.5 * prop.drag_ratio * prop.air_density * prop.solidity * prop.disk_area * v**3
    out = blade + induced + drag
    return float(out) if out.ndim == 0 else out


def propulsion_power(v, scenario: Scenario) -> float:
    """Power drawn while flying with horizontal velocity ``v`` (2-vector, m/s).

    A 3-vector is accepted and its vertical component ignored.
    """
    v = np.asarray(v, dtype=float)
    speed = float(np.hypot(v[0], v[1]))
    return power_from_speed(speed, scenario.propulsion, scenario.solver.v_floor)


def power_breakdown(p, v, scenario: Scenario) -> PowerBreakdown:
    fly = propulsion_power(v, scenario)
    comm = scenario.eta * float(np.sum(p))
    return PowerBreakdown(p_fly=fly, p_comm=comm, p_sum=fly + comm)


def energy_efficiency(rates, p, v, scenario: Scenario) -> float:
    """Sum rate over total consumed power (bit/J/Hz)."""
    return float(np.sum(rates)) / power_breakdown(p, v, scenario).p_sum


def min_propulsion_power(prop: Propulsion, v_max: float, v_floor: float = V_FLOOR) -> float:
    """A lower bound on the propulsion power over speeds in [0, v_max].

    Every term is convex in the speed, so a bounded scalar search finds the
    minimum; a relative margin of 1e-9 covers the search tolerance.
    """
    hi = max(v_max, v_floor)
    if hi - v_floor <= 1e-12:
        return power_from_speed(v_floor, prop, v_floor)
    res = minimize_scalar(lambda v: power_from_speed(v, prop, v_floor), bounds=(v_floor, hi),
                          method="bounded", options={"xatol": 1e-10})
    best = min(float(res.fun), power_from_speed(v_floor, prop, v_floor),
               power_from_speed(hi, prop, v_floor))
    return best * (1.0 - 1e-9)
