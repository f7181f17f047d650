import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavirs.channel import phase_oracle_gain
from uavirs.energy import (V_FLOOR, energy_efficiency, min_propulsion_power, power_breakdown,
                           power_from_speed, propulsion_power)
from uavirs.noma import initial_order, initial_power
from uavirs.scenario import default_scenario

from oracles import rate_oracle

SC = default_scenario()
PROP = SC.propulsion


def fly_oracle(speed):
    """Rotary-wing power written out term by term with the default constants."""
    v = max(speed, 0.1)
    blade = 79.86 * (1 + 3 * v * v / (300.0 * 0.4) ** 2)
    induced = 88.63 * 4.03 / v
    drag = 0.5 * 0.6 * 1.225 * 0.05 * 0.503 * v ** 3
    return blade + induced + drag


def test_floor_rule():
    assert propulsion_power([0.0, 0.0], SC) == propulsion_power([V_FLOOR, 0.0], SC)


def test_ten_metres_per_second():
    assert propulsion_power([6.0, 8.0], SC) == pytest.approx(fly_oracle(10.0), rel=1e-14)


def test_vertical_component_ignored():
    assert propulsion_power([6.0, 8.0, 30.0], SC) == propulsion_power([6.0, 8.0], SC)


def test_termwise_scaling():
    def blade(v):
        return PROP.P_blade * (1 + 3 * v * v / PROP.tip_speed ** 2)

    def drag(v):
        return 0.5 * PROP.drag_ratio * PROP.air_density * PROP.solidity * PROP.disk_area * v ** 3

    assert blade(20) / blade(10) == pytest.approx((1 + 3 * 400 / 14400) / (1 + 3 * 100 / 14400))
    assert drag(20) / drag(10) == pytest.approx(8.0)
    total = power_from_speed(20.0, PROP)
    assert total == pytest.approx(blade(20) + PROP.P_induced * PROP.v_rotor / 20 + drag(20))


def test_hover_power():
    assert power_from_speed(0.0, PROP) == pytest.approx(fly_oracle(0.0), rel=1e-14)
    assert power_from_speed(0.0, PROP) == pytest.approx(3651.6, abs=0.1)


def test_convex_in_speed():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(V_FLOOR, SC.v_max, (2, 1000))
    mid = power_from_speed((a + b) / 2, PROP)
    assert np.all(mid <= (power_from_speed(a, PROP) + power_from_speed(b, PROP)) / 2 + 1e-9)


def test_min_propulsion_power_is_lower_bound():
    lo = min_propulsion_power(PROP, SC.v_max)
    grid = power_from_speed(np.linspace(0, SC.v_max, 200001), PROP)
    assert lo <= grid.min()
    assert lo == pytest.approx(grid.min(), rel=1e-8)
    assert min_propulsion_power(PROP, 0.0) == pytest.approx(power_from_speed(0.0, PROP), rel=1e-8)


def test_energy_efficiency_examples():
    sc = default_scenario(eta=1.0)
    v = [10.0, 0.0]
    fly = propulsion_power(v, sc)
    p = [100.0 - fly]  # comm power fills P_sum to exactly 100 W
    assert energy_efficiency([4.0, 6.0], p, v, sc) == pytest.approx(0.1, rel=1e-12)
    assert energy_efficiency([0.0, 0.0], [0.1], v, sc) == 0.0


def test_breakdown_adds_up():
    br = power_breakdown([0.02, 0.03], [3.0, 4.0], SC)
    assert br.p_fly > 0 and br.p_comm == pytest.approx(0.05 * SC.eta)
    assert br.p_sum == br.p_fly + br.p_comm


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 20.0), st.floats(0.1, 5.0))
def test_efficiency_decreases_with_flight_power(speed, extra):
    rates = [1.0, 2.0, 3.0]
    p = initial_power(3, SC.p_max)
    lo = energy_efficiency(rates, p, [speed, 0.0], SC)
    hi_power = default_scenario(eta=SC.eta + extra)
    assert energy_efficiency(rates, p, [speed, 0.0], hi_power) < lo


def test_end_to_end_efficiency_at_start():
    L = SC.start
    assoc = SC.actions[0]
    g = phase_oracle_gain(L, assoc, SC)
    w = initial_order(g)
    p = initial_power(SC.N, SC.p_max)
    r = rate_oracle(p, w, g, SC.noise)
    ref = r.sum() / (SC.eta * p.sum() + fly_oracle(0.0))
    from uavirs.channel import composite_gain
    from uavirs.noma import rates as noma_rates
    gains = composite_gain(L, assoc, SC).gain
    ee = energy_efficiency(noma_rates(p, initial_order(gains), gains, SC.noise), p, [0, 0], SC)
    assert ee == pytest.approx(ref, rel=1e-9)
