import numpy as np
import pytest

from uavirs.channel import composite_gain, gain_coefficients, gain_from_distances
from uavirs.convex import phase_one, solve_convex
from uavirs.noma import initial_order, initial_power, rates
from uavirs.scenario import default_scenario
from uavirs.trajectory import (DinkelbachState, build_p2_surrogate, build_reduced_surrogate,
                               expansion_point, optimize_step, rate_taylor_bound, slot_objective,
                               surrogate_gain_linearization)

SC = default_scenario()
STEP = SC.tau * SC.v_max


def random_instance(rng):
    """Slot start, a candidate next position and the slot's fixed inputs."""
    assoc = SC.actions[rng.integers(len(SC.actions))]
    L_t = np.array([rng.uniform(0, 500), rng.uniform(0, 500), rng.uniform(50, 150)])
    d = rng.normal(size=3)
    d *= rng.uniform(0.3, 0.95) * STEP / np.linalg.norm(d)
    L = L_t + d
    L[2] = np.clip(L[2], SC.z_min, SC.z_max)
    g = composite_gain(L_t, assoc, SC).gain
    w0, p0 = initial_order(g), initial_power(SC.N, SC.p_max)
    return assoc, L_t, L, w0, p0, gain_coefficients(assoc, SC)


def coef_of(coef, i):
    return coef.a[i], coef.b[:, i], coef.c[:, i]


def test_gain_linearization_tight_and_below():
    rng = np.random.default_rng(0)
    assoc = SC.actions[3]
    coef = gain_coefficients(assoc, SC)
    Gk = np.array([120.0, 90.0, 200.0])
    Rk = np.array([150.0, 110.0])
    for i in range(SC.N):
        ci, xi = coef_of(coef, i), coef.xi[i]
        exact = gain_from_distances(Gk, Rk, coef)[i]
        assert surrogate_gain_linearization(Gk[i], Rk, Gk[i], Rk, ci, xi) == pytest.approx(
            exact, rel=1e-14)
        G = Gk[i] * rng.uniform(1.0, 3.0, 1000)
        R = Rk * rng.uniform(1.0, 3.0, (1000, 2))
        for Gs, Rs in zip(G, R):
            true = gain_from_distances(np.full(SC.N, Gs), Rs, coef)[i]
            assert surrogate_gain_linearization(Gs, Rs, Gk[i], Rk, ci, xi) <= true * (1 + 1e-12)


def test_gain_linearization_without_irs_terms():
    a, xi, Gk = 3e-6, 2.5, 100.0
    ci = (a, np.zeros(2), np.zeros(2))
    R = np.array([50.0, 60.0])
    val = surrogate_gain_linearization(130.0, R * 2, Gk, R, ci, xi)
    assert val == pytest.approx(a / Gk**xi - xi * a / Gk ** (xi + 1) * 30.0, rel=1e-14)


def test_rate_bound_examples():
    assert rate_taylor_bound(2e-3, 2e-3, 0.05) == pytest.approx(np.log2(1 + 0.05 / 2e-3), rel=1e-15)
    assert rate_taylor_bound(3e-3, 2e-3, 0.05) < rate_taylor_bound(2e-3, 2e-3, 0.05)
    rng = np.random.default_rng(1)
    H = 10 ** rng.uniform(-5, 0, 10000)
    Hb = 10 ** rng.uniform(-5, 0, 10000)
    p = rng.uniform(0, 0.1, 10000)
    assert np.all(rate_taylor_bound(H, Hb, p) <= np.log2(1 + p / H) + 1e-12)


def full_point_vector(sp, L):
    """Full-program variables at the expansion point itself."""
    u, g, r, h, b, vv = sp.layout.slices()
    y = np.ones(sp.layout.n)
    y[u] = (L - sp.L_t) / sp.step
    return y


def test_full_surrogate_tight_at_expansion():
    rng = np.random.default_rng(2)
    for _ in range(20):
        assoc, L_t, L, w0, p0, coef = random_instance(rng)
        varpi = rng.choice([0.0, rng.uniform(0, 2e-3)])
        pt = expansion_point(L, L_t, coef, w0, p0, SC)
        sp = build_p2_surrogate(pt, varpi, L_t, coef, w0, p0, SC)
        F, sr, _ = slot_objective(L, L_t, coef, w0, p0, varpi, SC)
        y = full_point_vector(sp, L)
        assert np.all(sp.program.ineq(y, 0) <= 1e-9)
        assert sp.program.objective(y, 0) == pytest.approx(F, abs=1e-9)
        rp = build_reduced_surrogate(pt, varpi, L_t, coef, w0, p0, SC)
        assert rp.program.objective((L - L_t) / STEP, 0) == pytest.approx(F, abs=1e-9)


def test_zero_parameter_gives_rate_surrogate():
    rng = np.random.default_rng(3)
    assoc, L_t, L, w0, p0, coef = random_instance(rng)
    pt = expansion_point(L, L_t, coef, w0, p0, SC)
    sp = build_p2_surrogate(pt, 0.0, L_t, coef, w0, p0, SC)
    y = full_point_vector(sp, L)
    y[sp.layout.slices()[3]] = 1.2  # move H away from the expansion point
    expected = np.sum(rate_taylor_bound(1.2 * pt.H, pt.H, p0))
    assert sp.program.objective(y, 0) == pytest.approx(expected, abs=1e-12)


def test_surrogate_never_overstates_rate():
    rng = np.random.default_rng(4)
    for _ in range(20):
        assoc, L_t, L, w0, p0, coef = random_instance(rng)
        pt = expansion_point(L, L_t, coef, w0, p0, SC)
        rp = build_reduced_surrogate(pt, 0.0, L_t, coef, w0, p0, SC)
        for _ in range(50):
            u = rng.normal(size=3)
            u *= rng.uniform(0, 1) / np.linalg.norm(u)
            u[2] = np.clip(u[2], rp.program.lower[2], rp.program.upper[2])
            if np.any(rp.program.ineq(u, 0) > 0):
                continue
            sl = rp.slacks(u)
            bound = np.sum(rate_taylor_bound(sl["H"], pt.H, p0))
            Lu = rp.position(u)
            d_ug = np.linalg.norm(SC.user_pos - Lu, axis=1)
            d_ur = np.linalg.norm(SC.irs_pos - Lu, axis=1)
            true = np.sum(rates(p0, w0, gain_from_distances(d_ug, d_ur, coef), SC.noise))
            assert true >= bound - 1e-6


def test_reduced_and_full_programs_agree():
    rng = np.random.default_rng(5)
    for _ in range(6):
        assoc, L_t, L, w0, p0, coef = random_instance(rng)
        varpi = rng.uniform(0, 2e-3)
        pt = expansion_point(L, L_t, coef, w0, p0, SC)
        rp = build_reduced_surrogate(pt, varpi, L_t, coef, w0, p0, SC)
        sp = build_p2_surrogate(pt, varpi, L_t, coef, w0, p0, SC)
        prog = sp.program
        if not sp.extras["strict_start"]:
            prog.x0 = phase_one(prog.ineq, prog.x0, prog.A_eq, prog.b_eq, prog.lower, prog.upper)
        s_full = solve_convex(prog, tol=1e-10)
        s_red = solve_convex(rp.program, tol=1e-10, method="primal-dual")
        assert s_red.objective == pytest.approx(s_full.objective, abs=1e-7)
        assert np.allclose(rp.position(s_red.x), sp.position(s_full.x), atol=1e-3)


def test_subproblem_solutions_respect_step_limit():
    rng = np.random.default_rng(6)
    for _ in range(100):
        assoc, L_t, L, w0, p0, coef = random_instance(rng)
        varpi = rng.choice([0.0, rng.uniform(0, 2e-3)])
        pt = expansion_point(L, L_t, coef, w0, p0, SC)
        rp = build_reduced_surrogate(pt, varpi, L_t, coef, w0, p0, SC)
        prog = rp.program
        if not rp.strict_start:
            prog.x0 = phase_one(prog.ineq, prog.x0, prog.A_eq, prog.b_eq, prog.lower, prog.upper)
        sol = solve_convex(prog, tol=1e-10, method="primal-dual")
        assert np.linalg.norm(rp.position(sol.x) - L_t) <= STEP + 1e-9


def test_expansion_velocity_at_slot_start():
    rng = np.random.default_rng(7)
    assoc, L_t, L, w0, p0, coef = random_instance(rng)
    pt = expansion_point(L_t, L_t, coef, w0, p0, SC, v_hint=np.array([3.0, 4.0]))
    assert np.allclose(pt.v, 2 * SC.solver.v_floor * np.array([0.6, 0.8]))
    pt = expansion_point(L_t, L_t, coef, w0, p0, SC)
    assert np.linalg.norm(pt.v) == pytest.approx(2 * SC.solver.v_floor)
    assert pt.V >= SC.solver.v_floor


def test_single_point_feasible_set():
    sc = default_scenario(v_max=1e-12)
    assoc = sc.actions[1]
    g = composite_gain(sc.start, assoc, sc).gain
    res = optimize_step(sc.start, assoc, initial_order(g), initial_power(3, sc.p_max), sc)
    assert np.array_equal(res.position, sc.start)
    assert res.converged and res.final_gap == 0.0
    assert res.varpi[-1] == pytest.approx(res.sum_rate / res.p_sum)


@pytest.mark.parametrize("seed", range(6))
def test_step_properties(seed):
    rng = np.random.default_rng(50 + seed)
    assoc, L_t, _, w0, p0, coef = random_instance(rng)
    v_prev = rng.normal(size=2) * 8
    res = optimize_step(L_t, assoc, w0, p0, SC, v_prev=v_prev)
    # Dinkelbach parameter never decreases and the last gap meets the tolerance
    assert np.all(np.diff(res.varpi) >= 0)
    assert res.final_gap <= SC.solver.eps_outer
    for trace in res.inner:
        sur = [s for s, _ in trace[1:]]
        true = [f for _, f in trace]
        assert np.all(np.diff(sur) >= -1e-9)
        assert np.all(np.diff(true) >= -1e-9)
    # original constraints hold exactly
    L = res.position
    assert np.linalg.norm(L - L_t) <= STEP
    assert SC.z_min <= L[2] <= SC.z_max
    _, sr, ps = slot_objective(L, L_t, coef, w0, p0, 0.0, SC)
    assert res.energy_efficiency == pytest.approx(sr / ps, rel=1e-12)


def test_step_improves_on_staying():
    rng = np.random.default_rng(9)
    assoc, L_t, _, w0, p0, coef = random_instance(rng)
    res = optimize_step(L_t, assoc, w0, p0, SC)
    _, sr, ps = slot_objective(L_t, L_t, coef, w0, p0, 0.0, SC)
    assert res.energy_efficiency >= sr / ps


def test_iteration_caps():
    rng = np.random.default_rng(10)
    assoc, L_t, _, w0, p0, coef = random_instance(rng)
    res = optimize_step(L_t, assoc, w0, p0, SC, dk=DinkelbachState(max_outer=1, max_inner=1))
    assert len(res.inner) == 1 and len(res.inner[0]) <= 2
    assert np.linalg.norm(res.position - L_t) <= STEP


def test_deterministic():
    rng = np.random.default_rng(11)
    assoc, L_t, _, w0, p0, coef = random_instance(rng)
    a = optimize_step(L_t, assoc, w0, p0, SC)
    b = optimize_step(L_t, assoc, w0, p0, SC)
    assert np.array_equal(a.position, b.position) and a.varpi == b.varpi
