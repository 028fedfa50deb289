import math

import numpy as np
import pytest
from scipy.linalg import expm

from buckbench.converter import (
    DEFAULT_PARAMS,
    ConverterParams,
    Duty,
    IntegrationError,
    State,
    StepSchedule,
    Trajectory,
    derivative_averaged,
    derivative_off,
    derivative_on,
    duty_to_output_response,
    equilibrium,
    linearized,
    simulate,
    step_averaged,
    step_switched,
)

P = DEFAULT_PARAMS
RNG = np.random.default_rng(42)


def averaged_exact(s0, p, d, t):
    """Closed-form solution of the averaged linear ODE via matrix exponential.

    Independent oracle: x(t) = e^{At} x0 + A^{-1}(e^{At} - I) b with
    A, b read straight off the state equations.
    """
    a = np.array([[0.0, -1.0 / p.l], [1.0 / p.c, -1.0 / (p.r_load * p.c)]])
    b = np.array([d * p.vs / p.l, 0.0])
    x0 = np.array([s0.i_l, s0.v_c])
    ea = expm(a * t)
    x = ea @ x0 + np.linalg.solve(a, (ea - np.eye(2)) @ b)
    return State(float(x[0]), float(x[1]))


# --- types -----------------------------------------------------------------

def test_params_reject_nonpositive():
    with pytest.raises(ValueError):
        ConverterParams(vs=0.0, r_load=6.0, l=220e-6, c=10e-6, f_sw=75e3)
    with pytest.raises(ValueError):
        ConverterParams(vs=48.0, r_load=-1.0, l=220e-6, c=10e-6, f_sw=75e3)


def test_params_warn_on_high_lc_corner():
    with pytest.warns(UserWarning):
        ConverterParams(vs=48.0, r_load=6.0, l=1e-9, c=1e-9, f_sw=75e3)


def test_state_rejects_nonfinite():
    with pytest.raises(ValueError):
        State(float("nan"), 0.0)
    with pytest.raises(ValueError):
        State(0.0, float("inf"))


def test_duty_clamps_and_records():
    assert Duty(0.5).value == 0.5 and not Duty(0.5).clamped
    d = Duty(1.2)
    assert d.value == 1.0 and d.clamped
    d = Duty(-0.1)
    assert d.value == 0.0 and d.clamped


def test_step_schedule_lookup():
    sch = StepSchedule((0.0, 2e-3), (6.0, 5.0))
    assert sch.at(0.0) == 6.0
    assert sch.at(1.9e-3) == 6.0
    assert sch.at(2e-3) == 5.0
    assert sch.final() == 5.0
    with pytest.raises(ValueError):
        StepSchedule((1.0,), (6.0,))


# --- derivatives -----------------------------------------------------------

def test_derivative_on_examples():
    di, dv = derivative_on(State(0.0, 0.0), P)
    assert di == pytest.approx(48.0 / 220e-6, rel=1e-12)
    assert dv == 0.0

    di, dv = derivative_on(State(2.0, 12.0), P)
    assert di == pytest.approx(36.0 / 220e-6, rel=1e-12)
    assert dv == pytest.approx(0.0, abs=1e-9)

    di, dv = derivative_on(State(2.0, 48.0), P)
    assert di == pytest.approx(0.0, abs=1e-9)
    assert dv == pytest.approx(2.0 / 10e-6 - 48.0 / (6.0 * 10e-6), rel=1e-12)


def test_derivative_off_examples():
    di, dv = derivative_off(State(2.0, 12.0), P)
    assert di == pytest.approx(-12.0 / 220e-6, rel=1e-12)
    assert dv == pytest.approx(0.0, abs=1e-9)

    assert derivative_off(State(0.0, 0.0), P) == (0.0, 0.0)

    di, dv = derivative_off(State(1.0, 0.0), P)
    assert di == 0.0
    assert dv == pytest.approx(100000.0, rel=1e-12)


def test_derivative_averaged_reduces_to_on_off():
    for _ in range(20):
        s = State(float(RNG.uniform(-2, 5)), float(RNG.uniform(-10, 50)))
        assert derivative_averaged(s, P, Duty(1.0)) == derivative_on(s, P)
        assert derivative_averaged(s, P, Duty(0.0)) == derivative_off(s, P)


def test_derivative_averaged_equilibrium_point():
    di, dv = derivative_averaged(State(2.0, 12.0), P, Duty(0.25))
    scale_i = abs(P.vs / P.l)
    scale_v = abs(2.0 / P.c)
    assert abs(di) <= 1e-12 * scale_i
    assert abs(dv) <= 1e-12 * scale_v


def test_blend_identity_is_exact():
    # derivative_averaged is literally d*on + (1-d)*off, bit for bit
    for _ in range(50):
        s = State(float(RNG.uniform(-5, 10)), float(RNG.uniform(-20, 60)))
        d = float(RNG.uniform(0, 1))
        di_on, dv_on = derivative_on(s, P)
        di_off, dv_off = derivative_off(s, P)
        di, dv = derivative_averaged(s, P, Duty(d))
        assert di == d * di_on + (1.0 - d) * di_off
        assert dv == d * dv_on + (1.0 - d) * dv_off


def test_averaged_derivative_affine_in_state():
    d = Duty(0.4)

    def f(i, v):
        return np.array(derivative_averaged(State(i, v), P, d))

    f0 = f(0.0, 0.0)
    for _ in range(20):
        i1, v1 = RNG.uniform(-3, 3, size=2)
        i2, v2 = RNG.uniform(-3, 3, size=2)
        lhs = f(i1 + i2, v1 + v2) - f0
        rhs = (f(i1, v1) - f0) + (f(i2, v2) - f0)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-6)


def test_equilibrium_examples():
    s = equilibrium(P, Duty(0.25))
    assert s.i_l == pytest.approx(2.0, rel=1e-12)
    assert s.v_c == pytest.approx(12.0, rel=1e-12)

    s = equilibrium(P, Duty(0.0))
    assert (s.i_l, s.v_c) == (0.0, 0.0)

    s = equilibrium(P, Duty(0.3125))
    assert s.i_l == pytest.approx(2.5, rel=1e-12)
    assert s.v_c == pytest.approx(15.0, rel=1e-12)


def test_linearized_matrices_and_response():
    a, b, c, d = linearized(P)
    np.testing.assert_allclose(a, [[0.0, -1.0 / P.l], [1.0 / P.c, -1.0 / (P.r_load * P.c)]])
    np.testing.assert_allclose(b, [P.vs / P.l, 0.0])
    np.testing.assert_allclose(c, [0.0, 1.0])
    assert d == 0.0
    # transfer evaluation agrees with C (jwI - A)^-1 B
    for f_hz in (100.0, 3e3, 10e3):
        w = 2 * math.pi * f_hz
        g_direct = duty_to_output_response(P, w)
        g_mat = c @ np.linalg.solve(1j * w * np.eye(2) - a, b)
        assert g_direct == pytest.approx(g_mat, rel=1e-9)


# --- averaged stepping -----------------------------------------------------

def test_step_averaged_holds_equilibrium():
    d = Duty(0.25)
    s = equilibrium(P, d)
    for dt in (1e-6, 1e-5, 1e-4):
        s1 = step_averaged(s, P, d, dt)
        assert s1.i_l == pytest.approx(s.i_l, rel=1e-9)
        assert s1.v_c == pytest.approx(s.v_c, rel=1e-9)


def test_step_averaged_matches_matrix_exponential():
    # 1 us RK4 stepping from rest vs the closed-form solution mid-transient
    d = Duty(0.25)
    dt = 1e-6
    s = State(0.0, 0.0)
    n = 1000  # 1 ms, well inside the transient
    for _ in range(n):
        s = step_averaged(s, P, d, dt)
    ref = averaged_exact(State(0.0, 0.0), P, d.value, n * dt)
    assert s.i_l == pytest.approx(ref.i_l, rel=1e-7, abs=1e-9)
    assert s.v_c == pytest.approx(ref.v_c, rel=1e-7, abs=1e-9)


def test_step_averaged_settles_to_equilibrium():
    d = Duty(0.25)
    s = State(0.0, 0.0)
    for _ in range(5000):  # 5 ms at 1 us
        s = step_averaged(s, P, d, 1e-6)
    assert s.i_l == pytest.approx(2.0, rel=1e-3)
    assert s.v_c == pytest.approx(12.0, rel=1e-3)


def test_step_averaged_observed_order_at_least_3_5():
    # integrate 100 us at dt and dt/2, compare against the exact solution
    d = Duty(0.4)
    s0 = State(0.5, 3.0)
    horizon = 1e-4
    errs = []
    for dt in (2e-6, 1e-6):
        n = round(horizon / dt)
        s = s0
        for _ in range(n):
            s = step_averaged(s, P, d, dt)
        ref = averaged_exact(s0, P, d.value, horizon)
        errs.append(math.hypot(s.i_l - ref.i_l, s.v_c - ref.v_c))
    order = math.log2(errs[0] / errs[1])
    assert order >= 3.5


def test_step_averaged_rejects_blowup():
    s = State(1.0, 1.0)
    with pytest.raises(IntegrationError):
        for _ in range(50):
            s = step_averaged(s, P, Duty(0.5), 1.0)


# --- switched stepping -----------------------------------------------------

def test_switched_zero_duty_rc_decay():
    # i_l stays at zero; v_c decays through the load: factor exp(-T/(RC))
    rep = step_switched(State(0.0, 5.0), P, Duty(0.0))
    t_sw = 1.0 / P.f_sw
    rc = P.r_load * P.c
    assert rep.state.i_l == 0.0
    assert rep.dcm
    assert rep.state.v_c == pytest.approx(5.0 * math.exp(-t_sw / rc), rel=1e-6)


def test_switched_steady_ripple_matches_formula():
    # analytic peak-to-peak ripple (Vs - Vo) * d / (L * f_sw) ~= 0.545 A
    d = Duty(0.25)
    s = State(0.0, 0.0)
    rep = None
    for _ in range(500):
        rep = step_switched(s, P, d)
        s = rep.state
    ripple = rep.i_l_max - rep.i_l_min
    expected = (48.0 - 12.0) * 0.25 / (220e-6 * 75e3)
    assert expected == pytest.approx(0.5454545454545454, rel=1e-12)
    assert ripple == pytest.approx(expected, rel=0.05)


@pytest.mark.parametrize("d", [0.2, 0.25, 0.4])
def test_switched_period_average_tracks_averaged_model(d):
    s = State(0.0, 0.0)
    rep = None
    for _ in range(500):
        rep = step_switched(s, P, Duty(d))
        s = rep.state
    eq = equilibrium(P, Duty(d))
    ripple = rep.i_l_max - rep.i_l_min
    assert abs(rep.i_l_mean - eq.i_l) < ripple / 2
    assert abs(rep.v_c_mean - eq.v_c) < ripple / 2


def test_switched_passivity_at_zero_duty():
    s = State(0.0, 5.0)
    prev = s.v_c
    for _ in range(100):
        rep = step_switched(s, P, Duty(0.0))
        s = rep.state
        assert s.i_l == 0.0
        assert 0.0 <= s.v_c < prev
        prev = s.v_c


def test_switched_clamps_reverse_current():
    # low duty from a charged output forces the current to zero mid-period
    rep = step_switched(State(0.2, 10.0), P, Duty(0.05))
    assert rep.state.i_l >= 0.0
    assert rep.dcm


# --- closed-loop simulate --------------------------------------------------

def test_simulate_equilibrium_hold_is_flat():
    s0 = equilibrium(P, Duty(0.25))
    traj = simulate(s0, P, lambda t, s: Duty(0.25), duration=2e-3, dt_ctrl=20e-6)
    np.testing.assert_allclose(traj.i_l, 2.0, rtol=1e-9)
    np.testing.assert_allclose(traj.v_c, 12.0, rtol=1e-9)
    assert traj.duty[0] == 0.25


def test_simulate_startup_reaches_equilibrium():
    traj = simulate(State(0.0, 0.0), P, lambda t, s: Duty(0.25),
                    duration=5e-3, dt_ctrl=20e-6)
    final = traj.final_state()
    assert final.i_l == pytest.approx(2.0, rel=1e-3)
    assert final.v_c == pytest.approx(12.0, rel=1e-3)


def test_simulate_load_step_moves_current_only():
    sched = StepSchedule((0.0, 2e-3), (6.0, 5.0))
    traj = simulate(equilibrium(P, Duty(0.25)), P, lambda t, s: Duty(0.25),
                    duration=8e-3, dt_ctrl=20e-6, r_load_schedule=sched)
    final = traj.final_state()
    assert final.v_c == pytest.approx(12.0, rel=1e-3)
    assert final.i_l == pytest.approx(2.4, rel=1e-3)


def test_simulate_switched_requires_period_multiple():
    with pytest.raises(ValueError):
        simulate(State(0.0, 0.0), P, lambda t, s: Duty(0.25),
                 duration=1e-3, dt_ctrl=1.7e-5, model="switched")


def test_simulate_switched_runs_and_flags_dcm():
    dt_ctrl = 4 / P.f_sw
    traj = simulate(State(0.0, 4.0), P, lambda t, s: Duty(0.0),
                    duration=40 * dt_ctrl, dt_ctrl=dt_ctrl, model="switched")
    assert traj.dcm[:-1].all()
    assert traj.v_c[-1] < 4.0


def test_simulate_is_deterministic():
    def ctrl(t, s):
        return Duty(0.2 + 0.1 * math.sin(2 * math.pi * 1e3 * t))

    a = simulate(State(0.0, 0.0), P, ctrl, duration=2e-3, dt_ctrl=20e-6)
    b = simulate(State(0.0, 0.0), P, ctrl, duration=2e-3, dt_ctrl=20e-6)
    assert np.array_equal(a.i_l, b.i_l)
    assert np.array_equal(a.v_c, b.v_c)
    assert np.array_equal(a.duty, b.duty)


def test_simulate_propagates_integration_failure_with_time():
    with pytest.raises(IntegrationError) as exc:
        simulate(State(0.0, 0.0), P, lambda t, s: Duty(0.5),
                 duration=0.4, dt_ctrl=0.01, dt_max=0.01)
    assert exc.value.t is not None


def test_trajectory_csv_round_trip(tmp_path):
    traj = simulate(State(0.0, 0.0), P, lambda t, s: Duty(0.25),
                    duration=1e-3, dt_ctrl=20e-6)
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    text = path.read_text()
    assert text.splitlines()[0] == "t,i_l,v_c,duty,dcm_flag"
    back = Trajectory.from_csv(path)
    assert len(back) == len(traj)
    np.testing.assert_allclose(back.v_c, traj.v_c, rtol=1e-8)
    # 9 significant digits in the file
    assert "0.000299999" not in text  # no precision-loss artifacts on the grid
