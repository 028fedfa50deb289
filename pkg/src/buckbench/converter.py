"""Buck converter plant models.

Provides the switched (PWM, per-period) and duty-averaged continuous models
of an ideal buck converter with an LC output filter and resistive load, plus
a fixed-step RK4 integrator and a deterministic closed-loop simulation
harness.  All functions are pure: identical inputs give bit-identical
outputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .fileio import atomic_write_text


class IntegrationError(RuntimeError):
    """Raised when a fixed-step integration produces a non-finite state."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class ConverterParams:
    """Physical constants of the power stage (SI units)."""

    vs: float       # input voltage, V
    r_load: float   # load resistance, Ohm
    l: float        # filter inductance, H
    c: float        # filter capacitance, F
    f_sw: float     # switching frequency, Hz

    def __post_init__(self):
        for name in ("vs", "r_load", "l", "c", "f_sw"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0.0):
                raise ValueError(f"ConverterParams.{name} must be finite and > 0, got {v}")
        # LC corner must sit below the switching frequency for the filter to
        # do its job; a violation is suspicious but not fatal.
        if self.lc_corner_hz() >= self.f_sw:
            warnings.warn(
                f"LC corner {self.lc_corner_hz():.1f} Hz is not below f_sw "
                f"{self.f_sw:.1f} Hz; output ripple will not be filtered",
                stacklevel=2,
            )

    def lc_corner_hz(self) -> float:
        return 1.0 / (2.0 * math.pi * math.sqrt(self.l * self.c))

    def with_load(self, r_load: float) -> "ConverterParams":
        return ConverterParams(self.vs, r_load, self.l, self.c, self.f_sw)

    def to_dict(self) -> dict:
        return {"vs": self.vs, "r_load": self.r_load, "l": self.l,
                "c": self.c, "f_sw": self.f_sw}


#: Table of the stock converter used throughout: 48 V in, 12 V out at
#: d = 0.25 into 6 ohm, 75 kHz switching, 220 uH / 10 uF filter.
DEFAULT_PARAMS = ConverterParams(vs=48.0, r_load=6.0, l=220e-6, c=10e-6, f_sw=75e3)


@dataclass(frozen=True)
class State:
    """Plant state: inductor current (A) and capacitor voltage (V).

    The output voltage equals v_c (ideal capacitor, no ESR).
    """

    i_l: float
    v_c: float

    def __post_init__(self):
        if not (math.isfinite(self.i_l) and math.isfinite(self.v_c)):
            raise ValueError(f"State must be finite, got ({self.i_l}, {self.v_c})")


@dataclass(frozen=True)
class Duty:
    """Duty cycle in [0, 1]; construction clamps and records clamping."""

    value: float
    clamped: bool = False

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"Duty must be finite, got {self.value}")
        if self.value < 0.0 or self.value > 1.0:
            object.__setattr__(self, "value", min(1.0, max(0.0, self.value)))
            object.__setattr__(self, "clamped", True)


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-constant signal: values[j] holds on [times[j], times[j+1])."""

    times: tuple
    values: tuple

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise ValueError("StepSchedule needs equally many times and values")
        if self.times[0] != 0.0:
            raise ValueError("StepSchedule must start at t = 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("StepSchedule breakpoints must be strictly increasing")

    @classmethod
    def constant(cls, value: float) -> "StepSchedule":
        return cls((0.0,), (value,))

    def at(self, t: float) -> float:
        v = self.values[0]
        for tj, vj in zip(self.times, self.values):
            if t >= tj:
                v = vj
            else:
                break
        return v

    def final(self) -> float:
        return self.values[-1]


# --- continuous-time derivatives ------------------------------------------

def derivative_on(s: State, p: ConverterParams):
    """State derivative (A/s, V/s) with the switch closed."""
    di = (p.vs - s.v_c) / p.l
    dv = s.i_l / p.c - s.v_c / (p.r_load * p.c)
    return di, dv


def derivative_off(s: State, p: ConverterParams):
    """State derivative with the switch open (freewheeling diode conducts)."""
    di = -s.v_c / p.l
    dv = s.i_l / p.c - s.v_c / (p.r_load * p.c)
    return di, dv


def derivative_averaged(s: State, p: ConverterParams, d: Duty):
    """Duty-weighted blend of the on and off derivatives.

    Written literally as d*on + (1-d)*off so the blend identity holds
    bit-for-bit, not just analytically.
    """
    di_on, dv_on = derivative_on(s, p)
    di_off, dv_off = derivative_off(s, p)
    dd = d.value
    return dd * di_on + (1.0 - dd) * di_off, dd * dv_on + (1.0 - dd) * dv_off


def equilibrium(p: ConverterParams, d: Duty) -> State:
    """Fixed point of the averaged model: v_c = d*Vs, i_l = v_c/R."""
    v = d.value * p.vs
    return State(i_l=v / p.r_load, v_c=v)


def linearized(p: ConverterParams):
    """Continuous small-signal matrices (A, B, C, D) of the averaged model.

    Input is the duty perturbation at fixed source voltage, output is the
    capacitor voltage.  Derived view of the parameters, nothing is stored.
    """
    a = np.array([[0.0, -1.0 / p.l],
                  [1.0 / p.c, -1.0 / (p.r_load * p.c)]])
    b = np.array([p.vs / p.l, 0.0])
    c = np.array([0.0, 1.0])
    d = 0.0
    return a, b, c, d


def duty_to_output_response(p: ConverterParams, omega: float) -> complex:
    """Frequency response of the duty-to-output transfer at omega rad/s.

    G(jw) = (Vs/LC) / ((jw)^2 + jw/(RC) + 1/(LC)), the C(sI-A)^-1 B of
    linearized().
    """
    jw = 1j * omega
    lc = p.l * p.c
    return (p.vs / lc) / (jw * jw + jw / (p.r_load * p.c) + 1.0 / lc)


# --- fixed-step integration ------------------------------------------------

def _rk4(deriv, i: float, v: float, dt: float):
    """One classical RK4 step of the 2-state ODE given by deriv(i, v)."""
    k1i, k1v = deriv(i, v)
    k2i, k2v = deriv(i + 0.5 * dt * k1i, v + 0.5 * dt * k1v)
    k3i, k3v = deriv(i + 0.5 * dt * k2i, v + 0.5 * dt * k2v)
    k4i, k4v = deriv(i + dt * k3i, v + dt * k3v)
    return (i + dt * (k1i + 2.0 * k2i + 2.0 * k3i + k4i) / 6.0,
            v + dt * (k1v + 2.0 * k2v + 2.0 * k3v + k4v) / 6.0)


def _averaged_deriv_fn(p: ConverterParams, d_value: float):
    vs_l = p.vs / p.l
    inv_l = 1.0 / p.l
    inv_c = 1.0 / p.c
    inv_rc = 1.0 / (p.r_load * p.c)

    def deriv(i, v):
        di_on = vs_l - v * inv_l
        di_off = -v * inv_l
        return (d_value * di_on + (1.0 - d_value) * di_off,
                i * inv_c - v * inv_rc)

    return deriv


def step_averaged(s: State, p: ConverterParams, d: Duty, dt: float) -> State:
    """Advance the averaged model by dt with one RK4 step."""
    if dt <= 0.0:
        raise ValueError(f"dt must be > 0, got {dt}")
    i, v = _rk4(_averaged_deriv_fn(p, d.value), s.i_l, s.v_c, dt)
    if not (math.isfinite(i) and math.isfinite(v)):
        raise IntegrationError(f"averaged step diverged (dt={dt:g} too large?)")
    return State(i, v)


@dataclass(frozen=True)
class SwitchedStepReport:
    """Result of one full PWM period of the switched model.

    Carries the end-of-period state, whether the inductor current was
    clamped at zero (discontinuous conduction), and the intra-period
    current extrema and duration-weighted means used by ripple and
    averaging checks.
    """

    state: State
    dcm: bool
    i_l_min: float
    i_l_max: float
    i_l_mean: float
    v_c_mean: float


def step_switched(s: State, p: ConverterParams, d: Duty, n_sub: int = 16) -> SwitchedStepReport:
    """Advance exactly one switching period 1/f_sw of the PWM model.

    The on-interval d/f_sw integrates the switch-closed dynamics, the
    off-interval (1-d)/f_sw the freewheeling dynamics, each with n_sub RK4
    sub-steps.  If the inductor current would go negative during the off
    interval the diode blocks: the current is clamped at zero, the capacitor
    keeps discharging through the load, and the DCM flag is raised.
    """
    if n_sub < 1:
        raise ValueError("n_sub must be >= 1")
    t_on = d.value / p.f_sw
    t_off = (1.0 - d.value) / p.f_sw

    inv_l = 1.0 / p.l
    inv_c = 1.0 / p.c
    inv_rc = 1.0 / (p.r_load * p.c)
    vs_l = p.vs / p.l

    def on_deriv(i, v):
        return vs_l - v * inv_l, i * inv_c - v * inv_rc

    def off_deriv(i, v):
        return -v * inv_l, i * inv_c - v * inv_rc

    i, v = s.i_l, s.v_c
    dcm = False
    i_min = i_max = i
    acc_i = 0.0
    acc_v = 0.0

    if t_on > 0.0:
        h = t_on / n_sub
        for _ in range(n_sub):
            i1, v1 = _rk4(on_deriv, i, v, h)
            if i1 < 0.0:
                i1 = 0.0
                dcm = True
            acc_i += 0.5 * (i + i1) * h
            acc_v += 0.5 * (v + v1) * h
            i, v = i1, v1
            i_min = min(i_min, i)
            i_max = max(i_max, i)

    if t_off > 0.0:
        h = t_off / n_sub
        for _ in range(n_sub):
            if i <= 0.0 and v >= 0.0:
                # diode blocked: only the RC discharge of the output remains
                i1 = 0.0
                v1 = v * _rc_decay_rk4(h * inv_rc)
                dcm = True
            else:
                i1, v1 = _rk4(off_deriv, i, v, h)
                if i1 < 0.0:
                    i1 = 0.0
                    dcm = True
            acc_i += 0.5 * (i + i1) * h
            acc_v += 0.5 * (v + v1) * h
            i, v = i1, v1
            i_min = min(i_min, i)
            i_max = max(i_max, i)

    if not (math.isfinite(i) and math.isfinite(v)):
        raise IntegrationError("switched step diverged")
    period = 1.0 / p.f_sw
    return SwitchedStepReport(State(i, v), dcm, i_min, i_max,
                              acc_i / period, acc_v / period)


def _rc_decay_rk4(x: float) -> float:
    # RK4 applied to v' = -v/(RC) over one sub-step; x = h/(RC).  Same scheme
    # as the full model so the convergence behaviour stays uniform.
    return 1.0 - x + x * x / 2.0 - x * x * x / 6.0 + x * x * x * x / 24.0


# --- closed-loop simulation -----------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Closed-loop record: one row per control instant, uniform spacing dt.

    Row k holds the state at t = k*dt and the duty applied over the interval
    [k*dt, (k+1)*dt); the final row holds the terminal state with the last
    applied duty repeated.
    """

    dt: float
    t: np.ndarray
    i_l: np.ndarray
    v_c: np.ndarray
    duty: np.ndarray
    dcm: np.ndarray  # per-interval flag, 0/1

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.i_l) == len(self.v_c) == len(self.duty) == len(self.dcm) == n):
            raise ValueError("Trajectory columns must have equal length")
        if n >= 2:
            steps = np.diff(self.t)
            if np.any(steps <= 0) or np.max(np.abs(steps - self.dt)) > 1e-9 * self.dt:
                raise ValueError("Trajectory times must be uniform with spacing dt")

    def __len__(self):
        return len(self.t)

    def final_state(self) -> State:
        return State(float(self.i_l[-1]), float(self.v_c[-1]))

    def to_csv(self, path):
        lines = ["t,i_l,v_c,duty,dcm_flag"]
        for k in range(len(self.t)):
            lines.append("%.9g,%.9g,%.9g,%.9g,%d" % (
                self.t[k], self.i_l[k], self.v_c[k], self.duty[k], int(self.dcm[k])))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.genfromtxt(path, delimiter=",", names=True)
        data = np.atleast_1d(data)
        t = np.asarray(data["t"], dtype=float)
        dt = float(t[1] - t[0]) if len(t) >= 2 else 0.0
        return cls(dt=dt, t=t,
                   i_l=np.asarray(data["i_l"], dtype=float),
                   v_c=np.asarray(data["v_c"], dtype=float),
                   duty=np.asarray(data["duty"], dtype=float),
                   dcm=np.asarray(data["dcm_flag"], dtype=float).astype(int))


def simulate(
    s0: State,
    params: ConverterParams,
    ctrl: Callable[[float, State], Duty],
    duration: float,
    dt_ctrl: float,
    model: str = "averaged",
    *,
    r_load_schedule: StepSchedule | None = None,
    vs_schedule: StepSchedule | None = None,
    dt_max: float = 1e-6,
    n_sub: int = 16,
) -> Trajectory:
    """Run the closed loop: call ctrl at every control instant, hold its duty.

    The load resistance and source voltage may follow piecewise-constant
    schedules (resolved at integration sub-step boundaries).  With the
    switched model dt_ctrl must be an integer multiple of the switching
    period.  Deterministic given its inputs; integration failures propagate
    with the offending time attached.
    """
    if model not in ("averaged", "switched"):
        raise ValueError(f"unknown plant model {model!r}")
    if dt_ctrl <= 0.0 or duration <= 0.0:
        raise ValueError("duration and dt_ctrl must be > 0")
    n_steps = round(duration / dt_ctrl)
    if n_steps < 1 or abs(n_steps * dt_ctrl - duration) > 1e-9 * dt_ctrl:
        raise ValueError(f"duration {duration} is not a multiple of dt_ctrl {dt_ctrl}")

    if model == "switched":
        periods = dt_ctrl * params.f_sw
        n_periods = round(periods)
        if n_periods < 1 or abs(periods - n_periods) > 1e-6:
            raise ValueError(
                f"dt_ctrl {dt_ctrl} must be an integer multiple of the "
                f"switching period {1.0 / params.f_sw:g}")
    else:
        n_int = max(1, math.ceil(dt_ctrl / dt_max - 1e-12))
        h = dt_ctrl / n_int

    def params_at(t: float) -> ConverterParams:
        if r_load_schedule is None and vs_schedule is None:
            return params
        r = r_load_schedule.at(t) if r_load_schedule is not None else params.r_load
        vs = vs_schedule.at(t) if vs_schedule is not None else params.vs
        if r == params.r_load and vs == params.vs:
            return params
        return ConverterParams(vs, r, params.l, params.c, params.f_sw)

    t_col = np.empty(n_steps + 1)
    i_col = np.empty(n_steps + 1)
    v_col = np.empty(n_steps + 1)
    d_col = np.empty(n_steps + 1)
    dcm_col = np.zeros(n_steps + 1, dtype=int)

    state = s0
    duty = Duty(0.0)
    for k in range(n_steps):
        t = k * dt_ctrl
        duty = ctrl(t, state)
        if not isinstance(duty, Duty):
            duty = Duty(float(duty))
        t_col[k] = t
        i_col[k] = state.i_l
        v_col[k] = state.v_c
        d_col[k] = duty.value
        dcm = False
        try:
            if model == "averaged":
                for j in range(n_int):
                    p_t = params_at(t + j * h)
                    state = step_averaged(state, p_t, duty, h)
            else:
                t_period = 1.0 / params.f_sw
                for j in range(n_periods):
                    p_t = params_at(t + j * t_period)
                    rep = step_switched(state, p_t, duty, n_sub=n_sub)
                    state = rep.state
                    dcm = dcm or rep.dcm
        except IntegrationError as exc:
            raise IntegrationError(f"integration failed at t={t:g} s: {exc}", t=t) from exc
        dcm_col[k] = int(dcm)

    t_col[n_steps] = n_steps * dt_ctrl
    i_col[n_steps] = state.i_l
    v_col[n_steps] = state.v_c
    d_col[n_steps] = duty.value
    return Trajectory(dt=dt_ctrl, t=t_col, i_l=i_col, v_c=v_col,
                      duty=d_col, dcm=dcm_col)
