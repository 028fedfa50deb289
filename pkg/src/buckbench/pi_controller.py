"""Conventional PI voltage controller: the comparison baseline.

The loop is tuned on the linearized averaged model (duty-to-output transfer)
by placing the PI phase at the requested crossover, so the resolved gains are
reproducible from the converter parameters alone.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

from .converter import ConverterParams, Duty, duty_to_output_response


class TuningError(ValueError):
    """Requested phase margin is unreachable at the requested crossover."""

    def __init__(self, message, achievable_margin_deg):
        super().__init__(message)
        self.achievable_margin_deg = achievable_margin_deg


@dataclass(frozen=True)
class PiConfig:
    kp: float            # duty per V
    ki: float            # duty per V*s
    out_min: float = 0.0
    out_max: float = 1.0

    def __post_init__(self):
        if self.kp < 0.0 or self.ki < 0.0:
            raise ValueError("PI gains must be >= 0")
        if not (0.0 <= self.out_min < self.out_max <= 1.0):
            raise ValueError("need 0 <= out_min < out_max <= 1")

    def to_dict(self) -> dict:
        return {"kp": self.kp, "ki": self.ki,
                "out_min": self.out_min, "out_max": self.out_max}


@dataclass(frozen=True)
class PiState:
    """Integrator memory (accumulated error, V*s)."""

    integrator: float = 0.0


def pi_step(cfg: PiConfig, st: PiState, v_ref: float, v_o: float, dt: float):
    """One PI update; returns (Duty, new PiState).

    Anti-windup is conditional integration: the integrator freezes whenever
    the unsaturated output is pinned against a limit in the direction of the
    current error.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    e = v_ref - v_o
    candidate = cfg.kp * e + cfg.ki * (st.integrator + e * dt)
    if candidate > cfg.out_max:
        out = cfg.out_max
        integrate = e < 0.0
    elif candidate < cfg.out_min:
        out = cfg.out_min
        integrate = e > 0.0
    else:
        out = candidate
        integrate = True
    new_int = st.integrator + e * dt if integrate else st.integrator
    return Duty(out), PiState(new_int)


def tune_pi(
    p: ConverterParams,
    target_crossover: float = 3e3,
    phase_margin: float = 60.0,
    out_min: float = 0.0,
    out_max: float = 1.0,
) -> PiConfig:
    """Pick kp, ki so the loop crosses 0 dB at target_crossover (Hz) with the
    requested phase margin (deg).

    The PI contributes phase -theta with tan(theta) = ki/(w*kp); theta is
    solved from the margin requirement against the plant phase, then both
    gains are scaled for unit loop gain at the crossover.  A request the PI
    cannot phase-shift into raises TuningError carrying what is achievable.
    """
    if not (0.0 < target_crossover < p.f_sw / 2.0):
        raise ValueError(
            f"target_crossover must be in (0, f_sw/2) = (0, {p.f_sw / 2:g}) Hz, "
            f"got {target_crossover:g}")
    if phase_margin <= 0.0:
        raise ValueError("phase_margin must be > 0 deg")

    w = 2.0 * math.pi * target_crossover
    g = duty_to_output_response(p, w)
    mag = abs(g)
    phase_deg = math.degrees(cmath.phase(g))

    achievable = 180.0 + phase_deg  # margin of a pure-gain loop at this crossover
    theta_deg = achievable - phase_margin
    if theta_deg <= 0.0:
        raise TuningError(
            f"phase margin {phase_margin:g} deg unreachable at "
            f"{target_crossover:g} Hz; at most {achievable:.2f} deg is achievable",
            achievable_margin_deg=achievable)
    # below 90 deg of PI lag the margin request binds; past it a pure
    # integrator already gives more margin than asked for
    theta = math.radians(min(theta_deg, 90.0))
    kp = math.cos(theta) / mag
    ki = w * math.sin(theta) / mag
    return PiConfig(kp=kp, ki=ki, out_min=out_min, out_max=out_max)
