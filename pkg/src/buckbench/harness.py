"""Scenario runner and PI-vs-NNPC comparison harness.

A Scenario bundles initial state, reference and load schedules, and the
plant model; run_scenario closes the loop with either controller and
reduces the trajectory to comparable metrics.  The current reference at
v_ref/r_nominal amps (nominal load = the scenario's initial load) defines
the tracking targets for both control and scoring, so neither controller
is graded on information it never had.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .converter import (ConverterParams, Duty, IntegrationError, State,
                        StepSchedule, Trajectory, simulate)
from .fileio import atomic_write_text
from .mpc import (MpcConfig, NeuralPredictor, NnpcState, OptimizationError,
                  References, nnpc_step, stage_cost)
from .pi_controller import PiConfig, PiState, pi_step
from .sysid import IdentifierBundle

SETTLING_BAND = 0.02  # fraction of the target


@dataclass(frozen=True)
class Scenario:
    name: str
    s0: State
    v_ref: StepSchedule
    r_load: StepSchedule
    duration: float
    model: str = "averaged"

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("duration must be > 0")
        if self.model not in ("averaged", "switched"):
            raise ValueError(f"unknown plant model {self.model!r}")
        for sched in (self.v_ref, self.r_load):
            if sched.times[-1] >= self.duration:
                raise ValueError("schedule breakpoints must fall inside the run")
        if any(v <= 0.0 for v in self.v_ref.values):
            raise ValueError("v_ref values must be > 0")
        if any(r <= 0.0 for r in self.r_load.values):
            raise ValueError("r_load values must be > 0")

    def nominal_load(self) -> float:
        return self.r_load.values[0]

    def to_dict(self) -> dict:
        return {"name": self.name,
                "s0": {"i_l": self.s0.i_l, "v_c": self.s0.v_c},
                "v_ref": {"times": list(self.v_ref.times),
                          "values": list(self.v_ref.values)},
                "r_load": {"times": list(self.r_load.times),
                           "values": list(self.r_load.values)},
                "duration": self.duration,
                "model": self.model}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(name=d["name"],
                   s0=State(d["s0"]["i_l"], d["s0"]["v_c"]),
                   v_ref=StepSchedule(tuple(d["v_ref"]["times"]),
                                      tuple(d["v_ref"]["values"])),
                   r_load=StepSchedule(tuple(d["r_load"]["times"]),
                                       tuple(d["r_load"]["values"])),
                   duration=d["duration"],
                   model=d.get("model", "averaged"))


def built_in_scenarios() -> dict:
    """The three evaluation situations: cold start, load jump, reference jumps."""
    settled = State(2.0, 12.0)
    return {
        "startup": Scenario("startup", State(0.0, 0.0),
                            StepSchedule.constant(12.0),
                            StepSchedule.constant(6.0), 10e-3),
        "load-step": Scenario("load-step", settled,
                              StepSchedule.constant(12.0),
                              StepSchedule((0.0, 4e-3), (6.0, 5.0)), 10e-3),
        "ref-up": Scenario("ref-up", settled,
                           StepSchedule((0.0, 4e-3), (12.0, 15.0)),
                           StepSchedule.constant(6.0), 10e-3),
        "ref-down": Scenario("ref-down", settled,
                             StepSchedule((0.0, 4e-3), (12.0, 9.0)),
                             StepSchedule.constant(6.0), 10e-3),
    }


# --- controllers -----------------------------------------------------------

@dataclass(frozen=True)
class PiController:
    config: PiConfig
    id: str = field(default="PI", init=False)


@dataclass(frozen=True)
class NnpcController:
    bundle: IdentifierBundle
    config: MpcConfig
    id: str = field(default="NNPC", init=False)


# --- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Trajectory quality figures; overshoot falls back to plain volts when
    the reference never steps (unit says which)."""

    overshoot: float
    overshoot_unit: str  # "percent" or "volts"
    settled: bool
    settling_time: Optional[float]  # seconds after the last reference change
    steady_state_error: float
    cumulative_cost: float
    dcm_fraction: float

    def to_dict(self) -> dict:
        return {"overshoot": self.overshoot,
                "overshoot_unit": self.overshoot_unit,
                "settled": self.settled,
                "settling_time": self.settling_time,
                "steady_state_error": self.steady_state_error,
                "cumulative_cost": self.cumulative_cost,
                "dcm_fraction": self.dcm_fraction}


def compute_metrics(traj: Trajectory, sc: Scenario) -> Metrics:
    """Reduce a closed-loop trajectory against its scenario's targets."""
    if len(traj) < 2:
        raise ValueError("trajectory too short for metrics")
    target = sc.v_ref.final()
    t_change = sc.v_ref.times[-1]
    idx = int(np.searchsorted(traj.t, t_change))
    window_v = traj.v_c[idx:]
    window_t = traj.t[idx:]

    step = target - traj.v_c[idx]
    if abs(step) > 1e-9:
        excess = (window_v - target) * math.copysign(1.0, step)
        overshoot = max(0.0, float(excess.max())) / abs(step) * 100.0
        unit = "percent"
    else:
        overshoot = max(0.0, float(window_v.max()) - target)
        unit = "volts"

    band = SETTLING_BAND * abs(target)
    outside = np.abs(window_v - target) > band
    if outside[-1]:
        settled, settling_time = False, None
    elif not outside.any():
        settled, settling_time = True, 0.0
    else:
        last_out = int(np.flatnonzero(outside)[-1])
        settled = True
        settling_time = float(window_t[last_out + 1] - t_change)

    tail = max(1, len(traj) // 10)
    sse = float(np.mean(traj.v_c[-tail:]) - target)

    r_nom = sc.nominal_load()
    cost = 0.0
    for k in range(len(traj) - 1):
        v_ref_k = sc.v_ref.at(traj.t[k])
        cost += stage_cost(State(traj.i_l[k], traj.v_c[k]),
                           References(v_ref_k, v_ref_k / r_nom)) * traj.dt

    return Metrics(overshoot=overshoot, overshoot_unit=unit, settled=settled,
                   settling_time=settling_time, steady_state_error=sse,
                   cumulative_cost=cost,
                   dcm_fraction=float(np.mean(traj.dcm[:-1])))


# --- reports ---------------------------------------------------------------

@dataclass(frozen=True)
class RunReport:
    scenario: dict
    controller: str
    status: str  # "ok" or "failed"
    config: dict  # every resolved knob, defaults included
    seeds: dict
    metrics: Optional[Metrics] = None
    trajectory_path: Optional[str] = None
    fallback_steps: int = 0
    failure: Optional[dict] = None
    trajectory: Optional[Trajectory] = field(default=None, repr=False,
                                             compare=False)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario,
                "controller": self.controller,
                "status": self.status,
                "config": self.config,
                "seeds": self.seeds,
                "metrics": self.metrics.to_dict() if self.metrics else None,
                "trajectory_path": self.trajectory_path,
                "fallback_steps": self.fallback_steps,
                "failure": self.failure}


def _primed_pi_state(cfg: PiConfig, sc: Scenario, params: ConverterParams):
    """Start the integrator at the steady duty when the run begins settled.

    Without this a scenario that starts at its operating point would open
    with an artificial dead-start dip that the comparison would then score.
    """
    v0 = sc.v_ref.at(0.0)
    if cfg.ki > 0.0 and abs(sc.s0.v_c - v0) <= SETTLING_BAND * v0:
        return PiState(integrator=(v0 / params.vs) / cfg.ki)
    return PiState()


def run_scenario(sc: Scenario, controller, params: ConverterParams,
                 control_period: float = 20e-6, out_dir=None,
                 stem: Optional[str] = None) -> RunReport:
    """Close the loop, score it, and (optionally) write the artifacts.

    Optimizer failures mid-run fall back to holding the last duty and are
    counted; a failure before any duty was applied, or a plant divergence,
    yields a report with status "failed" instead of an exception.
    """
    r_nom = sc.nominal_load()
    config_echo = {
        "converter": params.to_dict(),
        "control_period": control_period,
        "nominal_r_load": r_nom,
        "i_ref_policy": "v_ref / nominal r_load",
        "model": sc.model,
    }
    seeds = {}
    fallback = {"count": 0}

    if isinstance(controller, PiController):
        pi_state = _primed_pi_state(controller.config, sc, params)
        config_echo["pi"] = controller.config.to_dict()
        config_echo["pi_integrator0"] = pi_state.integrator

        def ctrl(t: float, s: State) -> Duty:
            nonlocal pi_state
            duty, pi_state = pi_step(controller.config, pi_state,
                                     sc.v_ref.at(t), s.v_c, control_period)
            return duty

    elif isinstance(controller, NnpcController):
        bundle = controller.bundle
        mpc_cfg = controller.config
        if abs(bundle.sample_period - control_period) > 1e-12:
            raise ValueError(
                f"identifier sample period {bundle.sample_period} does not "
                f"match the control period {control_period}")
        if abs(mpc_cfg.step_period - control_period) > 1e-12:
            raise ValueError(
                f"mpc step period {mpc_cfg.step_period} does not match the "
                f"control period {control_period}")
        predictor = NeuralPredictor(bundle.network, bundle.stats,
                                    bundle.sample_period)
        nnpc = NnpcState(predictor=predictor, config=mpc_cfg)
        config_echo["mpc"] = mpc_cfg.to_dict()
        config_echo["identifier"] = predictor.describe()
        config_echo["fallback_policy"] = "hold last duty on optimizer failure"
        seeds["mpc_seed"] = mpc_cfg.seed
        last_duty = {"value": None}

        def ctrl(t: float, s: State) -> Duty:
            nonlocal nnpc
            v_ref = sc.v_ref.at(t)
            refs = References(v_ref, v_ref / r_nom)
            try:
                duty, nnpc = nnpc_step(nnpc, s, refs)
            except OptimizationError:
                if last_duty["value"] is None:
                    raise
                fallback["count"] += 1
                return Duty(last_duty["value"])
            last_duty["value"] = duty.value
            return duty

    else:
        raise TypeError(f"unknown controller {controller!r}")

    try:
        traj = simulate(sc.s0, params, ctrl, sc.duration, control_period,
                        model=sc.model, r_load_schedule=sc.r_load)
    except (IntegrationError, OptimizationError) as exc:
        t_fail = getattr(exc, "t", None)
        return RunReport(scenario=sc.to_dict(), controller=controller.id,
                         status="failed", config=config_echo, seeds=seeds,
                         fallback_steps=fallback["count"],
                         failure={"time": t_fail, "reason": str(exc)})

    metrics = compute_metrics(traj, sc)
    traj_path = None
    if out_dir is not None:
        base = stem or f"{sc.name}_{controller.id.lower()}"
        traj_path = f"{base}.csv"
        traj.to_csv(os.path.join(out_dir, traj_path))
    report = RunReport(scenario=sc.to_dict(), controller=controller.id,
                       status="ok", config=config_echo, seeds=seeds,
                       metrics=metrics, trajectory_path=traj_path,
                       fallback_steps=fallback["count"], trajectory=traj)
    if out_dir is not None:
        atomic_write_text(os.path.join(out_dir, f"{base}_report.json"),
                          json.dumps(report.to_dict(), indent=2,
                                     sort_keys=True) + "\n")
    return report


# --- comparison ------------------------------------------------------------

_DELTA_FIELDS = ("overshoot", "settling_time", "steady_state_error",
                 "cumulative_cost", "dcm_fraction")


@dataclass(frozen=True)
class ComparisonReport:
    scenario: str
    controller_a: str
    controller_b: str
    metrics_a: Metrics
    metrics_b: Metrics
    deltas: dict  # b minus a, per metric; None when not comparable
    csv_path: Optional[str] = None
    table: Optional[dict] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario,
                "controller_a": self.controller_a,
                "controller_b": self.controller_b,
                "metrics_a": self.metrics_a.to_dict(),
                "metrics_b": self.metrics_b.to_dict(),
                "deltas": self.deltas,
                "csv_path": self.csv_path}


def compare(a: RunReport, b: RunReport, out_dir=None,
            stem: Optional[str] = None) -> ComparisonReport:
    """Side-by-side metrics plus the merged plot table for two runs."""
    if a.scenario != b.scenario:
        raise ValueError(
            f"cannot compare different scenarios "
            f"{a.scenario.get('name')!r} vs {b.scenario.get('name')!r}")
    if a.config["converter"] != b.config["converter"]:
        raise ValueError("cannot compare runs with different plant params")
    if a.status != "ok" or b.status != "ok":
        raise ValueError("cannot compare failed runs")

    deltas = {}
    for name in _DELTA_FIELDS:
        va, vb = getattr(a.metrics, name), getattr(b.metrics, name)
        if name == "overshoot" and \
                a.metrics.overshoot_unit != b.metrics.overshoot_unit:
            deltas[name] = None
        elif va is None or vb is None:
            deltas[name] = None
        else:
            deltas[name] = vb - va

    ta = a.trajectory if a.trajectory is not None else None
    tb = b.trajectory if b.trajectory is not None else None
    if ta is None or tb is None:
        raise ValueError("compare needs in-memory trajectories")
    if len(ta) != len(tb) or ta.dt != tb.dt:
        raise ValueError("trajectories are not on the same time grid")

    sc = Scenario.from_dict(a.scenario)
    table = {"t": ta.t, "v_c_a": ta.v_c, "v_c_b": tb.v_c,
             "i_l_a": ta.i_l, "i_l_b": tb.i_l,
             "v_ref": np.array([sc.v_ref.at(t) for t in ta.t])}

    csv_path = None
    if out_dir is not None:
        base = stem or f"{sc.name}_compare"
        csv_path = f"{base}.csv"
        lines = ["t,v_c_a,v_c_b,i_l_a,i_l_b,v_ref"]
        for k in range(len(ta)):
            lines.append(",".join(
                f"{table[col][k]:.9g}"
                for col in ("t", "v_c_a", "v_c_b", "i_l_a", "i_l_b", "v_ref")))
        atomic_write_text(os.path.join(out_dir, csv_path),
                          "\n".join(lines) + "\n")

    comp = ComparisonReport(scenario=sc.name, controller_a=a.controller,
                            controller_b=b.controller, metrics_a=a.metrics,
                            metrics_b=b.metrics, deltas=deltas,
                            csv_path=csv_path, table=table)
    if out_dir is not None:
        atomic_write_text(os.path.join(out_dir, f"{base}.json"),
                          json.dumps(comp.to_dict(), indent=2,
                                     sort_keys=True) + "\n")
    return comp
