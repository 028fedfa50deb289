"""Run configuration: JSON file -> validated settings with echoed defaults.

Five sections (converter, pi, mpc, sysid, scenario), all optional; any key
the code does not know is rejected by name rather than ignored.  A single
seed override (flag or NNPC_SEED environment variable) rewrites every
section seed so one number reproduces a whole pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

from .converter import DEFAULT_PARAMS, ConverterParams, State, StepSchedule
from .harness import Scenario, built_in_scenarios
from .mpc import MpcConfig
from .nn import TrainConfig
from .pi_controller import PiConfig, tune_pi
from .sysid import DEFAULT_TRAIN, SAMPLE_PERIOD_PRESETS, ExcitationConfig

DEFAULT_CONTROL_PERIOD = 20e-6


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key."""


@dataclass(frozen=True)
class SysidSettings:
    excitation: ExcitationConfig
    train: TrainConfig
    n_samples: int = 10000
    sample_period: float = SAMPLE_PERIOD_PRESETS["recommended"]
    control_period: float = DEFAULT_CONTROL_PERIOD
    hidden: int = 7

    def to_dict(self) -> dict:
        return {"excitation": self.excitation.to_dict(),
                "train": self.train.to_dict(),
                "n_samples": self.n_samples,
                "sample_period": self.sample_period,
                "control_period": self.control_period,
                "hidden": self.hidden}


@dataclass(frozen=True)
class AppConfig:
    converter: ConverterParams
    pi: PiConfig
    mpc: MpcConfig
    sysid: SysidSettings
    scenario: Scenario
    control_period: float = DEFAULT_CONTROL_PERIOD

    def to_dict(self) -> dict:
        return {"converter": self.converter.to_dict(),
                "pi": self.pi.to_dict(),
                "mpc": self.mpc.to_dict(),
                "sysid": self.sysid.to_dict(),
                "scenario": self.scenario.to_dict(),
                "control_period": self.control_period}


def _check_keys(section: str, d: dict, allowed):
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key!r}")


def _schedule(section: str, key: str, raw) -> StepSchedule:
    if isinstance(raw, (int, float)):
        return StepSchedule.constant(float(raw))
    if isinstance(raw, dict):
        _check_keys(f"{section}.{key}", raw, {"times", "values"})
        try:
            return StepSchedule(tuple(float(t) for t in raw["times"]),
                                tuple(float(v) for v in raw["values"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad schedule {section}.{key}: {exc}") from exc
    raise ConfigError(f"{section}.{key} must be a number or times/values dict")


def _converter_section(raw: dict) -> ConverterParams:
    _check_keys("converter", raw, {"vs", "r_load", "l", "c", "f_sw"})
    base = DEFAULT_PARAMS
    return ConverterParams(vs=raw.get("vs", base.vs),
                           r_load=raw.get("r_load", base.r_load),
                           l=raw.get("l", base.l),
                           c=raw.get("c", base.c),
                           f_sw=raw.get("f_sw", base.f_sw))


def _pi_section(raw: dict, params: ConverterParams) -> PiConfig:
    allowed = {"kp", "ki", "out_min", "out_max", "target_crossover",
               "phase_margin"}
    _check_keys("pi", raw, allowed)
    out_min = raw.get("out_min", 0.0)
    out_max = raw.get("out_max", 1.0)
    if ("kp" in raw) != ("ki" in raw):
        raise ConfigError("pi needs both kp and ki, or neither")
    if "kp" in raw:
        if "target_crossover" in raw or "phase_margin" in raw:
            raise ConfigError("pi: give explicit gains or tuning targets, not both")
        return PiConfig(kp=raw["kp"], ki=raw["ki"], out_min=out_min,
                        out_max=out_max)
    return tune_pi(params,
                   target_crossover=raw.get("target_crossover", 3e3),
                   phase_margin=raw.get("phase_margin", 60.0),
                   out_min=out_min, out_max=out_max)


def _mpc_section(raw: dict) -> MpcConfig:
    allowed = {"horizon", "discount", "d_min", "d_max", "iterations",
               "step_size", "restarts", "step_period", "slew_weight",
               "use_warm_start", "seed"}
    _check_keys("mpc", raw, allowed)
    return MpcConfig(**{k: raw[k] for k in allowed if k in raw})


def _sysid_section(raw: dict) -> SysidSettings:
    allowed = {"n_samples", "sample_period", "control_period", "hidden",
               "v_ref_range", "r_load_range", "dwell_range", "seed",
               "learning_rate", "epochs", "batch_size"}
    _check_keys("sysid", raw, allowed)

    period = raw.get("sample_period", "recommended")
    if isinstance(period, str):
        if period not in SAMPLE_PERIOD_PRESETS:
            raise ConfigError(
                f"unknown sysid.sample_period preset {period!r}; "
                f"expected one of {sorted(SAMPLE_PERIOD_PRESETS)}")
        period = SAMPLE_PERIOD_PRESETS[period]

    exc = ExcitationConfig(
        v_ref_range=tuple(raw.get("v_ref_range", (6.0, 18.0))),
        r_load_range=tuple(raw.get("r_load_range", (4.0, 8.0))),
        dwell_range=tuple(raw.get("dwell_range", (5e-3, 50e-3))),
        seed=raw.get("seed", 0))
    train = replace(DEFAULT_TRAIN,
                    learning_rate=raw.get("learning_rate",
                                          DEFAULT_TRAIN.learning_rate),
                    epochs=raw.get("epochs", DEFAULT_TRAIN.epochs),
                    batch_size=raw.get("batch_size", DEFAULT_TRAIN.batch_size),
                    seed=raw.get("seed", DEFAULT_TRAIN.seed))
    return SysidSettings(excitation=exc, train=train,
                         n_samples=raw.get("n_samples", 10000),
                         sample_period=float(period),
                         control_period=raw.get("control_period",
                                                DEFAULT_CONTROL_PERIOD),
                         hidden=raw.get("hidden", 7))


def _scenario_section(raw: dict):
    allowed = {"name", "s0", "v_ref", "r_load", "duration", "model",
               "control_period"}
    _check_keys("scenario", raw, allowed)
    control_period = raw.get("control_period", DEFAULT_CONTROL_PERIOD)

    inline_keys = {"s0", "v_ref", "r_load", "duration", "model"} & set(raw)
    if not inline_keys:
        name = raw.get("name", "startup")
        builtins = built_in_scenarios()
        if name not in builtins:
            raise ConfigError(
                f"unknown scenario {name!r}; expected one of "
                f"{sorted(builtins)} or an inline definition")
        return builtins[name], control_period

    missing = {"s0", "v_ref", "r_load", "duration"} - set(raw)
    if missing:
        raise ConfigError(
            f"inline scenario is missing {sorted(missing)}")
    s0 = raw["s0"]
    if not (isinstance(s0, (list, tuple)) and len(s0) == 2):
        raise ConfigError("scenario.s0 must be [i_l, v_c]")
    return Scenario(name=raw.get("name", "custom"),
                    s0=State(float(s0[0]), float(s0[1])),
                    v_ref=_schedule("scenario", "v_ref", raw["v_ref"]),
                    r_load=_schedule("scenario", "r_load", raw["r_load"]),
                    duration=float(raw["duration"]),
                    model=raw.get("model", "averaged")), control_period


def load_config(path=None, seed: Optional[int] = None) -> AppConfig:
    """Build the resolved configuration; a None path means all defaults.

    seed, when given, overrides every section's seed in one stroke.
    """
    raw = {}
    if path is not None:
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
    _check_keys("config", raw, {"converter", "pi", "mpc", "sysid", "scenario"})

    for section in raw:
        if not isinstance(raw[section], dict):
            raise ConfigError(f"section {section!r} must be an object")

    try:
        params = _converter_section(raw.get("converter", {}))
        pi = _pi_section(raw.get("pi", {}), params)
        mpc = _mpc_section(raw.get("mpc", {}))
        sysid = _sysid_section(raw.get("sysid", {}))
        scenario, control_period = _scenario_section(raw.get("scenario", {}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    cfg = AppConfig(converter=params, pi=pi, mpc=mpc, sysid=sysid,
                    scenario=scenario, control_period=control_period)
    if seed is not None:
        cfg = override_seed(cfg, seed)
    return cfg


def override_seed(cfg: AppConfig, seed: int) -> AppConfig:
    """Rewrite every section seed from one knob."""
    return replace(
        cfg,
        mpc=replace(cfg.mpc, seed=seed),
        sysid=replace(cfg.sysid,
                      excitation=replace(cfg.sysid.excitation, seed=seed),
                      train=replace(cfg.sysid.train, seed=seed)))
