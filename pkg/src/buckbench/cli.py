"""Command-line workflow: collect data, train the identifier, run and
compare controllers.

Every command honors --config (JSON, see config.py) and --seed; the
NNPC_SEED environment variable outranks the flag.  Failures print one
JSON line on stderr and exit nonzero, so scripts can branch on them
without scraping prose.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .config import (DEFAULT_CONTROL_PERIOD, AppConfig, ConfigError,
                     load_config)
from .harness import (NnpcController, PiController, built_in_scenarios,
                      compare, run_scenario)
from .sysid import (IdentifierBundle, collect, fit_identifier, load_bundle,
                    load_dataset, preprocess, save_bundle, save_dataset)


class RunFailed(RuntimeError):
    """A scenario run ended in a failed report."""


def _resolve_seed(args) -> int | None:
    env = os.environ.get("NNPC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"NNPC_SEED must be an integer, got {env!r}")
    return args.seed


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_collect(args, cfg: AppConfig) -> int:
    sy = cfg.sysid
    n = args.samples if args.samples is not None else sy.n_samples
    ds = collect(cfg.converter, cfg.pi, sy.excitation, n_samples=n,
                 sample_period=sy.sample_period,
                 control_period=sy.control_period)
    save_dataset(ds, args.out)
    _emit({"written": args.out, "rows": len(ds),
           "sample_period": ds.sample_period, "seed": ds.seed})
    return 0


def cmd_train(args, cfg: AppConfig) -> int:
    ds = load_dataset(args.data)
    pairs, stats = preprocess(ds)
    hidden = args.hidden if args.hidden is not None else cfg.sysid.hidden
    net, stats, report = fit_identifier(pairs, stats, hidden=hidden,
                                        train_cfg=cfg.sysid.train)
    save_bundle(IdentifierBundle(net, stats, ds.sample_period), args.out)
    _emit({"written": args.out, "hidden": hidden,
           "sample_period": ds.sample_period, **report.to_dict()})
    return 0


def _pick_scenario(cfg: AppConfig, name):
    if name is None:
        return cfg.scenario
    builtins = built_in_scenarios()
    if name not in builtins:
        raise ConfigError(f"unknown scenario {name!r}; expected one of "
                          f"{sorted(builtins)}")
    return builtins[name]


def _nnpc_controller(cfg: AppConfig, model_path):
    """Load the bundle and line the periods up with it.

    Config values still at their defaults bend to the bundle's sample
    period; explicitly different values are a contradiction, not a hint.
    """
    bundle = load_bundle(model_path)
    mpc = cfg.mpc
    control_period = cfg.control_period
    if abs(mpc.step_period - bundle.sample_period) > 1e-12:
        if mpc.step_period == DEFAULT_CONTROL_PERIOD:
            mpc = replace(mpc, step_period=bundle.sample_period)
        else:
            raise ConfigError(
                f"mpc.step_period {mpc.step_period} contradicts the model's "
                f"sample period {bundle.sample_period}")
    if abs(control_period - bundle.sample_period) > 1e-12:
        if control_period == DEFAULT_CONTROL_PERIOD:
            control_period = bundle.sample_period
        else:
            raise ConfigError(
                f"scenario.control_period {control_period} contradicts the "
                f"model's sample period {bundle.sample_period}")
    return NnpcController(bundle=bundle, config=mpc), control_period


def cmd_simulate(args, cfg: AppConfig) -> int:
    sc = _pick_scenario(cfg, args.scenario)
    if args.controller == "pi":
        controller, control_period = PiController(cfg.pi), cfg.control_period
    else:
        if args.model is None:
            raise ConfigError("--model is required for --controller nnpc")
        controller, control_period = _nnpc_controller(cfg, args.model)

    os.makedirs(args.out_dir, exist_ok=True)
    report = run_scenario(sc, controller, cfg.converter,
                          control_period=control_period, out_dir=args.out_dir)
    if report.status != "ok":
        raise RunFailed(f"{sc.name}/{controller.id} failed: "
                        f"{report.failure.get('reason')}")

    from .figures import render_run_figure

    stem = f"{sc.name}_{controller.id.lower()}"
    render_run_figure(report.trajectory, sc,
                      os.path.join(args.out_dir, f"{stem}.png"))
    _emit({"scenario": sc.name, "controller": controller.id,
           "trajectory": report.trajectory_path,
           "metrics": report.metrics.to_dict()})
    return 0


def cmd_compare(args, cfg: AppConfig) -> int:
    sc = _pick_scenario(cfg, args.scenario)
    nnpc, control_period = _nnpc_controller(cfg, args.model)
    pi = PiController(cfg.pi)

    os.makedirs(args.out_dir, exist_ok=True)
    rep_pi = run_scenario(sc, pi, cfg.converter,
                          control_period=control_period, out_dir=args.out_dir)
    rep_nn = run_scenario(sc, nnpc, cfg.converter,
                          control_period=control_period, out_dir=args.out_dir)
    for rep in (rep_pi, rep_nn):
        if rep.status != "ok":
            raise RunFailed(f"{sc.name}/{rep.controller} failed: "
                            f"{rep.failure.get('reason')}")
    comp = compare(rep_pi, rep_nn, out_dir=args.out_dir)

    from .figures import render_compare_figure, render_run_figure

    render_run_figure(rep_pi.trajectory, sc,
                      os.path.join(args.out_dir, f"{sc.name}_pi.png"))
    render_run_figure(rep_nn.trajectory, sc,
                      os.path.join(args.out_dir, f"{sc.name}_nnpc.png"))
    render_compare_figure(comp,
                          os.path.join(args.out_dir, f"{sc.name}_compare.png"))
    _emit({"scenario": sc.name, "deltas": comp.deltas,
           "csv": comp.csv_path})
    return 0


def cmd_scenarios(args, cfg: AppConfig) -> int:
    for name, sc in sorted(built_in_scenarios().items()):
        print(f"{name}: {sc.duration * 1e3:g} ms, "
              f"v_ref {'->'.join(f'{v:g}' for v in sc.v_ref.values)} V, "
              f"r_load {'->'.join(f'{r:g}' for r in sc.r_load.values)} ohm, "
              f"{sc.model} model")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="buckbench",
        description="Buck converter control workbench: PI baseline vs "
                    "neural predictive control.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int,
                       help="override every section seed (NNPC_SEED wins)")

    p = sub.add_parser("collect", help="log excitation data to CSV")
    common(p)
    p.add_argument("--out", required=True, help="dataset CSV path")
    p.add_argument("--samples", type=int, help="row count override")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="fit the one-step identifier")
    common(p)
    p.add_argument("--data", required=True, help="dataset CSV from collect")
    p.add_argument("--out", required=True, help="model bundle path")
    p.add_argument("--hidden", type=int, help="hidden neuron count override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run one scenario under a controller")
    common(p)
    p.add_argument("--scenario", help="built-in scenario name")
    p.add_argument("--controller", choices=("pi", "nnpc"), required=True)
    p.add_argument("--model", help="identifier bundle (nnpc only)")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run PI and NNPC side by side")
    common(p)
    p.add_argument("--scenario", help="built-in scenario name")
    p.add_argument("--model", required=True, help="identifier bundle")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("scenarios", help="list built-in scenarios")
    common(p)
    p.set_defaults(func=cmd_scenarios)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seed = _resolve_seed(args)
        cfg = load_config(args.config, seed=seed)
        return args.func(args, cfg)
    except Exception as exc:  # one JSON line per failure, for scripts
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)},
                         sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
