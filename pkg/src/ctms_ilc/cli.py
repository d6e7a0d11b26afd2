"""Batch command-line entry point.

Three subcommands:

* ``simulate`` runs one scenario (controller kind, day count, parameter
  scalings) closed-loop and writes per-day records, metrics and a summary
  into an output directory sealed with the config hash;
* ``compare`` reads several scenario directories, subtracts a baseline
  run day-by-day and emits a delta table plus an SVG chart;
* ``gen-demand`` writes a synthetic peak demand CSV from shape
  parameters.

Exit codes: 0 on success, 3 for configuration errors, 4 for IO errors,
5 for solver failures (2 is reserved by argument parsing).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .configfile import ConfigError, config_hash, highway_to_dict, load_config
from .controllers import (CONTROLLER_KINDS, RecedingHorizonPlanner,
                          SolverFailure, run_day, write_planner_log)
from .demand import (PeakShape, generate_peak_profile, load_demand_csv,
                     save_demand_csv)
from .lifted import Estimates
from .metrics import MetricsReport, compare, evaluate
from .plant import DemandProfile
from .store import ExperimentLayout, StoreError, save_day

__all__ = ["main", "cmd_simulate", "cmd_compare", "cmd_gen_demand"]

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_SOLVER = 5


# ---------------------------------------------------------------------------
# simulate


def _scaled_estimates(cfg, demand: DemandProfile, r_beta: float,
                      r_delta: float, r_demand: float) -> Estimates:
    """Controller-side parameter estimates: ground truth times the
    scenario's scaling factors (the plant always uses ground truth)."""
    return Estimates(
        beta_es=r_beta * cfg.station.split_ratio,
        delta_es_steps=int(round(r_delta * cfg.station.service_delay_steps)),
        demand_es=DemandProfile(r_demand * demand.values))


def cmd_simulate(args) -> int:
    cfg, ctrl = load_config(args.config)
    demand = load_demand_csv(args.demand)
    out = Path(args.out)
    n_steps = len(demand)
    t_s = args.eval_start
    t_e = args.eval_end if args.eval_end is not None else min(1080, n_steps)
    if not 0 <= t_s <= t_e <= n_steps:
        raise ConfigError(f"evaluation window [{t_s}, {t_e}] outside the "
                          f"{n_steps}-step demand profile")
    digest = config_hash(cfg, ctrl)
    scalings = {"r_beta": args.r_beta, "r_delta": args.r_delta,
                "r_demand": args.r_demand}
    layout = ExperimentLayout.create(
        out.parent, out.name, digest, scalings, args.controller,
        highway_to_dict(cfg))

    estimates = None
    planner = None
    if args.controller in ("mpc_est", "ilc"):
        estimates = _scaled_estimates(cfg, demand, args.r_beta,
                                      args.r_delta, args.r_demand)
        planner = RecedingHorizonPlanner(cfg, ctrl, estimates)
    elif args.controller == "mpc_gt":
        planner = RecedingHorizonPlanner(
            cfg, ctrl, Estimates(
                beta_es=cfg.station.split_ratio,
                delta_es_steps=cfg.station.service_delay_steps,
                demand_es=demand))

    summary_rows = []
    prev = None
    for day in range(args.days):
        record, traj = run_day(cfg, demand, args.controller, ctrl,
                               estimates=estimates, prev_record=prev,
                               day_index=day, planner=planner)
        save_day(layout, record, digest)
        report = evaluate(traj, t_s, t_e, cfg)
        (layout.directory / f"metrics_day_{day:03d}.json").write_text(
            report.to_json() + "\n")
        summary_rows.append((day, report))
        prev = record
        print(f"day {day}: TTT {report.ttt:.4f}  TWT {report.twt:.4f}  "
              f"TTS {report.tts:.4f}  delta_emax {report.delta_emax:.6f}")

    with (layout.directory / "summary.csv").open("w", newline="") as fh:
        fh.write("day,ttt,twt,tts,delta_emax\n")
        for day, rep in summary_rows:
            fh.write(f"{day},{rep.ttt!r},{rep.twt!r},{rep.tts!r},"
                     f"{rep.delta_emax!r}\n")
    if planner is not None:
        write_planner_log(planner.log, layout.directory / "planner_log.csv")
    (layout.directory / "run.json").write_text(json.dumps({
        "controller": args.controller,
        "days": args.days,
        "scalings": scalings,
        "config_hash": digest,
        "eval_window": [t_s, t_e],
        "demand_steps": n_steps,
    }, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def _read_run(directory: Path) -> tuple[dict, list[MetricsReport]]:
    run_path = directory / "run.json"
    if not run_path.exists():
        raise StoreError(f"{directory} is not a finished scenario run "
                         f"(missing run.json)")
    meta = json.loads(run_path.read_text())
    reports = []
    for day in range(meta["days"]):
        path = directory / f"metrics_day_{day:03d}.json"
        if not path.exists():
            raise StoreError(f"missing {path}")
        reports.append(MetricsReport.from_json(path.read_text()))
    return meta, reports


def cmd_compare(args) -> int:
    base_meta, base_reports = _read_run(Path(args.baseline))
    baseline = base_reports[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    table = []       # (scenario name, [compared report per day])
    for directory in map(Path, args.scenarios):
        meta, reports = _read_run(directory)
        for key in ("config_hash", "eval_window"):
            if meta[key] != base_meta[key]:
                raise StoreError(
                    f"{directory} and baseline disagree on {key}: "
                    f"{meta[key]} vs {base_meta[key]}")
        table.append((directory.name,
                      [compare(rep, baseline) for rep in reports]))

    with (out / "deltas.csv").open("w", newline="") as fh:
        fh.write("scenario,day,ttt,twt,tts,delta_emax,"
                 "delta_ttt,delta_twt,delta_tts\n")
        for name, rows in table:
            for day, rep in enumerate(rows):
                fh.write(f"{name},{day},{rep.ttt!r},{rep.twt!r},{rep.tts!r},"
                         f"{rep.delta_emax!r},{rep.delta_ttt!r},"
                         f"{rep.delta_twt!r},{rep.delta_tts!r}\n")

    _delta_chart(table, out / "deltas.svg", args.log_scale)
    print(f"wrote {out / 'deltas.csv'} and {out / 'deltas.svg'}")
    return EXIT_OK


def _delta_chart(table, path: Path, log_scale: bool) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = (("delta_ttt", "|TTT - baseline| [veh h]"),
              ("delta_twt", "|TWT - baseline| [veh h]"),
              ("delta_tts", "|TTS - baseline| [veh h]"),
              ("delta_emax", "queue-capacity violation [-]"))
    fig, axes = plt.subplots(len(panels), 1, sharex=True,
                             figsize=(7, 2.2 * len(panels)))
    for ax, (field, label) in zip(axes, panels):
        for name, rows in table:
            days = np.arange(len(rows))
            values = np.abs([getattr(rep, field) for rep in rows])
            ax.plot(days, values, marker="o", label=name)
        ax.set_ylabel(label, fontsize=8)
        if log_scale and field != "delta_emax":
            ax.set_yscale("log")
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=7)
    axes[-1].set_xlabel("day")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# gen-demand


def cmd_gen_demand(args) -> int:
    shape = PeakShape(
        base_level=args.base_level, peak_level=args.peak_level,
        end_level=args.end_level, rise_steps=args.rise_steps,
        plateau_steps=args.plateau_steps, fall_steps=args.fall_steps,
        mid_level=args.mid_level, mid_dip_steps=args.mid_dip_steps,
        second_peak_level=args.second_peak_level,
        noise_std=args.noise_std, seed=args.seed)
    profile = generate_peak_profile(shape, args.steps)
    save_demand_csv(profile, args.out)
    print(f"wrote {args.steps} steps to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctms-ilc",
        description="Highway CTM simulation with service-station ramp "
                    "metering (MPC and iterative learning control).")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one scenario closed-loop")
    sim.add_argument("--config", required=True, help="highway+controller "
                     "config file")
    sim.add_argument("--demand", required=True, help="upstream demand CSV")
    sim.add_argument("--controller", required=True, choices=CONTROLLER_KINDS)
    sim.add_argument("--days", type=int, default=1,
                     help="repetitions of the demand pattern (default 1)")
    sim.add_argument("--r-beta", type=float, default=1.0,
                     help="scaling of the estimated split ratio")
    sim.add_argument("--r-delta", type=float, default=1.0,
                     help="scaling of the estimated service delay")
    sim.add_argument("--r-demand", type=float, default=1.0,
                     help="scaling of the estimated demand profile")
    sim.add_argument("--eval-start", type=int, default=0,
                     help="first step of the metrics window (default 0)")
    sim.add_argument("--eval-end", type=int, default=None,
                     help="last step of the metrics window "
                          "(default min(1080, steps))")
    sim.add_argument("--out", required=True,
                     help="scenario output directory (must not exist)")
    sim.set_defaults(func=cmd_simulate)

    cmp_ = sub.add_parser("compare",
                          help="tabulate and chart deltas vs a baseline run")
    cmp_.add_argument("scenarios", nargs="+",
                      help="scenario directories to compare")
    cmp_.add_argument("--baseline", required=True,
                      help="baseline scenario directory (day 0 is used)")
    cmp_.add_argument("--out", required=True, help="output directory")
    cmp_.add_argument("--log-scale", action="store_true",
                      help="logarithmic y axis on the delta panels")
    cmp_.set_defaults(func=cmd_compare)

    gen = sub.add_parser("gen-demand",
                         help="write a synthetic peak demand CSV")
    gen.add_argument("--steps", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--base-level", type=float, default=900.0)
    gen.add_argument("--peak-level", type=float, default=2000.0)
    gen.add_argument("--end-level", type=float, default=900.0)
    gen.add_argument("--rise-steps", type=int, default=240)
    gen.add_argument("--plateau-steps", type=int, default=420)
    gen.add_argument("--fall-steps", type=int, default=240)
    gen.add_argument("--mid-level", type=float, default=None)
    gen.add_argument("--mid-dip-steps", type=int, default=60)
    gen.add_argument("--second-peak-level", type=float, default=None)
    gen.add_argument("--noise-std", type=float, default=0.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_demand)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StoreError, OSError) as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
