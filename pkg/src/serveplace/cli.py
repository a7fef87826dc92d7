"""Command-line entry point: ``serveplace <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from . import experiment
from .estimators import STRATEGIES, make_strategy
from .layout import Placement
from .planner import config_table
from .profiles import MODEL_SETS, ClusterSpec, GB, dump_model_set, generate_model_set, load_model_set
from .queueing import max_overhead_frontier
from .simulator import SimOptions, simulate
from .workload import Workload, attach_slo, ingest_trace, power_law_split, synthetic_workload


def _load_models(args):
    if args.models:
        return load_model_set(args.models)
    return generate_model_set(args.set)


def _cluster(args):
    return ClusterSpec(args.devices, args.memory_gb * GB)


def cmd_gen_models(args):
    models = generate_model_set(args.set, num_layers=args.layers, heterogeneous=args.heterogeneous)
    dump_model_set(models, args.out)
    print(f"wrote {len(models)} profiles to {args.out}")


def cmd_configs(args):
    models = load_model_set(args.models) if args.models else generate_model_set(args.set)
    prof = next((m for m in models if m.name == args.model), None) if args.model else models[0]
    if prof is None:
        raise SystemExit(f"no model named {args.model!r}")
    w = csv.writer(sys.stdout)
    w.writerow(["s", "n", "D_s", "D_m", "mem_per_device"])
    for r in config_table(prof, args.group_size, ClusterSpec(args.group_size)):
        w.writerow([r["s"], r["n"], repr(r["D_s"]), repr(r["D_m"]), repr(r["mem_per_device"])])


def cmd_frontier(args):
    utils = np.round(np.arange(1, args.points) / args.points, 10)
    w = csv.writer(sys.stdout)
    w.writerow(["utilization", "alpha_max", "beta_max"])
    for u, a, b in max_overhead_frontier(utils):
        w.writerow([repr(float(u)), repr(a), repr(b)])


def cmd_workload(args):
    models = _load_models(args)
    names = [m.name for m in models]
    if args.trace:
        wl = ingest_trace(args.trace, names, seed=args.seed)
    else:
        wl = synthetic_workload(names, power_law_split(args.rate, names, args.exponent),
                                args.cv, args.duration, seed=args.seed)
    wl = attach_slo(wl, {m.name: m.latency for m in models}, args.slo_scale)
    wl.to_csv(args.out)
    print(f"wrote {len(wl)} requests to {args.out}")


def cmd_place(args):
    models = _load_models(args)
    wl = Workload.from_csv(args.workload)
    est = make_strategy(args.strategy, models, _cluster(args), max_batch=args.max_batch)
    est.fit(wl)
    plm = getattr(est, "placement_", None)
    if plm is None:
        raise SystemExit(f"{args.strategy} has no static placement")
    if args.out:
        plm.to_json(args.out)
    print(plm.table())


def cmd_simulate(args):
    models = _load_models(args)
    wl = Workload.from_csv(args.workload)
    plm = Placement.from_json(args.placement, models)
    rep = simulate(plm, wl, SimOptions(max_batch=args.max_batch), _cluster(args))
    if args.outcomes:
        rep.write_outcomes_csv(args.outcomes)
    if args.utilization:
        rep.write_utilization_csv(args.utilization)
    print(rep.to_json(args.report))


def cmd_run(args):
    rows = experiment.run_experiment(args.config, args.out, strategies=args.strategy,
                                     seed=args.seed, parallelism=args.parallelism)
    bad = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} rows written to {args.out}/results.csv"
          + (f" ({len(bad)} failed points)" if bad else ""))


def cmd_min_devices(args):
    res = experiment.find_min_devices(args.config, args.target, strategies=args.strategy,
                                      seed=args.seed)
    for name, n in res.items():
        print(f"{name}: {n if n is not None else 'not attained'}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="serveplace",
                                description="Model-parallel placement simulator for multi-model serving.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--models", help="model profile YAML")
        g.add_argument("--set", default="S1", choices=sorted(MODEL_SETS))

    def cluster_args(sp):
        sp.add_argument("--devices", type=int, default=8)
        sp.add_argument("--memory-gb", type=float, default=13.0)

    sp = sub.add_parser("gen-models", help="write a named model set as profile YAML")
    sp.add_argument("--set", default="S1", choices=sorted(MODEL_SETS))
    sp.add_argument("--layers", type=int, default=24)
    sp.add_argument("--heterogeneous", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_models)

    sp = sub.add_parser("configs", help="parallel config table for one model (CSV)")
    model_args(sp)
    sp.add_argument("--model", help="model name (default: first in the set)")
    sp.add_argument("--group-size", type=int, default=4)
    sp.set_defaults(func=cmd_configs)

    sp = sub.add_parser("frontier", help="max tolerable overhead factors vs utilization (CSV)")
    sp.add_argument("--points", type=int, default=20, help="grid of points-1 utilizations in (0,1)")
    sp.set_defaults(func=cmd_frontier)

    sp = sub.add_parser("workload", help="generate or ingest a workload CSV")
    model_args(sp)
    sp.add_argument("--trace", help="trace CSV (function,window_start_s,window_len_s,count)")
    sp.add_argument("--rate", type=float, default=10.0)
    sp.add_argument("--cv", type=float, default=4.0)
    sp.add_argument("--exponent", type=float, default=0.5)
    sp.add_argument("--duration", type=float, default=300.0)
    sp.add_argument("--slo-scale", type=float, default=5.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_workload)

    sp = sub.add_parser("place", help="search a placement and print it")
    model_args(sp)
    cluster_args(sp)
    sp.add_argument("--workload", required=True)
    sp.add_argument("--strategy", default="alpaserve",
                    choices=sorted(s for s in STRATEGIES if s != "clockwork-pp"))
    sp.add_argument("--max-batch", type=int)
    sp.add_argument("--out", help="placement JSON")
    sp.set_defaults(func=cmd_place)

    sp = sub.add_parser("simulate", help="simulate a placement on a workload")
    model_args(sp)
    cluster_args(sp)
    sp.add_argument("--workload", required=True)
    sp.add_argument("--placement", required=True)
    sp.add_argument("--max-batch", type=int)
    sp.add_argument("--report", help="summary JSON path")
    sp.add_argument("--outcomes", help="per-request CSV path")
    sp.add_argument("--utilization", help="per-group utilization CSV path")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="run an experiment config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--strategy", nargs="+", choices=sorted(STRATEGIES),
                    help="override the config's strategy list")
    sp.add_argument("--seed", type=int, help="override the config's seeds")
    sp.add_argument("--parallelism", type=int, default=1)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("min-devices", help="smallest cluster size reaching a target attainment")
    sp.add_argument("--config", required=True)
    sp.add_argument("--target", type=float, default=0.99)
    sp.add_argument("--strategy", nargs="+", choices=sorted(STRATEGIES))
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_min_devices)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except experiment.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
