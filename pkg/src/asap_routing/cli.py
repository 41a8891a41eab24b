"""Command-line entry point: generate / train / solve / benchmark / plot."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from .baselines import (ORACLE_MAX_CUSTOMERS, brute_force_oracle, greedy_heuristic, load_solution,
                        policy_solutions, save_solution)
from .errors import IncompatibilityError, IntegrityError, ParseError, RoutingError, TrainingAborted, ValidationError
from .fileio import atomic_write_text
from .instance import GenerationConfig, generate_instance, load_instance, save_instance
from .policy import PolicyConfig

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
BENCH_COLUMNS = ["instance_id", "nodes", "seed", "solver", "distance", "served_demand", "vehicles_used",
                 "objective", "wallclock_s", "deviation", "status"]

log = logging.getLogger("asap_routing")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return v


def _unit_float(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


# -- generate ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    gen = GenerationConfig(fleet_size=args.fleet, capacity_raw=args.capacity, max_raw_demand=args.max_demand,
                           min_end_time=args.tmin, max_end_time=args.tmax, speed=args.speed)
    gen.validate()
    out = Path(args.out_dir)
    print(f"{'file':<24}{'nodes':>7}{'seed':>8}{'demand':>9}{'fleet':>7}")
    for i in range(args.count):
        seed = args.seed + i
        inst = generate_instance(args.nodes, seed, gen)
        name = f"N{args.nodes}_s{seed}.json"
        save_instance(inst, out / name)
        print(f"{name:<24}{inst.num_nodes:>7}{seed:>8}{inst.demand.sum():>9.3f}{inst.fleet_size:>7}")
    return EXIT_OK


# -- train --------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .plotting import render_learning_curve, save_figure
    from .trainer import TrainConfig, train

    if args.traj is not None and args.traj != args.nodes:
        raise UsageError(f"--traj must equal --nodes ({args.nodes}) for POMO rollouts, got {args.traj}")
    if args.envs % args.minibatches:
        raise UsageError(f"--envs {args.envs} must be divisible by --minibatches {args.minibatches}")
    if args.dim % args.heads:
        raise UsageError(f"--dim {args.dim} must be divisible by --heads {args.heads}")
    ff = args.ff if args.ff is not None else 4 * args.dim
    if ff < args.dim:
        raise UsageError(f"--ff {ff} must be >= --dim {args.dim}")
    tc = TrainConfig(num_customers=args.nodes, num_envs=args.envs, steps_per_rollout=args.steps,
                     global_updates=args.updates, minibatches=args.minibatches, update_epochs=args.epochs,
                     gamma=args.gamma, gae_lambda=args.gae_lambda, clip_coef=args.clip, ent_coef=args.ent_coef,
                     vf_coef=args.vf_coef, learning_rate=args.lr, penalty=args.penalty,
                     eval_every=args.eval_every, eval_instances=args.eval_instances, seed=args.seed)
    pc = PolicyConfig(embed_dim=args.dim, heads=args.heads, encoder_layers=args.layers, ff_dim=ff)
    out = Path(args.out_dir)

    def report(row):
        print(f"update {row['update']:>6}  objective {row['mean_objective']:.4f}  "
              f"episode {row['mean_episode_objective']:.4f}  distance {row['mean_distance']:.4f}  "
              f"served {row['mean_served_demand']:.3f}", flush=True)

    try:
        result = train(tc, out, pc, on_eval=report)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_figure(render_learning_curve(result.metrics_path, result.eval_path), out / "learning_curve.svg")
    print(f"checkpoint: {result.path}\nmetrics: {result.metrics_path}")
    return EXIT_OK


# -- solve ---------------------------------------------------------------------------

def _trace_dict(record, k: int, instance) -> dict:
    live = record.live[:, 0, k]
    steps = [t for t in range(len(live)) if bool(live[t])]
    logits = record.logits[:, 0, k]
    return {
        "version": 1,
        "nodes": instance.num_nodes,
        "trajectory": k,
        "actions": [int(record.actions[t, 0, k]) for t in steps],
        "forced": [bool(record.forced[t]) for t in steps],
        "logits": [[float(v) if math.isfinite(v) else None for v in logits[t].tolist()] for t in steps],
    }


def cmd_solve(args) -> int:
    from .trainer import load_checkpoint

    inst = load_instance(args.instance)
    policy, _ = load_checkpoint(args.checkpoint)
    gen = torch.Generator().manual_seed(args.rng_seed) if args.mode == "sample" else None
    sols, record, _ = policy_solutions(policy, inst, args.mode, gen, args.penalty, trace=bool(args.trace))
    k = min(range(len(sols)), key=lambda i: sols[i].objective)
    sol = sols[k]
    save_solution(sol, args.out)
    if args.trace:
        atomic_write_text(args.trace, json.dumps(_trace_dict(record, k, inst)) + "\n")
    print(f"objective {sol.objective:.4f}  distance {sol.total_distance:.4f}  served {sol.served_demand:.3f}  "
          f"tours {sol.vehicles_used}  feasible {sol.feasible}")
    return EXIT_OK


# -- benchmark -------------------------------------------------------------------------

_POLICY_CACHE = {}


def _bench_one(path: str, solvers, checkpoint, penalty):
    inst = load_instance(path)
    rows = []
    for solver in solvers:
        row = {"instance_id": Path(path).stem, "nodes": inst.num_nodes,
               "seed": "" if inst.seed is None else inst.seed, "solver": solver}
        if solver == "oracle" and inst.num_customers > ORACLE_MAX_CUSTOMERS:
            rows.append({**row, "status": f"skipped: more than {ORACLE_MAX_CUSTOMERS} customers"})
            continue
        t0 = time.perf_counter()
        if solver == "greedy":
            sol = greedy_heuristic(inst, penalty)
        elif solver == "oracle":
            sol = brute_force_oracle(inst, penalty)
        else:
            if checkpoint not in _POLICY_CACHE:
                from .trainer import load_checkpoint
                _POLICY_CACHE[checkpoint] = load_checkpoint(checkpoint)[0]
            sols, _, _ = policy_solutions(_POLICY_CACHE[checkpoint], inst, "greedy", None, penalty)
            sol = min(sols, key=lambda s: s.objective)
        rows.append({**row, "distance": sol.total_distance, "served_demand": sol.served_demand,
                     "vehicles_used": sol.vehicles_used, "objective": sol.objective,
                     "wallclock_s": time.perf_counter() - t0, "status": "ok", "_solution": sol})
    ref = rows[0]
    for r in rows:
        if ref["status"] == "ok" and r["status"] == "ok" and ref["objective"] > 0:
            r["deviation"] = (r["objective"] - ref["objective"]) / ref["objective"]
    return rows


def cmd_benchmark(args) -> int:
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    unknown = [s for s in solvers if s not in ("policy", "greedy", "oracle")]
    if unknown or not solvers:
        raise UsageError(f"--solvers: unknown solver(s) {unknown}; choose from policy, greedy, oracle")
    if "policy" in solvers and not args.checkpoint:
        raise UsageError("--checkpoint is required when --solvers includes policy")
    files = sorted(str(p) for p in Path(args.instances_dir).glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no instance files (*.json) in {args.instances_dir}")
    if "oracle" in solvers:
        for f in files:
            inst = load_instance(f)
            if inst.num_customers > ORACLE_MAX_CUSTOMERS:
                warnings.warn(f"{Path(f).name}: {inst.num_customers} customers, oracle row skipped")
    job = (solvers, args.checkpoint, args.penalty)
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_bench_one, files, *([x] * len(files) for x in job)))
    else:
        results = [_bench_one(f, *job) for f in files]
    rows = [r for group in results for r in group]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{r[k]:.10g}" if isinstance(r.get(k), float) else r.get(k, "")) for k in BENCH_COLUMNS})
    atomic_write_text(args.out, buf.getvalue())
    if args.figures:
        from .plotting import render_benchmark, render_routes, save_figure
        fig_dir = Path(args.figures)
        save_figure(render_benchmark(rows), fig_dir / "benchmark.svg")
        for f, group in zip(files, results):
            inst = load_instance(f)
            for r in group:
                if r["status"] == "ok":
                    save_figure(render_routes(inst, r["_solution"], f"{r['instance_id']} {r['solver']}"),
                                fig_dir / f"{r['instance_id']}_{r['solver']}.svg")
    print(f"{'instance':<20}{'solver':<8}{'distance':>10}{'objective':>11}{'deviation':>11}")
    for r in rows:
        if r["status"] == "ok":
            dev = f"{r['deviation']:+.1%}" if "deviation" in r else ""
            print(f"{r['instance_id']:<20}{r['solver']:<8}{r['distance']:>10.4f}{r['objective']:>11.4f}{dev:>11}")
        else:
            print(f"{r['instance_id']:<20}{r['solver']:<8}  {r['status']}")
    return EXIT_OK


# -- plot ------------------------------------------------------------------------------

def cmd_plot(args) -> int:
    from .plotting import render_heatmap, render_routes, save_figure

    if args.trace:
        with open(args.trace, encoding="utf-8") as fh:
            trace = json.load(fh)
        save_figure(render_heatmap(trace["logits"], trace.get("actions")), args.out)
    else:
        if not (args.solution and args.instance):
            raise UsageError("route plots need both --solution and --instance (or give --trace)")
        save_figure(render_routes(load_instance(args.instance), load_solution(args.solution)), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asap-routing", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write random instance files")
    g.add_argument("--nodes", type=_positive_int, required=True, help="customers per instance (full scale: 50)")
    g.add_argument("--seed", type=int, required=True, help="seed of the first instance; later ones use seed+i")
    g.add_argument("--count", type=_positive_int, default=1, help="number of instances (default 1)")
    g.add_argument("--out-dir", required=True, help="directory for N{nodes}_s{seed}.json files")
    g.add_argument("--fleet", type=_positive_int, default=5, help="vehicles per instance (full scale: 5)")
    g.add_argument("--capacity", type=_positive_float, default=40.0, help="raw vehicle capacity (full scale: 40)")
    g.add_argument("--max-demand", type=_positive_int, default=10, help="largest raw demand (full scale: 10)")
    g.add_argument("--tmin", type=_positive_float, default=50.0, help="earliest customer end-time, s (full scale: 50)")
    g.add_argument("--tmax", type=_positive_float, default=10_000.0,
                   help="latest customer end-time, s (full scale: 10000)")
    g.add_argument("--speed", type=_positive_float, default=0.014,
                   help="vehicle speed, distance units per s (full scale: 0.014)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the policy with PPO (desk-scale defaults)")
    t.add_argument("--nodes", type=_positive_int, default=10, help="customers per training instance (full scale: 50)")
    t.add_argument("--envs", type=_positive_int, default=64, help="parallel environments (full scale: 1024)")
    t.add_argument("--updates", type=int, default=300, help="global PPO updates (full scale: 10000)")
    t.add_argument("--steps", type=_positive_int, default=100, help="environment steps per rollout (full scale: 100)")
    t.add_argument("--traj", type=_positive_int, default=None,
                   help="POMO trajectories per instance; must equal --nodes (full scale: 50)")
    t.add_argument("--dim", type=_positive_int, default=64, help="embedding dimension (full scale: 128)")
    t.add_argument("--heads", type=_positive_int, default=8, help="attention heads (full scale: 8)")
    t.add_argument("--layers", type=_positive_int, default=3, help="encoder layers (full scale: 3)")
    t.add_argument("--ff", type=_positive_int, default=None, help="feed-forward width (default 4*dim; full scale: 512)")
    t.add_argument("--lr", type=_positive_float, default=2.5e-4, help="Adam learning rate (default 2.5e-4)")
    t.add_argument("--gamma", type=_unit_float, default=0.99, help="discount factor (default 0.99)")
    t.add_argument("--gae-lambda", type=_unit_float, default=0.95, help="GAE lambda (default 0.95)")
    t.add_argument("--clip", type=_positive_float, default=0.2, help="PPO clip coefficient (default 0.2)")
    t.add_argument("--ent-coef", type=_nonneg_float, default=0.01, help="entropy coefficient (default 0.01)")
    t.add_argument("--vf-coef", type=_nonneg_float, default=0.5, help="value-loss coefficient (default 0.5)")
    t.add_argument("--minibatches", type=_positive_int, default=8, help="minibatches per epoch (full scale: 8)")
    t.add_argument("--epochs", type=_positive_int, default=4, help="update epochs per rollout (default 4)")
    t.add_argument("--penalty", type=_nonneg_float, default=10.0, help="depot-return load penalty P (full scale: 10)")
    t.add_argument("--seed", type=int, default=1234, help="training seed (full scale: 1234)")
    t.add_argument("--eval-every", type=_positive_int, default=100, help="updates between evaluations (full scale: 100)")
    t.add_argument("--eval-instances", type=_positive_int, default=32, help="held-out evaluation instances")
    t.add_argument("--out-dir", required=True, help="directory for checkpoint, metrics.csv, eval.csv")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="solve one instance with a trained checkpoint")
    s.add_argument("--instance", required=True, help="instance JSON file")
    s.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    s.add_argument("--mode", choices=("greedy", "sample"), default="greedy", help="decoding mode (default greedy)")
    s.add_argument("--rng-seed", type=int, default=0, help="seed for sample mode (default 0)")
    s.add_argument("--penalty", type=_nonneg_float, default=10.0, help="depot-return load penalty P (full scale: 10)")
    s.add_argument("--out", required=True, help="solution JSON file")
    s.add_argument("--trace", default=None, help="optional JSON file for the per-step logit table")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("benchmark", help="compare solvers on a directory of instances")
    b.add_argument("--instances-dir", required=True, help="directory of instance JSON files")
    b.add_argument("--checkpoint", default=None, help="checkpoint for the policy solver")
    b.add_argument("--solvers", default="policy,greedy,oracle",
                   help="comma list; deviations are relative to the first (default policy,greedy,oracle)")
    b.add_argument("--penalty", type=_nonneg_float, default=10.0, help="depot-return load penalty P (full scale: 10)")
    b.add_argument("--workers", type=_positive_int, default=1, help="parallel worker processes (default 1)")
    b.add_argument("--out", required=True, help="results CSV")
    b.add_argument("--figures", default=None, help="optional directory for route and summary SVGs")
    b.set_defaults(func=cmd_benchmark)

    pl = sub.add_parser("plot", help="render a route map or a logit heatmap to SVG")
    pl.add_argument("--solution", default=None, help="solution JSON (route mode)")
    pl.add_argument("--instance", default=None, help="instance JSON (route mode)")
    pl.add_argument("--trace", default=None, help="trace JSON from solve --trace (heatmap mode)")
    pl.add_argument("--out", required=True, help="output SVG file")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IncompatibilityError, IntegrityError, ParseError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, TrainingAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RoutingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
