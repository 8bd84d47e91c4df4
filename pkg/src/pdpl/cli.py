"""Command-line interface: ``pdpl <subcommand> [options]``.

Every subcommand prints a JSON document on stdout and exits with status 0
only when the requested operation fully succeeded (a certified policy, a
passed evaluation, a completed simulation, a successful or identical
pipeline run).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bounds
from .config import load_config
from .dataset import DatasetError, generate_dataset, load_dataset, save_dataset
from .evaluation import bench, monte_carlo_eval
from .pipeline import MANIFEST, PipelineFailure, replay, run_pipeline
from .policies import (DUAL, MLP, PRIMAL, RBN, PolicyFormatError, load_policy, mlp_template,
                       rbn_template, save_policy, train_dual, train_primal)
from .runtime import ControllerContext, closed_loop_sim, lane_change


def _emit(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.pipeline = dataclasses.replace(cfg.pipeline, seed=args.seed)
    return cfg


def cmd_sample_size(args) -> int:
    spec = bounds.BoundSpec(args.epsilon, args.beta)
    if args.split:
        spec = spec.split()[0]
    out = {"epsilon": spec.epsilon, "beta": spec.beta}
    if args.n_rb is not None:
        out["rbn"] = bounds.describe(spec, n_dec=bounds.rbn_decision_count(args.n_rb, args.output_dim))
    if args.widths:
        out["mlp"] = bounds.describe(spec, widths=args.widths, input_dim=args.input_dim)
    if args.n_dec is not None:
        out["scenario"] = bounds.describe(spec, n_dec=args.n_dec)
    _emit(out, args.out)
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    ds = generate_dataset(cfg, args.N, cfg.pipeline.seed)
    save_dataset(ds, cfg, args.out)
    _emit(dict(ds.header, path=str(args.out)))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.data, cfg, check_fraction=args.check_fraction)
    N = len(ds) if args.N is None else args.N
    if N > len(ds):
        raise DatasetError(f"dataset holds {len(ds)} rows, {N} requested")
    data = ds.labeled(cfg, N)
    seed = cfg.pipeline.seed
    out_dim = cfg.mpc.n_var if args.role == PRIMAL else cfg.mpc.n_con
    if args.kind == RBN:
        box = cfg.box
        template = rbn_template(box.lower, box.upper, args.size, out_dim, seed, args.role, cfg.train.width_scale)
    else:
        template = mlp_template(cfg.mpc.n_param, args.size, cfg.train.mlp_depth, out_dim, seed, args.role)
    fn = train_primal if args.role == PRIMAL else train_dual
    policy, t_star, report = fn(data, template, cfg.train)
    save_policy(policy, args.out)
    _emit(dict(report, path=str(args.out), config_hash=cfg.hash()), args.report)
    return 0 if t_star is not None else 1


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    rep = monte_carlo_eval(load_policy(args.primal), load_policy(args.dual), cfg, args.M,
                           cfg.pipeline.seed, epsilon=args.epsilon, t_max=args.t_max)
    _emit(rep.to_dict(), args.out)
    return 0 if rep.passed and rep.soundness_violations == 0 else 1


def cmd_bench(args) -> int:
    cfg = _config(args)
    rep = bench(load_policy(args.primal), load_policy(args.dual), cfg, args.M, cfg.pipeline.seed, args.warmup)
    _emit(rep.to_dict(), args.out)
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    ctx = ControllerContext(load_policy(args.primal), load_policy(args.dual), cfg.mpc, cfg.vehicle,
                            t_max=cfg.train.t_max if args.t_max is None else args.t_max, solver=cfg.solver)
    scen = lane_change(cfg.vehicle, steps=args.steps)
    trace = closed_loop_sim(ctx, scen, oracle=args.oracle)
    if args.trace:
        trace.to_csv(args.trace, cfg.mpc)
    summary = dict(trace.summary(), elapsed_s=trace.elapsed, oracle_elapsed_s=trace.oracle_elapsed)
    _emit(summary, args.out)
    return 0 if trace.aborted is None else 1


def cmd_pipeline(args) -> int:
    if args.replay:
        res = replay(args.replay, args.out)
        _emit({"identical": res["identical"], "mismatched": res["mismatched"],
               "success": res["manifest"]["success"], "manifest": str(Path(args.out) / MANIFEST)})
        return 0 if res["identical"] and res["manifest"]["success"] else 1
    cfg = _config(args)
    res = run_pipeline(cfg, args.out)
    _emit(res.manifest)
    return 0 if res.success else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdpl", description="Certified primal-dual policy learning for LPV MPC.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="INI configuration file (defaults when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="override the pipeline seed")
        return p

    p = sub.add_parser("sample-size", help="sample sizes for a violation level and confidence")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=2e-7)
    p.add_argument("--split", action="store_true", help="use the equal primal/dual share")
    p.add_argument("--n-rb", type=int, help="basis functions of an RBN policy")
    p.add_argument("--output-dim", type=int, default=9)
    p.add_argument("--n-dec", type=int, help="decision variables of a convex sampled program")
    p.add_argument("--widths", type=int, nargs="+", help="MLP layer widths including the output layer")
    p.add_argument("--input-dim", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_size)

    p = common(sub.add_parser("generate-data", help="labeled dataset of solved MPC problems"))
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train one certified policy"))
    p.add_argument("--data", required=True)
    p.add_argument("--role", choices=(PRIMAL, DUAL), required=True)
    p.add_argument("--kind", choices=(RBN, MLP), default=RBN)
    p.add_argument("--size", type=int, required=True, help="basis functions (rbn) or hidden width (mlp)")
    p.add_argument("--N", type=int, help="use the first N rows")
    p.add_argument("--check-fraction", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="Monte Carlo evaluation against the exact QP"))
    p.add_argument("--primal", required=True)
    p.add_argument("--dual", required=True)
    p.add_argument("--M", type=int, default=100_000)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--t-max", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("bench", help="certify path versus online QP timing"))
    p.add_argument("--primal", required=True)
    p.add_argument("--dual", required=True)
    p.add_argument("--M", type=int, default=2000)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("simulate", help="closed-loop lane change"), seed=False)
    p.add_argument("--primal", required=True)
    p.add_argument("--dual", required=True)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--t-max", type=float)
    p.add_argument("--oracle", action="store_true", help="solve every step exactly for suboptimality")
    p.add_argument("--trace", help="per-step CSV trace")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("pipeline", help="full offline phase, or replay from a manifest"))
    p.add_argument("--out", required=True)
    p.add_argument("--replay", help="manifest.json of an earlier run to reproduce and compare")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (DatasetError, PolicyFormatError, PipelineFailure, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
