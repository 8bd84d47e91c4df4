"""Offline phase: sample sizes, data, certified training with capacity growth, evaluation.

The violation budget is split equally between the primal and the dual
problem. Each attempt sizes both training sets from the current policy
capacities, extends one shared dataset to the larger size, and trains the
policies on prefixes of it. After a failed attempt a single policy grows:
the primal one while its training problem is infeasible, otherwise the one
with the larger certified level. The run succeeds once ``t_p + t_d <= t_max``.

Artifacts written to the output directory::

    dataset.csv        shared labeled dataset
    primal.pdpl        certified primal policy
    dual.pdpl          certified dual policy
    train_report.json  every attempt with its training diagnostics
    eval_report.json   held-out Monte Carlo evaluation
    bench_report.json  timing (machine dependent, not part of replay checks)
    config.ini         the full configuration
    manifest.json      seeds, budget split, endpoint and sha256 of every artifact
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .bounds import BoundSpec, MlpShape, sample_size_for
from .config import Config, load_config
from .dataset import dataset_to_csv, extend_dataset, generate_dataset
from .evaluation import bench, monte_carlo_eval
from .policies.io import policy_to_bytes
from .policies.networks import DUAL, MLP, PRIMAL, RBN, mlp_template, rbn_template
from .policies.training import train_dual, train_primal

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DETERMINISTIC = ("dataset.csv", "primal.pdpl", "dual.pdpl", "train_report.json",
                 "eval_report.json", "config.ini")


class PipelineFailure(RuntimeError):
    pass


@dataclass
class PipelineResult:
    success: bool
    manifest: dict
    primal: object = None
    dual: object = None
    out_dir: Path = field(default=None)


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _size_and_N(config: Config, role: str, size: int, split: BoundSpec):
    spec = config.mpc
    out = spec.n_var if role == PRIMAL else spec.n_con
    if config.pipeline.kind == RBN:
        N = sample_size_for(RBN, split, n_rb=size, output_dim=out)
    else:
        shape = MlpShape.uniform(spec.n_param, size, config.train.mlp_depth, out)
        N = sample_size_for(MLP, split, shape=shape)
    cap = config.pipeline.sample_cap
    return (min(N, cap), N) if cap else (N, N)


def _template(config: Config, role: str, size: int):
    spec, seed = config.mpc, config.pipeline.seed
    out = spec.n_var if role == PRIMAL else spec.n_con
    if config.pipeline.kind == RBN:
        box = config.box
        return rbn_template(box.lower, box.upper, size, out, seed, role, config.train.width_scale)
    return mlp_template(spec.n_param, size, config.train.mlp_depth, out, seed, role)


def run_pipeline(config: Config, out_dir, evaluate: bool = True, run_bench: bool = True) -> PipelineResult:
    """Run the offline phase and write all artifacts to ``out_dir``."""
    t_start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pc, tc = config.pipeline, config.train
    total = BoundSpec(pc.epsilon, pc.beta)
    split_p, split_d = total.split()
    start = tc.rbn_start if pc.kind == RBN else tc.mlp_width
    step = tc.rbn_step if pc.kind == RBN else tc.mlp_step
    sizes = {PRIMAL: start, DUAL: start}
    trained = {}
    attempts = []
    ds = None
    data = None
    success = False
    for attempt in range(pc.max_retries + 1):
        N = {}
        bound_N = {}
        for role, split in ((PRIMAL, split_p), (DUAL, split_d)):
            N[role], bound_N[role] = _size_and_N(config, role, sizes[role], split)
        need = max(N.values())
        if ds is None:
            ds = generate_dataset(config, need, pc.seed)
        elif len(ds) < need:
            ds = extend_dataset(ds, config, need)
        if data is None or len(data) < need:
            data = ds.labeled(config)
        results = {}
        for role, fn in ((PRIMAL, train_primal), (DUAL, train_dual)):
            key = (role, sizes[role], N[role])
            if key not in trained:
                log.info("attempt %d: training %s with size %d on %d samples", attempt, role, sizes[role], N[role])
                trained[key] = fn(data.head(N[role]), _template(config, role, sizes[role]), tc)
            results[role] = trained[key]
        t_p, t_d = results[PRIMAL][1], results[DUAL][1]
        record = {"attempt": attempt, "size_primal": sizes[PRIMAL], "size_dual": sizes[DUAL],
                  "N_primal": N[PRIMAL], "N_dual": N[DUAL],
                  "N_bound_primal": bound_N[PRIMAL], "N_bound_dual": bound_N[DUAL],
                  "t_p": t_p, "t_d": t_d,
                  "primal_infeasible_samples": results[PRIMAL][2].get("n_infeasible", 0)}
        if t_p is not None and t_d is not None and t_p + t_d <= tc.t_max:
            record["action"] = "done"
            attempts.append(record)
            success = True
            break
        grow = PRIMAL if t_p is None or (t_d is not None and t_p >= t_d) else DUAL
        record["action"] = f"grow-{grow}" if attempt < pc.max_retries else "budget-exhausted"
        attempts.append(record)
        log.info("attempt %d: t_p=%s t_d=%s -> %s", attempt, t_p, t_d, record["action"])
        if attempt < pc.max_retries:
            sizes[grow] += step

    primal, p_t, p_rep = results[PRIMAL]
    dual, d_t, d_rep = results[DUAL]
    bound_ok = all(a["N_primal"] == a["N_bound_primal"] and a["N_dual"] == a["N_bound_dual"]
                   for a in attempts[-1:])
    files = {
        "dataset.csv": dataset_to_csv(ds, config),
        "primal.pdpl": policy_to_bytes(primal),
        "dual.pdpl": policy_to_bytes(dual),
        "train_report.json": _json({"config_hash": config.hash(), "seed": pc.seed, "attempts": attempts,
                                    "primal": p_rep, "dual": d_rep}),
        "config.ini": config.to_ini().encode(),
    }
    timings = {"offline_s": round(time.perf_counter() - t_start, 1)}
    eval_dict = None
    if success and evaluate and pc.mc_samples > 0:
        t_eval = time.perf_counter()
        rep = monte_carlo_eval(primal, dual, config, pc.mc_samples, pc.seed)
        timings["evaluation_s"] = round(time.perf_counter() - t_eval, 1)
        eval_dict = dict(rep.to_dict(), config_hash=config.hash(), problem_hash=config.problem_hash())
        files["eval_report.json"] = _json(eval_dict)
    if success and run_bench:
        b = bench(primal, dual, config, pc.bench_samples, pc.seed)
        files["bench_report.json"] = _json(dict(b.to_dict(), config_hash=config.hash()))
    for name, blob in files.items():
        (out / name).write_bytes(blob)

    manifest = {
        "format": "pdpl-manifest", "version": 1,
        "success": success,
        "config_hash": config.hash(), "problem_hash": config.problem_hash(),
        "seeds": {"pipeline": pc.seed, "dataset": pc.seed, "templates": pc.seed, "training": tc.seed,
                  "evaluation": pc.seed, "bench": pc.seed},
        "split": {"epsilon": total.epsilon, "beta": total.beta,
                  "epsilon_p": split_p.epsilon, "beta_p": split_p.beta,
                  "epsilon_d": split_d.epsilon, "beta_d": split_d.beta},
        "kind": pc.kind, "t_max": tc.t_max,
        "retries": len(attempts) - 1, "max_retries": pc.max_retries,
        "attempts": attempts,
        "endpoint": {"size_primal": sizes[PRIMAL], "size_dual": sizes[DUAL], "t_p": p_t, "t_d": d_t,
                     "t_sum": None if p_t is None or d_t is None else p_t + d_t,
                     "N_primal": attempts[-1]["N_primal"], "N_dual": attempts[-1]["N_dual"]},
        "bound_satisfied": bool(bound_ok),
        "dataset": {k: ds.header[k] for k in ("N", "attempted", "accepted", "rejected")},
        "evaluation": None if eval_dict is None else {"eps": eval_dict["eps"], "passed": eval_dict["passed"]},
        "artifacts": {name: sha256(blob) for name, blob in sorted(files.items())},
        "deterministic": [name for name in DETERMINISTIC if name in files],
        "elapsed_s": round(time.perf_counter() - t_start, 1),
        "timings": timings,
    }
    (out / MANIFEST).write_bytes(_json(manifest))
    return PipelineResult(success, manifest, primal, dual, out)


def replay(manifest_path, out_dir) -> dict:
    """Rerun the pipeline from the configuration next to a manifest and compare artifacts.

    Returns ``{"identical": bool, "mismatched": [...], "manifest": new_manifest}``.
    """
    manifest_path = Path(manifest_path)
    old = json.loads(manifest_path.read_text())
    config = load_config(manifest_path.parent / "config.ini")
    if config.hash() != old["config_hash"]:
        raise PipelineFailure("config.ini does not match the manifest's config hash")
    res = run_pipeline(config, out_dir)
    new = res.manifest
    mismatched = [name for name in old["deterministic"]
                  if old["artifacts"].get(name) != new["artifacts"].get(name)]
    return {"identical": not mismatched, "mismatched": mismatched, "manifest": new}
