"""Monte Carlo evaluation of a certified policy pair and timing benchmarks.

Evaluation draws fresh parameters from the sampling box, solves every QP
exactly and compares the policies against the optimum:

    t_p = p(U~) - J*,   t_d = J* - d(lambda~),   t = p(U~) - d(lambda~).

The compound violation event is the complement of
``{primal feasible and dual feasible and t <= t_max}``; its empirical rate
is tested against ``epsilon`` with the exact binomial tail.
"""

from __future__ import annotations

import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bounds import binomial_upper_test
from .config import Config
from .dataset import labeled_set
from .lpv_mpc import condense
from .policies.networks import Policy, eval_policy
from .qp import solve_primal
from .runtime import ControllerContext, certify_qp

MC_TAG = 0x4D43        # separates evaluation draws from training draws
CHUNK = 2000


def _stats(a) -> dict:
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return {"count": 0, "mean": None, "median": None, "max": None, "min": None}
    return {"count": int(a.size), "mean": float(a.mean()), "median": float(np.median(a)),
            "max": float(a.max()), "min": float(a.min())}


@dataclass
class EvalReport:
    M: int
    seed: int
    epsilon: float
    t_max: float
    t_p_star: Optional[float]
    t_d_star: Optional[float]
    t_p: dict
    t_d: dict
    t: dict
    eps_p: float
    eps_d: float
    eps: float
    violations: int
    p_value: float
    significance: float
    passed: bool
    soundness_violations: int
    negative_flags: int
    relative_suboptimality: dict
    relative_weighted: Optional[float]
    unsolved: int
    config_hash: str
    feas_tol: float
    baseline: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)


def draw_parameters(config: Config, M: int, seed: int):
    """Evaluation parameters in blocks of ``CHUNK`` from independent substreams."""
    box = config.box
    for block, start in enumerate(range(0, M, CHUNK)):
        k = min(CHUNK, M - start)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), MC_TAG, block]))
        yield box.lower + (box.upper - box.lower) * rng.random((k, box.dim))


def monte_carlo_eval(primal: Policy, dual: Policy, config: Config, M: int, seed: int = 0,
                     epsilon: float | None = None, t_max: float | None = None,
                     feas_tol: float = 1e-6, significance: float | None = None) -> EvalReport:
    """Held-out evaluation of a policy pair against the exact QP solution."""
    if M < 1:
        raise ValueError("M must be >= 1")
    epsilon = config.pipeline.epsilon if epsilon is None else epsilon
    t_max = config.train.t_max if t_max is None else t_max
    significance = config.pipeline.significance if significance is None else significance
    t_p_star, t_d_star = primal.certified_t, dual.certified_t

    tp, td, tt, rel, full_all = [], [], [], [], []
    ev_p = ev_d = ev = sound = neg = unsolved = 0
    for P in draw_parameters(config, M, seed):
        qps = [condense(config.mpc, config.vehicle, p) for p in P]
        sols = [solve_primal(q, config.solver) for q in qps]
        ok = np.array([s.ok for s in sols])
        unsolved += int((~ok).sum())
        if not ok.any():
            continue
        P = P[ok]
        sols = [s for s, keep in zip(sols, ok) if keep]
        const = np.array([q.const_offset for q, keep in zip(qps, ok) if keep])
        J = np.array([s.J_star for s in sols])
        data = labeled_set(config, P, J, np.array([s.U_star for s in sols]),
                           np.array([s.lambda_star for s in sols]))
        U = eval_policy(primal, P)
        lam = eval_policy(dual, P)
        p = data.primal_cost(U)
        d = data.dual_cost(lam)
        pf = data.violation(U).max(axis=1) <= feas_tol
        df = lam.min(axis=1) >= -feas_tol
        sub_p, sub_d, gap = p - J, J - d, p - d
        tp.append(sub_p); td.append(sub_d); tt.append(gap)

        ev_p += int(np.sum(~pf | (sub_p > (np.inf if t_p_star is None else t_p_star))))
        ev_d += int(np.sum(~df | (sub_d > (np.inf if t_d_star is None else t_d_star))))
        ev += int(np.sum(~(pf & df & (gap <= t_max))))

        scale = np.maximum(1.0, np.abs(J + const))
        neg += int(np.sum(sub_p < -1e-6 * scale))
        both = pf & df
        sound += int(np.sum(both & ((gap < sub_p - 1e-6 * scale) | (sub_p < -1e-6 * scale))))
        full = J + const
        keep = full > 1e-4
        rel.append(sub_p[keep] / full[keep])
        full_all.append(np.column_stack([sub_p, full]))

    n = M - unsolved
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    acc = np.concatenate(full_all) if full_all else np.zeros((0, 2))
    total = float(acc[:, 1].sum()) if acc.size else 0.0
    p_value = binomial_upper_test(ev, n, epsilon)
    rate = ev / n if n else 0.0
    return EvalReport(
        M=int(M), seed=int(seed), epsilon=float(epsilon), t_max=float(t_max),
        t_p_star=t_p_star, t_d_star=t_d_star,
        t_p=_stats(cat(tp)), t_d=_stats(cat(td)), t=_stats(cat(tt)),
        eps_p=ev_p / n if n else 0.0, eps_d=ev_d / n if n else 0.0, eps=rate,
        violations=int(ev), p_value=p_value, significance=float(significance),
        passed=bool(rate <= epsilon and p_value >= significance),
        soundness_violations=int(sound), negative_flags=int(neg),
        relative_suboptimality=_stats(cat(rel)),
        relative_weighted=float(acc[:, 0].sum() / total) if total > 0 else None,
        unsolved=int(unsolved), config_hash=config.problem_hash(), feas_tol=float(feas_tol),
    )


# ----------------------------------------------------------------------------
# timing

@dataclass
class BenchReport:
    M: int
    seed: int
    warmup: int
    policy: dict
    qp: dict
    speedup: Optional[float]
    policy_std_ratio: Optional[float]
    machine: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def machine_descriptor() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "cpu_count": os.cpu_count(), "python": sys.version.split()[0], "numpy": np.__version__}


def _timing(ns) -> dict:
    a = np.asarray(ns, dtype=float) * 1e-9
    if a.size == 0:
        return {"count": 0, "min": None, "max": None, "mean": None, "std": None, "median": None}
    return {"count": int(a.size), "min": float(a.min()), "max": float(a.max()), "mean": float(a.mean()),
            "std": float(a.std()), "median": float(np.median(a))}


def bench(primal: Policy, dual: Policy, config: Config, M: int, seed: int = 0,
          warmup: int = 50) -> BenchReport:
    """Per-parameter wall-clock time of the certify path versus an online QP solve.

    Both methods see the same parameters and the same prebuilt QP data; each
    call is timed individually with a monotonic nanosecond clock, and the
    first ``warmup`` calls of each method are discarded.
    """
    if M < 0 or warmup < 0:
        raise ValueError("M and warmup must be nonnegative")
    ctx = ControllerContext(primal, dual, config.mpc, config.vehicle, t_max=config.train.t_max,
                            solver=config.solver)
    total = M + warmup if M else 0
    P = np.concatenate(list(draw_parameters(config, total, seed))) if total else \
        np.zeros((0, config.mpc.n_param))
    qps = [condense(config.mpc, config.vehicle, p) for p in P]
    t_pol, t_qp = [], []
    clock = time.perf_counter_ns
    for i, (p, qp) in enumerate(zip(P, qps)):
        t0 = clock()
        certify_qp(ctx, qp, p)
        t1 = clock()
        solve_primal(qp, config.solver)
        t2 = clock()
        if i >= warmup:
            t_pol.append(t1 - t0)
            t_qp.append(t2 - t1)
    pol, q = _timing(t_pol), _timing(t_qp)
    speed = q["mean"] / pol["mean"] if pol["count"] and pol["mean"] > 0 else None
    ratio = pol["std"] / pol["mean"] if pol["count"] and pol["mean"] > 0 else None
    return BenchReport(int(M), int(seed), int(warmup), pol, q, speed, ratio, machine_descriptor())
