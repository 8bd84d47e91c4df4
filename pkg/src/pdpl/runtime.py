"""Online certification of learned policies and closed-loop simulation.

Each control step evaluates the primal and dual policy at the current
parameter, checks ``H U~ <= h`` and ``lambda~ >= 0`` and computes the duality
gap ``p(U~) - d(lambda~)``. By weak duality the gap bounds the true
suboptimality of ``U~``; the policy input is applied when both points are
feasible and the gap is at most ``t_max``, otherwise the backup controller (an
exact online QP solve) takes over.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .lpv_mpc import (CondensedQp, MpcSpec, ParameterVector, VehicleParams, build_icc_matrices,
                      condense, parameter_names)
from .policies.networks import DUAL, PRIMAL, Policy, eval_policy
from .qp import SolverConfig, solve_primal

APPLY, BACKUP = "apply", "backup"
OK = "ok"
PRIMAL_INFEASIBLE = "primal-infeasible"
DUAL_INFEASIBLE = "dual-infeasible"
GAP_EXCEEDED = "gap-exceeds-t_max"
NON_FINITE = "non-finite"


class BackupFailure(RuntimeError):
    def __init__(self, status: str):
        super().__init__(f"backup QP not solved (status {status})")
        self.status = status


@dataclass
class CertificationOutcome:
    primal_feasible: bool
    dual_feasible: bool
    gap: float
    decision: str
    primal_cost: float
    dual_cost: float
    reason: str = OK
    U: Optional[np.ndarray] = field(default=None, repr=False)
    lam: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class ControllerContext:
    primal: Policy
    dual: Policy
    spec: MpcSpec = field(default_factory=MpcSpec)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    t_max: float = 4.0
    feas_tol: float = 1e-6
    backup_kind: str = "qp"
    solver: SolverConfig = field(default_factory=SolverConfig)
    u_prev: Optional[np.ndarray] = None
    counters: dict = field(default_factory=lambda: {"policy_evals": 0, "factorizations": 0, "qp_solves": 0})

    def __post_init__(self):
        if self.primal.role != PRIMAL or self.dual.role != DUAL:
            raise ValueError("context needs a primal and a dual policy")
        if self.primal.output_dim != self.spec.n_var:
            raise ValueError(f"primal policy outputs {self.primal.output_dim} values, MPC has {self.spec.n_var}")
        if self.dual.output_dim != self.spec.n_con:
            raise ValueError(f"dual policy outputs {self.dual.output_dim} values, MPC has {self.spec.n_con}")
        if self.backup_kind != "qp":
            raise ValueError(f"unsupported backup kind {self.backup_kind!r}")
        if self.u_prev is None:
            self.u_prev = np.zeros(self.spec.nu)
        self.u_prev = np.asarray(self.u_prev, dtype=float).copy()


def _flat(ctx: ControllerContext, P) -> np.ndarray:
    if isinstance(P, ParameterVector):
        return P.flatten()
    return np.asarray(P, dtype=float).ravel()


def certify_qp(ctx: ControllerContext, qp: CondensedQp, P) -> CertificationOutcome:
    """Certification for already condensed problem data; solves no optimization problem."""
    P = _flat(ctx, P)
    U = eval_policy(ctx.primal, P)
    lam = eval_policy(ctx.dual, P)
    ctx.counters["policy_evals"] += 2
    p = float(0.5 * U @ qp.Q @ U + qp.c @ U)
    w = qp.c + qp.H.T @ lam
    chol = cho_factor(qp.Q, check_finite=False)
    ctx.counters["factorizations"] += 1
    d = float(-0.5 * w @ cho_solve(chol, w, check_finite=False) - qp.h @ lam)
    gap = p - d
    pf = bool(np.all(qp.H @ U <= qp.h + ctx.feas_tol))
    df = bool(np.all(lam >= -ctx.feas_tol))
    if not (np.isfinite(p) and np.isfinite(d)):
        reason = NON_FINITE
    elif not pf:
        reason = PRIMAL_INFEASIBLE
    elif not df:
        reason = DUAL_INFEASIBLE
    elif not gap <= ctx.t_max:
        reason = GAP_EXCEEDED
    else:
        reason = OK
    decision = APPLY if reason == OK else BACKUP
    return CertificationOutcome(pf, df, gap, decision, p, d, reason, U, lam)


def certify(ctx: ControllerContext, P) -> CertificationOutcome:
    P = _flat(ctx, P)
    return certify_qp(ctx, condense(ctx.spec, ctx.vehicle, P), P)


def backup(ctx: ControllerContext, P, qp: CondensedQp | None = None) -> np.ndarray:
    """Exact MPC input sequence from an online QP solve."""
    if qp is None:
        qp = condense(ctx.spec, ctx.vehicle, _flat(ctx, P))
    sol = solve_primal(qp, ctx.solver)
    ctx.counters["qp_solves"] += 1
    if not sol.ok:
        raise BackupFailure(sol.status)
    return sol.U_star


def assemble_parameter(ctx: ControllerContext, x, v, y_ref, delta_preview) -> np.ndarray:
    spec = ctx.spec
    y_ref = np.asarray(y_ref, dtype=float).reshape(spec.T, spec.ny)
    delta = np.asarray(delta_preview, dtype=float).ravel()
    if delta.shape[0] != spec.T:
        raise ValueError(f"steering preview needs {spec.T} entries")
    if not v > 0:
        raise ValueError("velocity must be positive")
    return ParameterVector(x, v, y_ref, delta, ctx.u_prev).flatten()


def control_step(ctx: ControllerContext, x, v, y_ref, delta_preview):
    """One step of the online loop; returns ``(u, outcome)`` and updates ``ctx.u_prev``."""
    P = assemble_parameter(ctx, x, v, y_ref, delta_preview)
    qp = condense(ctx.spec, ctx.vehicle, P)
    outcome = certify_qp(ctx, qp, P)
    if outcome.decision == APPLY:
        U = outcome.U
    else:
        U = backup(ctx, P, qp)
    u = np.array(U[:ctx.spec.nu])
    ctx.u_prev = u.copy()
    return u, outcome


# ----------------------------------------------------------------------------
# scenarios

@dataclass
class Scenario:
    """Per-step velocity, steering and output references; previews read ahead."""

    v: np.ndarray
    delta: np.ndarray
    y_ref: np.ndarray
    x0: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        self.y_ref = np.atleast_2d(np.asarray(self.y_ref, dtype=float))
        n = self.v.shape[0]
        if self.delta.shape != (n,) or self.y_ref.shape[0] != n:
            raise ValueError("scenario profiles must have equal length")

    def __len__(self) -> int:
        return self.v.shape[0]

    def preview(self, t: int, T: int):
        idx = np.minimum(np.arange(t, t + T), len(self) - 1)
        return self.y_ref[idx], self.delta[idx]


def bicycle_yaw_rate(v, delta, vp: VehicleParams):
    """Steady-state yaw rate of the linear single-track model."""
    L = vp.l_front + vp.l_rear
    k_us = vp.m / L * (vp.l_rear / vp.C_front - vp.l_front / vp.C_rear)
    return v * delta / (L + k_us * v ** 2)


def lane_change(vp: VehicleParams, steps: int = 1200, v0: float = 3.0, v1: float = 21.5,
                amplitude: float = 0.04, start: float = 4.0, duration: float = 4.0) -> Scenario:
    """Single lane change during a linear acceleration from ``v0`` to ``v1``.

    Steering is one sine period; the yaw-rate reference is the bicycle-model
    response and the side-slip and roll references are zero.
    """
    t = np.arange(steps) * vp.dt
    v = np.linspace(v0, v1, steps)
    phase = (t - start) / duration
    delta = np.where((phase >= 0) & (phase <= 1), amplitude * np.sin(2 * np.pi * phase), 0.0)
    y_ref = np.zeros((steps, 3))
    y_ref[:, 1] = bicycle_yaw_rate(v, delta, vp)
    return Scenario(v, delta, y_ref)


# ----------------------------------------------------------------------------
# closed loop

@dataclass
class SimTrace:
    P: np.ndarray
    u: np.ndarray
    x: np.ndarray
    decision: list
    reason: list
    gap: np.ndarray
    primal_cost: np.ndarray
    dual_cost: np.ndarray
    J_star: np.ndarray            # NaN without oracle
    const: np.ndarray             # constant cost term, so full cost = value + const
    applied_subopt: np.ndarray    # p(applied sequence) - J*, NaN without oracle
    aborted: Optional[str] = None
    elapsed: float = 0.0
    oracle_elapsed: float = 0.0
    rel_floor: float = 1e-4

    @property
    def steps(self) -> int:
        return len(self.decision)

    @property
    def backup_frequency(self) -> float:
        return self.decision.count(BACKUP) / self.steps if self.steps else 0.0

    def relative_suboptimality(self) -> np.ndarray:
        """Per-step ``(p - J*) / (J* + const)`` on steps whose optimal full cost exceeds ``rel_floor``."""
        full = self.J_star + self.const
        keep = np.isfinite(full) & (full > self.rel_floor)
        return self.applied_subopt[keep] / full[keep]

    def weighted_relative_suboptimality(self) -> float:
        """Accumulated suboptimality over accumulated optimal cost.

        This is the per-step ratio averaged with weights ``J*``; unlike the
        plain mean it stays defined when the vehicle rests at the reference
        and the optimal cost approaches zero.
        """
        full = self.J_star + self.const
        keep = np.isfinite(full)
        total = float(np.sum(full[keep]))
        return float(np.sum(self.applied_subopt[keep]) / total) if total > 0 else float("nan")

    def soundness_violations(self, rel: float = 1e-6) -> int:
        """Apply steps where the gap fails to bound the true suboptimality."""
        bad = 0
        for i, dec in enumerate(self.decision):
            if dec != APPLY or not np.isfinite(self.J_star[i]):
                continue
            scale = max(1.0, abs(self.J_star[i] + self.const[i]))
            sub = self.primal_cost[i] - self.J_star[i]
            if sub < -rel * scale or self.gap[i] < sub - rel * scale:
                bad += 1
        return bad

    def summary(self) -> dict:
        rel = self.relative_suboptimality()
        gaps = self.gap[np.isfinite(self.gap)]
        oracle = bool(np.any(np.isfinite(self.J_star)))
        return {
            "steps": self.steps,
            "aborted": self.aborted,
            "backup_count": self.decision.count(BACKUP),
            "backup_frequency": self.backup_frequency,
            "reasons": {r: self.reason.count(r) for r in sorted(set(self.reason))},
            "gap": _stats(gaps),
            "oracle": oracle,
            "relative_suboptimality": self.weighted_relative_suboptimality() if oracle else None,
            "relative_suboptimality_per_step": _stats(rel) if oracle else None,
            "relative_floor": self.rel_floor,
            "relative_excluded_steps": int(self.steps - rel.size) if oracle else None,
            "soundness_violations": self.soundness_violations() if oracle else None,
        }

    def to_csv(self, path, spec: MpcSpec) -> None:
        names = parameter_names(spec)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + names + [f"u_{j}" for j in range(self.u.shape[1])]
                       + ["decision", "gap", "primal_cost", "dual_cost", "J_star"])
            for i in range(self.steps):
                w.writerow([i] + [repr(float(x)) for x in self.P[i]] + [repr(float(x)) for x in self.u[i]]
                           + [self.decision[i], repr(float(self.gap[i])), repr(float(self.primal_cost[i])),
                              repr(float(self.dual_cost[i])),
                              "" if not np.isfinite(self.J_star[i]) else repr(float(self.J_star[i]))])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _stats(a) -> dict:
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return {"count": 0, "mean": None, "median": None, "max": None, "min": None}
    return {"count": int(a.size), "mean": float(a.mean()), "median": float(np.median(a)),
            "max": float(a.max()), "min": float(a.min())}


def closed_loop_sim(ctx: ControllerContext, scenario: Scenario, steps: int | None = None,
                    seed: int = 0, oracle: bool = False, rel_floor: float = 1e-4) -> SimTrace:
    """Run the certified controller on the model itself.

    ``seed`` is accepted for interface symmetry; the simulation has no noise.
    With ``oracle`` each step also solves the QP exactly to record ``J*``.
    """
    del seed
    spec, vp = ctx.spec, ctx.vehicle
    steps = len(scenario) if steps is None else steps
    if steps > len(scenario):
        raise ValueError("scenario shorter than the requested number of steps")
    x = np.asarray(scenario.x0, dtype=float).copy()
    nan = np.full(steps, np.nan)
    tr = SimTrace(P=np.zeros((steps, spec.n_param)), u=np.zeros((steps, spec.nu)),
                  x=np.zeros((steps + 1, spec.nx)), decision=[], reason=[], gap=nan.copy(),
                  primal_cost=nan.copy(), dual_cost=nan.copy(), J_star=nan.copy(),
                  const=nan.copy(), applied_subopt=nan.copy(), rel_floor=rel_floor)
    tr.x[0] = x
    t0 = time.perf_counter()
    oracle_time = 0.0
    for t in range(steps):
        y_ref, delta_prev = scenario.preview(t, spec.T)
        v = scenario.v[t]
        P = assemble_parameter(ctx, x, v, y_ref, delta_prev)
        qp = condense(spec, vp, P)
        out = certify_qp(ctx, qp, P)
        try:
            U = out.U if out.decision == APPLY else backup(ctx, P, qp)
        except BackupFailure as exc:
            tr.aborted = f"step {t}: {exc}"
            tr.P, tr.u, tr.x = tr.P[:t], tr.u[:t], tr.x[:t + 1]
            for name in ("gap", "primal_cost", "dual_cost", "J_star", "const", "applied_subopt"):
                setattr(tr, name, getattr(tr, name)[:t])
            break
        u = np.array(U[:spec.nu])
        ctx.u_prev = u.copy()
        tr.P[t], tr.u[t] = P, u
        tr.decision.append(out.decision)
        tr.reason.append(out.reason)
        tr.gap[t], tr.primal_cost[t], tr.dual_cost[t] = out.gap, out.primal_cost, out.dual_cost
        tr.const[t] = qp.const_offset
        if oracle:
            o0 = time.perf_counter()
            sol = solve_primal(qp, ctx.solver)
            oracle_time += time.perf_counter() - o0
            if sol.ok:
                tr.J_star[t] = sol.J_star
                tr.applied_subopt[t] = float(0.5 * U @ qp.Q @ U + qp.c @ U) - sol.J_star
        mats = build_icc_matrices(vp, v)
        x = mats.A_d @ x + mats.B_d @ u + mats.E_d[:, 0] * scenario.delta[t]
        tr.x[t + 1] = x
    tr.elapsed = time.perf_counter() - t0 - oracle_time
    tr.oracle_elapsed = oracle_time
    return tr
