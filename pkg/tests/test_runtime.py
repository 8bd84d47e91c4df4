import json

import numpy as np
import pytest

from pdpl.lpv_mpc import CondensedQp, MpcSpec, VehicleParams, build_icc_matrices, condense, sample_parameter
from pdpl.policies import DUAL, MLP, PRIMAL, MlpNet, Policy
from pdpl.qp import build_dual, eval_dual_cost, solve_primal
from pdpl.runtime import (APPLY, BACKUP, GAP_EXCEEDED, OK, PRIMAL_INFEASIBLE, BackupFailure,
                          ControllerContext, Scenario, backup, certify, certify_qp, closed_loop_sim,
                          control_step, lane_change)

SPEC = MpcSpec()


def constant(role, value):
    """Policy returning ``value`` everywhere."""
    value = np.asarray(value, dtype=float)
    return Policy(MLP, role, MlpNet([np.zeros((value.size, SPEC.n_param))], [value.copy()]))


def context(U, lam, **kw):
    return ControllerContext(constant(PRIMAL, U), constant(DUAL, lam), **kw)


@pytest.fixture(scope="module")
def instance(config):
    P = sample_parameter(config.box, 0)
    qp = condense(config.mpc, config.vehicle, P)
    sol = solve_primal(qp)
    assert sol.ok
    return P, qp, sol


def test_exact_pair_has_zero_gap(instance):
    P, qp, sol = instance
    out = certify_qp(context(sol.U_star, sol.lambda_star), qp, P)
    assert out.decision == APPLY and out.reason == OK
    assert abs(out.gap) <= 1e-6
    assert out.primal_cost == pytest.approx(sol.J_star, abs=1e-9)
    assert certify(context(sol.U_star, sol.lambda_star), P).gap == pytest.approx(out.gap, abs=1e-9)


def dual_with_gap(qp, sol, target):
    """``lambda* + a e_0`` (a >= 0) whose dual cost is ``J* - target``."""
    dqp = build_dual(qp)
    e = np.zeros(qp.h.size)
    e[0] = 1.0
    # d(lambda* + a e) is a concave quadratic in a; fit it from three evaluations
    a = np.array([0.0, 1.0, 2.0])
    vals = [eval_dual_cost(dqp, sol.lambda_star + x * e) for x in a]
    coef = np.polyfit(a, vals, 2)
    coef[-1] -= sol.J_star - target
    root = max(r.real for r in np.roots(coef) if abs(r.imag) < 1e-9)
    assert root > 0
    return sol.lambda_star + root * e


def test_gap_against_threshold(instance):
    P, qp, sol = instance
    lam = dual_with_gap(qp, sol, 6.1412)
    ctx = context(sol.U_star, lam, t_max=4.0)
    out = certify_qp(ctx, qp, P)
    assert out.primal_feasible and out.dual_feasible
    assert out.gap == pytest.approx(6.1412, abs=1e-6)
    assert out.decision == BACKUP and out.reason == GAP_EXCEEDED
    u, _ = control_step_at(ctx, P)
    assert np.allclose(u, sol.U_star[:3], atol=1e-9)

    lam = dual_with_gap(qp, sol, 3.5)
    assert certify_qp(context(sol.U_star, lam, t_max=5.0), qp, P).decision == APPLY
    assert certify_qp(context(sol.U_star, lam, t_max=3.0), qp, P).decision == BACKUP


def control_step_at(ctx, P):
    x, v, y_ref, delta, u_prev = P[:4], P[4], P[5:14], P[14:17], P[17:]
    ctx.u_prev = u_prev.copy()
    return control_step(ctx, x, v, y_ref, delta)


def test_feasibility_tolerance(instance):
    P, qp, sol = instance
    tol = 1e-6
    # tightest upper bound on the first input (input or rate bound)
    rows = np.flatnonzero((qp.H[:, 0] == 1.0) & (np.abs(qp.H).sum(axis=1) == 1.0))
    bound = qp.h[rows].min()
    for excess, expect in ((2 * tol, PRIMAL_INFEASIBLE), (0.5 * tol, OK)):
        U = sol.U_star.copy()
        U[0] = bound + excess
        assert np.max(qp.H @ U - qp.h) == pytest.approx(excess, abs=1e-12)
        out = certify_qp(context(U, sol.lambda_star, t_max=1e9, feas_tol=tol), qp, P)
        assert out.reason == expect
    lam = sol.lambda_star.copy()
    lam[3] = -2 * tol
    # the dual policy clamps its outputs, so a negative raw multiplier never reaches the check
    out = certify_qp(context(sol.U_star, lam, t_max=1e9, feas_tol=tol), qp, P)
    assert out.dual_feasible and out.lam[3] == 0.0


def test_zero_threshold_always_falls_back(instance):
    P, qp, sol = instance
    ctx = context(sol.U_star, dual_with_gap(qp, sol, 0.1), t_max=0.0)
    u, out = control_step_at(ctx, P)
    assert out.decision == BACKUP
    assert np.array_equal(u, solve_primal(qp).U_star[:3])
    assert np.array_equal(ctx.u_prev, u)
    assert ctx.counters == {"policy_evals": 2, "factorizations": 1, "qp_solves": 1}


def test_backup_on_hand_qp_and_failure(instance):
    P, _, sol = instance
    ctx = context(sol.U_star, sol.lambda_star)
    hand = CondensedQp(Q=np.array([[2.0]]), c=np.array([0.0]), H=np.array([[-1.0]]), h=np.array([-1.0]))
    assert backup(ctx, P, hand)[0] == pytest.approx(1.0, abs=1e-8)
    bad = CondensedQp(Q=np.eye(1), c=np.zeros(1), H=np.array([[1.0], [-1.0]]), h=np.array([-1.0, -1.0]))
    with pytest.raises(BackupFailure):
        backup(ctx, P, bad)


def test_context_validation(instance):
    _, _, sol = instance
    with pytest.raises(ValueError):
        ControllerContext(constant(PRIMAL, sol.U_star), constant(PRIMAL, sol.U_star))
    with pytest.raises(ValueError):
        context(sol.U_star[:3], sol.lambda_star)
    with pytest.raises(ValueError):
        context(sol.U_star, sol.lambda_star, backup_kind="explicit")


def test_equilibrium_scenario_stays_at_rest():
    n = 50
    scen = Scenario(np.full(n, 10.0), np.zeros(n), np.zeros((n, 3)))
    ctx = context(np.zeros(9), np.zeros(36))
    tr = closed_loop_sim(ctx, scen, oracle=True)
    assert tr.aborted is None and tr.backup_frequency == 0.0
    assert not tr.u.any() and not tr.x.any()
    assert np.allclose(tr.gap, 0.0, atol=1e-12)
    assert np.allclose(tr.J_star, 0.0, atol=1e-9)


def test_lane_change_profile(config):
    scen = lane_change(config.vehicle)
    assert len(scen) == 1200
    assert scen.v[0] == 3.0 and scen.v[-1] == 21.5
    assert np.all(np.diff(scen.v) > 0)
    active = scen.delta != 0
    assert active.any() and abs(scen.delta).max() <= 0.04
    assert np.array_equal(scen.y_ref[:, 1] != 0, active)
    yr, dl = scen.preview(len(scen) - 1, 3)
    assert np.array_equal(dl, np.repeat(scen.delta[-1], 3))


def test_simulation_is_deterministic_and_sound(config, tmp_path):
    scen = lane_change(config.vehicle, steps=80, start=0.1, duration=0.5, amplitude=0.1)
    runs = []
    for _ in range(2):
        ctx = context(np.zeros(9), np.zeros(36), t_max=0.05)
        runs.append(closed_loop_sim(ctx, scen, oracle=True))
    a, b = runs
    assert np.array_equal(a.u, b.u) and np.array_equal(a.x, b.x) and a.decision == b.decision
    assert BACKUP in a.decision and APPLY in a.decision
    assert a.soundness_violations() == 0
    # backup steps apply the exact optimum
    idx = [i for i, d in enumerate(a.decision) if d == BACKUP]
    assert np.allclose(a.applied_subopt[idx], 0.0, atol=1e-6)
    # states follow the model
    for t in (0, 40, 79):
        m = build_icc_matrices(config.vehicle, scen.v[t])
        step = m.A_d @ a.x[t] + m.B_d @ a.u[t] + m.E_d[:, 0] * scen.delta[t]
        assert np.allclose(a.x[t + 1], step, rtol=1e-12, atol=1e-15)

    s = a.summary()
    assert s["steps"] == 80 and s["backup_count"] == len(idx)
    assert s["relative_suboptimality"] == pytest.approx(
        np.sum(a.applied_subopt) / np.sum(a.J_star + a.const), rel=1e-12)
    a.to_csv(tmp_path / "trace.csv", config.mpc)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(lines) == 81 and lines[0].startswith("step,")
    a.to_json(tmp_path / "trace.json")
    assert json.loads((tmp_path / "trace.json").read_text())["steps"] == 80
