"""Dense convex QP: interior-point solver, dual problem and KKT diagnostics.

Primal:  ``min 1/2 U'QU + c'U  s.t.  HU <= h``
Dual:    ``max 1/2 l'Qt l + ct'l + gt  s.t.  l >= 0`` with
         ``Qt = -H Q^-1 H'``, ``ct = -H Q^-1 c - h``, ``gt = -1/2 c' Q^-1 c``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .lpv_mpc import CondensedQp

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERS = "max-iters"


class IllConditionedError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iters: int = 50
    regularization: float = 1e-10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class KktResidual:
    stationarity: float
    primal_feas: float
    dual_feas: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_feas, self.dual_feas, self.complementarity)


@dataclass
class QpSolution:
    U_star: np.ndarray
    lambda_star: np.ndarray
    J_star: float
    status: str
    kkt: KktResidual
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class DualQp:
    Qt: np.ndarray
    ct: np.ndarray
    gt: float


def eval_primal_cost(qp: CondensedQp, U) -> float:
    U = np.asarray(U, dtype=float)
    return float(0.5 * U @ qp.Q @ U + qp.c @ U)


def eval_dual_cost(dqp: DualQp, lam) -> float:
    lam = np.asarray(lam, dtype=float)
    return float(0.5 * lam @ dqp.Qt @ lam + dqp.ct @ lam + dqp.gt)


def dual_cost_direct(qp: CondensedQp, lam, chol=None) -> float:
    """Dual objective without forming ``Qt``: ``-1/2 |c + H'l|^2_{Q^-1} - h'l``."""
    lam = np.asarray(lam, dtype=float)
    if chol is None:
        chol = cho_factor(qp.Q)
    w = qp.c + qp.H.T @ lam
    return float(-0.5 * w @ cho_solve(chol, w) - qp.h @ lam)


def build_dual(qp: CondensedQp, max_cond: float = 1e12) -> DualQp:
    cond = np.linalg.cond(qp.Q)
    if not np.isfinite(cond) or cond > max_cond:
        raise IllConditionedError(f"Q condition number {cond:.3g} exceeds {max_cond:.0e}")
    chol = cho_factor(qp.Q)
    QiHt = cho_solve(chol, qp.H.T)
    Qic = cho_solve(chol, qp.c)
    Qt = -qp.H @ QiHt
    Qt = 0.5 * (Qt + Qt.T)
    ct = -qp.H @ Qic - qp.h
    gt = -0.5 * float(qp.c @ Qic)
    return DualQp(Qt=Qt, ct=ct, gt=gt)


def kkt_residuals(qp: CondensedQp, sol_or_U, lam=None) -> KktResidual:
    """KKT residual norms of ``(U, lambda)``; accepts a QpSolution or explicit vectors."""
    if lam is None:
        U, lam = sol_or_U.U_star, sol_or_U.lambda_star
    else:
        U = sol_or_U
    U = np.asarray(U, dtype=float)
    lam = np.asarray(lam, dtype=float)
    r = qp.H @ U - qp.h
    return KktResidual(
        stationarity=float(np.max(np.abs(qp.Q @ U + qp.c + qp.H.T @ lam), initial=0.0)),
        primal_feas=float(max(np.max(r, initial=0.0), 0.0)),
        dual_feas=float(max(np.max(-lam, initial=0.0), 0.0)),
        complementarity=float(np.max(np.abs(lam * r), initial=0.0)),
    )


def _is_feasible(H, h) -> bool:
    from scipy.optimize import linprog
    n = H.shape[1]
    res = linprog(np.zeros(n), A_ub=H, b_ub=h, bounds=[(None, None)] * n, method="highs")
    return res.status == 0


def solve_primal(qp: CondensedQp, cfg: SolverConfig = SolverConfig()) -> QpSolution:
    """Mehrotra predictor-corrector interior-point method.

    Iterates on ``(U, s, lam)`` with slack ``s = h - HU``; stops once every
    KKT residual of the actual iterate (``kkt_residuals``) is below ``cfg.tol``.
    """
    Q, c, H, h = qp.Q, qp.c, qp.H, qp.h
    n, m = Q.shape[0], H.shape[0]
    Qreg = Q + cfg.regularization * np.eye(n)
    Ht = H.T

    x = np.zeros(n)
    if m == 0:
        x = cho_solve(cho_factor(Qreg), -c)
        lam = np.zeros(0)
        kkt = kkt_residuals(qp, x, lam)
        return QpSolution(x, lam, eval_primal_cost(qp, x), OPTIMAL, kkt, 0)

    # starting point: one affine step from (0, 1, 1), then Mehrotra's shift
    # into the interior, which keeps s and lam on the scale of the problem
    s = np.ones(m)
    lam = np.ones(m)
    try:
        dx, ds, dl = _newton(Qreg, H, Ht, Q @ x + c + Ht @ lam, H @ x + s - h, s * lam, s, lam)
    except LinAlgError:
        dx, ds, dl = np.zeros(n), np.zeros(m), np.zeros(m)
    x = x + dx
    s = s + ds
    lam = lam + dl
    s = s + max(-1.5 * s.min(), 0.0)
    lam = lam + max(-1.5 * lam.min(), 0.0)
    prod = s @ lam
    s, lam = s + 0.5 * prod / lam.sum(), lam + 0.5 * prod / s.sum()
    s, lam = np.maximum(s, 1e-8), np.maximum(lam, 1e-8)

    # iterate past tol while the residuals keep shrinking, down to tol / 100;
    # the complementarity residual is absolute, so tol alone can leave
    # multipliers of inactive rows visibly nonzero on well-scaled problems
    status = MAX_ITERS
    it = 0
    best = None
    for it in range(1, cfg.max_iters + 1):
        r_d = Q @ x + c + Ht @ lam
        r_p = H @ x + s - h
        mu = s @ lam / m

        try:
            # predictor
            dx_a, ds_a, dl_a = _newton(Qreg, H, Ht, r_d, r_p, s * lam, s, lam)
            a_p = _step_to_boundary(s, ds_a)
            a_d = _step_to_boundary(lam, dl_a)
            mu_aff = (s + a_p * ds_a) @ (lam + a_d * dl_a) / m
            sigma = (mu_aff / mu) ** 3
            # corrector
            r_c = s * lam + ds_a * dl_a - sigma * mu
            dx, ds, dl = _newton(Qreg, H, Ht, r_d, r_p, r_c, s, lam)
        except LinAlgError:
            break

        a_p = min(1.0, 0.995 * _step_to_boundary(s, ds))
        a_d = min(1.0, 0.995 * _step_to_boundary(lam, dl))
        x = x + a_p * dx
        s = s + a_p * ds
        lam = lam + a_d * dl

        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(lam)) or lam.max() > 1e20:
            break
        r = kkt_residuals(qp, x, lam).max()
        if best is not None and best[0] <= cfg.tol and r >= 0.5 * best[0]:
            break
        if best is None or r < best[0]:
            best = (r, x.copy(), lam.copy())
        if r <= 1e-2 * cfg.tol:
            break

    if best is not None:
        x, lam = best[1], best[2]
    kkt = kkt_residuals(qp, x, lam)
    if kkt.max() <= cfg.tol:
        status = OPTIMAL
    if status != OPTIMAL and not _is_feasible(H, h):
        status = INFEASIBLE
    if status != OPTIMAL:
        log.debug("QP not solved: status=%s residuals=%s", status, kkt)
    return QpSolution(x, lam, eval_primal_cost(qp, x), status, kkt, it)


def _newton(Qreg, H, Ht, r_d, r_p, r_c, s, lam):
    """Solve the reduced KKT system for the step ``(dx, ds, dl)``.

    Linearized equations: ``Q dx + H' dl = -r_d``, ``H dx + ds = -r_p``,
    ``lam*ds + s*dl = -r_c``.
    """
    w = lam / s
    K = Qreg + (Ht * w) @ H
    rhs = -r_d - Ht @ ((-r_c + lam * r_p) / s)
    dx = cho_solve(cho_factor(K, check_finite=False), rhs, check_finite=False)
    ds = -r_p - H @ dx
    dl = (-r_c - lam * ds) / s
    return dx, ds, dl


def _step_to_boundary(z, dz) -> float:
    neg = dz < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-z[neg] / dz[neg])))
