"""Training of certified primal and dual policies.

Both learning problems are solved in two phases:

A. regression on the optimizer labels (least squares for basis-function
   networks, Adam on the mean squared error for ReLU networks);
B. full-batch L-BFGS on a penalized objective: a softmax-smoothed maximum of
   the per-sample suboptimality plus ``mu * sum hinge(violation + margin)^2``,
   with ``mu`` grown stage by stage until every training sample is feasible.

The certified level ``t*`` is always recomputed exactly on the returned
policy, so it does not depend on how well the smooth surrogate was solved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logsumexp, softmax

from ..lpv_mpc import CondensedQp
from ..qp import DualQp, QpSolution
from .networks import DUAL, MLP, PRIMAL, RBN, MlpNet, Policy, RbnNet, eval_policy

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``temperatures`` are relative to the current maximum suboptimality; the
    first one is used while the penalty stages restore feasibility, the rest
    drive the monotone refinement.
    """

    mu0: float = 1.0
    mu_growth: float = 10.0
    stages: int = 6
    learning_rate: float = 1e-3
    epochs: int = 60
    stage_iters: int = 400
    batch_size: int = 256
    margin: float = 1e-4
    temperatures: tuple = (0.1, 0.03, 0.01)
    seed: int = 0
    t_max: float = 4.0
    rbn_start: int = 10
    rbn_step: int = 10
    width_scale: float = 0.03
    mlp_width: int = 5
    mlp_step: int = 5
    mlp_depth: int = 3

    def __post_init__(self):
        positive = ("mu0", "mu_growth", "stages", "learning_rate", "epochs", "stage_iters",
                    "batch_size", "t_max", "rbn_start", "rbn_step", "width_scale",
                    "mlp_width", "mlp_step", "mlp_depth")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not self.temperatures or min(self.temperatures) <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class LabeledSample:
    P: np.ndarray
    qp: CondensedQp
    dqp: Optional[DualQp]
    J_star: float
    U_star: np.ndarray
    lambda_star: np.ndarray

    @classmethod
    def from_solution(cls, P, qp: CondensedQp, sol: QpSolution, dqp: Optional[DualQp] = None):
        return cls(np.asarray(P, dtype=float), qp, dqp, sol.J_star, sol.U_star, sol.lambda_star)


@dataclass
class LabeledSet:
    """Stacked training data; ``H`` is ``(m, n)`` when shared, else ``(N, m, n)``."""

    P: np.ndarray
    Q: np.ndarray
    c: np.ndarray
    H: np.ndarray
    h: np.ndarray
    J: np.ndarray
    U: np.ndarray
    lam: np.ndarray
    _Qinv: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "LabeledSet":
        if not samples:
            raise ValueError("empty training set")
        Hs = [s.qp.H for s in samples]
        H = Hs[0] if all(np.array_equal(Hs[0], Hi) for Hi in Hs[1:]) else np.array(Hs)
        return cls(
            P=np.array([s.P for s in samples]),
            Q=np.array([s.qp.Q for s in samples]),
            c=np.array([s.qp.c for s in samples]),
            H=H,
            h=np.array([s.qp.h for s in samples]),
            J=np.array([s.J_star for s in samples], dtype=float),
            U=np.array([s.U_star for s in samples]),
            lam=np.array([s.lambda_star for s in samples]),
        )

    def __len__(self) -> int:
        return self.P.shape[0]

    def head(self, k: int) -> "LabeledSet":
        if k > len(self):
            raise ValueError(f"requested {k} samples, only {len(self)} available")
        H = self.H if self.H.ndim == 2 else self.H[:k]
        Qinv = None if self._Qinv is None else self._Qinv[:k]
        return LabeledSet(self.P[:k], self.Q[:k], self.c[:k], H, self.h[:k],
                          self.J[:k], self.U[:k], self.lam[:k], Qinv)

    @property
    def Qinv(self) -> np.ndarray:
        if self._Qinv is None:
            Qinv = np.linalg.inv(self.Q)
            self._Qinv = 0.5 * (Qinv + np.swapaxes(Qinv, 1, 2))
        return self._Qinv

    def rows(self, U) -> np.ndarray:
        """``H_i U_i`` for every sample."""
        return U @ self.H.T if self.H.ndim == 2 else np.einsum("imn,in->im", self.H, U)

    def rows_T(self, G) -> np.ndarray:
        """``H_i' g_i`` for every sample."""
        return G @ self.H if self.H.ndim == 2 else np.einsum("imn,im->in", self.H, G)

    def primal_cost(self, U) -> np.ndarray:
        return 0.5 * np.einsum("ni,nij,nj->n", U, self.Q, U) + np.einsum("ni,ni->n", self.c, U)

    def dual_cost(self, lam) -> np.ndarray:
        w = self.c + self.rows_T(lam)
        return (-0.5 * np.einsum("ni,nij,nj->n", w, self.Qinv, w)
                - np.einsum("ni,ni->n", self.h, lam))

    def violation(self, U) -> np.ndarray:
        return self.rows(U) - self.h


# ----------------------------------------------------------------------------
# certification

def primal_certificate(policy: Policy, data: LabeledSet):
    """Exact ``(t_p, violations)`` of a primal policy on the data."""
    U = eval_policy(policy, data.P)
    viol = data.violation(U).max(axis=1)
    return float(np.max(data.primal_cost(U) - data.J)), viol


def dual_certificate(policy: Policy, data: LabeledSet):
    lam = eval_policy(policy, data.P)
    return float(np.max(data.J - data.dual_cost(lam))), lam.min(axis=1)


# ----------------------------------------------------------------------------
# model adapters: parameters live in normalized units during training

class _RbnModel:
    """Optimizes in an orthonormal basis of the feature columns.

    Smooth, wide basis functions give nearly collinear features; with
    ``K = U S V'`` the output is ``U phi`` and the coefficients are
    ``V S^-1 phi``, which keeps the convex training problem well conditioned.
    """

    def __init__(self, net: RbnNet, P, out_scale: float, rcond: float = 1e-10):
        self.net = net
        K = net.features(P)
        U, s, Vt = np.linalg.svd(K, full_matrices=False)
        keep = s > rcond * s[0]
        self.B = U[:, keep]
        self.map = Vt[keep].T / s[keep]        # phi -> theta
        self.out_scale = out_scale
        self.shape = (int(keep.sum()), net.output_dim)

    def init_lstsq(self, target):
        return (self.B.T @ target).ravel()

    def out(self, phi):
        return self.B @ phi.reshape(self.shape)

    def grad(self, phi, dout):
        return (self.B.T @ dout).ravel()

    def export(self, phi) -> RbnNet:
        theta = self.map @ phi.reshape(self.shape)
        coef = (theta * self.out_scale).T.copy()
        return RbnNet(self.net.centers.copy(), self.net.scaling.copy(), coef)


class _MlpModel:
    def __init__(self, net: MlpNet, P, out_scale: float):
        self.mean = P.mean(axis=0)
        std = P.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        self.X = (P - self.mean) / self.std
        self.net = net.copy()
        self.out_scale = out_scale
        self._cache = None

    def init_adam(self, target, cfg: TrainConfig, rng):
        net = self.net
        theta = net.get_flat()
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        b1, b2, eps = 0.9, 0.999, 1e-8
        N = self.X.shape[0]
        step = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(N)
            for i in range(0, N, cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                net.set_flat(theta)
                out, cache = net.forward(self.X[idx])
                dout = 2.0 * (out - target[idx]) / len(idx)
                g = net.flat_grad(*net.backward(cache, dout))
                step += 1
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                theta = theta - cfg.learning_rate * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
            if not np.all(np.isfinite(theta)):
                raise TrainingDiverged("non-finite parameters during regression phase")
        net.set_flat(theta)
        return theta

    def out(self, theta):
        self.net.set_flat(theta)
        out, self._cache = self.net.forward(self.X)
        return out

    def grad(self, theta, dout):
        # relies on out() having been called with the same theta just before
        return self.net.flat_grad(*self.net.backward(self._cache, dout))

    def export(self, theta) -> MlpNet:
        """Fold the input normalization and output scale into the first and last layers."""
        net = self.net.copy()
        net.set_flat(theta)
        W0 = net.weights[0] / self.std
        net.biases[0] = net.biases[0] - W0 @ self.mean
        net.weights[0] = W0
        net.weights[-1] = net.weights[-1] * self.out_scale
        net.biases[-1] = net.biases[-1] * self.out_scale
        return net


def _model(template: Policy, P, out_scale):
    if template.kind == RBN:
        return _RbnModel(template.net, P, out_scale)
    return _MlpModel(template.net, P, out_scale)


def _scale(values) -> float:
    a = np.abs(values[np.abs(values) > 0])
    if a.size == 0:
        return 1.0
    return float(np.percentile(a, 99))


def _lbfgs(fun, theta, maxiter):
    def wrapped(th):
        f, g = fun(th)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise TrainingDiverged("non-finite objective or gradient")
        return f, g
    res = minimize(wrapped, theta, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    return res.x, res.nit


def _violators(viol, tol, limit=20):
    bad = np.flatnonzero(viol > tol)
    order = bad[np.argsort(-viol[bad], kind="stable")]
    return [{"index": int(i), "violation": float(viol[i])} for i in order[:limit]], int(bad.size)


# ----------------------------------------------------------------------------
# primal

def train_primal(data: LabeledSet, template: Policy, cfg: TrainConfig = TrainConfig()):
    """Solve the sampled primal learning problem.

    Returns ``(policy, t_p, report)``. On success every sample satisfies
    ``H U~ <= h + 1e-9`` and ``policy.certified_t == t_p``; otherwise ``t_p``
    is None and ``report["violators"]`` names the worst infeasible samples.
    """
    if template.role != PRIMAL:
        raise ValueError("train_primal needs a primal template")
    n = data.U.shape[1]
    if template.output_dim != n:
        raise ValueError(f"template outputs {template.output_dim} values, QP has {n} variables")
    rng = np.random.default_rng([cfg.seed, 11])
    s_u = _scale(data.U)
    # row scaling of H U <= h in normalized input units
    hh = np.abs(data.h)
    r = np.median(hh, axis=0)
    r = np.where(r > 0, r, 1.0)
    model = _model(template, data.P, s_u)
    target = data.U / s_u

    if template.kind == RBN:
        theta = model.init_lstsq(target)
    else:
        theta = model.init_adam(target, cfg, rng)

    report = {"role": PRIMAL, "kind": template.kind, "N": len(data), "n_params": template.n_params,
              "stages": [], "refinement": []}

    def pieces(th):
        U = model.out(th) * s_u
        sub = data.primal_cost(U) - data.J
        viol = data.violation(U)
        return U, sub, viol

    def objective(th, mu, tau):
        U, sub, viol = pieces(th)
        hinge = np.maximum(viol / r + cfg.margin, 0.0)
        f = tau * logsumexp(sub / tau) + mu * float(np.sum(hinge * hinge))
        wts = softmax(sub / tau)
        gU = wts[:, None] * (np.einsum("nij,nj->ni", data.Q, U) + data.c)
        gU += data.rows_T(2.0 * mu * hinge / r)
        return f, model.grad(th, gU * s_u)

    U, sub, viol = pieces(theta)
    report["phase_a"] = {"max_violation": float(viol.max()), "max_suboptimality": float(sub.max())}
    tau = cfg.temperatures[0] * max(float(np.max(np.abs(sub))), 1e-12)

    feasible = viol.max() <= FEAS_TOL
    mu = cfg.mu0
    stage = 0
    while not feasible and stage < cfg.stages:
        theta, nit = _lbfgs(lambda th: objective(th, mu, tau), theta, cfg.stage_iters)
        U, sub, viol = pieces(theta)
        feasible = viol.max() <= FEAS_TOL
        report["stages"].append({"mu": mu, "iterations": nit, "max_violation": float(viol.max()),
                                 "n_infeasible": int(np.sum(viol.max(axis=1) > FEAS_TOL)),
                                 "max_suboptimality": float(sub.max())})
        log.info("primal stage %d: mu=%g max violation %.3g, t=%.4g", stage, mu, viol.max(), sub.max())
        stage += 1
        mu *= cfg.mu_growth
    mu = mu / cfg.mu_growth if stage else mu

    if not feasible:
        listed, count = _violators(viol.max(axis=1), FEAS_TOL)
        report.update(success=False, n_infeasible=count, violators=listed, t_star=None)
        policy = Policy(template.kind, PRIMAL, model.export(theta), None, _meta(template, cfg, data, report))
        return policy, None, report

    # monotone refinement at lower temperatures
    best_theta, best_t = theta, float(sub.max())
    for rel in cfg.temperatures:
        tau = rel * max(best_t, 1e-12)
        cand, mu_c = best_theta, mu
        for _ in range(cfg.stages):
            cand, nit = _lbfgs(lambda th: objective(th, mu_c, tau), cand, cfg.stage_iters)
            _, csub, cviol = pieces(cand)
            if cviol.max() <= FEAS_TOL:
                break
            mu_c *= cfg.mu_growth
        ok = cviol.max() <= FEAS_TOL and csub.max() < best_t
        report["refinement"].append({"tau": tau, "mu": mu_c, "iterations": nit, "accepted": bool(ok),
                                     "max_suboptimality": float(csub.max()),
                                     "max_violation": float(cviol.max())})
        if ok:
            best_theta, best_t, mu = cand, float(csub.max()), mu_c

    policy = Policy(template.kind, PRIMAL, model.export(best_theta))
    t_p, viol = primal_certificate(policy, data)
    if viol.max() > FEAS_TOL:
        # only possible through rounding of the exported parameters
        listed, count = _violators(viol, FEAS_TOL)
        report.update(success=False, n_infeasible=count, violators=listed, t_star=None)
        policy.train_meta = _meta(template, cfg, data, report)
        return policy, None, report
    report.update(success=True, t_star=t_p, n_infeasible=0, violators=[])
    policy.certified_t = t_p
    policy.train_meta = _meta(template, cfg, data, report)
    return policy, t_p, report


# ----------------------------------------------------------------------------
# dual

def train_dual(data: LabeledSet, template: Policy, cfg: TrainConfig = TrainConfig()):
    """Solve the sampled dual learning problem.

    Dual feasibility holds by construction (outputs are clamped at zero), so
    the run always certifies ``t_d = max_i J*_i - d_i(lambda~)``. The
    refinement only accepts iterates that lower ``t_d``.
    """
    if template.role != DUAL:
        raise ValueError("train_dual needs a dual template")
    m = data.lam.shape[1]
    if template.output_dim != m:
        raise ValueError(f"template outputs {template.output_dim} values, QP has {m} constraints")
    rng = np.random.default_rng([cfg.seed, 12])
    s_l = _scale(data.lam)
    model = _model(template, data.P, s_l)
    target = data.lam / s_l

    if template.kind == RBN:
        theta = model.init_lstsq(target)
    else:
        theta = model.init_adam(target, cfg, rng)

    def pieces(th, sharp=None):
        # sharp=None: the exact clamp; otherwise softplus of that sharpness,
        # which keeps a gradient on samples where every output is clamped
        z = model.out(th)
        if sharp is None:
            lam_n, slope = np.maximum(z, 0.0), (z > 0).astype(float)
        else:
            lam_n = np.logaddexp(0.0, sharp * z) / sharp
            slope = expit(sharp * z)
        lam = lam_n * s_l
        w = data.c + data.rows_T(lam)
        Qw = np.einsum("nij,nj->ni", data.Qinv, w)
        d = -0.5 * np.einsum("ni,ni->n", w, Qw) - np.einsum("ni,ni->n", data.h, lam)
        return slope, Qw, data.J - d

    def objective(th, tau, sharp):
        slope, Qw, gap = pieces(th, sharp)
        f = tau * logsumexp(gap / tau)
        wts = softmax(gap / tau)
        glam = wts[:, None] * (data.rows(Qw) + data.h)
        return f, model.grad(th, glam * slope * s_l)

    _, _, gap = pieces(theta)
    report = {"role": DUAL, "kind": template.kind, "N": len(data), "n_params": template.n_params,
              "phase_a": {"max_suboptimality": float(gap.max())}, "refinement": []}
    best_theta, best_t = theta, float(gap.max())
    for rel in cfg.temperatures:
        tau = rel * max(abs(best_t), 1e-12)
        cand, nit = _lbfgs(lambda th: objective(th, tau, 1.0 / rel), best_theta, cfg.stage_iters)
        _, _, cgap = pieces(cand)
        ok = cgap.max() < best_t
        report["refinement"].append({"tau": tau, "iterations": nit, "accepted": bool(ok),
                                     "max_suboptimality": float(cgap.max())})
        log.info("dual refinement tau=%.3g: t=%.4g (%s)", tau, cgap.max(), "accepted" if ok else "rejected")
        if ok:
            best_theta, best_t = cand, float(cgap.max())

    policy = Policy(template.kind, DUAL, model.export(best_theta))
    t_d, lam_min = dual_certificate(policy, data)
    report.update(success=True, t_star=t_d, min_multiplier=float(lam_min.min()))
    policy.certified_t = t_d
    policy.train_meta = _meta(template, cfg, data, report)
    return policy, t_d, report


def _meta(template: Policy, cfg: TrainConfig, data: LabeledSet, report: dict) -> dict:
    meta = dict(template.train_meta)
    meta.update(seed=int(meta.get("seed", cfg.seed)), N=len(data), train_seed=int(cfg.seed),
                success=bool(report.get("success", False)))
    return meta
