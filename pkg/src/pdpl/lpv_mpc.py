"""LPV vehicle model, MPC problem data and condensation into a dense QP.

Parameter vector layout (flattened, length ``nx + 1 + ny*T + T + nu``)::

    [x0 (nx) | v (1) | y_ref (T x ny, row k first) | delta (T) | u_prev (nu)]

For the chassis-control instance (nx=4, ny=3, nu=3, T=3) this is 20 entries.

Constraint rows of the condensed QP ``H U <= h`` are stacked in this order,
each block ordered by stage k = 0..T-1 and then by input component:

    1. input upper bounds      u_k <= u_bar
    2. input lower bounds     -u_k <= u_bar
    3. rate upper bounds       u_k - u_{k-1} <= du_bar   (u_{-1} = u_prev)
    4. rate lower bounds     -(u_k - u_{k-1}) <= du_bar
    5. terminal half-spaces    F x_T <= f                 (only if configured)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

NX, NU, NY = 4, 3, 3


class DegenerateModelError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1830.0
    m_s: float = 1650.0
    h_s: float = 0.53
    I_x: float = 700.0
    I_z: float = 3200.0
    C_phi: float = 4500.0
    k_phi: float = 140000.0
    g: float = 9.81
    l_front: float = 1.4
    l_rear: float = 1.65
    C_front: float = 90000.0
    C_rear: float = 110000.0
    dt: float = 0.01

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if name == "dt":
                if not value >= 0:
                    raise ValueError("dt must be nonnegative")
            elif not value > 0:
                raise ValueError(f"vehicle parameter {name} must be positive, got {value}")

    @property
    def f(self) -> float:
        return self.m * self.I_x - (self.m_s * self.h_s) ** 2


@dataclass(frozen=True)
class LpvMatrices:
    A_d: np.ndarray
    B_d: np.ndarray
    E_d: np.ndarray


@dataclass
class MpcSpec:
    """Finite-horizon output-tracking MPC with input and rate bounds.

    ``Q_T`` is an optional terminal state weight and ``(F_term, f_term)`` an
    optional terminal polytope ``F x_T <= f``; both are absent for the chassis
    problem.
    """

    T: int = 3
    Q_s: np.ndarray = field(default_factory=lambda: np.diag([100.0, 100.0, 100.0]))
    R_s: np.ndarray = field(default_factory=lambda: np.diag([1.0e-7, 1.0e-7, 1.0e-7]))
    C: np.ndarray = field(default_factory=lambda: np.eye(3, 4))
    u_bar: np.ndarray = field(default_factory=lambda: np.array([3000.0, 3000.0, 3000.0]))
    du_bar: np.ndarray = field(default_factory=lambda: np.array([1500.0, 1500.0, 1500.0]))
    Q_T: Optional[np.ndarray] = None
    F_term: Optional[np.ndarray] = None
    f_term: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Q_s = np.atleast_2d(np.asarray(self.Q_s, dtype=float))
        self.R_s = np.atleast_2d(np.asarray(self.R_s, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.u_bar = np.atleast_1d(np.asarray(self.u_bar, dtype=float))
        self.du_bar = np.atleast_1d(np.asarray(self.du_bar, dtype=float))
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")
        ny, nx = self.C.shape
        nu = self.R_s.shape[0]
        if self.Q_s.shape != (ny, ny) or self.R_s.shape != (nu, nu):
            raise DimensionError("Q_s must be ny x ny and R_s nu x nu")
        if self.u_bar.shape != (nu,) or self.du_bar.shape != (nu,):
            raise DimensionError("u_bar and du_bar must have nu entries")
        if not (np.all(self.u_bar > 0) and np.all(self.du_bar > 0)):
            raise ValueError("input and rate bounds must be positive")
        if not np.allclose(self.Q_s, self.Q_s.T) or np.linalg.eigvalsh(self.Q_s).min() < -1e-12:
            raise ValueError("Q_s must be symmetric positive semidefinite")
        if not np.allclose(self.R_s, self.R_s.T) or np.linalg.eigvalsh(self.R_s).min() <= 0:
            raise ValueError("R_s must be symmetric positive definite")
        if self.Q_T is not None:
            self.Q_T = np.atleast_2d(np.asarray(self.Q_T, dtype=float))
            if self.Q_T.shape != (nx, nx):
                raise DimensionError("Q_T must be nx x nx")
        if (self.F_term is None) != (self.f_term is None):
            raise ValueError("terminal polytope needs both F_term and f_term")
        if self.F_term is not None:
            self.F_term = np.atleast_2d(np.asarray(self.F_term, dtype=float))
            self.f_term = np.atleast_1d(np.asarray(self.f_term, dtype=float))
            if self.F_term.shape[1] != nx or self.F_term.shape[0] != self.f_term.shape[0]:
                raise DimensionError("terminal polytope dimensions do not match the state")

    @property
    def nx(self) -> int:
        return self.C.shape[1]

    @property
    def ny(self) -> int:
        return self.C.shape[0]

    @property
    def nu(self) -> int:
        return self.R_s.shape[0]

    @property
    def n_var(self) -> int:
        return self.nu * self.T

    @property
    def n_con(self) -> int:
        extra = 0 if self.F_term is None else self.F_term.shape[0]
        return 4 * self.nu * self.T + extra

    @property
    def n_param(self) -> int:
        return self.nx + 1 + self.ny * self.T + self.T + self.nu


@dataclass
class ParameterVector:
    x0: np.ndarray
    v: float
    y_ref: np.ndarray
    delta: np.ndarray
    u_prev: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        self.v = float(self.v)
        self.y_ref = np.atleast_2d(np.asarray(self.y_ref, dtype=float))
        self.delta = np.asarray(self.delta, dtype=float).ravel()
        self.u_prev = np.asarray(self.u_prev, dtype=float).ravel()
        if self.y_ref.shape[0] != self.delta.shape[0]:
            raise DimensionError("y_ref and delta preview lengths differ")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.x0, [self.v], self.y_ref.ravel(), self.delta, self.u_prev])

    @classmethod
    def from_flat(cls, p, spec: MpcSpec) -> "ParameterVector":
        p = np.asarray(p, dtype=float).ravel()
        if p.shape[0] != spec.n_param:
            raise DimensionError(f"expected {spec.n_param} parameters, got {p.shape[0]}")
        nx, ny, nu, T = spec.nx, spec.ny, spec.nu, spec.T
        i = 0
        x0 = p[i:i + nx]; i += nx
        v = p[i]; i += 1
        y_ref = p[i:i + ny * T].reshape(T, ny); i += ny * T
        delta = p[i:i + T]; i += T
        u_prev = p[i:i + nu]
        return cls(x0=x0, v=v, y_ref=y_ref, delta=delta, u_prev=u_prev)


def parameter_names(spec: MpcSpec) -> list[str]:
    names = [f"x0_{i}" for i in range(spec.nx)] + ["v"]
    names += [f"yref_{k}_{j}" for k in range(spec.T) for j in range(spec.ny)]
    names += [f"delta_{k}" for k in range(spec.T)]
    names += [f"uprev_{j}" for j in range(spec.nu)]
    return names


@dataclass
class ParameterBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        if self.lower.shape != self.upper.shape:
            raise DimensionError("box bounds differ in length")
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("parameter box must be bounded")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, p, tol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))


def default_box(spec: MpcSpec,
                beta=0.1, r=0.5, phi=0.1, phi_dot=0.5,
                v_range=(3.0, 25.0), delta=0.1) -> ParameterBox:
    """Box over the 20-dimensional chassis parameter vector."""
    state = np.array([beta, r, phi, phi_dot])
    lo = np.concatenate([
        -state,
        [v_range[0]],
        np.tile(-state[:3], spec.T),
        np.full(spec.T, -delta),
        -spec.u_bar,
    ])
    hi = np.concatenate([
        state,
        [v_range[1]],
        np.tile(state[:3], spec.T),
        np.full(spec.T, delta),
        spec.u_bar,
    ])
    return ParameterBox(lo, hi)


@dataclass
class CondensedQp:
    """``min 1/2 U'QU + c'U  s.t.  HU <= h``; ``const_offset`` restores the full MPC cost."""

    Q: np.ndarray
    c: np.ndarray
    H: np.ndarray
    h: np.ndarray
    const_offset: float = 0.0

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]


def icc_continuous(vp: VehicleParams, v: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous-time chassis matrices ``(A_c, B_c, E_c)`` at velocity ``v``."""
    f = vp.f
    if abs(f) < 1e-9 or abs(v) < 1e-9:
        raise DegenerateModelError(f"degenerate model denominator (f={f}, v={v})")
    m, m_s, h_s, I_x, I_z = vp.m, vp.m_s, vp.h_s, vp.I_x, vp.I_z
    C_bar = vp.C_front + vp.C_rear
    C_1 = vp.l_rear * vp.C_rear - vp.l_front * vp.C_front
    C_2 = vp.C_front * vp.l_front ** 2 + vp.C_rear * vp.l_rear ** 2
    M_bar = m_s * vp.g * h_s - vp.k_phi

    A_c = np.array([
        [-C_bar * I_x / (f * v), -1.0 + I_x * C_1 / (f * v ** 2), m_s * h_s * M_bar / (f * v), m_s * h_s * vp.C_phi / (f * v)],
        [C_1 / I_z, -C_2 / (I_z * v), 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [-m_s * h_s * C_bar / f, -m_s * h_s * C_1 / (f * v), m * M_bar / f, -m * vp.C_phi / f],
    ])
    B_c = np.array([
        [0.0, m_s * h_s / (f * v), I_x / (f * v)],
        [1.0 / I_z, 0.0, 0.0],
        [0.0, 0.0, 0.0],
        [0.0, m / f, -m_s * h_s / f],
    ])
    E_c = np.array([
        [I_x * vp.C_front / (f * v)],
        [vp.C_front * vp.l_front / I_z],
        [0.0],
        [-m_s * h_s * vp.C_front / f],
    ])
    return A_c, B_c, E_c


def build_icc_matrices(vp: VehicleParams, v: float) -> LpvMatrices:
    """Forward-Euler discretization ``A_d = I + A_c dt``, ``B_d = B_c dt``, ``E_d = E_c dt``."""
    A_c, B_c, E_c = icc_continuous(vp, v)
    return LpvMatrices(A_d=np.eye(NX) + A_c * vp.dt, B_d=B_c * vp.dt, E_d=E_c * vp.dt)


def prediction_matrices(A, B, E, T):
    """Stacked predictions ``x_k = Phi[k] x0 + Gam[k] U + Xi[k] delta`` for k = 0..T."""
    nx, nu = B.shape
    nd = E.shape[1]
    Phi = np.zeros((T + 1, nx, nx))
    Gam = np.zeros((T + 1, nx, nu * T))
    Xi = np.zeros((T + 1, nx, nd * T))
    Phi[0] = np.eye(nx)
    for k in range(T):
        Phi[k + 1] = A @ Phi[k]
        Gam[k + 1] = A @ Gam[k]
        Gam[k + 1][:, k * nu:(k + 1) * nu] = B
        Xi[k + 1] = A @ Xi[k]
        Xi[k + 1][:, k * nd:(k + 1) * nd] = E
    return Phi, Gam, Xi


def constraint_matrix(spec: MpcSpec) -> np.ndarray:
    """Parameter-independent rows 1-4 of ``H`` (see module docstring)."""
    n = spec.n_var
    nu = spec.nu
    eye = np.eye(n)
    diff = np.eye(n) - np.eye(n, k=-nu)
    return np.vstack([eye, -eye, diff, -diff])


def constraint_rhs(spec: MpcSpec, u_prev) -> np.ndarray:
    T = spec.T
    ub = np.tile(spec.u_bar, T)
    rb = np.tile(spec.du_bar, T)
    shift = np.zeros(spec.n_var)
    shift[:spec.nu] = u_prev
    return np.concatenate([ub, ub, rb + shift, rb - shift])


def condense_lpv(spec: MpcSpec, A, B, E, x0, y_ref, delta, u_prev) -> CondensedQp:
    """Condense the MPC problem for fixed model matrices ``(A, B, E)``.

    Cost: ``sum_{k<T} |C x_k - y_ref_k|^2_{Q_s} + |u_k|^2_{R_s} + |x_T|^2_{Q_T}``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    E = np.asarray(E, dtype=float).reshape(A.shape[0], -1)
    T, nx, nu = spec.T, spec.nx, spec.nu
    x0 = np.asarray(x0, dtype=float).ravel()
    y_ref = np.asarray(y_ref, dtype=float).reshape(T, spec.ny)
    delta = np.asarray(delta, dtype=float).ravel()
    u_prev = np.asarray(u_prev, dtype=float).ravel()
    if A.shape != (nx, nx) or B.shape != (nx, nu) or x0.shape != (nx,) or u_prev.shape != (nu,):
        raise DimensionError("model matrices or parameters do not match the MPC dimensions")
    if delta.shape[0] != T * E.shape[1]:
        raise DimensionError("disturbance preview must have T * nd entries")

    Phi, Gam, Xi = prediction_matrices(A, B, E, T)
    free = Phi @ x0 + Xi @ delta   # (T+1, nx)

    G = np.einsum("yx,kxn->kyn", spec.C, Gam[:T]).reshape(T * spec.ny, -1)
    e = (free[:T] @ spec.C.T - y_ref).ravel()
    Qbar = np.kron(np.eye(T), spec.Q_s)
    Rbar = np.kron(np.eye(T), spec.R_s)

    QG = Qbar @ G
    Q = 2.0 * (G.T @ QG + Rbar)
    c = 2.0 * (QG.T @ e)
    const = float(e @ Qbar @ e)
    if spec.Q_T is not None:
        GT = Gam[T]
        aT = free[T]
        Q += 2.0 * GT.T @ spec.Q_T @ GT
        c += 2.0 * GT.T @ (spec.Q_T @ aT)
        const += float(aT @ spec.Q_T @ aT)
    Q = 0.5 * (Q + Q.T)

    H = constraint_matrix(spec)
    h = constraint_rhs(spec, u_prev)
    if spec.F_term is not None:
        H = np.vstack([H, spec.F_term @ Gam[T]])
        h = np.concatenate([h, spec.f_term - spec.F_term @ free[T]])
    return CondensedQp(Q=Q, c=c, H=H, h=h, const_offset=const)


def condense(spec: MpcSpec, vp: VehicleParams, P) -> CondensedQp:
    """Condensed QP of the chassis MPC for the parameter ``P`` (vector or ParameterVector)."""
    if not isinstance(P, ParameterVector):
        P = ParameterVector.from_flat(P, spec)
    if spec.nx != NX or spec.nu != NU:
        raise DimensionError("chassis model requires nx=4, nu=3")
    if P.y_ref.shape != (spec.T, spec.ny) or P.delta.shape != (spec.T,):
        raise DimensionError("reference / preview length does not match the horizon")
    mats = build_icc_matrices(vp, P.v)
    return condense_lpv(spec, mats.A_d, mats.B_d, mats.E_d, P.x0, P.y_ref, P.delta, P.u_prev)


def simulate(A, B, E, x0, U, delta) -> np.ndarray:
    """Roll the model forward; returns states x_0..x_T as rows."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    E = np.asarray(E, dtype=float).reshape(A.shape[0], -1)
    nu = B.shape[1]
    U = np.asarray(U, dtype=float).reshape(-1, nu)
    delta = np.asarray(delta, dtype=float).reshape(len(U), -1)
    xs = [np.asarray(x0, dtype=float).ravel()]
    for k in range(len(U)):
        xs.append(A @ xs[-1] + B @ U[k] + E @ delta[k])
    return np.array(xs)


def mpc_cost(spec: MpcSpec, A, B, E, x0, y_ref, delta, U) -> float:
    """Full MPC objective evaluated on a simulated trajectory."""
    xs = simulate(A, B, E, x0, U, delta)
    Us = np.asarray(U, dtype=float).reshape(spec.T, spec.nu)
    y_ref = np.asarray(y_ref, dtype=float).reshape(spec.T, spec.ny)
    J = 0.0
    for k in range(spec.T):
        err = spec.C @ xs[k] - y_ref[k]
        J += err @ spec.Q_s @ err + Us[k] @ spec.R_s @ Us[k]
    if spec.Q_T is not None:
        J += xs[spec.T] @ spec.Q_T @ xs[spec.T]
    return float(J)


def sample_parameter(box: ParameterBox, seed) -> np.ndarray:
    """Uniform draw from the box, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return box.lower + (box.upper - box.lower) * rng.random(box.dim)


def sample_parameters(box: ParameterBox, n: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return box.lower + (box.upper - box.lower) * rng.random((n, box.dim))
