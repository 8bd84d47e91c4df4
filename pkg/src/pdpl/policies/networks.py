"""Policy parametrizations: cubic radial basis networks and ReLU networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from ..bounds import MlpShape

PRIMAL, DUAL = "primal", "dual"
RBN, MLP = "rbn", "mlp"


def relu(z):
    return np.maximum(z, 0.0)


@dataclass
class RbnNet:
    """``out(P) = coef @ kappa(P)``, ``kappa_j(P) = (1 - |W_s (P - P_c^j)|_2 / 2)^3``.

    ``scaling`` is the diagonal of ``W_s``. The cubic is not clamped, so
    features turn negative beyond scaled distance 2.
    """

    centers: np.ndarray   # (n_rb, d)
    scaling: np.ndarray   # (d,)
    coef: np.ndarray      # (out, n_rb)

    @property
    def n_rb(self) -> int:
        return self.centers.shape[0]

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def output_dim(self) -> int:
        return self.coef.shape[0]

    @property
    def n_params(self) -> int:
        return self.coef.size

    def features(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        if P.ndim == 1:
            dist = np.sqrt(np.square((P - self.centers) * self.scaling).sum(axis=1))
            return (1.0 - 0.5 * dist) ** 3
        out = np.empty((P.shape[0], self.n_rb))
        step = max(1, 2 ** 22 // max(1, self.n_rb * self.input_dim))   # bound the temporary
        for i in range(0, P.shape[0], step):
            diff = (P[i:i + step, None, :] - self.centers[None, :, :]) * self.scaling
            out[i:i + step] = (1.0 - 0.5 * np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))) ** 3
        return out

    def __call__(self, P) -> np.ndarray:
        K = self.features(P)
        return K @ self.coef.T if K.ndim == 2 else self.coef @ K

    def multiply_adds(self) -> int:
        d, k = self.input_dim, self.n_rb
        return k * 2 * d + k * 3 + self.output_dim * k


@dataclass
class MlpNet:
    """Alternating affine maps and ReLU; the last layer is affine only."""

    weights: list
    biases: list

    @property
    def shape(self) -> MlpShape:
        return MlpShape(self.weights[0].shape[1], tuple(W.shape[0] for W in self.weights))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def __call__(self, P) -> np.ndarray:
        a = np.asarray(P, dtype=float)
        last = len(self.weights) - 1
        if a.ndim == 1:
            for i, (W, b) in enumerate(zip(self.weights, self.biases)):
                a = W @ a + b
                if i < last:
                    a = np.maximum(a, 0.0)
            return a
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W.T + b
            if i < last:
                a = np.maximum(a, 0.0)
        return a

    def forward(self, X):
        """Batch forward pass keeping what backprop needs."""
        acts = [np.asarray(X, dtype=float)]
        pre = []
        last = len(self.weights) - 1
        a = acts[0]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W.T + b
            pre.append(z)
            a = relu(z) if i < last else z
            acts.append(a)
        return a, (acts, pre)

    def backward(self, cache, dout):
        """Parameter gradients of ``sum(dout * out)``; returns ``(dWs, dbs)``."""
        acts, pre = cache
        dWs = [None] * len(self.weights)
        dbs = [None] * len(self.weights)
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            dWs[i] = delta.T @ acts[i]
            dbs[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i]) * (pre[i - 1] > 0)
        return dWs, dbs

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def set_flat(self, theta) -> None:
        i = 0
        for W, b in zip(self.weights, self.biases):
            W[...] = theta[i:i + W.size].reshape(W.shape); i += W.size
            b[...] = theta[i:i + b.size]; i += b.size

    def flat_grad(self, dWs, dbs) -> np.ndarray:
        return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in zip(dWs, dbs)])

    def copy(self) -> "MlpNet":
        return MlpNet([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def multiply_adds(self) -> int:
        return sum(W.size for W in self.weights)


Net = Union[RbnNet, MlpNet]


@dataclass
class Policy:
    kind: str
    role: str
    net: Net
    certified_t: Optional[float] = None
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (RBN, MLP):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.role not in (PRIMAL, DUAL):
            raise ValueError(f"unknown policy role {self.role!r}")

    @property
    def output_dim(self) -> int:
        return self.net.output_dim

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def __call__(self, P) -> np.ndarray:
        return eval_policy(self, P)

    def multiply_adds(self) -> int:
        """Fixed per-evaluation multiply-add count (plus ``output_dim`` clamps for dual policies)."""
        return self.net.multiply_adds()


def rbn_features(net: RbnNet, P) -> np.ndarray:
    return net.features(P)


def eval_policy(policy: Policy, P) -> np.ndarray:
    """Policy output at ``P`` (one vector or a batch of rows); dual outputs are clamped at zero."""
    out = policy.net(P)
    if policy.role == DUAL:
        out = np.maximum(out, 0.0)
    return out


def random_centers(lower, upper, n: int, rng) -> np.ndarray:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return lower + (upper - lower) * rng.random((n, lower.shape[0]))


def rbn_template(lower, upper, n_rb: int, output_dim: int, seed: int, role: str,
                 width_scale: float = 0.03) -> Policy:
    """Untrained RBN with centers drawn uniformly from the box.

    Centers come from one sequential stream per (seed, role), so a larger
    template extends the centers of a smaller one.
    """
    rng = np.random.default_rng([seed, 0 if role == PRIMAL else 1])
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    half = 0.5 * (upper - lower)
    scaling = width_scale / np.where(half > 0, half, 1.0)
    net = RbnNet(random_centers(lower, upper, n_rb, rng), scaling, np.zeros((output_dim, n_rb)))
    return Policy(RBN, role, net, train_meta={"seed": int(seed), "width_scale": width_scale})


def mlp_template(input_dim: int, width: int, depth: int, output_dim: int, seed: int, role: str) -> Policy:
    """He-initialized ReLU network with ``depth`` affine layers."""
    shape = MlpShape.uniform(input_dim, width, depth, output_dim)
    rng = np.random.default_rng([seed, 2 if role == PRIMAL else 3])
    dims = shape.dims
    Ws, bs = [], []
    for i in range(len(dims) - 1):
        Ws.append(rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i])))
        bs.append(np.zeros(dims[i + 1]))
    return Policy(MLP, role, MlpNet(Ws, bs), train_meta={"seed": int(seed)})


def grad_check(net: MlpNet, P, probe: Optional[Callable] = None, step: float = 1e-5,
               kink_tol: float = 1e-6, rng=None, max_resample: int = 20):
    """Compare backprop parameter gradients with central differences.

    ``probe(out) -> (loss, dloss/dout)``; defaults to ``1/2 |out|^2``. If the
    point sits within ``kink_tol`` of a ReLU kink, or a finite-difference
    perturbation flips an activation, ``P`` is resampled near the original
    point. Returns ``(max_relative_error, n_resampled)``.
    """
    if probe is None:
        probe = lambda out: (0.5 * float(out @ out), out)
    rng = np.random.default_rng(0) if rng is None else rng
    P = np.asarray(P, dtype=float)
    scale = np.maximum(np.abs(P), 1.0)
    resampled = 0
    while True:
        err = _grad_check_at(net, P, probe, step, kink_tol)
        if err is not None:
            return err, resampled
        if resampled >= max_resample:
            raise RuntimeError("could not find a differentiable probe point")
        resampled += 1
        P = P + 1e-2 * scale * rng.standard_normal(P.shape)


def _pattern(net: MlpNet, x):
    _, (_, pre) = net.forward(x[None, :])
    return [z[0] > 0 for z in pre[:-1]], min((np.abs(z).min() for z in pre[:-1]), default=np.inf)


def _grad_check_at(net, P, probe, step, kink_tol):
    pattern, margin = _pattern(net, P)
    if margin <= kink_tol:
        return None
    out, cache = net.forward(P[None, :])
    _, dout = probe(out[0])
    dWs, dbs = net.backward(cache, np.asarray(dout, dtype=float)[None, :])
    analytic = net.flat_grad(dWs, dbs)

    work = net.copy()
    theta = work.get_flat()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        vals = []
        for sgn in (1.0, -1.0):
            theta[i] = orig + sgn * step
            work.set_flat(theta)
            pat, _ = _pattern(work, P)
            if any(np.any(a != b) for a, b in zip(pat, pattern)):
                return None
            vals.append(probe(work(P))[0])
        theta[i] = orig
        numeric[i] = (vals[0] - vals[1]) / (2.0 * step)
    work.set_flat(theta)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-7)
    return float(np.max(np.abs(analytic - numeric) / denom))
