"""Shared test oracles."""

import numpy as np


def feasible_inputs(spec, u_prev, rng, k):
    """``k`` random input sequences satisfying the input and rate bounds, built stage by stage."""
    prev = np.broadcast_to(np.asarray(u_prev, dtype=float), (k, spec.nu))
    out = []
    for _ in range(spec.T):
        lo = np.maximum(-spec.u_bar, prev - spec.du_bar)
        hi = np.minimum(spec.u_bar, prev + spec.du_bar)
        u = lo + (hi - lo) * rng.random((k, spec.nu))
        out.append(u)
        prev = u
    return np.hstack(out)


def projected_gradient_box(Q, c, lo, hi, iters=100_000):
    """Accelerated projected gradient for ``min 1/2 x'Qx + c'x`` over a box."""
    L = np.linalg.eigvalsh(Q).max()
    x = np.clip(np.zeros_like(c), lo, hi)
    y, t = x.copy(), 1.0
    for _ in range(iters):
        x_new = np.clip(y - (Q @ y + c) / L, lo, hi)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + (t - 1.0) / t_new * (x_new - x)
        x, t = x_new, t_new
    return x, float(0.5 * x @ Q @ x + c @ x)


def mlp_reference(weights, biases, x):
    """Layer-by-layer forward pass written independently of the package."""
    a = np.asarray(x, dtype=float)
    for i in range(len(weights)):
        z = np.zeros(weights[i].shape[0])
        for r in range(weights[i].shape[0]):
            z[r] = sum(weights[i][r, j] * a[j] for j in range(a.shape[0])) + biases[i][r]
        a = z if i == len(weights) - 1 else np.where(z > 0, z, 0.0)
    return a
