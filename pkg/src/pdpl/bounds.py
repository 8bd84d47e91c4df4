"""Sample-size bounds for certified policy training.

* scenario bound for convex sampled programs with ``n_dec`` decision variables,
* VC-dimension upper bound for piecewise-linear (ReLU) networks,
* statistical-learning bound for sampled programs of finite VC dimension.

Logarithms are natural except the base-2 logarithms of the VC bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from scipy.stats import binom


@dataclass(frozen=True)
class BoundSpec:
    epsilon: float
    beta: float

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")

    def split(self) -> tuple["BoundSpec", "BoundSpec"]:
        """Equal primal/dual split ``eps/2, beta/2`` (union bound)."""
        half = BoundSpec(self.epsilon / 2.0, self.beta / 2.0)
        return half, half


@dataclass(frozen=True)
class MlpShape:
    """``widths`` lists the units of every affine layer, output layer included."""

    input_dim: int
    widths: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 1:
            raise ValueError("network needs at least one layer")
        if self.input_dim < 1 or any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")

    @classmethod
    def uniform(cls, input_dim: int, width: int, depth: int, output_dim: int) -> "MlpShape":
        """``depth`` affine layers: ``depth - 1`` hidden layers of ``width`` plus the output layer."""
        return cls(input_dim, (width,) * (depth - 1) + (output_dim,))

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def dims(self) -> tuple:
        return (self.input_dim,) + self.widths

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(d[i + 1] * (d[i] + 1) for i in range(len(d) - 1))


def scenario_sample_size(spec: BoundSpec, n_dec: int) -> int:
    """``ceil(2/eps * (n_dec - 1 + ln(1/beta)))``."""
    if n_dec < 1:
        raise ValueError("n_dec must be >= 1")
    return math.ceil(2.0 / spec.epsilon * ((n_dec - 1) + math.log(1.0 / spec.beta)))


def scenario_tail(n_dec: int, N: int, epsilon: float) -> float:
    """Binomial tail ``sum_{i<n_dec} C(N,i) eps^i (1-eps)^(N-i)``."""
    return float(math.exp(binom.logcdf(n_dec - 1, N, epsilon)))


def scenario_sample_size_exact(spec: BoundSpec, n_dec: int) -> int:
    """Smallest ``N`` with binomial tail ``<= beta`` (bisection in log space)."""
    if n_dec < 1:
        raise ValueError("n_dec must be >= 1")
    log_beta = math.log(spec.beta)

    def ok(N):
        return binom.logcdf(n_dec - 1, N, spec.epsilon) <= log_beta

    lo = n_dec - 1          # tail is 1 here
    hi = max(scenario_sample_size(spec, n_dec), n_dec)
    while not ok(hi):
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def vc_upper_bound(shape: MlpShape) -> float:
    """``L + L W log2(4e S log2(2e S))`` with ``S = sum_i i * n_i`` over layers 1..L."""
    L = shape.depth
    W = shape.n_params
    S = sum((i + 1) * n for i, n in enumerate(shape.widths))
    inner = 4.0 * math.e * S * math.log2(2.0 * math.e * S)
    return L + L * W * math.log2(inner)


def learning_theory_sample_size(spec: BoundSpec, xi: float) -> int:
    """``ceil(4/eps * (xi ln(12/eps) + ln(2/beta)))``."""
    if xi < 1:
        raise ValueError("VC dimension bound must be >= 1")
    eps = spec.epsilon
    return math.ceil(4.0 / eps * (xi * math.log(12.0 / eps) + math.log(2.0 / spec.beta)))


def rbn_decision_count(n_rb: int, output_dim: int) -> int:
    """Coefficients of a basis-function policy plus the suboptimality level."""
    return n_rb * output_dim + 1


def sample_size_for(kind: str, spec: BoundSpec, *, n_rb: int = 0, output_dim: int = 0,
                    shape: MlpShape | None = None) -> int:
    if kind == "rbn":
        return scenario_sample_size(spec, rbn_decision_count(n_rb, output_dim))
    if kind == "mlp":
        if shape is None:
            raise ValueError("mlp sample size needs a network shape")
        return learning_theory_sample_size(spec, vc_upper_bound(shape))
    raise ValueError(f"unknown policy kind {kind!r}")


def binomial_upper_test(k: int, M: int, epsilon: float) -> float:
    """p-value of observing ``>= k`` events in ``M`` trials when the rate is ``epsilon``."""
    if M == 0:
        return 1.0
    return float(binom.sf(k - 1, M, epsilon))


def describe(spec: BoundSpec, n_dec: int | None = None, widths: Sequence[int] | None = None,
             input_dim: int | None = None) -> dict:
    out = {"epsilon": spec.epsilon, "beta": spec.beta}
    if n_dec is not None:
        out["n_dec"] = n_dec
        out["scenario_closed_form"] = scenario_sample_size(spec, n_dec)
        out["scenario_exact_tail"] = scenario_sample_size_exact(spec, n_dec)
    if widths is not None:
        shape = MlpShape(int(input_dim), tuple(widths))
        xi = vc_upper_bound(shape)
        out["n_params"] = shape.n_params
        out["vc_upper_bound"] = xi
        out["learning_theory"] = learning_theory_sample_size(spec, xi)
        out["exact_tail"] = None   # the binomial-tail refinement applies to convex programs only
    return out
