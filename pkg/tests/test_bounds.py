import math
from types import SimpleNamespace

import mpmath as mp
import pytest
from hypothesis import given, settings, strategies as st

from pdpl.bounds import (BoundSpec, MlpShape, binomial_upper_test, describe, learning_theory_sample_size,
                         rbn_decision_count, sample_size_for, scenario_sample_size, scenario_sample_size_exact,
                         scenario_tail, vc_upper_bound)

mp.mp.dps = 40


def mp_binom_cdf(k, N, eps):
    """Exact ``P[X <= k]`` for ``X ~ Binomial(N, eps)`` in high precision."""
    eps = mp.mpf(eps)
    return mp.fsum(mp.binomial(N, i) * eps ** i * (1 - eps) ** (N - i) for i in range(k + 1))


def test_scenario_small_case():
    assert scenario_sample_size(BoundSpec(0.5, math.exp(-1)), 2) == 8


def test_scenario_regression_basis_network():
    p, d = BoundSpec(0.1, 2e-7).split()
    assert (p.epsilon, p.beta) == (0.05, 1e-7) and p == d
    n_dec = rbn_decision_count(130, 9)
    assert n_dec == 1171
    expected = int(mp.ceil(40 * (1170 + mp.log(mp.mpf(10) ** 7))))
    assert expected == 47445
    assert scenario_sample_size(p, n_dec) == expected
    assert sample_size_for("rbn", p, n_rb=130, output_dim=9) == expected


def test_scenario_linear_in_dimension():
    spec = BoundSpec(0.05, 1e-7)
    raw = lambda n: 2 / spec.epsilon * ((n - 1) + math.log(1 / spec.beta))
    assert raw(2 * 1170 + 1) - raw(1171) == pytest.approx(2 / spec.epsilon * 1170)
    assert scenario_sample_size(spec, 2341) - scenario_sample_size(spec, 1171) in (46799, 46800, 46801)


def test_exact_tail_is_minimal():
    spec = BoundSpec(0.05, 1e-7)
    N = scenario_sample_size_exact(spec, 31)
    assert N <= scenario_sample_size(spec, 31)
    assert mp_binom_cdf(30, N, 0.05) <= mp.mpf(1e-7)
    assert mp_binom_cdf(30, N - 1, 0.05) > mp.mpf(1e-7)
    assert scenario_tail(31, N, 0.05) == pytest.approx(float(mp_binom_cdf(30, N, 0.05)), rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(eps=st.floats(0.01, 0.5), log_beta=st.floats(-20, -1), n=st.integers(1, 400))
def test_exact_tail_never_exceeds_closed_form(eps, log_beta, n):
    spec = BoundSpec(eps, math.exp(log_beta))
    assert scenario_sample_size_exact(spec, n) <= scenario_sample_size(spec, n)


@settings(max_examples=60, deadline=None)
@given(eps=st.floats(0.01, 0.5), log_beta=st.floats(-20, -1), n=st.integers(1, 10_000),
       f=st.floats(0.3, 0.99))
def test_sample_sizes_monotone(eps, log_beta, n, f):
    spec = BoundSpec(eps, math.exp(log_beta))
    tighter_eps = BoundSpec(eps * f, spec.beta)
    tighter_beta = BoundSpec(eps, spec.beta * f)
    for fn, arg in ((scenario_sample_size, n), (learning_theory_sample_size, float(n))):
        N = fn(spec, arg)
        assert fn(spec, arg + 1) >= N
        assert fn(tighter_eps, arg) >= N
        assert fn(tighter_beta, arg) >= N


def test_vc_single_unit():
    shape = MlpShape(1, (1,))
    assert shape.n_params == 2
    expected = 1 + 2 * mp.log(4 * mp.e * mp.log(2 * mp.e, 2), 2)
    assert vc_upper_bound(shape) == pytest.approx(float(expected), rel=1e-14)
    assert round(vc_upper_bound(shape), 5) == 10.46234


def test_vc_primal_network_regression():
    shape = MlpShape.uniform(20, 15, 3, 9)
    assert shape.widths == (15, 15, 9) and shape.n_params == 699
    S = 1 * 15 + 2 * 15 + 3 * 9
    expected = 3 + 3 * 699 * mp.log(4 * mp.e * S * mp.log(2 * mp.e * S, 2), 2)
    assert vc_upper_bound(shape) == pytest.approx(float(expected), rel=1e-14)
    assert vc_upper_bound(shape) == pytest.approx(26674.894463186235, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(widths=st.lists(st.integers(1, 40), min_size=1, max_size=5), layer=st.integers(0, 4),
       d=st.integers(1, 30))
def test_vc_increases_with_width(widths, layer, d):
    layer = layer % len(widths)
    wider = list(widths)
    wider[layer] += 1
    assert vc_upper_bound(MlpShape(d, tuple(wider))) > vc_upper_bound(MlpShape(d, tuple(widths)))


def test_learning_theory_unit_case():
    # eps = 12/e and beta = 2 lie outside BoundSpec's domain, so a plain namespace carries them
    spec = SimpleNamespace(epsilon=12 / math.e, beta=2.0)
    assert learning_theory_sample_size(spec, 1.0) == 1


def test_learning_theory_regression():
    spec = BoundSpec(0.05, 1e-7)
    value = 80 * (1000 * mp.log(240) + mp.log(2 * mp.mpf(10) ** 7))
    assert int(mp.ceil(value)) == 439797
    assert learning_theory_sample_size(spec, 1000.0) == 439797


def test_learning_theory_affine_in_xi():
    spec = BoundSpec(0.05, 1e-7)
    raw = lambda xi: 4 / spec.epsilon * (xi * math.log(12 / spec.epsilon) + math.log(2 / spec.beta))
    assert raw(300.0) - 2 * raw(200.0) + raw(100.0) == pytest.approx(0.0, abs=1e-6)
    slope = 4 / spec.epsilon * math.log(12 / spec.epsilon)
    assert learning_theory_sample_size(spec, 2000.0) - learning_theory_sample_size(spec, 1000.0) == \
        pytest.approx(1000 * slope, abs=1.0)


def test_binomial_test_against_exact_tail():
    assert binomial_upper_test(0, 1000, 0.1) == 1.0
    assert binomial_upper_test(5, 0, 0.1) == 1.0
    exact = 1 - mp_binom_cdf(14, 100, 0.1)
    assert binomial_upper_test(15, 100, 0.1) == pytest.approx(float(exact), rel=1e-10)


def test_validation_and_describe():
    for eps, beta in ((0.0, 0.1), (1.0, 0.1), (0.1, 0.0), (0.1, 1.0)):
        with pytest.raises(ValueError):
            BoundSpec(eps, beta)
    with pytest.raises(ValueError):
        scenario_sample_size(BoundSpec(0.1, 0.1), 0)
    with pytest.raises(ValueError):
        learning_theory_sample_size(BoundSpec(0.1, 0.1), 0.5)
    with pytest.raises(ValueError):
        MlpShape(3, ())
    info = describe(BoundSpec(0.05, 1e-7), n_dec=1171, widths=(15, 15, 9), input_dim=20)
    assert info["scenario_closed_form"] == 47445
    assert info["scenario_exact_tail"] <= 47445
    assert info["n_params"] == 699
