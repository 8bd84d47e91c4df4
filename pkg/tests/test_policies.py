import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdpl.lpv_mpc import CondensedQp, condense
from pdpl.policies import (DUAL, MLP, PRIMAL, RBN, LabeledSample, LabeledSet, MlpNet, Policy, RbnNet,
                           TrainConfig, dual_certificate, eval_policy, grad_check, mlp_template,
                           policy_to_bytes, primal_certificate, rbn_features, rbn_template, train_dual,
                           train_primal)
from pdpl.qp import QpSolution, build_dual, eval_dual_cost, kkt_residuals

from helpers import mlp_reference


# ----------------------------------------------------------------------------
# evaluation

def test_rbn_feature_values():
    center = np.array([1.0, -2.0, 0.5])
    scaling = np.array([0.5, 2.0, 1.0])
    net = RbnNet(center[None, :], scaling, np.ones((1, 1)))
    direction = np.array([0.0, 1.0, 0.0])   # scaled distance 2 * |offset|
    assert rbn_features(net, center)[0] == 1.0
    assert rbn_features(net, center + 1.0 * direction)[0] == pytest.approx(0.0, abs=1e-15)
    assert rbn_features(net, center + 2.0 * direction)[0] == pytest.approx(-1.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), k=st.integers(1, 12), out=st.integers(1, 9))
def test_rbn_output_is_kronecker_form(seed, k, out):
    rng = np.random.default_rng(seed)
    d = 5
    net = RbnNet(rng.standard_normal((k, d)), rng.random(d) + 0.1, rng.standard_normal((out, k)))
    P = rng.standard_normal(d)
    kappa = np.array([(1 - np.linalg.norm(net.scaling * (P - c)) / 2) ** 3 for c in net.centers])
    stacked = net.coef.T.ravel()            # [theta_1; ...; theta_k]
    ref = np.kron(kappa[None, :], np.eye(out)) @ stacked
    assert np.allclose(net(P), ref, rtol=1e-12, atol=1e-12)
    batch = net(np.vstack([P, P]))
    assert np.allclose(batch[0], net(P), rtol=1e-13, atol=1e-13)


def test_mlp_zero_and_single_layer():
    zero = MlpNet([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    assert not zero(np.array([1.0, -5.0, 2.0])).any()
    net = MlpNet([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
    assert np.array_equal(net(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_mlp_matches_reference_implementation(rng):
    for _ in range(5):
        policy = mlp_template(20, 15, 3, 9, int(rng.integers(1 << 30)), PRIMAL)
        for W in policy.net.biases:
            W[...] = rng.standard_normal(W.shape)
        P = rng.standard_normal(20)
        ref = mlp_reference(policy.net.weights, policy.net.biases, P)
        assert np.allclose(eval_policy(policy, P), ref, rtol=1e-12, atol=1e-12)


def test_dual_outputs_clamped(rng):
    policy = mlp_template(20, 5, 3, 36, 0, DUAL)
    out = eval_policy(policy, rng.standard_normal((50, 20)))
    assert out.min() >= 0.0 and (out == 0).any()
    raw = policy.net(rng.standard_normal((50, 20)))
    assert raw.min() < 0


def test_multiply_add_counts():
    mlp = mlp_template(20, 15, 3, 9, 0, PRIMAL)
    assert mlp.multiply_adds() == 20 * 15 + 15 * 15 + 15 * 9
    rbn = rbn_template(np.zeros(20), np.ones(20), 40, 9, 0, PRIMAL)
    assert rbn.multiply_adds() == 40 * 2 * 20 + 40 * 3 + 9 * 40


def test_templates():
    lo, hi = -np.arange(1.0, 4.0), np.arange(1.0, 4.0)
    small = rbn_template(lo, hi, 5, 2, 3, PRIMAL)
    large = rbn_template(lo, hi, 8, 2, 3, PRIMAL)
    assert np.array_equal(large.net.centers[:5], small.net.centers)
    assert np.all(small.net.centers >= lo) and np.all(small.net.centers <= hi)
    assert np.all(small.net.scaling > 0)
    assert not np.array_equal(rbn_template(lo, hi, 5, 2, 3, DUAL).net.centers, small.net.centers)
    with pytest.raises(ValueError):
        Policy("svm", PRIMAL, small.net)


# ----------------------------------------------------------------------------
# gradient check

def test_grad_check_linear_network(rng):
    # a linear probe on a linear network makes the loss affine in every
    # parameter, so central differences are exact up to roundoff
    net = MlpNet([rng.standard_normal((4, 6))], [rng.standard_normal(4)])
    w = rng.standard_normal(4)
    err, resampled = grad_check(net, rng.standard_normal(6), probe=lambda out: (float(w @ out), w), step=1e-3)
    assert err <= 1e-9 and resampled == 0
    err, _ = grad_check(net, rng.standard_normal(6))
    assert err <= 1e-7


def test_grad_check_relu_network(rng):
    for i in range(3):
        net = mlp_template(20, 15, 3, 9, i, PRIMAL).net
        for b in net.biases:
            b[...] = 0.1 * rng.standard_normal(b.shape)
        err, _ = grad_check(net, rng.standard_normal(20), rng=rng)
        assert err <= 1e-4


def test_grad_check_resamples_at_kink(rng):
    net = mlp_template(6, 4, 3, 2, 1, PRIMAL).net
    P = rng.standard_normal(6)
    net.biases[0][0] = -net.weights[0][0] @ P     # first unit exactly at its kink
    err, resampled = grad_check(net, P, rng=rng)
    assert resampled >= 1 and err <= 1e-4


# ----------------------------------------------------------------------------
# training

def one_sample(Q, c, H, h, U, lam, J, P=(0.3,)):
    qp = CondensedQp(Q=np.array(Q, dtype=float), c=np.array(c, dtype=float),
                     H=np.array(H, dtype=float), h=np.array(h, dtype=float))
    sol = QpSolution(np.array(U, dtype=float), np.array(lam, dtype=float), float(J), "optimal",
                     kkt_residuals(qp, np.array(U, dtype=float), np.array(lam, dtype=float)))
    return LabeledSet.from_samples([LabeledSample.from_solution(np.array(P), qp, sol, build_dual(qp))])


def single_center(role, out, P=(0.3,)):
    policy = rbn_template(np.array([-1.0]), np.array([1.0]), 1, out, 0, role)
    policy.net.centers[...] = np.array(P)
    return policy


def test_one_sample_primal_fit():
    data = one_sample([[2.0]], [-2.0], [[1.0]], [1.0], U=[1.0], lam=[0.0], J=-1.0)
    policy, t_p, report = train_primal(data, single_center(PRIMAL, 1), TrainConfig())
    assert report["success"] and t_p is not None
    assert abs(t_p) <= 1e-9
    assert eval_policy(policy, data.P[0])[0] == pytest.approx(1.0, abs=1e-9)


def test_one_sample_dual_fit():
    data = one_sample([[2.0]], [0.0], [[-1.0]], [-1.0], U=[1.0], lam=[2.0], J=1.0)
    policy, t_d, _ = train_dual(data, single_center(DUAL, 1), TrainConfig())
    assert abs(t_d) <= 1e-9
    assert eval_policy(policy, data.P[0])[0] == pytest.approx(2.0, abs=1e-9)


def test_zero_dual_policy_certificate(config, small_dataset):
    data = small_dataset.labeled(config)
    zero = rbn_template(config.box.lower, config.box.upper, 3, 36, 0, DUAL)
    t_d, lam_min = dual_certificate(zero, data)
    gt = [build_dual(condense(config.mpc, config.vehicle, p)).gt for p in small_dataset.P]
    assert t_d == pytest.approx(np.max(small_dataset.J - np.array(gt)), rel=1e-9)
    assert lam_min.min() == 0.0


@pytest.fixture(scope="module")
def trained_pair(config, small_dataset):
    data = small_dataset.labeled(config)
    box = config.box
    cfg = TrainConfig()
    primal = train_primal(data, rbn_template(box.lower, box.upper, 40, 9, 0, PRIMAL), cfg)
    dual = train_dual(data, rbn_template(box.lower, box.upper, 10, 36, 0, DUAL), cfg)
    return primal, dual


def test_trained_certificates_recomputed_from_scratch(config, small_dataset, trained_pair):
    (policy, t_p, report), (dual, t_d, _) = trained_pair
    assert report["success"], report.get("violators")
    worst_p, worst_d = -np.inf, -np.inf
    for P, J in zip(small_dataset.P, small_dataset.J):
        qp = condense(config.mpc, config.vehicle, P)
        U = eval_policy(policy, P)
        assert np.all(qp.H @ U <= qp.h + 1e-9)
        worst_p = max(worst_p, 0.5 * U @ qp.Q @ U + qp.c @ U - J)
        lam = eval_policy(dual, P)
        assert lam.min() >= -1e-9
        worst_d = max(worst_d, J - eval_dual_cost(build_dual(qp), lam))
    assert worst_p == pytest.approx(t_p, abs=1e-9)
    assert worst_d == pytest.approx(t_d, abs=1e-9 * max(1.0, abs(t_d)))
    assert policy.certified_t == t_p and dual.certified_t == t_d


def test_refinement_is_monotone(trained_pair):
    for _, t_star, report in trained_pair:
        accepted = [r["max_suboptimality"] for r in report["refinement"] if r["accepted"]]
        assert accepted == sorted(accepted, reverse=True)
        if accepted:
            assert t_star <= accepted[0] + 1e-9


def test_training_is_deterministic(config, small_dataset, trained_pair):
    data = small_dataset.labeled(config)
    box = config.box
    again = train_primal(data, rbn_template(box.lower, box.upper, 40, 9, 0, PRIMAL), TrainConfig())
    assert policy_to_bytes(again[0]) == policy_to_bytes(trained_pair[0][0])
    assert again[1] == trained_pair[0][1]
    mlp = [train_dual(data.head(100), mlp_template(20, 5, 3, 36, 4, DUAL), TrainConfig(epochs=5))
           for _ in range(2)]
    assert policy_to_bytes(mlp[0][0]) == policy_to_bytes(mlp[1][0])


def test_infeasible_primal_reports_violators(config, small_dataset):
    data = small_dataset.labeled(config)
    box = config.box
    policy, t_p, report = train_primal(data, rbn_template(box.lower, box.upper, 2, 9, 0, PRIMAL),
                                       TrainConfig(stages=2, stage_iters=50))
    assert t_p is None and not report["success"] and policy.certified_t is None
    assert report["n_infeasible"] > 0 and report["violators"]
    assert report["violators"][0]["violation"] > 1e-9


def test_training_argument_checks(config, small_dataset):
    data = small_dataset.labeled(config)
    box = config.box
    with pytest.raises(ValueError):
        train_primal(data, rbn_template(box.lower, box.upper, 3, 36, 0, DUAL))
    with pytest.raises(ValueError):
        train_dual(data, rbn_template(box.lower, box.upper, 3, 9, 0, DUAL))
    with pytest.raises(ValueError):
        TrainConfig(margin=-1.0)
