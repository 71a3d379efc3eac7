import itertools
import math

import numpy as np
import pytest

from annealfe.annealing import Schedule, linear_schedule, log_lambda_k, log_w_k, log_z0
from annealfe.kernels import BLOCKED, MH_AUGMENTED, KernelSpec
from annealfe.mrf import CapacityError, enumerate_spins, exact_log_z
from annealfe.oracle import (
    certify_instance,
    exact_estimator_moments,
    exact_f_expectation_n1,
    layer_update_matrices,
    staged_joint_kernel,
    variance_gap_by_enumeration,
    verify_marginal_factorization,
    verify_rao_blackwell_identity,
)

from conftest import random_model

MH = KernelSpec(MH_AUGMENTED, 1)


def brute_moments(model, schedule, spec):
    """E[W], E[W^2], E[ln W] for AIS by summing over every joint trajectory."""
    nh = model.n_hidden
    V = np.repeat(enumerate_spins(model.n_visible), 1 << nh, axis=0)
    H = np.tile(enumerate_spins(nh), (1 << model.n_visible, 1))
    size = V.shape[0]
    lw = [log_w_k(model, schedule, k, V, H) for k in range(1, schedule.K + 1)]
    kern = [staged_joint_kernel(model, schedule[k], spec) for k in range(1, schedule.K)]
    m1 = m2 = mlog = 0.0
    for traj in itertools.product(range(size), repeat=schedule.K):
        p = 1.0 / size
        for k in range(schedule.K - 1):
            p *= kern[k][traj[k], traj[k + 1]]
        if p == 0.0:
            continue
        logw = sum(lw[k][traj[k]] for k in range(schedule.K))
        m1 += p * math.exp(logw)
        m2 += p * math.exp(2 * logw)
        mlog += p * logw
    return m1, m2, mlog


@pytest.mark.parametrize("spec", [BLOCKED, MH])
@pytest.mark.parametrize("K", [1, 2, 3])
def test_moments_match_trajectory_enumeration(spec, K):
    m = random_model(np.random.default_rng(K), 1, 2)
    s = linear_schedule(K)
    m1, m2, mlog = brute_moments(m, s, spec)
    rep = exact_estimator_moments(m, s, spec, "ais")
    z0 = math.exp(log_z0(m))
    assert rep.mean_z == pytest.approx(z0 * m1, rel=1e-12)
    assert rep.variance_z == pytest.approx(z0**2 * (m2 - m1 * m1), rel=1e-9, abs=1e-12)
    assert exact_f_expectation_n1(m, s, spec, "ais") == pytest.approx(-log_z0(m) - mlog, abs=1e-12)


@pytest.mark.parametrize("method", ["ais", "mais_v", "mais_h"])
@pytest.mark.parametrize("spec", [BLOCKED, MH])
def test_estimators_are_unbiased(method, spec):
    m = random_model(np.random.default_rng(11), 3, 2)
    s = Schedule([0.0, 0.1, 0.45, 1.0])
    rep = exact_estimator_moments(m, s, spec, method)
    assert abs(rep.mean_z - rep.exact_z) / rep.exact_z < 1e-10


def test_variance_scales_with_n_sequences():
    m = random_model(np.random.default_rng(12), 2, 2)
    s = linear_schedule(3)
    one = exact_estimator_moments(m, s, BLOCKED, "ais", 1).variance_z
    ten = exact_estimator_moments(m, s, BLOCKED, "ais", 10).variance_z
    assert ten == pytest.approx(one / 10, rel=1e-12)


def test_variance_gap_equals_expected_squared_difference():
    # Var(W) - Var(Lambda) = E[(W - Lambda)^2] because E[W | V] = Lambda
    m = random_model(np.random.default_rng(13), 2, 1)
    s = linear_schedule(3)
    for spec in (BLOCKED, MH):
        gap = (
            exact_estimator_moments(m, s, spec, "ais").variance_z
            - exact_estimator_moments(m, s, spec, "mais_v").variance_z
        )
        assert variance_gap_by_enumeration(m, s, spec) == pytest.approx(gap, rel=1e-9, abs=1e-12)


def test_bias_ordering_holds():
    m = random_model(np.random.default_rng(14), 3, 3, scale=1.5)
    s = linear_schedule(2)
    f_true = -exact_log_z(m)
    f_ais = exact_f_expectation_n1(m, s, BLOCKED, "ais")
    f_mais = exact_f_expectation_n1(m, s, BLOCKED, "mais_v")
    assert f_ais >= f_mais >= f_true


@pytest.mark.parametrize("spec", [BLOCKED, MH])
def test_factorization_holds(spec):
    m = random_model(np.random.default_rng(15), 2, 2)
    rep = verify_marginal_factorization(m, linear_schedule(3), spec)
    assert rep.passed and rep.max_deviation < 1e-12


def test_factorization_negative_control():
    # dropping the trailing h refresh breaks the factorized form
    m = random_model(np.random.default_rng(16), 2, 2)

    def broken(model, beta):
        g_h, g_v, _ = layer_update_matrices(model, beta)
        return g_h @ g_v

    rep = verify_marginal_factorization(m, linear_schedule(3), BLOCKED, joint_kernel=broken)
    assert not rep.passed and rep.max_deviation > 1e-3


def test_rao_blackwell_identity():
    m = random_model(np.random.default_rng(17), 2, 2)
    rep = verify_rao_blackwell_identity(m, linear_schedule(3))
    assert rep.passed and rep.check == "rao_blackwell_identity"


def test_rao_blackwell_negative_control(monkeypatch):
    # marginal weights from a different model must break the identity
    import annealfe.oracle as oracle

    m = random_model(np.random.default_rng(18), 1, 2)
    other = random_model(np.random.default_rng(19), 1, 2)
    monkeypatch.setattr(oracle, "log_lambda_k", lambda _m, s, k, v: log_lambda_k(other, s, k, v))
    rep = verify_rao_blackwell_identity(m, linear_schedule(2))
    assert not rep.passed and rep.max_deviation > 1e-3


def test_certify_instance_reports():
    m = random_model(np.random.default_rng(20), 2, 2)
    reports = certify_instance(m, linear_schedule(2), MH)
    names = [r.check for r in reports]
    assert names == [
        "unbiased_ais",
        "unbiased_mais_v",
        "variance_dominance",
        "bias_ordering",
        "marginal_factorization",
        "rao_blackwell_identity",
    ]
    assert all(r.passed for r in reports)
    d = reports[0].to_dict()
    assert d["pass"] is True and "passed" not in d
    assert d["instance_descriptor"]["kernel"] == "mh_augmentedx1"


def test_capacity_errors():
    m = random_model(np.random.default_rng(0), 7, 6)
    with pytest.raises(CapacityError):
        exact_estimator_moments(m, linear_schedule(2), BLOCKED, "ais")
    with pytest.raises(CapacityError):
        verify_rao_blackwell_identity(random_model(np.random.default_rng(0), 3, 3), linear_schedule(4))
    with pytest.raises(ValueError):
        exact_estimator_moments(random_model(np.random.default_rng(0), 2, 2), linear_schedule(2), BLOCKED, "smc")


def test_oracle_deterministic_and_zero_model_variance():
    from annealfe.mrf import BipartiteModel

    m = random_model(np.random.default_rng(21), 2, 3)
    s = linear_schedule(3)
    a = exact_estimator_moments(m, s, MH, "ais")
    b = exact_estimator_moments(m, s, MH, "ais")
    assert a == b
    zero = BipartiteModel(np.zeros(2), np.zeros(3), np.zeros((2, 3)))
    for K in (1, 2, 4):
        for n in (1, 5):
            assert exact_estimator_moments(zero, linear_schedule(K), BLOCKED, "ais", n).variance_z == 0.0
