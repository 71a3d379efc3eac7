import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from annealfe.annealing import (
    Schedule,
    linear_schedule,
    log_lambda_k,
    log_lambda_k_hidden,
    log_w_k,
    log_z0,
    step_energy,
)
from annealfe.mrf import LN2, energy, enumerate_spins, exact_log_z, marginal_energy_v

from conftest import random_model


def test_linear_schedule_values():
    s = linear_schedule(4)
    assert s.K == 4 and len(s) == 5
    assert list(s.betas) == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert linear_schedule(1).betas.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("betas", [[0.0], [0.1, 1.0], [0.0, 0.9], [0.0, 0.5, 0.5, 1.0], [0.0, 0.7, 0.3, 1.0]])
def test_schedule_rejects_bad_betas(betas):
    with pytest.raises(ValueError):
        Schedule(betas)


@pytest.mark.parametrize("K", [0, -1, 2.5])
def test_linear_schedule_rejects_bad_k(K):
    with pytest.raises(ValueError):
        linear_schedule(K)


def test_log_z0_is_n_ln2(rng):
    m = random_model(rng, 3, 5)
    assert log_z0(m) == 8 * LN2
    # matches the exact partition function at beta = 0
    assert exact_log_z(m, beta=0.0) == pytest.approx(log_z0(m), abs=1e-12)


def test_step_weights(rng):
    m = random_model(rng, 3, 2)
    s = Schedule([0.0, 0.2, 0.7, 1.0])
    v, h = np.array([1, -1, 1]), np.array([-1, -1])
    e = energy(m, v, h)
    assert step_energy(m, s, 0, v, h) == 0.0
    assert step_energy(m, s, 2, v, h) == pytest.approx(0.7 * e)
    assert log_w_k(m, s, 2, v, h) == pytest.approx(-0.5 * e)
    lam = log_lambda_k(m, s, 3, v)
    assert lam == pytest.approx(marginal_energy_v(m, 0.7, v) - marginal_energy_v(m, 1.0, v))
    for k in (0, 4):
        with pytest.raises(ValueError):
            log_w_k(m, s, k, v, h)
        with pytest.raises(ValueError):
            log_lambda_k(m, s, k, v)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 6))
def test_weights_telescope_to_exact_ratio(seed, K):
    # a chain frozen at one state: products of weights telescope to the full energy
    rng = np.random.default_rng(seed)
    m = random_model(rng, 2, 3)
    s = linear_schedule(K)
    v = enumerate_spins(2)[seed % 4]
    h = enumerate_spins(3)[seed % 8]
    total_w = sum(log_w_k(m, s, k, v, h) for k in range(1, K + 1))
    assert total_w == pytest.approx(-energy(m, v, h), abs=1e-12)
    total_lam = sum(log_lambda_k(m, s, k, v) for k in range(1, K + 1))
    assert total_lam == pytest.approx(
        marginal_energy_v(m, 0.0, v) - marginal_energy_v(m, 1.0, v), abs=1e-12
    )


def test_hidden_lambda_is_visible_lambda_of_transpose(rng):
    m = random_model(rng, 3, 4)
    s = linear_schedule(3)
    H = enumerate_spins(4)
    for k in range(1, 4):
        assert np.allclose(log_lambda_k_hidden(m, s, k, H), log_lambda_k(m.transposed(), s, k, H), atol=1e-13)


def test_lambda_is_conditional_average_of_w(rng):
    # exp(ln lambda_k(v)) = sum_h exp(ln w_k(v, h)) P_{k-1}(h | v)
    m = random_model(rng, 3, 3)
    s = linear_schedule(4)
    V, H = enumerate_spins(3), enumerate_spins(3)
    for k in range(1, 5):
        for v in V:
            Vt = np.tile(v, (8, 1))
            log_joint_prev = -s[k - 1] * energy(m, Vt, H)
            cond = np.exp(log_joint_prev - np.logaddexp.reduce(log_joint_prev))
            rhs = np.sum(np.exp(log_w_k(m, s, k, Vt, H)) * cond)
            assert math.log(rhs) == pytest.approx(log_lambda_k(m, s, k, v), abs=1e-10)


def test_zero_model_weights_vanish():
    from annealfe.mrf import BipartiteModel

    m = BipartiteModel(np.zeros(2), np.zeros(3), np.zeros((2, 3)))
    s = linear_schedule(3)
    for k in range(1, 4):
        assert np.all(log_w_k(m, s, k, enumerate_spins(2)[[0, 3]], enumerate_spins(3)[[1, 6]]) == 0.0)
