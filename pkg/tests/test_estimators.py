import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from annealfe.annealing import linear_schedule, log_lambda_k, log_w_k
from annealfe.estimators import (
    RunConfig,
    accuracy_ratio,
    ape,
    effective_sample_size,
    logmeanexp,
    resolve_method,
    run,
    run_ais,
    run_mais,
)
from annealfe.kernels import BLOCKED, MH_AUGMENTED, KernelSpec, RngStream, ais_step, mais_step
from annealfe.mrf import LN2, BipartiteModel, exact_log_z
from annealfe.oracle import exact_estimator_moments

from conftest import random_model

MH = KernelSpec(MH_AUGMENTED, 1)


def _init(u):
    return np.where(u < 0.5, 1, -1)


def replay_ais(model, schedule, seed, mu, spec):
    """One AIS sequence rebuilt from the single-step API and the same stream."""
    rng = RngStream(seed, mu)
    u = rng.uniform(model.n)
    v, h = _init(u[: model.n_visible]), _init(u[model.n_visible :])
    lw = log_w_k(model, schedule, 1, v, h)
    for k in range(2, schedule.K + 1):
        vs, hs = ais_step(model, schedule, k - 1, v, h, rng, spec)
        v, h = vs.values, hs.values
        lw += log_w_k(model, schedule, k, v, h)
    return lw


def replay_mais(model, schedule, seed, mu, spec):
    rng = RngStream(seed, mu)
    v = _init(rng.uniform(model.n_visible))
    lw = log_lambda_k(model, schedule, 1, v)
    for k in range(2, schedule.K + 1):
        v = mais_step(model, schedule, k - 1, v, rng, spec).values
        lw += log_lambda_k(model, schedule, k, v)
    return lw


@pytest.mark.parametrize("spec", [BLOCKED, MH])
def test_batched_engine_bit_identical_to_single_sequence(spec):
    m = random_model(np.random.default_rng(1), 3, 4)
    s = linear_schedule(5)
    ra = run(m, s, RunConfig(6, "ais", spec, seed=9))
    rm = run(m, s, RunConfig(6, "mais_v", spec, seed=9))
    for mu in range(6):
        assert ra.log_weights[mu] == replay_ais(m, s, 9, mu, spec)
        assert rm.log_weights[mu] == replay_mais(m, s, 9, mu, spec)


def test_chunked_uniform_feed_does_not_change_results(monkeypatch):
    import annealfe.estimators as est

    m = random_model(np.random.default_rng(2), 3, 3)
    s = linear_schedule(7)
    cfg = RunConfig(5, "ais", MH, seed=3)
    ref = run(m, s, cfg).log_weights
    monkeypatch.setattr(est, "_UNIFORM_BUDGET", 1)
    assert np.array_equal(run(m, s, cfg).log_weights, ref)


def test_sequence_weights_do_not_depend_on_batch_size():
    m = random_model(np.random.default_rng(3), 2, 3)
    s = linear_schedule(4)
    a = run(m, s, RunConfig(3, "mais_v", seed=5)).log_weights
    b = run(m, s, RunConfig(8, "mais_v", seed=5)).log_weights
    assert np.array_equal(a, b[:3])


@pytest.mark.parametrize("method", ["ais", "mais_v", "mais_h"])
def test_sample_mean_consistent_with_exact_moments(method):
    # Z estimate from 1e5 sequences within 4 standard errors of the exact Z
    m = random_model(np.random.default_rng(4), 3, 3)
    s = linear_schedule(3)
    n = 100_000
    res = run(m, s, RunConfig(n, method, seed=6))
    mom = exact_estimator_moments(m, s, BLOCKED, method, n_sequences=n)
    z_hat = math.exp(res.log_z_estimate)
    assert abs(z_hat - mom.exact_z) < 4 * math.sqrt(mom.variance_z)


@pytest.mark.parametrize("method", ["ais", "mais_v"])
def test_free_energy_estimate_biased_upward(method):
    # trial mean over 200 runs >= exact F - 3 standard errors
    m = random_model(np.random.default_rng(7), 3, 4, scale=1.5)
    s = linear_schedule(3)
    est = np.array([run(m, s, RunConfig(20, method, seed=t)).free_energy_estimate for t in range(200)])
    se = est.std(ddof=1) / math.sqrt(est.size)
    assert est.mean() >= -exact_log_z(m) - 3 * se


def test_result_internal_consistency_and_determinism():
    m = random_model(np.random.default_rng(8), 3, 3)
    s = linear_schedule(4)
    for method in ("ais", "mais_v", "mais_h"):
        cfg = RunConfig(50, method, MH, seed=4)
        a, b = run(m, s, cfg), run(m, s, cfg)
        assert a.free_energy_estimate == -a.log_z0 - logmeanexp(a.log_weights)
        assert np.array_equal(a.log_weights, b.log_weights)
        assert a.log_z_estimate == b.log_z_estimate


def test_mais_h_is_mais_v_on_transpose():
    m = random_model(np.random.default_rng(5), 2, 4)
    s = linear_schedule(3)
    a = run(m, s, RunConfig(10, "mais_h", seed=1))
    b = run(m.transposed(), s, RunConfig(10, "mais_v", seed=1))
    assert np.array_equal(a.log_weights, b.log_weights)
    assert a.method == "mais_h"


def test_auto_marginalizes_larger_layer():
    wide = random_model(np.random.default_rng(0), 2, 5)
    tall = random_model(np.random.default_rng(0), 5, 2)
    assert resolve_method(wide, "auto") == "mais_v"
    assert resolve_method(tall, "auto") == "mais_h"
    assert run(tall, linear_schedule(2), RunConfig(4, "auto")).method == "mais_h"


@pytest.mark.parametrize("method", ["ais", "mais_v", "mais_h", "auto"])
@pytest.mark.parametrize("spec", [BLOCKED, MH])
@pytest.mark.parametrize("K", [1, 3])
def test_zero_model_exact(method, spec, K):
    m = BipartiteModel(np.zeros(3), np.zeros(5), np.zeros((3, 5)))
    r = run(m, linear_schedule(K), RunConfig(7, method, spec, seed=2))
    assert np.all(r.log_weights == 0.0)
    assert r.per_variable_free_energy == -LN2
    assert r.effective_sample_size == 7.0


def test_result_fields_and_json():
    m = random_model(np.random.default_rng(6), 2, 2)
    r = run(m, linear_schedule(2), RunConfig(4, "ais", seed=0))
    assert r.K == 2 and r.kernel == "blocked_gibbs" and r.log_z0 == 4 * LN2
    assert r.free_energy_estimate == -r.log_z_estimate
    d = json.loads(r.to_json())
    assert len(d["log_weights"]) == 4
    assert json.loads(r.to_json(include_weights=False))["log_weights"] is None


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(0)
    with pytest.raises(ValueError):
        RunConfig(5, "smc")
    with pytest.raises(ValueError):
        RunConfig(5, seed=-1)
    m = random_model(np.random.default_rng(0), 2, 2)
    with pytest.raises(ValueError):
        run_ais(m, linear_schedule(2), RunConfig(2, "mais_v"))
    with pytest.raises(ValueError):
        run_mais(m, linear_schedule(2), RunConfig(2, "ais"))


def test_logmeanexp():
    assert logmeanexp([0.0, 0.0]) == 0.0
    assert logmeanexp([1000.0, 1000.0 + math.log(3)]) == pytest.approx(1000.0 + math.log(2), abs=1e-12)
    assert logmeanexp([-1e4, 0.0]) == pytest.approx(-math.log(2), abs=1e-15)
    for bad in ([], [np.nan], [np.inf, 0.0]):
        with pytest.raises(ValueError):
            logmeanexp(bad)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(-500, 500))
def test_logmeanexp_shift_equivariant(xs, c):
    x = np.array(xs)
    assert logmeanexp(x + c) == pytest.approx(logmeanexp(x) + c, abs=1e-9)
    assert x.min() - 1e-12 <= logmeanexp(x) <= x.max() + 1e-12


def test_effective_sample_size():
    assert effective_sample_size([0.0] * 5) == pytest.approx(5.0)
    assert effective_sample_size([0.0, -1e4, -1e4]) == pytest.approx(1.0)


def test_ape_and_ratio():
    assert ape(-0.5, -0.49) == pytest.approx(2.0)
    assert ape(-0.7, -0.7) == 0.0
    assert ape(-1.0, -1.01) == pytest.approx(1.0)
    assert ape(-0.69759, -0.69759 * 1.001) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        ape(0.0, 1.0)
    assert accuracy_ratio(-1.0, -0.9, -0.95) == pytest.approx(2.0)
    assert accuracy_ratio(-1.0, -0.9, -1.1) == pytest.approx(1.0)
    assert accuracy_ratio(-1.0, -0.9, -1.0) == math.inf
    assert accuracy_ratio(-1.0, -1.0, -1.0) == 1.0
