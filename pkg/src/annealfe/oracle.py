"""Exact, sampling-free checks on small instances.

Moments of the importance weights are obtained by forward transfer
recursions over the exact kernel matrices rather than by enumerating
trajectories, which keeps the cost at ``O(K |S|^2)``.  The trajectory
enumerations that remain (Rao-Blackwell identity, variance gap) are
deliberately brute force and only run on tiny models.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .annealing import Schedule, log_lambda_k, log_w_k, log_z0
from .kernels import (
    BLOCKED,
    KERNEL_MATRIX_CAP,
    KernelSpec,
    conditional_matrix,
    exact_kernel_matrix,
    mh_sweep_matrix,
)
from .mrf import BipartiteModel, CapacityError, conditional_hidden_probs, enumerate_spins, exact_log_z

LOG_TOL = 1e-10
REL_TOL = 1e-8
TRAJECTORY_CAP = 1 << 18


@dataclass
class MomentReport:
    mean_z: float
    variance_z: float
    method: str
    exact_z: float
    log_mean_w: float = 0.0
    log_second_moment_w: float = 0.0
    n_sequences: int = 1


@dataclass
class OracleReport:
    check: str
    max_deviation: float
    passed: bool
    instance_descriptor: dict = field(default_factory=dict)
    tolerance: float = LOG_TOL

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def describe(model: BipartiteModel, schedule: Schedule, spec: KernelSpec = BLOCKED, **extra) -> dict:
    d = {
        "n_visible": model.n_visible,
        "n_hidden": model.n_hidden,
        "temperature": model.temperature,
        "K": schedule.K,
        "kernel": spec.label,
    }
    d.update(extra)
    return d


def _levels(schedule: Schedule) -> range:
    # K = 1 has no transitions; still check the kernel at the final level
    return range(1, max(schedule.K, 2))


def _chain(model: BipartiteModel, schedule: Schedule, spec: KernelSpec, method: str):
    """Per-level log weights over the state space and the K-1 transition matrices."""
    if method == "mais_h":
        model, method = model.transposed(), "mais_v"
    if method == "ais":
        size = 1 << model.n
        if size > KERNEL_MATRIX_CAP:
            raise CapacityError("joint state space", size, KERNEL_MATRIX_CAP)
        V = np.repeat(enumerate_spins(model.n_visible), 1 << model.n_hidden, axis=0)
        H = np.tile(enumerate_spins(model.n_hidden), (1 << model.n_visible, 1))
        log_w = [log_w_k(model, schedule, k, V, H) for k in range(1, schedule.K + 1)]
        space = "joint"
    elif method == "mais_v":
        size = 1 << model.n_visible
        if size > KERNEL_MATRIX_CAP:
            raise CapacityError("visible state space", size, KERNEL_MATRIX_CAP)
        V = enumerate_spins(model.n_visible)
        log_w = [log_lambda_k(model, schedule, k, V) for k in range(1, schedule.K + 1)]
        space = "visible"
    else:
        raise ValueError(f"method must be 'ais', 'mais_v' or 'mais_h', got {method!r}")
    kernels = [exact_kernel_matrix(model, schedule, k, spec, space) for k in range(1, schedule.K)]
    return log_w, kernels


def _log_moment(log_w: list[np.ndarray], kernels: list[np.ndarray], p: int) -> float:
    """``ln E[W^p]`` under the annealing chain, with per-step renormalization."""
    size = log_w[0].size
    x = p * log_w[0]
    m = float(x.max())
    a = np.exp(x - m) / size
    scale = m
    for kern, lw in zip(kernels, log_w[1:]):
        x = p * lw
        m = float(x.max())
        a = (a @ kern) * np.exp(x - m)
        total = float(a.sum())
        a /= total
        scale += m + math.log(total)
    return scale + math.log(float(a.sum()))


def exact_estimator_moments(
    model: BipartiteModel,
    schedule: Schedule,
    spec: KernelSpec = BLOCKED,
    method: str = "ais",
    n_sequences: int = 1,
) -> MomentReport:
    """Exact mean and variance of the ``Z`` estimator built from ``n_sequences`` sequences."""
    log_w, kernels = _chain(model, schedule, spec, method)
    lz0 = log_z0(model)
    l1 = _log_moment(log_w, kernels, 1)
    l2 = _log_moment(log_w, kernels, 2)
    mean = math.exp(lz0 + l1)
    second = math.exp(2.0 * lz0 + l2)
    return MomentReport(
        mean_z=mean,
        variance_z=max(second - mean * mean, 0.0) / n_sequences,
        method=method,
        exact_z=math.exp(exact_log_z(model)),
        log_mean_w=l1,
        log_second_moment_w=l2,
        n_sequences=n_sequences,
    )


def exact_f_expectation_n1(
    model: BipartiteModel, schedule: Schedule, spec: KernelSpec = BLOCKED, method: str = "ais"
) -> float:
    """``E[-ln Z_0 - ln W]`` for a single sequence, from the forward chain marginals."""
    log_w, kernels = _chain(model, schedule, spec, method)
    p = np.full(log_w[0].size, 1.0 / log_w[0].size)
    mean_log_w = float(p @ log_w[0])
    for kern, lw in zip(kernels, log_w[1:]):
        p = p @ kern
        mean_log_w += float(p @ lw)
    return -log_z0(model) - mean_log_w


def layer_update_matrices(model: BipartiteModel, beta: float, spec: KernelSpec = BLOCKED):
    """Dense joint-space matrices of the individual kernel stages.

    Returns ``(G_h, G_v, G_mh)``: resample ``h ~ P(h|v)``, resample
    ``v ~ P(v|h)``, and MH sweeps on ``h`` (identity for blocked Gibbs).
    """
    sv, sh = 1 << model.n_visible, 1 << model.n_hidden
    idx = np.arange(sv * sh)
    iv, ih = idx // sh, idx % sh
    same_v = iv[:, None] == iv[None, :]
    same_h = ih[:, None] == ih[None, :]
    a = conditional_matrix(model, beta, "visible")
    b = conditional_matrix(model, beta, "hidden")
    g_h = np.where(same_v, a[iv[:, None], ih[None, :]], 0.0)
    g_v = np.where(same_h, b[ih[:, None], iv[None, :]], 0.0)
    mh = mh_sweep_matrix(model, beta, spec.sweeps) if spec.sweeps else np.eye(sh)
    g_mh = np.where(same_v, mh[ih[:, None], ih[None, :]], 0.0)
    return g_h, g_v, g_mh


def staged_joint_kernel(model: BipartiteModel, beta: float, spec: KernelSpec = BLOCKED) -> np.ndarray:
    """Joint kernel as the product of its stages: h, [MH], v, then h refresh."""
    g_h, g_v, g_mh = layer_update_matrices(model, beta, spec)
    return g_h @ g_mh @ g_v @ g_h


def verify_marginal_factorization(
    model: BipartiteModel,
    schedule: Schedule,
    spec: KernelSpec = BLOCKED,
    joint_kernel: Callable[[BipartiteModel, float], np.ndarray] | None = None,
    tol: float = LOG_TOL,
) -> OracleReport:
    """Check ``T_k(x'|x) = P_k(h'|v') tau_k(v'|v)`` and ``sum_h' T_k = tau_k`` entrywise.

    ``joint_kernel`` builds the joint kernel at a given beta; by default the
    stage product of :func:`staged_joint_kernel`.
    """
    size = 1 << model.n
    if size > KERNEL_MATRIX_CAP:
        raise CapacityError("joint state space", size, KERNEL_MATRIX_CAP)
    if joint_kernel is None:
        joint_kernel = lambda m, beta: staged_joint_kernel(m, beta, spec)  # noqa: E731
    sv, sh = 1 << model.n_visible, 1 << model.n_hidden
    worst = 0.0
    for k in _levels(schedule):
        beta = schedule[k]
        joint = joint_kernel(model, beta)
        tau = exact_kernel_matrix(model, schedule, k, spec, "visible")
        cond = conditional_matrix(model, beta, "visible")
        factored = np.repeat((tau[:, :, None] * cond[None, :, :]).reshape(sv, size), sh, axis=0)
        summed = joint.reshape(size, sv, sh).sum(axis=2)
        worst = max(
            worst,
            float(np.max(np.abs(joint - factored))),
            float(np.max(np.abs(summed - np.repeat(tau, sh, axis=0)))),
        )
    return OracleReport(
        "marginal_factorization", worst, worst <= tol, describe(model, schedule, spec), tol
    )


def _log_hidden_conditional(model: BipartiteModel, beta: float, V: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``ln P(h|v)`` from the unit-wise probabilities, shape ``(len(V), len(H))``."""
    p = conditional_hidden_probs(model, beta, V)
    up = H[None, :, :] > 0
    return np.where(up, np.log(p)[:, None, :], np.log1p(-p)[:, None, :]).sum(axis=2)


def _trajectory_grid(n_states: int, K: int) -> np.ndarray:
    if n_states**K > TRAJECTORY_CAP:
        raise CapacityError("trajectory space", n_states**K, TRAJECTORY_CAP)
    return np.indices((n_states,) * K).reshape(K, -1)


def verify_rao_blackwell_identity(
    model: BipartiteModel, schedule: Schedule, tol: float = LOG_TOL
) -> OracleReport:
    """Check ``Lambda(V) = sum_H W(X) T(H|V)`` over every visible trajectory (in log space)."""
    K = schedule.K
    sv, sh = 1 << model.n_visible, 1 << model.n_hidden
    if (sv * sh) ** K > TRAJECTORY_CAP:
        raise CapacityError("trajectory space", (sv * sh) ** K, TRAJECTORY_CAP)
    V = enumerate_spins(model.n_visible)
    H = enumerate_spins(model.n_hidden)
    vtraj = _trajectory_grid(sv, K)
    htraj = _trajectory_grid(sh, K)

    log_lam = np.zeros(vtraj.shape[1])
    log_rhs = np.zeros((vtraj.shape[1], htraj.shape[1]))
    for k in range(1, K + 1):
        log_lam += log_lambda_k(model, schedule, k, V)[vtraj[k - 1]]
        lw = log_w_k(model, schedule, k, V[:, None, :], H[None, :, :])
        lc = _log_hidden_conditional(model, schedule[k - 1], V, H)
        log_rhs += (lw + lc)[vtraj[k - 1][:, None], htraj[k - 1][None, :]]
    dev = float(np.max(np.abs(log_lam - logsumexp(log_rhs, axis=1))))
    return OracleReport("rao_blackwell_identity", dev, dev <= tol, describe(model, schedule), tol)


def variance_gap_by_enumeration(
    model: BipartiteModel, schedule: Schedule, spec: KernelSpec = BLOCKED, n_sequences: int = 1
) -> float:
    """``Z_0^2 / N * E_T[(W - Lambda)^2]`` by enumerating joint trajectories."""
    K = schedule.K
    size = 1 << model.n
    traj = _trajectory_grid(size, K)
    sh = 1 << model.n_hidden
    V = np.repeat(enumerate_spins(model.n_visible), sh, axis=0)
    H = np.tile(enumerate_spins(model.n_hidden), (1 << model.n_visible, 1))
    log_t = np.full(traj.shape[1], -model.n * math.log(2.0))
    for k in range(1, K):
        joint = staged_joint_kernel(model, schedule[k], spec)
        with np.errstate(divide="ignore"):
            log_t += np.log(joint[traj[k - 1], traj[k]])
    log_w = np.zeros(traj.shape[1])
    log_lam = np.zeros(traj.shape[1])
    for k in range(1, K + 1):
        log_w += log_w_k(model, schedule, k, V, H)[traj[k - 1]]
        log_lam += log_lambda_k(model, schedule, k, V)[traj[k - 1]]
    diff2 = (np.exp(log_w) - np.exp(log_lam)) ** 2
    return math.exp(2.0 * log_z0(model)) * float(np.sum(np.exp(log_t) * diff2)) / n_sequences


def certify_instance(
    model: BipartiteModel,
    schedule: Schedule,
    spec: KernelSpec = BLOCKED,
    rel_tol: float = REL_TOL,
    log_tol: float = LOG_TOL,
    variance_slack: float = 1e-12,
) -> list[OracleReport]:
    """Run every exact check that fits the instance and return one report per check."""
    desc = describe(model, schedule, spec)
    reports = []
    ais = exact_estimator_moments(model, schedule, spec, "ais")
    mais = exact_estimator_moments(model, schedule, spec, "mais_v")
    for rep in (ais, mais):
        dev = abs(rep.mean_z - rep.exact_z) / rep.exact_z
        reports.append(OracleReport(f"unbiased_{rep.method}", dev, dev <= rel_tol, desc, rel_tol))
    short = mais.variance_z - ais.variance_z  # > 0 would violate dominance
    reports.append(
        OracleReport("variance_dominance", max(short, 0.0), short <= variance_slack, desc, variance_slack)
    )
    f_true = -exact_log_z(model)
    f_ais = exact_f_expectation_n1(model, schedule, spec, "ais")
    f_mais = exact_f_expectation_n1(model, schedule, spec, "mais_v")
    worst = max(f_mais - f_ais, f_true - f_mais, 0.0)
    reports.append(
        OracleReport(
            "bias_ordering", worst, worst <= log_tol, dict(desc, f_ais=f_ais, f_mais=f_mais, f_true=f_true), log_tol
        )
    )
    reports.append(verify_marginal_factorization(model, schedule, spec, tol=log_tol))
    sv, sh = 1 << model.n_visible, 1 << model.n_hidden
    if (sv * sh) ** schedule.K <= TRAJECTORY_CAP:
        reports.append(verify_rao_blackwell_identity(model, schedule, log_tol))
    return reports
