"""Transition kernels for the annealing chains.

Two families are provided:

* ``blocked_gibbs``: layer-wise Gibbs updates.  The marginal (mAIS) kernel
  draws ``h ~ P_k(h|v)`` then ``v' ~ P_k(v|h)``; the joint (AIS) kernel
  additionally refreshes ``h' ~ P_k(h|v')`` so that it factorizes as
  ``P_k(h'|v') tau_k(v'|v)``.
* ``mh_augmented``: as above, with single-site Metropolis-Hastings sweeps on
  the hidden marginal inserted between the two layer updates.

All randomness is consumed as uniforms in a fixed per-step layout so the
batched engine in :mod:`annealfe.estimators` and the single-sequence
functions here see exactly the same numbers for a given ``RngStream``.
Per step, the layout is ``[h draw (nh) | MH sweeps (sweeps*nh) | v draw (nv)
| h refresh (nh, joint only)]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annealing import Schedule
from .mrf import (
    BipartiteModel,
    CapacityError,
    SpinState,
    as_spins,
    conditional_hidden_probs,
    conditional_visible_probs,
    enumerate_spins,
    ln2cosh,
    marginal_energy_h,
    marginal_energy_v,
    sum_lncosh,
)

BLOCKED_GIBBS = "blocked_gibbs"
MH_AUGMENTED = "mh_augmented"
KERNEL_MATRIX_CAP = 4096
_U64 = 1 << 64


@dataclass(frozen=True)
class KernelSpec:
    family: str = BLOCKED_GIBBS
    mh_sweeps: int = 1

    def __post_init__(self) -> None:
        if self.family not in (BLOCKED_GIBBS, MH_AUGMENTED):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if int(self.mh_sweeps) != self.mh_sweeps or self.mh_sweeps < 0:
            raise ValueError("mh_sweeps must be a non-negative integer")
        if self.family == MH_AUGMENTED and self.mh_sweeps < 1:
            raise ValueError("mh_augmented needs mh_sweeps >= 1")

    @property
    def sweeps(self) -> int:
        """MH sweeps actually performed per transition."""
        return int(self.mh_sweeps) if self.family == MH_AUGMENTED else 0

    @property
    def label(self) -> str:
        return self.family if self.family == BLOCKED_GIBBS else f"{self.family}x{self.sweeps}"


BLOCKED = KernelSpec()


class RngStream:
    """Counter-based uniform stream keyed by ``(seed, stream_id)``.

    Backed by Philox with the 128-bit key ``seed | stream_id << 64``, so the
    same pair yields the same numbers on every platform.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        for name, val in (("seed", seed), ("stream_id", stream_id)):
            if int(val) != val or not 0 <= val < _U64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {val}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed | (self.stream_id << 64)))

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)


def step_width(model: BipartiteModel, spec: KernelSpec, joint: bool) -> int:
    """Number of uniforms one transition consumes."""
    nv, nh = model.n_visible, model.n_hidden
    return nh * (1 + spec.sweeps) + nv + (nh if joint else 0)


def _draw(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.where(u < p, 1.0, -1.0)


def mh_sweeps_batch(model: BipartiteModel, beta: float, h: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sequential single-site MH on the hidden marginal, ascending site order.

    ``h`` has shape ``(B, nh)``; ``u`` has shape ``(B, n_sweeps * nh)``.
    """
    nh = model.n_hidden
    n_sweeps = u.shape[-1] // nh
    s = beta / model.temperature
    w = model.coupling
    c = model.hidden_bias
    h = np.array(h, dtype=np.float64, copy=True)
    fields = s * (h @ w.T + model.visible_bias)
    lc = sum_lncosh(fields)
    for sweep in range(n_sweeps):
        for j in range(nh):
            hj = h[:, j]
            new_fields = fields - (2.0 * s) * hj[:, None] * w[:, j]
            new_lc = sum_lncosh(new_fields)
            delta = 2.0 * s * c[j] * hj - (new_lc - lc)
            accept = u[:, sweep * nh + j] < np.exp(np.minimum(0.0, -delta))
            h[accept, j] = -hj[accept]
            fields[accept] = new_fields[accept]
            lc[accept] = new_lc[accept]
    return h


def mais_transition(
    model: BipartiteModel, beta: float, v: np.ndarray, u: np.ndarray, spec: KernelSpec = BLOCKED
) -> np.ndarray:
    """Batched one-sample realization of the marginal kernel on the visible layer."""
    nv, nh = model.n_visible, model.n_hidden
    h = _draw(conditional_hidden_probs(model, beta, v), u[:, :nh])
    off = nh
    if spec.sweeps:
        h = mh_sweeps_batch(model, beta, h, u[:, off : off + spec.sweeps * nh])
        off += spec.sweeps * nh
    return _draw(conditional_visible_probs(model, beta, h), u[:, off : off + nv])


def ais_transition(
    model: BipartiteModel,
    beta: float,
    v: np.ndarray,
    h: np.ndarray,
    u: np.ndarray,
    spec: KernelSpec = BLOCKED,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched joint kernel: marginal move on ``v`` then a fresh ``h' ~ P(h|v')``.

    The incoming ``h`` does not influence the move; it is accepted only so
    the signature reads as a kernel on joint states.
    """
    width = step_width(model, spec, joint=False)
    v_new = mais_transition(model, beta, v, u[:, :width], spec)
    h_new = _draw(conditional_hidden_probs(model, beta, v_new), u[:, width : width + model.n_hidden])
    return v_new, h_new


def _transition_level(schedule: Schedule, k: int) -> float:
    if int(k) != k or not 1 <= k <= schedule.K - 1:
        raise ValueError(f"transition level k={k} outside [1, {schedule.K - 1}]")
    return schedule[int(k)]


def _spin_state(x: np.ndarray, layer: str) -> SpinState:
    return SpinState(x.astype(np.int8), layer)


def mais_step(
    model: BipartiteModel,
    schedule: Schedule,
    k: int,
    v,
    rng: RngStream,
    spec: KernelSpec = BLOCKED,
) -> SpinState:
    """One collapsed-Gibbs move ``v -> v'`` on the level-``k`` visible marginal."""
    beta = _transition_level(schedule, k)
    v = as_spins(v, model.n_visible, "v", strict=True)
    u = rng.uniform(step_width(model, spec, joint=False))
    return _spin_state(mais_transition(model, beta, v[None], u[None], spec)[0], "visible")


def ais_step(
    model: BipartiteModel,
    schedule: Schedule,
    k: int,
    v,
    h,
    rng: RngStream,
    spec: KernelSpec = BLOCKED,
) -> tuple[SpinState, SpinState]:
    """One joint move ``(v, h) -> (v', h')`` on the level-``k`` distribution."""
    beta = _transition_level(schedule, k)
    v = as_spins(v, model.n_visible, "v", strict=True)
    h = as_spins(h, model.n_hidden, "h", strict=True)
    u = rng.uniform(step_width(model, spec, joint=True))
    v2, h2 = ais_transition(model, beta, v[None], h[None], u[None], spec)
    return _spin_state(v2[0], "visible"), _spin_state(h2[0], "hidden")


def mh_hidden_sweep(
    model: BipartiteModel, schedule: Schedule, k: int, h, n_sweeps: int, rng: RngStream
) -> SpinState:
    """``n_sweeps`` passes of single-site MH targeting the level-``k`` hidden marginal."""
    if int(n_sweeps) != n_sweeps or n_sweeps < 1:
        raise ValueError("n_sweeps must be >= 1")
    if int(k) != k or not 0 <= k <= schedule.K:
        raise ValueError(f"level k={k} outside [0, {schedule.K}]")
    h = as_spins(h, model.n_hidden, "h", strict=True)
    u = rng.uniform(int(n_sweeps) * model.n_hidden)
    return _spin_state(mh_sweeps_batch(model, schedule[int(k)], h[None], u[None])[0], "hidden")


def mais_step_mh(
    model: BipartiteModel, schedule: Schedule, k: int, v, spec: KernelSpec, rng: RngStream
) -> SpinState:
    """Marginal move with MH sweeps on the hidden layer between the Gibbs draws."""
    if spec.family != MH_AUGMENTED:
        raise ValueError("mais_step_mh needs an mh_augmented KernelSpec")
    return mais_step(model, schedule, k, v, rng, spec)


# ---------------------------------------------------------------------------
# exact matrices (oracle support)
#
# Visible/hidden configurations are indexed as in ``enumerate_spins``; a joint
# state (v, h) has index ``iv * 2**nh + ih``.


def conditional_matrix(model: BipartiteModel, beta: float, given: str = "visible") -> np.ndarray:
    """Exact ``P(other | given)`` as a row-stochastic ``(2**n_given, 2**n_other)`` matrix."""
    if given == "hidden":
        model = model.transposed()
    elif given != "visible":
        raise ValueError(f"given must be 'visible' or 'hidden', got {given!r}")
    s = beta / model.temperature
    V = enumerate_spins(model.n_visible)
    H = enumerate_spins(model.n_hidden)
    theta = s * (V @ model.coupling + model.hidden_bias)
    log_p = theta @ H.T - ln2cosh(theta).sum(axis=1, keepdims=True)
    return np.exp(log_p)


def mh_sweep_matrix(model: BipartiteModel, beta: float, n_sweeps: int = 1) -> np.ndarray:
    """Exact transition matrix of ``n_sweeps`` ascending-order MH sweeps on the hidden layer."""
    nh = model.n_hidden
    size = 1 << nh
    e_h = marginal_energy_h(model, beta, enumerate_spins(nh))
    idx = np.arange(size)
    sweep = np.eye(size)
    for j in range(nh):
        flipped = idx ^ (1 << j)
        acc = np.exp(np.minimum(0.0, e_h - e_h[flipped]))
        site = np.zeros((size, size))
        site[idx, flipped] = acc
        site[idx, idx] = 1.0 - acc
        sweep = sweep @ site
    return np.linalg.matrix_power(sweep, int(n_sweeps))


def exact_kernel_matrix(
    model: BipartiteModel,
    schedule: Schedule,
    k: int,
    spec: KernelSpec = BLOCKED,
    space: str = "visible",
) -> np.ndarray:
    """Exact transition matrix of the level-``k`` kernel, rows indexed by the source state."""
    if int(k) != k or not 0 <= k <= schedule.K:
        raise ValueError(f"level k={k} outside [0, {schedule.K}]")
    sv, sh = 1 << model.n_visible, 1 << model.n_hidden
    if space == "visible":
        if sv > KERNEL_MATRIX_CAP or sh > KERNEL_MATRIX_CAP:
            raise CapacityError("kernel matrix state space", max(sv, sh), KERNEL_MATRIX_CAP)
    elif space == "joint":
        if sv * sh > KERNEL_MATRIX_CAP:
            raise CapacityError("kernel matrix state space", sv * sh, KERNEL_MATRIX_CAP)
    else:
        raise ValueError(f"space must be 'visible' or 'joint', got {space!r}")
    beta = schedule[int(k)]
    a = conditional_matrix(model, beta, "visible")
    b = conditional_matrix(model, beta, "hidden")
    if spec.sweeps:
        a = a @ mh_sweep_matrix(model, beta, spec.sweeps)
    tau = a @ b
    if space == "visible":
        return tau
    joint = tau[:, :, None] * conditional_matrix(model, beta, "visible")[None, :, :]
    return np.repeat(joint.reshape(sv, sv * sh), sh, axis=0)


def stationary_check(matrix: np.ndarray, p: np.ndarray) -> float:
    """Max deviation of ``p^T M`` from ``p^T``."""
    return float(np.max(np.abs(p @ matrix - p)))


def marginal_distribution(model: BipartiteModel, beta: float, layer: str = "visible") -> np.ndarray:
    """Exact ``P_k`` over one layer (or ``"joint"``), in enumeration order."""
    if layer == "visible":
        log_p = -marginal_energy_v(model, beta, enumerate_spins(model.n_visible))
    elif layer == "hidden":
        log_p = -marginal_energy_h(model, beta, enumerate_spins(model.n_hidden))
    elif layer == "joint":
        log_pv = -marginal_energy_v(model, beta, enumerate_spins(model.n_visible))
        cond = conditional_matrix(model, beta, "visible")
        pv = np.exp(log_pv - log_pv.max())
        p = (pv[:, None] * cond).reshape(-1)
        return p / p.sum()
    else:
        raise ValueError(f"unknown layer {layer!r}")
    p = np.exp(log_p - log_p.max())
    return p / p.sum()
