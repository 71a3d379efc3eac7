"""AIS and marginalized AIS (mAIS) estimators of ``ln Z`` and the free energy.

Each of the ``N`` sequences owns the uniform stream ``RngStream(seed, mu)``
and consumes it in the layout documented in :mod:`annealfe.kernels`
(initial state first, then one block per transition).  Sequences are
advanced together as a batch, which gives bit-identical results to running
them one at a time.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .annealing import Schedule, log_z0
from .kernels import BLOCKED, KernelSpec, RngStream, ais_transition, mais_transition, step_width
from .mrf import LN2, BipartiteModel, energy, marginal_energy_v

METHODS = ("ais", "mais_v", "mais_h", "auto")

# upper bound on uniforms held in memory at once (per batch of levels)
_UNIFORM_BUDGET = 4_000_000


@dataclass(frozen=True)
class RunConfig:
    n_sequences: int = 1000
    method: str = "ais"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if int(self.n_sequences) != self.n_sequences or self.n_sequences < 1:
            raise ValueError("n_sequences must be a positive integer")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class RunResult:
    log_weights: np.ndarray
    log_z0: float
    log_z_estimate: float
    free_energy_estimate: float
    per_variable_free_energy: float
    method: str
    kernel: str
    K: int
    effective_sample_size: float
    elapsed: float

    def to_dict(self, include_weights: bool = True) -> dict:
        d = asdict(self)
        d["log_weights"] = self.log_weights.tolist() if include_weights else None
        return d

    def to_json(self, include_weights: bool = True) -> str:
        return json.dumps(self.to_dict(include_weights))


def logmeanexp(values) -> float:
    """``ln(mean(exp(values)))`` with a max shift."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("logmeanexp of an empty vector")
    if np.any(np.isnan(x)):
        raise ValueError("logmeanexp input contains NaN")
    if not np.all(np.isfinite(x)):
        raise ValueError("logmeanexp input must be finite")
    m = float(x.max())
    return m + math.log(float(np.exp(x - m).sum()) / x.size)


def effective_sample_size(log_weights) -> float:
    """``(sum w)^2 / sum w^2`` of the normalized importance weights."""
    x = np.asarray(log_weights, dtype=np.float64)
    x = x - x.max()
    w = np.exp(x)
    return float(w.sum() ** 2 / (w * w).sum())


class _UniformFeed:
    """Hands out per-level uniform blocks, one row per sequence."""

    def __init__(self, seed: int, n: int, init_width: int, width: int, n_steps: int):
        self._streams = [RngStream(seed, mu) for mu in range(n)]
        self.init = np.stack([s.uniform(init_width) for s in self._streams])
        self._width = width
        self._left = n_steps
        self._chunk = max(1, _UNIFORM_BUDGET // max(1, n * width))
        self._buf = np.empty((n, 0, width))
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos == self._buf.shape[1]:
            c = min(self._chunk, self._left)
            self._buf = np.stack([s.uniform((c, self._width)) for s in self._streams])
            self._pos = 0
            self._left -= c
        u = self._buf[:, self._pos, :]
        self._pos += 1
        return u


def _result(model, schedule, config, log_weights, method, t0) -> RunResult:
    lz0 = log_z0(model)
    excess = logmeanexp(log_weights)
    lz = lz0 + excess
    return RunResult(
        log_weights=log_weights,
        log_z0=lz0,
        log_z_estimate=lz,
        free_energy_estimate=-lz,
        # per-variable ln Z_0 is exactly ln 2
        per_variable_free_energy=-LN2 - excess / model.n,
        method=method,
        kernel=config.kernel.label,
        K=schedule.K,
        effective_sample_size=effective_sample_size(log_weights),
        elapsed=time.perf_counter() - t0,
    )


def _spins(u: np.ndarray) -> np.ndarray:
    return np.where(u < 0.5, 1.0, -1.0)


def run_ais(model: BipartiteModel, schedule: Schedule, config: RunConfig) -> RunResult:
    """AIS on the joint chain: ``ln W = sum_k -(beta_k - beta_{k-1}) E(x^(k))``."""
    if config.method != "ais":
        raise ValueError("run_ais needs config.method == 'ais'")
    t0 = time.perf_counter()
    nv, n, K = model.n_visible, model.n, schedule.K
    spec = config.kernel
    feed = _UniformFeed(config.seed, config.n_sequences, n, step_width(model, spec, True), K - 1)
    v, h = _spins(feed.init[:, :nv]), _spins(feed.init[:, nv:])
    betas = schedule.betas
    log_w = -(betas[1] - betas[0]) * energy(model, v, h)
    for k in range(2, K + 1):
        v, h = ais_transition(model, betas[k - 1], v, h, feed.next(), spec)
        log_w = log_w - (betas[k] - betas[k - 1]) * energy(model, v, h)
    return _result(model, schedule, config, log_w, "ais", t0)


def _run_mais_visible(model, schedule, config, method, t0) -> RunResult:
    nv, K = model.n_visible, schedule.K
    spec = config.kernel
    feed = _UniformFeed(config.seed, config.n_sequences, nv, step_width(model, spec, False), K - 1)
    v = _spins(feed.init)
    betas = schedule.betas
    prev = marginal_energy_v(model, betas[0], v)
    cur = marginal_energy_v(model, betas[1], v)
    log_w = prev - cur
    for k in range(2, K + 1):
        v = mais_transition(model, betas[k - 1], v, feed.next(), spec)
        log_w = log_w + marginal_energy_v(model, betas[k - 1], v) - marginal_energy_v(model, betas[k], v)
    return _result(model, schedule, config, log_w, method, t0)


def resolve_method(model: BipartiteModel, method: str) -> str:
    """``auto`` keeps the smaller layer and marginalizes the larger one."""
    if method == "auto":
        return "mais_v" if model.n_hidden >= model.n_visible else "mais_h"
    return method


def run_mais(model: BipartiteModel, schedule: Schedule, config: RunConfig) -> RunResult:
    """mAIS: AIS on one layer's marginal chain with weights ``prod_k lambda_k``.

    ``mais_h`` is ``mais_v`` on the layer-transposed model.
    """
    if config.method not in ("mais_v", "mais_h", "auto"):
        raise ValueError("run_mais needs method mais_v, mais_h or auto")
    t0 = time.perf_counter()
    method = resolve_method(model, config.method)
    target = model if method == "mais_v" else model.transposed()
    return _run_mais_visible(target, schedule, config, method, t0)


def run(model: BipartiteModel, schedule: Schedule, config: RunConfig) -> RunResult:
    if config.method == "ais":
        return run_ais(model, schedule, config)
    return run_mais(model, schedule, config)


def ape(f_true: float, f_app: float) -> float:
    """Absolute percentage error ``100 |f - f_app| / |f|``."""
    if f_true == 0:
        raise ValueError("APE is undefined for f_true == 0")
    return 100.0 * abs(f_true - f_app) / abs(f_true)


def accuracy_ratio(f_true: float, f_ais: float, f_mais: float) -> float:
    """``|f - f_AIS| / |f - f_mAIS|``; ``math.inf`` when mAIS is exact.

    ``0/0`` (both exact) is reported as 1.
    """
    if f_true == 0:
        raise ValueError("accuracy ratio needs f_true != 0")
    num = abs(f_true - f_ais)
    den = abs(f_true - f_mais)
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den
