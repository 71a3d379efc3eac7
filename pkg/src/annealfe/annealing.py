"""Annealing schedules and per-step log importance weights.

The k-th distribution has energy ``E_k(x) = beta_k * E(x)`` with the
uniform initial distribution contributing only a constant, so
``ln Z_0 = n ln 2`` for the joint chain and for either marginal chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .mrf import BipartiteModel, LN2, energy, marginal_energy_h, marginal_energy_v


@dataclass(frozen=True, eq=False)
class Schedule:
    """Strictly increasing ``betas`` from exactly 0 to exactly 1 (``K + 1`` entries)."""

    betas: np.ndarray

    def __post_init__(self) -> None:
        b = np.array(self.betas, dtype=np.float64).reshape(-1)
        if b.size < 2:
            raise ValueError("a schedule needs at least two betas")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("schedule must start at 0 and end at 1")
        if np.any(np.diff(b) <= 0.0):
            raise ValueError("schedule must be strictly increasing")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @property
    def K(self) -> int:
        return self.betas.size - 1

    def __len__(self) -> int:
        return self.betas.size

    def __getitem__(self, k: int) -> float:
        return float(self.betas[k])


def linear_schedule(K: int) -> Schedule:
    """``betas[k] = k / K``."""
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    K = int(K)
    return Schedule(np.array([k / K for k in range(K + 1)]))


def log_z0(model: BipartiteModel) -> float:
    return model.n * LN2


def _check_level(schedule: Schedule, k: int, lo: int) -> int:
    if int(k) != k or not lo <= k <= schedule.K:
        raise ValueError(f"level k={k} outside [{lo}, {schedule.K}]")
    return int(k)


def step_energy(model: BipartiteModel, schedule: Schedule, k: int, v, h):
    k = _check_level(schedule, k, 0)
    return schedule[k] * energy(model, v, h)


def log_w_k(model: BipartiteModel, schedule: Schedule, k: int, v, h):
    """``-E_k(x) + E_{k-1}(x)``, i.e. ``-(beta_k - beta_{k-1}) E(x)``."""
    k = _check_level(schedule, k, 1)
    return -(schedule[k] - schedule[k - 1]) * energy(model, v, h)


def log_lambda_k(model: BipartiteModel, schedule: Schedule, k: int, v: ArrayLike):
    """``-E_V(v, k) + E_V(v, k-1)`` for the visible marginal chain."""
    k = _check_level(schedule, k, 1)
    return marginal_energy_v(model, schedule[k - 1], v) - marginal_energy_v(model, schedule[k], v)


def log_lambda_k_hidden(model: BipartiteModel, schedule: Schedule, k: int, h: ArrayLike):
    """Hidden-marginal counterpart of :func:`log_lambda_k`."""
    k = _check_level(schedule, k, 1)
    return marginal_energy_h(model, schedule[k - 1], h) - marginal_energy_h(model, schedule[k], h)
