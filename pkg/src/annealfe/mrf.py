"""Bipartite Markov random fields over +/-1 spins.

The energy of a joint configuration ``x = (v, h)`` is

    E(x) = -(1/T) * (b . v + c . h + v^T W h)

and the annealed member of the family at inverse-annealing parameter ``beta``
is simply ``beta * E(x)``.  Everything that involves a partition function is
kept in the log domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike

LN2 = math.log(2.0)
DEFAULT_ENUM_CAP = 24

# Beyond this |argument| a product of cosh values may overflow; fall back to
# the per-unit stable form.
_COSH_PRODUCT_LIMIT = 300.0


class CapacityError(ValueError):
    """Raised when an exact computation would exceed its enumeration cap."""

    def __init__(self, what: str, size: int, cap: int):
        super().__init__(f"{what}: size {size} exceeds cap {cap}")
        self.what = what
        self.size = size
        self.cap = cap


def ln2cosh(x: ArrayLike) -> np.ndarray:
    """Overflow-free ``ln(2 cosh x)``."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return a + np.log1p(np.exp(-2.0 * a))


@dataclass(frozen=True, eq=False)
class BipartiteModel:
    """Biases, couplings and temperature of a bipartite +/-1 spin model.

    ``coupling`` is dense with shape ``(n_visible, n_hidden)``; rows are
    indexed by visible unit.  If ``sparsity_mask`` is given the coupling must
    vanish wherever the mask is false.
    """

    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    coupling: np.ndarray
    temperature: float = 1.0
    sparsity_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        b = np.array(self.visible_bias, dtype=np.float64).reshape(-1)
        c = np.array(self.hidden_bias, dtype=np.float64).reshape(-1)
        w = np.array(self.coupling, dtype=np.float64)
        if w.ndim != 2 or w.shape != (b.size, c.size):
            raise ValueError(
                f"coupling shape {w.shape} does not match biases ({b.size}, {c.size})"
            )
        if b.size == 0 or c.size == 0:
            raise ValueError("both layers need at least one unit")
        t = float(self.temperature)
        if not (t > 0.0 and math.isfinite(t)):
            raise ValueError(f"temperature must be positive and finite, got {t}")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(c)) and np.all(np.isfinite(w))):
            raise ValueError("model parameters must be finite")
        mask = self.sparsity_mask
        if mask is not None:
            mask = np.array(mask, dtype=bool)
            if mask.shape != w.shape:
                raise ValueError("sparsity_mask shape must match coupling")
            if np.any(w[~mask] != 0.0):
                raise ValueError("coupling is nonzero outside sparsity_mask")
            mask.setflags(write=False)
        for arr in (b, c, w):
            arr.setflags(write=False)
        object.__setattr__(self, "visible_bias", b)
        object.__setattr__(self, "hidden_bias", c)
        object.__setattr__(self, "coupling", w)
        object.__setattr__(self, "temperature", t)
        object.__setattr__(self, "sparsity_mask", mask)

    @property
    def n_visible(self) -> int:
        return self.visible_bias.size

    @property
    def n_hidden(self) -> int:
        return self.hidden_bias.size

    @property
    def n(self) -> int:
        return self.n_visible + self.n_hidden

    def transposed(self) -> BipartiteModel:
        """Same model with the two layers exchanged."""
        mask = None if self.sparsity_mask is None else self.sparsity_mask.T
        return BipartiteModel(
            self.hidden_bias, self.visible_bias, self.coupling.T, self.temperature, mask
        )

    def with_temperature(self, temperature: float) -> BipartiteModel:
        return BipartiteModel(
            self.visible_bias, self.hidden_bias, self.coupling, temperature, self.sparsity_mask
        )

    def to_dict(self) -> dict:
        d = {
            "visible_bias": self.visible_bias.tolist(),
            "hidden_bias": self.hidden_bias.tolist(),
            "coupling": self.coupling.tolist(),
            "temperature": self.temperature,
        }
        if self.sparsity_mask is not None:
            d["sparsity_mask"] = self.sparsity_mask.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BipartiteModel:
        try:
            return cls(
                visible_bias=d["visible_bias"],
                hidden_bias=d["hidden_bias"],
                coupling=d["coupling"],
                temperature=d["temperature"],
                sparsity_mask=d.get("sparsity_mask"),
            )
        except KeyError as exc:
            raise ValueError(f"model document is missing field {exc}") from None


def load_model(path: str | Path) -> BipartiteModel:
    with open(path) as fh:
        return BipartiteModel.from_dict(json.load(fh))


def save_model(model: BipartiteModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


@dataclass(frozen=True, eq=False)
class SpinState:
    """A +/-1 configuration of one layer (or both, for ``layer="joint"``)."""

    values: np.ndarray
    layer: str = "visible"

    def __post_init__(self) -> None:
        if self.layer not in ("visible", "hidden", "joint"):
            raise ValueError(f"unknown layer tag {self.layer!r}")
        vals = np.array(self.values, dtype=np.int8).reshape(-1)
        if not np.array_equal(np.abs(vals), np.ones_like(vals)) or not np.array_equal(
            vals, np.asarray(self.values).reshape(-1)
        ):
            raise ValueError("spin values must be exactly -1 or +1")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size

    def check_model(self, model: BipartiteModel) -> None:
        want = {"visible": model.n_visible, "hidden": model.n_hidden, "joint": model.n}[self.layer]
        if len(self) != want:
            raise ValueError(f"{self.layer} state has length {len(self)}, model needs {want}")


def as_spins(x: ArrayLike | SpinState, length: int, name: str = "state", strict: bool = False) -> np.ndarray:
    """Float view of a spin configuration (or a batch of them) with a length check.

    ``strict`` also rejects entries other than -1 and +1.
    """
    arr = x.values if isinstance(x, SpinState) else x
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] != length:
        raise ValueError(f"{name} must have trailing length {length}, got shape {arr.shape}")
    if strict and not np.all(np.abs(arr) == 1.0):
        raise ValueError(f"{name} entries must be exactly -1 or +1")
    return arr


def enumerate_spins(n: int) -> np.ndarray:
    """All ``2**n`` configurations; row ``s`` has spin ``i = 1 - 2*bit_i(s)``."""
    idx = np.arange(1 << n, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n)) & 1
    return 1.0 - 2.0 * bits


def _check_beta(beta: float) -> float:
    beta = float(beta)
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return beta


def energy(model: BipartiteModel, v, h):
    """Energy ``E(v, h)``; accepts single states or broadcastable batches."""
    v = as_spins(v, model.n_visible, "v")
    h = as_spins(h, model.n_hidden, "h")
    inter = ((v @ model.coupling) * h).sum(axis=-1)
    e = -(v @ model.visible_bias + h @ model.hidden_bias + inter) / model.temperature
    return float(e) if np.ndim(e) == 0 else e


def hidden_fields(model: BipartiteModel, v) -> np.ndarray:
    """Local fields ``c_j + sum_i w_ij v_i`` on the hidden units."""
    return as_spins(v, model.n_visible, "v") @ model.coupling + model.hidden_bias


def visible_fields(model: BipartiteModel, h) -> np.ndarray:
    """Local fields ``b_i + sum_j w_ij h_j`` on the visible units."""
    return as_spins(h, model.n_hidden, "h") @ model.coupling.T + model.visible_bias


def marginal_energy_v(model: BipartiteModel, beta: float, v):
    """Energy of the visible marginal at ``beta`` (hidden layer summed out)."""
    beta = _check_beta(beta)
    v = as_spins(v, model.n_visible, "v")
    s = beta / model.temperature
    e = -s * (v @ model.visible_bias) - ln2cosh(s * hidden_fields(model, v)).sum(axis=-1)
    return float(e) if np.ndim(e) == 0 else e


def marginal_energy_h(model: BipartiteModel, beta: float, h):
    """Energy of the hidden marginal at ``beta`` (visible layer summed out)."""
    return marginal_energy_v(model.transposed(), beta, h)


def conditional_hidden_probs(model: BipartiteModel, beta: float, v) -> np.ndarray:
    """``P(h_j = +1 | v)`` at ``beta``; for +/-1 spins this is sigmoid(2 beta theta_j / T)."""
    beta = _check_beta(beta)
    theta = hidden_fields(model, v)
    return _sigmoid(2.0 * beta * theta / model.temperature)


def conditional_visible_probs(model: BipartiteModel, beta: float, h) -> np.ndarray:
    """``P(v_i = +1 | h)`` at ``beta``."""
    beta = _check_beta(beta)
    theta = visible_fields(model, h)
    return _sigmoid(2.0 * beta * theta / model.temperature)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sum_lncosh(x: np.ndarray) -> np.ndarray:
    """Row sums of ln cosh, via one log per row when that is safe."""
    if x.size and np.max(np.abs(x)) * x.shape[-1] < _COSH_PRODUCT_LIMIT:
        return np.log(np.prod(np.cosh(x), axis=-1))
    return (ln2cosh(x) - LN2).sum(axis=-1)


def log_z_excess(
    model: BipartiteModel,
    beta: float = 1.0,
    cap: int = DEFAULT_ENUM_CAP,
    layer: str = "auto",
    chunk_bits: int = 15,
) -> float:
    """Exact ``ln Z - n ln 2`` at ``beta`` by enumerating one layer.

    Writing ``Z = 2**n * mean_v exp(s b.v + sum_j ln cosh(s theta_j(v)))``
    with ``s = beta / T`` keeps the uniform part exact, so the zero model
    gives exactly 0.  The enumerated layer defaults to the smaller one and
    the mean is accumulated with a streaming log-sum-exp over chunks of
    ``2**chunk_bits`` configurations.
    """
    beta = _check_beta(beta)
    if layer == "auto":
        layer = "visible" if model.n_visible <= model.n_hidden else "hidden"
    if layer == "hidden":
        model = model.transposed()
    elif layer != "visible":
        raise ValueError(f"layer must be 'auto', 'visible' or 'hidden', got {layer!r}")
    nv = model.n_visible
    if nv > cap:
        raise CapacityError("enumerated layer", nv, cap)

    s = beta / model.temperature
    w = s * model.coupling
    c = s * model.hidden_bias
    b = s * model.visible_bias

    chunk_bits = min(chunk_bits, nv)
    low = enumerate_spins(chunk_bits)  # low-order spins of each chunk
    low_w = low @ w[:chunk_bits]
    low_b = low @ b[:chunk_bits]
    high_n = nv - chunk_bits

    acc_max = -np.inf
    acc_sum = 0.0
    for hi in range(1 << high_n):
        hi_spins = 1.0 - 2.0 * ((hi >> np.arange(high_n)) & 1)
        theta = low_w + (hi_spins @ w[chunk_bits:] + c)
        neg_e = low_b + hi_spins @ b[chunk_bits:] + sum_lncosh(theta)
        m = float(neg_e.max())
        if m > acc_max:
            acc_sum = acc_sum * math.exp(acc_max - m) if acc_sum else 0.0
            acc_max = m
        acc_sum += float(np.exp(neg_e - acc_max).sum())
    return acc_max + math.log(acc_sum / (1 << nv))


def exact_log_z(
    model: BipartiteModel,
    beta: float = 1.0,
    cap: int = DEFAULT_ENUM_CAP,
    layer: str = "auto",
) -> float:
    """Exact ``ln Z_k``; see :func:`log_z_excess` for the method."""
    return model.n * LN2 + log_z_excess(model, beta, cap, layer)


def exact_free_energy_per_variable(
    model: BipartiteModel, beta: float = 1.0, cap: int = DEFAULT_ENUM_CAP
) -> float:
    """Exact ``f = -ln Z / n``."""
    return -LN2 - log_z_excess(model, beta, cap) / model.n


def checkerboard_partition(height: int, width: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Grid sites split by parity of ``row + col`` (even -> visible), row-major within each layer."""
    sites = [(r, c) for r in range(height) for c in range(width)]
    return [s for s in sites if (s[0] + s[1]) % 2 == 0], [s for s in sites if (s[0] + s[1]) % 2 == 1]


def grid_edges(height: int, width: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Nearest-neighbour edges of an open grid: for each site row-major, right then down."""
    edges = []
    for r in range(height):
        for c in range(width):
            if c + 1 < width:
                edges.append(((r, c), (r, c + 1)))
            if r + 1 < height:
                edges.append(((r, c), (r + 1, c)))
    return edges


def grid_ising_as_bipartite(
    height: int,
    width: int,
    couplings: float | Sequence[float],
    fields: float | ArrayLike = 0.0,
    temperature: float = 1.0,
) -> BipartiteModel:
    """Open-boundary square-grid Ising model rewritten as a bipartite model.

    ``couplings`` is a scalar or one value per edge in :func:`grid_edges`
    order; ``fields`` is a scalar, a ``(height, width)`` array or a flat
    row-major vector.  Even-parity sites form the visible layer.
    """
    if height < 1 or width < 1 or height * width < 2:
        raise ValueError("grid needs at least two sites")
    edges = grid_edges(height, width)
    J = np.broadcast_to(np.asarray(couplings, dtype=np.float64), (len(edges),))
    f = np.asarray(fields, dtype=np.float64).reshape(-1)
    f = np.broadcast_to(f, (height * width,)) if f.size == 1 else f
    if f.size != height * width:
        raise ValueError(f"expected {height * width} fields, got {f.size}")
    vis, hid = checkerboard_partition(height, width)
    vpos = {s: i for i, s in enumerate(vis)}
    hpos = {s: j for j, s in enumerate(hid)}
    w = np.zeros((len(vis), len(hid)))
    mask = np.zeros_like(w, dtype=bool)
    for (a, bsite), jval in zip(edges, J):
        if a in vpos:
            i, j = vpos[a], hpos[bsite]
        else:
            i, j = vpos[bsite], hpos[a]
        w[i, j] = jval
        mask[i, j] = True
    bias_v = [f[r * width + c] for r, c in vis]
    bias_h = [f[r * width + c] for r, c in hid]
    return BipartiteModel(bias_v, bias_h, w, temperature, mask)
