"""Experiment harness: instance generators, sweeps, KDE and CSV/JSON output.

Every random quantity is keyed by ``(config.seed, instance_index, ...)``
through :class:`numpy.random.SeedSequence`, so an instance computes the same
rows whichever worker runs it.  Rows are collected and written in instance
order.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from .annealing import linear_schedule
from .estimators import RunConfig, ape, accuracy_ratio, run
from .kernels import BLOCKED_GIBBS, MH_AUGMENTED, KernelSpec
from .mrf import (
    DEFAULT_ENUM_CAP,
    BipartiteModel,
    CapacityError,
    exact_free_energy_per_variable,
    grid_edges,
    grid_ising_as_bipartite,
)
from .oracle import certify_instance

EXPERIMENTS = ("ape_vs_temperature", "free_energy_table", "lnr_distribution", "ape_vs_k", "theorem_certify")
FAMILIES = ("gaussian", "hopfield", "grid")
MAIS = "mais_v"
_METHOD_CODE = {"ais": 0, "mais_v": 1}
_FAMILY_CODE = {BLOCKED_GIBBS: 0, MH_AUGMENTED: 1}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "ape_vs_temperature"
    model_family: str = "gaussian"
    sizes: tuple[int, int] = (20, 40)
    inv_temperatures: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.8, 1.0, 2.0, 4.0, 8.0])
    k_values: list[int] = field(default_factory=lambda: [10, 30, 60])
    n_sequences: int = 1000
    n_instances: int = 200
    n_trials: int = 10
    alpha_values: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    kernel: KernelSpec = field(default_factory=KernelSpec)
    seed: int = 0
    output_path: str = "results"
    kde_bandwidth: float = 0.25
    kde_grid: tuple[float, float, int] = (-3.0, 3.0, 241)

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.model_family not in FAMILIES:
            raise ConfigError(f"model_family must be one of {FAMILIES}, got {self.model_family!r}")
        if isinstance(self.kernel, dict):
            try:
                self.kernel = KernelSpec(**self.kernel)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad kernel: {exc}") from None
        self.sizes = tuple(int(s) for s in self.sizes)
        self.inv_temperatures = [float(t) for t in self.inv_temperatures]
        self.k_values = [int(k) for k in self.k_values]
        self.alpha_values = [float(a) for a in self.alpha_values]
        self.kde_grid = (float(self.kde_grid[0]), float(self.kde_grid[1]), int(self.kde_grid[2]))
        if len(self.sizes) != 2 or min(self.sizes) < 1:
            raise ConfigError("sizes must be two positive integers")
        if not self.inv_temperatures or min(self.inv_temperatures) <= 0:
            raise ConfigError("inv_temperatures must be positive")
        if not self.k_values or min(self.k_values) < 1:
            raise ConfigError("k_values must all be >= 1")
        if min(self.n_sequences, self.n_instances, self.n_trials) < 1:
            raise ConfigError("n_sequences, n_instances and n_trials must be >= 1")
        if any(a <= 0 for a in self.alpha_values):
            raise ConfigError("alpha_values must be positive")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.kde_bandwidth <= 0 or self.kde_grid[2] < 2:
            raise ConfigError("kde_bandwidth must be positive and kde_grid needs >= 2 points")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | Path) -> ExperimentConfig:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        d["kde_grid"] = list(self.kde_grid)
        return d


# ---------------------------------------------------------------------------
# instances


def gen_gaussian_rbm(nv: int, nh: int, inv_temp: float, rng: np.random.Generator) -> BipartiteModel:
    """Biases uniform on [-0.001, 0.001]; couplings normal with variance ``1 / (nv + nh)``."""
    if nv < 1 or nh < 1:
        raise ValueError("layer sizes must be positive")
    b = rng.uniform(-0.001, 0.001, nv)
    c = rng.uniform(-0.001, 0.001, nh)
    w = rng.normal(0.0, math.sqrt(1.0 / (nv + nh)), (nv, nh))
    return BipartiteModel(b, c, w, 1.0 / inv_temp)


def gen_hopfield_rbm(nv: int, nh: int, inv_temp: float, rng: np.random.Generator) -> BipartiteModel:
    """Couplings ``xi / sqrt(nv)`` with random +/-1 patterns ``xi``; small uniform biases."""
    if nv < 1 or nh < 1:
        raise ValueError("layer sizes must be positive")
    b = rng.uniform(-0.001, 0.001, nv)
    c = rng.uniform(-0.001, 0.001, nh)
    xi = rng.choice(np.array([-1.0, 1.0]), size=(nv, nh))
    return BipartiteModel(b, c, xi / math.sqrt(nv), 1.0 / inv_temp)


def gen_grid_model(height: int, width: int, inv_temp: float, rng: np.random.Generator) -> BipartiteModel:
    """Open grid with standard-normal couplings and fields uniform on [-0.001, 0.001]."""
    J = rng.normal(0.0, 1.0, len(grid_edges(height, width)))
    f = rng.uniform(-0.001, 0.001, height * width)
    return grid_ising_as_bipartite(height, width, J, f, 1.0 / inv_temp)


_GENERATORS = {"gaussian": gen_gaussian_rbm, "hopfield": gen_hopfield_rbm, "grid": gen_grid_model}


def instance_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


def make_instance(config: ExperimentConfig, index: int, inv_temp: float, sizes=None, tag: int = 0) -> BipartiteModel:
    """Instance ``index``; its parameters do not depend on ``inv_temp``."""
    a, b = config.sizes if sizes is None else sizes
    gen = _GENERATORS[config.model_family]
    return gen(a, b, inv_temp, instance_rng(config.seed, index, tag))


# ---------------------------------------------------------------------------
# KDE


def kde_gaussian(samples, bandwidth: float, grid) -> np.ndarray:
    """Gaussian-kernel density estimate evaluated on ``grid``."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("kde needs at least one sample")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    g = np.asarray(grid, dtype=np.float64)
    z = (g[:, None] - s[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (s.size * bandwidth * math.sqrt(2.0 * math.pi))


# ---------------------------------------------------------------------------
# per-instance work (module-level so worker processes can pickle it)


def _estimate_f(model, K, method, kernel, n_sequences, seed) -> float:
    cfg = RunConfig(n_sequences=n_sequences, method=method, kernel=kernel, seed=seed)
    return run(model, linear_schedule(K), cfg).per_variable_free_energy


def _row(config, index, method, kernel, K, inv_temp, **values) -> dict:
    return dict(
        experiment=config.experiment,
        seed=config.seed,
        instance_index=index,
        method=method,
        kernel=kernel.label,
        K=K,
        inv_temp=inv_temp,
        **values,
    )


def _ape_instance(config: ExperimentConfig, index: int, kernels: tuple[KernelSpec, ...]) -> list[dict]:
    rows = []
    for ti, inv_temp in enumerate(config.inv_temperatures):
        model = make_instance(config, index, inv_temp)
        f_true = exact_free_energy_per_variable(model)
        for K in config.k_values:
            for kernel in kernels:
                for method in ("ais", MAIS):
                    seed = derive_seed(config.seed, index, ti, K, _FAMILY_CODE[kernel.family], _METHOD_CODE[method])
                    f_app = _estimate_f(model, K, method, kernel, config.n_sequences, seed)
                    rows.append(
                        _row(config, index, method, kernel, K, inv_temp, f_true=f_true, f_app=f_app, ape=ape(f_true, f_app))
                    )
    return rows


def _table_instance(config: ExperimentConfig, index: int) -> list[dict]:
    rows = []
    for ti, inv_temp in enumerate(config.inv_temperatures):
        model = make_instance(config, index, inv_temp)
        f_true = exact_free_energy_per_variable(model)
        for K in config.k_values:
            for method in ("ais", MAIS):
                est = [
                    _estimate_f(
                        model, K, method, config.kernel, config.n_sequences,
                        derive_seed(config.seed, index, ti, K, 0, _METHOD_CODE[method], trial),
                    )
                    for trial in range(config.n_trials)
                ]
                rows.append(
                    _row(config, index, method, config.kernel, K, inv_temp,
                         f_true=f_true, f_app_trial_mean=math.fsum(est) / len(est), n_trials=len(est))
                )
    return rows


def _lnr_instance(config: ExperimentConfig, index: int) -> list[dict]:
    rows = []
    nv = config.sizes[0]
    for ai, alpha in enumerate(config.alpha_values):
        nh = round(alpha * nv)
        for ti, inv_temp in enumerate(config.inv_temperatures):
            model = make_instance(config, index, inv_temp, sizes=(nv, nh), tag=ai + 1)
            f_true = exact_free_energy_per_variable(model)
            for K in config.k_values:
                f = {}
                for method in ("ais", MAIS):
                    seed = derive_seed(config.seed, index, ai, ti, K, _METHOD_CODE[method])
                    f[method] = _estimate_f(model, K, method, config.kernel, config.n_sequences, seed)
                r = accuracy_ratio(f_true, f["ais"], f[MAIS])
                ln_r = math.log(r) if r > 0 else -math.inf
                rows.append(
                    _row(config, index, "ais/" + MAIS, config.kernel, K, inv_temp, alpha=alpha,
                         f_true=f_true, f_ais=f["ais"], f_mais=f[MAIS], ln_r=ln_r)
                )
    return rows


def map_instances(fn: Callable[[int], list[dict]], n: int, workers: int = 1) -> list[dict]:
    """Run ``fn`` over instance indices and concatenate the rows in index order."""
    if workers <= 1:
        chunks = [fn(i) for i in range(n)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(fn, range(n)))
    return [row for chunk in chunks for row in chunk]


def _mean_table(rows: list[dict], keys: tuple[str, ...], values: tuple[str, ...]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key, members in groups.items():
        entry = dict(zip(keys, key))
        entry["n"] = len(members)
        for v in values:
            entry[f"mean_{v}"] = math.fsum(m[v] for m in members) / len(members)
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# experiments


def _check_exact_feasible(config: ExperimentConfig) -> None:
    if config.model_family == "grid":
        smaller = (config.sizes[0] * config.sizes[1]) // 2
    else:
        smaller = min(config.sizes)
    if smaller > DEFAULT_ENUM_CAP:
        raise CapacityError("exact truth (smaller layer)", smaller, DEFAULT_ENUM_CAP)


def run_ape_sweep(config: ExperimentConfig, workers: int = 1) -> dict[str, list[dict]]:
    """Mean APE of AIS and mAIS for each (1/T, K) cell."""
    _check_exact_feasible(config)
    rows = map_instances(partial(_ape_instance, config, kernels=(config.kernel,)), config.n_instances, workers)
    summary = _mean_table(rows, ("inv_temp", "K", "method", "kernel"), ("ape", "f_true", "f_app"))
    return {"rows": rows, "summary": summary}


def run_free_energy_table(config: ExperimentConfig, workers: int = 1) -> dict[str, list[dict]]:
    """True ``f`` and trial-averaged estimates per (1/T, K), averaged over instances."""
    _check_exact_feasible(config)
    rows = map_instances(partial(_table_instance, config), config.n_instances, workers)
    summary = _mean_table(rows, ("inv_temp", "K", "method", "kernel"), ("f_true", "f_app_trial_mean"))
    return {"rows": rows, "summary": summary}


def run_ape_vs_k(config: ExperimentConfig, workers: int = 1) -> dict[str, list[dict]]:
    """Mean APE against K for blocked Gibbs and the MH-augmented kernel."""
    _check_exact_feasible(config)
    kernels = (KernelSpec(BLOCKED_GIBBS), KernelSpec(MH_AUGMENTED, max(1, config.kernel.mh_sweeps)))
    rows = map_instances(partial(_ape_instance, config, kernels=kernels), config.n_instances, workers)
    summary = _mean_table(rows, ("inv_temp", "K", "method", "kernel"), ("ape", "f_true", "f_app"))
    return {"rows": rows, "summary": summary}


def run_lnr_distribution(config: ExperimentConfig, workers: int = 1) -> dict[str, list[dict]]:
    """Distribution of ``ln r`` for each layer-size ratio, as KDE curves plus quantiles."""
    nv = config.sizes[0]
    for alpha in config.alpha_values:
        nh = alpha * nv
        if abs(nh - round(nh)) > 1e-9 or round(nh) < 1:
            raise ConfigError(f"alpha={alpha} gives non-integral |H| = {nh}")
        if min(nv, round(nh)) > DEFAULT_ENUM_CAP:
            raise CapacityError("exact truth (smaller layer)", min(nv, round(nh)), DEFAULT_ENUM_CAP)
    rows = map_instances(partial(_lnr_instance, config), config.n_instances, workers)
    lo, hi, npts = config.kde_grid
    grid = np.linspace(lo, hi, npts)
    kde_rows, summary = [], []
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault((row["alpha"], row["inv_temp"], row["K"]), []).append(row["ln_r"])
    for (alpha, inv_temp, K), vals in groups.items():
        arr = np.array(vals)
        finite = arr[np.isfinite(arr)]
        entry = dict(alpha=alpha, inv_temp=inv_temp, K=K, n=arr.size, n_nonfinite=int(arr.size - finite.size))
        if finite.size:
            q25, q50, q75 = np.quantile(finite, [0.25, 0.5, 0.75])
            entry.update(median=float(q50), q25=float(q25), q75=float(q75), mean=math.fsum(finite) / finite.size)
        summary.append(entry)
        if finite.size >= 2:
            dens = kde_gaussian(finite, config.kde_bandwidth, grid)
            kde_rows.extend(
                dict(alpha=alpha, inv_temp=inv_temp, K=K, grid_point=float(g), density=float(d))
                for g, d in zip(grid, dens)
            )
    return {"rows": rows, "summary": summary, "kde": kde_rows}


def _certify_instance(config: ExperimentConfig, index: int) -> list[dict]:
    out = []
    for ti, inv_temp in enumerate(config.inv_temperatures):
        model = make_instance(config, index, inv_temp)
        for K in config.k_values:
            for rep in certify_instance(model, linear_schedule(K), config.kernel):
                d = rep.to_dict()
                d["instance_descriptor"] = dict(d["instance_descriptor"], instance_index=index, inv_temp=inv_temp)
                out.append(d)
    return out


def run_theorem_certify(config: ExperimentConfig, workers: int = 1) -> dict[str, list[dict]]:
    """Exact oracle checks on every generated instance."""
    reports = map_instances(partial(_certify_instance, config), config.n_instances, workers)
    return {"reports": reports}


RUNNERS = {
    "ape_vs_temperature": run_ape_sweep,
    "free_energy_table": run_free_energy_table,
    "lnr_distribution": run_lnr_distribution,
    "ape_vs_k": run_ape_vs_k,
    "theorem_certify": run_theorem_certify,
}


def run_experiment(config: ExperimentConfig, workers: int = 1) -> dict[str, list[dict]]:
    return RUNNERS[config.experiment](config, workers)


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    header = list(rows[0])
    for row in rows[1:]:
        header.extend(k for k in row if k not in header)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row.get(k, "")) for k in header])


def write_outputs(config: ExperimentConfig, tables: dict[str, list[dict]], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rows in tables.items():
        if name == "reports":
            p = out / f"{config.experiment}_reports.json"
            p.write_text(json.dumps(rows, indent=1, default=float) + "\n")
        else:
            p = out / f"{config.experiment}_{name}.csv"
            write_csv(p, rows)
        paths.append(p)
    return paths
