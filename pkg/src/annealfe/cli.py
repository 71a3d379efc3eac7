"""``annealfe`` command line.

    annealfe <experiment> --config cfg.json [--out DIR] [--workers N] [--seed S]
    annealfe certify --config cfg.json [--out DIR] [--workers N]
    annealfe estimate --model model.json --method {ais,mais,auto} --K 30 --N 1000

Exit codes: 0 success, 2 config error, 3 capacity error, 4 failed certification.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .annealing import linear_schedule
from .estimators import RunConfig, run
from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, run_experiment, write_outputs
from .kernels import BLOCKED_GIBBS, MH_AUGMENTED, KernelSpec
from .mrf import CapacityError, load_model

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY, EXIT_CHECK_FAILED = 0, 2, 3, 4

log = logging.getLogger("annealfe")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="annealfe", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*EXPERIMENTS, "certify"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="output directory (default: config output_path)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p = sub.add_parser("estimate")
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=["ais", "mais", "mais_v", "mais_h", "auto"], default="auto")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kernel", choices=[BLOCKED_GIBBS, MH_AUGMENTED], default=BLOCKED_GIBBS)
    p.add_argument("--mh-sweeps", type=int, default=1)
    p.add_argument("--weights", action="store_true", help="include per-sequence log weights")
    return parser


def _experiment(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    overrides = {}
    if args.command == "certify":
        overrides["experiment"] = "theorem_certify"
    else:
        overrides["experiment"] = args.command
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = ExperimentConfig.from_dict({**config.to_dict(), **overrides})
    tables = run_experiment(config, workers=args.workers)
    for path in write_outputs(config, tables, args.out or config.output_path):
        print(path)
    if config.experiment == "theorem_certify":
        failed = [r for r in tables["reports"] if not r["pass"]]
        print(f"{len(tables['reports']) - len(failed)}/{len(tables['reports'])} checks passed")
        if failed:
            return EXIT_CHECK_FAILED
    return EXIT_OK


def _estimate(args) -> int:
    try:
        model = load_model(args.model)
        kernel = KernelSpec(args.kernel, args.mh_sweeps)
        method = "mais_v" if args.method == "mais" else args.method
        cfg = RunConfig(n_sequences=args.N, method=method, kernel=kernel, seed=args.seed)
        schedule = linear_schedule(args.K)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    result = run(model, schedule, cfg)
    print(result.to_json(include_weights=args.weights))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "estimate":
            return _estimate(args)
        return _experiment(args)
    except CapacityError as exc:
        log.error("capacity error: %s", exc)
        return EXIT_CAPACITY
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
