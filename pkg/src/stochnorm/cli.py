"""Command-line harness.

Every subcommand takes ``--seed`` and ``--out-dir`` plus an optional
``--config`` file and repeated ``--set key=value`` overrides. Exit codes:
0 success, 2 configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, dump_config, load_config
from .experiments import (
    coverage_csv,
    dataset_for,
    error_coverage,
    mc_predict_network,
    normalization_batch_experiment,
    perturbation_sweep,
    predict_logp,
    seed_stability_report,
    train,
    write_run,
)
from .noise import measure_bn_noise, noise_stats_csv
from .optim import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("stochnorm")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, required=True)
    common.add_argument("--out-dir", type=Path, required=True)
    common.add_argument("--config", type=Path)
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stochnorm", description="Stochastic normalization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one model; writes metrics, summary and checkpoint")

    p = sub.add_parser("norm-batch", parents=[common], help="BN training with larger normalization batches")
    p.add_argument("--norm-batches", type=_ints, default=[32, 256], help="comma-separated sizes")

    p = sub.add_parser("measure-noise", parents=[common], help="empirical BN noise statistics as CSV")
    p.add_argument("--checkpoint", type=Path, help="trained BN model; the input layer is measured when omitted")
    p.add_argument("--batch-sizes", type=_ints, default=[8, 16, 32, 64, 128])
    p.add_argument("--draws", type=int, default=500)

    p = sub.add_parser("coverage", parents=[common], help="error-coverage curve on the validation set")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("perturb", parents=[common], help="accuracy under input perturbations")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--kind", choices=["gaussian", "grad-sign"], default="gaussian")
    p.add_argument("--magnitudes", type=_floats, default=[0.0, 0.1, 0.2, 0.5, 1.0])

    p = sub.add_parser("seeds", parents=[common], help="cross-seed stability report")
    p.add_argument("--seeds", type=_ints, help="defaults to the config's seeds")
    return parser


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _train(config, args) -> int:
    result = train(config, args.seed)
    write_run(result, config, args.seed, args.out_dir)
    if result.diverged:
        log.error("diverged: %s", result.message)
        return EXIT_DIVERGED
    return EXIT_OK


def _norm_batch(config, args) -> int:
    status = EXIT_OK
    for nb in args.norm_batches:
        result = normalization_batch_experiment(config, nb, args.seed)
        cfg = config.model_copy(update={"normalization_batch_size": nb, "normalization": "batch"})
        write_run(result, cfg, args.seed, args.out_dir / f"norm_batch_{nb}")
        if result.diverged:
            status = EXIT_DIVERGED
    return status


def _load_model(args):
    try:
        network, _, _ = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    return network


def _measure(config, args) -> int:
    rng = np.random.default_rng(args.seed)
    network = _load_model(args) if args.checkpoint else None
    x = dataset_for(config).x_train
    rows = [measure_bn_noise(network, x, k, args.draws, rng) for k in args.batch_sizes]
    _write(args.out_dir / "noise_stats.csv", noise_stats_csv(rows))
    return EXIT_OK


def _coverage(config, args) -> int:
    network = _load_model(args)
    ds = dataset_for(config)
    if network.variational:
        probs = mc_predict_network(network, ds.x_val, config.mc_eval_samples, np.random.default_rng(args.seed))
    else:
        probs = np.exp(predict_logp(network, ds.x_val))
    _write(args.out_dir / "coverage.csv", coverage_csv(error_coverage(probs, ds.y_val)))
    return EXIT_OK


def _perturb(config, args) -> int:
    network = _load_model(args)
    ds = dataset_for(config)
    curve = perturbation_sweep(network, ds.x_val, ds.y_val, args.kind, args.magnitudes, np.random.default_rng(args.seed))
    _write(args.out_dir / f"perturb_{args.kind}.csv", "magnitude,accuracy\n" + "".join(f"{m!r},{a!r}\n" for m, a in curve))
    return EXIT_OK


def _seeds(config, args) -> int:
    seeds = args.seeds or config.seeds
    report = seed_stability_report(config, seeds, args.out_dir)
    print(json.dumps({k: v for k, v in report.items() if k != "rows"}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "train": _train,
    "norm-batch": _norm_batch,
    "measure-noise": _measure,
    "coverage": _coverage,
    "perturb": _perturb,
    "seeds": _seeds,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "config.yaml").write_text(dump_config(config))
        return COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
