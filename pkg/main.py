import argparse
import logging
import sys
from pathlib import Path

import config
from cli.handlers import COMMANDS
from core.errors import NumericalError, ValidationError
from reporting import reporting_manager

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


def setup_logging() -> None:
    handlers = [logging.StreamHandler()]
    if config.LSM_LOG_FILE:
        handlers.append(logging.FileHandler(config.LSM_LOG_FILE))
    logging.basicConfig(
        level=getattr(logging, config.LSM_LOG_LEVEL, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
    )


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--config", help="flat key=value file; flags override it")
    parser.add_argument("--n-jobs", dest="n_jobs", type=int)


def _data(parser):
    parser.add_argument("--data", help="directory of *.ds dataset files")


def _training(parser):
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--eta0", type=float)
    parser.add_argument("--tol", type=float)
    parser.add_argument("--cooldown", type=int)
    parser.add_argument("--no-cooldown", dest="cooldown_enabled", action="store_const", const=False)
    parser.add_argument("--sampling", choices=["pooled", "dataset"])
    parser.add_argument("--restarts", type=int)


def _debias(parser):
    parser.add_argument("--k", type=int)
    parser.add_argument("--c1", type=float)
    parser.add_argument("--c2", type=float)
    parser.add_argument("--rho", type=float)
    parser.add_argument("--init", choices=["kmeans", "random", "zeros"])
    parser.add_argument("--init-scale", dest="init_scale", type=float)
    parser.add_argument("--split", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsm", description="Latent subcategory models and dataset-bias undoing")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="write a synthetic biased collection to <out>/data")
    _common(p)
    for name, kind in (("n-datasets", int), ("n-subcategories", int), ("dim", int), ("pos-per-cluster", int),
                       ("neg-per-dataset", int), ("separation", float), ("bias-shift", float), ("noise", float),
                       ("background-scale", float)):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=kind)

    p = sub.add_parser("train-lsm", help="alternating minimization of one LSM on the pooled data")
    _common(p)
    _data(p)
    _training(p)
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--reg", choices=["sum_sq", "max_sq", "max_norm"])
    p.add_argument("--neg-variant", dest="neg_variant", action="store_const", const=True)
    p.add_argument("--max-outer", dest="max_outer", type=int)
    p.add_argument("--init", choices=["kmeans", "random", "zeros"])
    p.add_argument("--init-scale", dest="init_scale", type=float)

    p = sub.add_parser("train-debias", help="train the multitask undoing-bias LSM")
    _common(p)
    _data(p)
    _training(p)
    _debias(p)

    p = sub.add_parser("init-compare", help="random vs k-means initialization over several seeds")
    _common(p)
    _data(p)
    _training(p)
    _debias(p)
    p.add_argument("--runs", type=int)

    p = sub.add_parser("bound-check", help="verify the k-means initialization bound")
    _common(p)
    _data(p)
    _training(p)
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--n-samples", dest="n_samples", type=int)

    p = sub.add_parser("eval-seen", help="test on held-out splits of the training datasets")
    _common(p)
    _data(p)
    _training(p)
    _debias(p)

    p = sub.add_parser("eval-unseen", help="leave one dataset out and test the visual-world model on it")
    _common(p)
    _data(p)
    _training(p)
    _debias(p)
    p.add_argument("--heldout", type=int)

    p = sub.add_parser("grid", help="hyperparameter grid search on validation splits")
    _common(p)
    _data(p)
    _training(p)
    _debias(p)
    p.add_argument("--k-values", dest="k_values")
    p.add_argument("--rho-exponents", dest="rho_exponents")
    p.add_argument("--c-exponents", dest="c_exponents")
    p.add_argument("--k-selection", dest="k_selection", choices=["validation", "test"])

    p = sub.add_parser("patch-select", help="rank and select discriminative patches")
    _common(p)
    p.add_argument("--patches")
    p.add_argument("--pos-records", dest="pos_records")
    p.add_argument("--neg-records", dest="neg_records")
    p.add_argument("--n", dest="n_select", type=int)
    p.add_argument("--strategy", choices=["combined", "representation", "random"])
    p.add_argument("--appearance-only", dest="use_spatial", action="store_const", const=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    flags = {k: v for k, v in vars(args).items() if k not in ("subcommand", "config")}
    try:
        cfg = config.build_run_config(args.subcommand, flags, args.config)
        log.info(f"Running '{cfg.subcommand}' with seed {cfg.seed}")
        results = COMMANDS[cfg.subcommand](cfg)
        reporting_manager.write_results(Path(cfg.out) / f"{cfg.subcommand}.json", cfg.subcommand, cfg.seed,
                                        cfg.as_dict(), results)
    except ValidationError as exc:
        log.error(f"Invalid input: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error(f"I/O failure: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        log.error(f"Numerical failure: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    log.info(f"'{cfg.subcommand}' finished")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
