"""``ssnll --config <path>``: run one experiment and write ``results.csv``, ``manifest.txt`` and optional rasters."""
import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from . import __version__
from .exceptions import ConfigError, SsnllError
from .experiments import load_config, run_experiment, write_artifacts

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an integer") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {value}")
    return value


def _jobs(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"jobs must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssnll",
        description="Oracle, training and calibration experiments for the self-supervised Gaussian NLL.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", required=True, type=Path, help="flat 'key = value' experiment config")
    parser.add_argument("--seed", type=_u64, default=None, help="override the config seed everywhere")
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides 'out' in the config)")
    parser.add_argument("--jobs", type=_jobs, default=1, help="parallel trial count; never changes results")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="only warnings and errors")
    verbosity.add_argument("--verbose", action="store_true", help="optimizer and training progress")
    return parser


def _configure_logging(*, quiet: bool, verbose: bool) -> None:
    if quiet:
        level = logging.WARNING
    elif verbose:
        level = logging.DEBUG
    else:
        level = logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def run(
    config_path: Path | str,
    *,
    seed: int | None = None,
    out: Path | str | None = None,
    jobs: int = 1,
) -> int:
    """Run the experiment named in ``config_path`` and return the process exit status."""
    try:
        cfg = load_config(config_path)
    except ConfigError as e:
        logger.error("%s: %s", config_path, e)
        return EXIT_CONFIG
    except (OSError, UnicodeDecodeError) as e:
        logger.error("Cannot read config %s: %s", config_path, e)
        return EXIT_IO
    overrides: dict[str, object] = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out"] = str(out)
    cfg = cfg.copy(update=overrides)

    try:
        output = run_experiment(cfg, jobs=jobs)
    except SsnllError as e:
        logger.error("Experiment '%s' failed: %s", cfg.experiment.value, e)
        return EXIT_CHECK_FAILED
    try:
        write_artifacts(cfg.out, cfg, output, __version__)
    except OSError as e:
        logger.error("Cannot write artifacts to %s: %s", cfg.out, e)
        return EXIT_IO
    return EXIT_OK if output.passed else EXIT_CHECK_FAILED


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(quiet=args.quiet, verbose=args.verbose)
    return run(args.config, seed=args.seed, out=args.out, jobs=args.jobs)
