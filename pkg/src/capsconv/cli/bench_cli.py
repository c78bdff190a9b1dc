"""Command line interface for the correctness suites and the engine benchmark."""

import logging
import sys
from typing import Optional

import click

from capsconv.bench import emit_csv, load_config, run_bench, run_check
from capsconv.bench.config import BenchConfig
from capsconv.bench.suites import SUITES
from capsconv.engines.registry import ENGINE_NAMES
from capsconv.errors import CapsConvError, ConfigError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3

SUITE_KEYS = [key for key, _ in SUITES]


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )


def _load(config_path: Optional[str], **overrides) -> BenchConfig:
    config = load_config(config_path)
    return config.with_overrides(**overrides)


def _fail(message: str, code: int) -> None:
    click.echo(f"Error: {message}", err=True)
    sys.exit(code)


config_option = click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="Config file (default: the packaged default.conf)",
)
workers_option = click.option(
    "--workers",
    "-w",
    type=click.IntRange(min=1),
    default=None,
    help="Worker threads for the accelerated engines (default: from config)",
)
seed_option = click.option(
    "--seed",
    type=click.IntRange(min=0),
    default=None,
    help="Seed for inputs and parameters (default: from config)",
)
verbose_option = click.option("--verbose", "-v", is_flag=True, help="Enable debug logging")


@click.group()
def cli():
    """Capsule convolution engines: correctness checks and timing."""
    pass


@cli.command()
@config_option
@workers_option
@seed_option
@click.option(
    "--suite",
    "-s",
    "suites",
    multiple=True,
    type=click.Choice(SUITE_KEYS),
    help="Run only this suite. Can be used multiple times.",
)
@verbose_option
def check(config_path, workers, seed, suites, verbose):
    """Run the oracle, gradient, adjointness and determinism suites."""
    _setup_logging(verbose)
    try:
        config = _load(config_path, workers=workers, seed=seed)
        click.echo(f"Checking with {config.source} (seed {config.run.seed})")
        summary = run_check(config, only=suites or None, echo=click.echo)
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)
    except OSError as e:
        _fail(str(e), EXIT_IO)
    except CapsConvError as e:
        _fail(str(e), EXIT_CHECK_FAILED)

    click.echo(summary.to_text())
    sys.exit(EXIT_OK if summary.passed else EXIT_CHECK_FAILED)


@cli.command()
@config_option
@click.option(
    "--engine",
    "-e",
    type=click.Choice(list(ENGINE_NAMES) + ["all"]),
    default="all",
    help="Engine to time; naive is always timed as the baseline (default: all)",
)
@workers_option
@click.option("--scalar", type=click.Choice(["f32", "f64"]), default=None,
              help="Scalar kind (default: from config)")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the report rows to this CSV file")
@seed_option
@click.option("--reps", type=click.IntRange(min=3), default=None,
              help="Timed repetitions per engine (default: from config)")
@click.option("--mode", type=click.Choice(["reference", "optimized"]), default=None,
              help="Accumulation mode of the accelerated engines (default: from config)")
@verbose_option
def bench(config_path, engine, workers, scalar, csv_path, seed, reps, mode, verbose):
    """Time forward and backward passes of the configured network per engine."""
    _setup_logging(verbose)
    try:
        config = _load(config_path, workers=workers, scalar=scalar, seed=seed, reps=reps,
                       mode=mode)
        engines = None if engine == "all" else [engine]
        report = run_bench(config, engines, echo=click.echo)
        click.echo()
        click.echo(report.to_markdown())
        if csv_path:
            emit_csv(report, csv_path)
            click.echo(f"Wrote {csv_path}")
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)
    except OSError as e:
        _fail(str(e), EXIT_IO)
    except CapsConvError as e:
        _fail(str(e), EXIT_CHECK_FAILED)


if __name__ == "__main__":
    cli()
