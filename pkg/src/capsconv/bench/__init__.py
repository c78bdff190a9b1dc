"""Config parsing, correctness suites, timing and report emission."""

from capsconv.bench.config import BenchConfig, load_config, parse_config
from capsconv.bench.report import BenchReport, BenchRow, emit_csv, read_csv
from capsconv.bench.suites import CheckSummary, SuiteResult, random_case, run_check
from capsconv.bench.timing import make_input, run_bench

__all__ = [
    "BenchConfig",
    "BenchReport",
    "BenchRow",
    "CheckSummary",
    "SuiteResult",
    "emit_csv",
    "load_config",
    "make_input",
    "parse_config",
    "random_case",
    "read_csv",
    "run_bench",
    "run_check",
]
