"""Forward/backward timing of the capsule network per engine."""

import logging
import statistics
import time
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from capsconv.bench.config import BenchConfig
from capsconv.bench.report import BenchReport, BenchRow
from capsconv.engines.execution import ExecutionOptions, available_workers
from capsconv.engines.registry import ENGINE_NAMES
from capsconv.network.capsnet import CapsNet, NetworkConfig, init_parameters
from capsconv.tensor.models import CapsuleTensor, dtype_for

logger = logging.getLogger(__name__)


def make_input(config: NetworkConfig, seed: int) -> CapsuleTensor:
    """Standard-normal network input, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(config.input.shape)
    return CapsuleTensor(values.astype(dtype_for(config.scalar)))


def _elapsed_ms(fn: Callable[[], object]) -> Tuple[float, object]:
    start = time.perf_counter()
    result = fn()
    return (time.perf_counter() - start) * 1000.0, result


def time_network(net: CapsNet, x: CapsuleTensor, reps: int, warmup: int) -> Tuple[float, float]:
    """Median forward and backward wall times in milliseconds.

    The backward pass is fed dOut = Out, the gradient of sum(Out**2) / 2.
    """
    for _ in range(warmup):
        out, tape = net.forward(x)
        net.backward(tape, out)
    forward_ms: List[float] = []
    backward_ms: List[float] = []
    for _ in range(reps):
        elapsed, (out, tape) = _elapsed_ms(lambda: net.forward(x))
        forward_ms.append(elapsed)
        elapsed, _ = _elapsed_ms(lambda: net.backward(tape, out))
        backward_ms.append(elapsed)
    return statistics.median(forward_ms), statistics.median(backward_ms)


def run_bench(config: BenchConfig, engines: Optional[Sequence[str]] = None,
              echo: Callable[[str], None] = logger.info) -> BenchReport:
    """Time one forward and one backward pass of the network per engine.

    The naive engine is always timed first; it is the speedup baseline.

    Args:
        config: Parsed configuration (network, seed, workers, methodology)
        engines: Engine names to time; all engines when None
        echo: Progress callback

    Returns:
        BenchReport with one row per timed engine
    """
    selected = list(engines) if engines else list(ENGINE_NAMES)
    order = ["naive"] + [name for name in ENGINE_NAMES if name in selected and name != "naive"]
    workers = min(config.run.workers, available_workers())
    options = ExecutionOptions(mode=config.bench.mode, workers=workers)
    network = config.network
    x = make_input(network, config.run.seed)
    kernels = init_parameters(network)

    timings = {}
    for name in order:
        net = CapsNet(network.with_engine(name), kernels, options)
        echo(f"Timing {name} engine ({config.bench.warmup} warmup, {config.bench.reps} reps)...")
        timings[name] = time_network(net, x, config.bench.reps, config.bench.warmup)

    naive_total = sum(timings["naive"])
    rows = []
    for name in order:
        forward, backward = timings[name]
        total = forward + backward
        rows.append(BenchRow(engine=name, total_ms=total, forward_ms=forward,
                             backward_ms=backward,
                             speedup=naive_total / total if total > 0 else 0.0))
    return BenchReport(rows=rows, scalar=network.scalar, workers=workers,
                       reps=config.bench.reps, warmup=config.bench.warmup,
                       seed=config.run.seed, mode=config.bench.mode, source=config.source)
