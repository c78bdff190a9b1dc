"""Randomized correctness suites run by ``capsconv check``.

Every instance is generated from a seed; a failing instance is reported with
that seed so it can be rebuilt with :func:`random_case`.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from capsconv.bench.config import BenchConfig, CheckSection
from capsconv.engines.execution import ExecutionOptions, available_workers
from capsconv.engines.indexed import build_index_table
from capsconv.engines.lowering import (
    ExtendedInput,
    FlattenedInput,
    LoweringGeometry,
    WindowGeometry,
    capsule_col2im,
    capsule_im2col,
    input_extend,
    input_reduce,
    kernel_extend,
    output_extend,
)
from capsconv.engines.reference import (
    finite_diff_grad,
    loss_and_grad,
    max_relative_error,
    scalar_conv2d,
    squared_loss,
)
from capsconv.engines.registry import ENGINE_NAMES, ConvEngine, get_engine
from capsconv.errors import CapsConvError, ConfigError
from capsconv.network.capsnet import (
    CapsNet,
    InputSpec,
    LayerSpec,
    NetworkConfig,
    init_parameters,
)
from capsconv.tensor.layout import linear_offset
from capsconv.tensor.models import (
    CapsuleTensor,
    ConvConfig,
    ConvKernel,
    PoseDims,
    ScalarKind,
    dtype_for,
)

logger = logging.getLogger(__name__)

ACCELERATED = ("accel", "indexed")


@dataclass(frozen=True)
class CaseRanges:
    """Value sets random instances are drawn from."""
    batch: Sequence[int]
    channels: Sequence[int]
    spatial: Sequence[int]
    kernel: Sequence[int]
    stride: Sequence[int]
    padding: Sequence[int]
    slices: Sequence[int]
    pose: Sequence[int]


CASE_RANGES: Dict[str, CaseRanges] = {
    "full": CaseRanges(batch=(1, 2), channels=(1, 2, 3), spatial=tuple(range(3, 9)),
                       kernel=(1, 2, 3), stride=(1, 2), padding=(0, 1), slices=(1, 3),
                       pose=(1, 2, 3, 4)),
    # kept small: every parameter is perturbed twice by the finite-difference check
    "gradient": CaseRanges(batch=(1,), channels=(1, 2), spatial=(3, 4, 5), kernel=(1, 2, 3),
                           stride=(1, 2), padding=(0, 1), slices=(1, 2), pose=(1, 2, 3)),
    "degenerate": CaseRanges(batch=(1, 2), channels=(1, 2, 3), spatial=tuple(range(3, 9)),
                             kernel=(1, 2, 3), stride=(1, 2), padding=(0, 1), slices=(1,),
                             pose=(1,)),
}

# mixed into each instance seed so suites do not share instances
_SUITE_STREAMS = {"full": 1, "gradient": 2, "degenerate": 3, "adjoint": 4}


@dataclass(frozen=True)
class ConvCase:
    """One convolution instance: operands, stride/padding and the seed that made it."""
    seed: int
    x: CapsuleTensor
    kernel: ConvKernel
    cfg: ConvConfig

    def astype(self, scalar: ScalarKind) -> "ConvCase":
        dtype = dtype_for(scalar)
        return ConvCase(self.seed, CapsuleTensor(self.x.data.astype(dtype)),
                        ConvKernel(self.kernel.data.astype(dtype)), self.cfg)

    def describe(self) -> str:
        return (f"input {self.x.shape} kernel {self.kernel.shape} "
                f"stride={self.cfg.stride} padding={self.cfg.padding}")


def random_case(seed: int, kind: str = "full") -> ConvCase:
    """Draw a lawful f64 instance from the ranges named by ``kind``.

    Raises:
        KeyError: If kind is not one of CASE_RANGES
    """
    ranges = CASE_RANGES[kind]
    rng = np.random.default_rng([_SUITE_STREAMS[kind], seed])

    def pick(values: Sequence[int]) -> int:
        return int(rng.choice(values))

    batch, in_ch, out_ch = pick(ranges.batch), pick(ranges.channels), pick(ranges.channels)
    height, width = pick(ranges.spatial), pick(ranges.spatial)
    k_h, k_w = pick(ranges.kernel), pick(ranges.kernel)
    slices = pick(ranges.slices)
    rows, inner, cols = pick(ranges.pose), pick(ranges.pose), pick(ranges.pose)
    cfg = ConvConfig(stride=pick(ranges.stride), padding=pick(ranges.padding))
    x = rng.standard_normal((batch, in_ch, height, width, slices, rows, inner))
    w = rng.standard_normal((out_ch, in_ch, k_h, k_w, slices, inner, cols))
    return ConvCase(seed, CapsuleTensor(x), ConvKernel(w), cfg)


def ones_case() -> ConvCase:
    """All-ones 5x5 map of 3x3x3 poses under an all-ones 4x4 kernel; outputs are 48.0."""
    x = np.ones((1, 1, 5, 5, 3, 3, 3))
    w = np.ones((1, 1, 4, 4, 3, 3, 3))
    return ConvCase(0, CapsuleTensor(x), ConvKernel(w), ConvConfig())


@dataclass
class SuiteResult:
    """Outcome of one suite."""
    name: str
    checked: int = 0
    failures: List[str] = field(default_factory=list)
    note: str = ""

    @property
    def passed(self) -> bool:
        return not self.failures

    @contextmanager
    def instance(self, seed: int) -> Iterator[None]:
        """Record a failure for this seed instead of propagating it."""
        self.checked += 1
        try:
            yield
        except (AssertionError, CapsConvError) as e:
            self.failures.append(f"seed {seed}: {e}")
            logger.debug("%s failed on seed %d: %s", self.name, seed, e)


@dataclass
class CheckSummary:
    results: List[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failure_count(self) -> int:
        return sum(len(result.failures) for result in self.results)

    def to_text(self) -> str:
        lines = []
        for result in self.results:
            status = "ok" if result.passed else f"FAILED ({len(result.failures)})"
            note = f" ({result.note})" if result.note else ""
            lines.append(f"{result.name}: {result.checked} instances, {status}{note}")
            lines.extend(f"  {failure}" for failure in result.failures)
        verdict = "all suites passed" if self.passed else f"{self.failure_count} mismatches"
        lines.append(verdict)
        return "\n".join(lines)


def assert_bitwise(actual: np.ndarray, expected: np.ndarray, what: str) -> None:
    if actual.shape != expected.shape:
        raise AssertionError(f"{what}: shape {actual.shape} != {expected.shape}")
    if not np.array_equal(actual, expected):
        error = max_relative_error(actual, expected)
        raise AssertionError(f"{what}: not bitwise equal (relative error {error:.3e})")


def assert_close(actual: np.ndarray, expected: np.ndarray, rtol: float, what: str) -> None:
    error = max_relative_error(actual, expected)
    if error > rtol:
        raise AssertionError(f"{what}: relative error {error:.3e} > {rtol:.1e}")


def _engines(workers: int, mode: str = "reference") -> Dict[str, ConvEngine]:
    options = ExecutionOptions(mode=mode, workers=min(workers, available_workers()))
    return {name: get_engine(name, options) for name in ENGINE_NAMES}


def ones_suite(config: BenchConfig) -> SuiteResult:
    result = SuiteResult("ones")
    case = ones_case()
    grad_out = CapsuleTensor(np.ones((1, 1, 2, 2, 3, 3, 3)))
    for mode in ("reference", "optimized"):
        for name, engine in _engines(config.run.workers, mode).items():
            with result.instance(case.seed):
                out = engine.forward(case.x, case.kernel, case.cfg)
                assert_bitwise(out.data, np.full((1, 1, 2, 2, 3, 3, 3), 48.0),
                               f"{name} ({mode}) forward")
                _, grad_kernel = engine.backward(case.x, case.kernel, grad_out, case.cfg)
                assert_bitwise(grad_kernel.data, np.full(case.kernel.shape, 12.0),
                               f"{name} ({mode}) kernel gradient")
    return result


def forward_suite(config: BenchConfig) -> SuiteResult:
    """Accelerated forwards against the naive loop nest at f64 and f32."""
    check = config.check
    result = SuiteResult("forward oracle")
    reference = _engines(config.run.workers)
    optimized = _engines(config.run.workers, "optimized")
    for seed in range(config.run.seed, config.run.seed + check.instances):
        case = random_case(seed)
        with result.instance(seed):
            expected = reference["naive"].forward(case.x, case.kernel, case.cfg).data
            for name in ACCELERATED:
                out = reference[name].forward(case.x, case.kernel, case.cfg)
                assert_bitwise(out.data, expected, f"{name} forward, {case.describe()}")
                out = optimized[name].forward(case.x, case.kernel, case.cfg)
                assert_close(out.data, expected, check.rtol,
                             f"{name} optimized forward, {case.describe()}")
            single = case.astype("f32")
            for name in ACCELERATED:
                out = reference[name].forward(single.x, single.kernel, single.cfg)
                assert_close(out.data, expected, check.f32_rtol,
                             f"{name} f32 forward, {case.describe()}")
    return result


def _fd_input_grad(engine: ConvEngine, case: ConvCase, h: float) -> np.ndarray:
    def loss(flat: np.ndarray) -> float:
        x = CapsuleTensor(flat.reshape(case.x.shape))
        return squared_loss(engine.forward(x, case.kernel, case.cfg))
    return finite_diff_grad(loss, case.x.flat, h).reshape(case.x.shape)


def _fd_kernel_grad(engine: ConvEngine, case: ConvCase, h: float) -> np.ndarray:
    def loss(flat: np.ndarray) -> float:
        kernel = ConvKernel(flat.reshape(case.kernel.shape))
        return squared_loss(engine.forward(case.x, kernel, case.cfg))
    return finite_diff_grad(loss, case.kernel.flat, h).reshape(case.kernel.shape)


def backward_suite(config: BenchConfig) -> SuiteResult:
    """Backward oracles plus central differences of L = sum(O**2) / 2."""
    check = config.check
    result = SuiteResult("backward oracle")
    reference = _engines(config.run.workers)
    optimized = _engines(config.run.workers, "optimized")
    for seed in range(config.run.seed, config.run.seed + check.gradient_instances):
        case = random_case(seed, "gradient")
        with result.instance(seed):
            naive = reference["naive"]
            _, grad_out = loss_and_grad(naive.forward(case.x, case.kernel, case.cfg))
            grad_x, grad_w = naive.backward(case.x, case.kernel, grad_out, case.cfg)
            for name in ACCELERATED:
                dx, dw = reference[name].backward(case.x, case.kernel, grad_out, case.cfg)
                assert_bitwise(dx.data, grad_x.data, f"{name} input gradient, {case.describe()}")
                assert_bitwise(dw.data, grad_w.data, f"{name} kernel gradient, {case.describe()}")
                dx, dw = optimized[name].backward(case.x, case.kernel, grad_out, case.cfg)
                assert_close(dx.data, grad_x.data, check.rtol,
                             f"{name} optimized input gradient, {case.describe()}")
                assert_close(dw.data, grad_w.data, check.rtol,
                             f"{name} optimized kernel gradient, {case.describe()}")
            # forward already matched the oracle, the faster engine drives the differences
            probe = reference["accel"]
            assert_close(grad_x.data, _fd_input_grad(probe, case, check.fd_step), check.fd_rtol,
                         f"input gradient vs finite differences, {case.describe()}")
            assert_close(grad_w.data, _fd_kernel_grad(probe, case, check.fd_step), check.fd_rtol,
                         f"kernel gradient vs finite differences, {case.describe()}")
    return result


def _inner_close(lhs: float, rhs: float, rtol: float, what: str) -> None:
    scale = max(abs(lhs), abs(rhs))
    error = abs(lhs - rhs) / scale if scale else abs(lhs - rhs)
    if error > rtol:
        raise AssertionError(f"{what}: <fwd(x), y> = {lhs!r}, <x, adj(y)> = {rhs!r}, "
                             f"relative error {error:.3e}")


def adjoint_suite(config: BenchConfig) -> SuiteResult:
    """im2col against col2im and input_extend against input_reduce."""
    check = config.check
    result = SuiteResult("adjointness")
    options = ExecutionOptions(workers=min(config.run.workers, available_workers()))
    for seed in range(config.run.seed, config.run.seed + check.adjoint_instances):
        case = random_case(seed)
        rng = np.random.default_rng([_SUITE_STREAMS["adjoint"], seed])
        with result.instance(seed):
            k_h, k_w = case.kernel.k_h, case.kernel.k_w
            window = WindowGeometry.from_shape(case.x.shape, k_h, k_w, case.cfg)
            columns = capsule_im2col(case.x, (k_h, k_w), case.cfg)
            y = FlattenedInput(rng.standard_normal(columns.data.shape), window)
            back = capsule_col2im(y, window, options)
            _inner_close(float(np.vdot(columns.data, y.data)),
                         float(np.vdot(case.x.data, back.data)),
                         check.adjoint_rtol, f"im2col/col2im, {case.describe()}")

            replicas = case.kernel.out_channels
            z = ExtendedInput(rng.standard_normal((replicas,) + columns.data.shape), window)
            extended = input_extend(columns, replicas)
            _inner_close(float(np.vdot(extended.data, z.data)),
                         float(np.vdot(columns.data, input_reduce(z, options).data)),
                         check.adjoint_rtol, f"input_extend/input_reduce, {case.describe()}")
    return result


def purity_suite(config: BenchConfig) -> SuiteResult:
    """Gather and replicate stages only move scalars, never combine them."""
    result = SuiteResult("stage purity")
    for seed in range(config.run.seed, config.run.seed + config.check.adjoint_instances):
        case = random_case(seed)
        with result.instance(seed):
            geometry = LoweringGeometry.from_operands(case.x, case.kernel, case.cfg)
            columns = capsule_im2col(case.x, (case.kernel.k_h, case.kernel.k_w), case.cfg)
            source = np.concatenate([case.x.flat, [0.0]])
            if not np.isin(columns.data, source).all():
                raise AssertionError("im2col produced a value absent from its input")
            extended = input_extend(columns, case.kernel.out_channels)
            for replica in extended.data:
                assert_bitwise(replica, columns.data, "input_extend replica")
            repeated = kernel_extend(case.kernel, geometry.window.spatial)
            for p, blocks in enumerate(repeated.data):
                for block in blocks:
                    assert_bitwise(block, case.kernel.data[p].reshape(-1), "kernel_extend block")
            grad = CapsuleTensor(np.random.default_rng(seed).standard_normal(geometry.output_shape))
            spread = output_extend(grad, geometry).data
            if not np.isin(spread, grad.flat).all():
                raise AssertionError("output_extend produced a value absent from its input")
    return result


def degenerate_suite(config: BenchConfig) -> SuiteResult:
    """Scalar poses reduce every engine to a plain scalar convolution."""
    result = SuiteResult("degenerate poses")
    engines = _engines(config.run.workers)
    for seed in range(config.run.seed, config.run.seed + config.check.degenerate_instances):
        case = random_case(seed, "degenerate")
        with result.instance(seed):
            expected = scalar_conv2d(case.x.data[..., 0, 0, 0], case.kernel.data[..., 0, 0, 0],
                                     case.cfg.stride, case.cfg.padding)
            for name, engine in engines.items():
                out = engine.forward(case.x, case.kernel, case.cfg)
                assert_bitwise(out.data[..., 0, 0, 0], expected, f"{name}, {case.describe()}")
    return result


def determinism_suite(config: BenchConfig) -> SuiteResult:
    """Repeated runs at every configured worker count give identical bits."""
    check = config.check
    worker_counts = sorted({min(workers, available_workers()) for workers in check.worker_counts})
    result = SuiteResult("determinism", note=f"workers {worker_counts}")
    if max(check.worker_counts) > available_workers():
        logger.warning("Worker counts %s clamped to %s", check.worker_counts, worker_counts)
    count = min(check.instances, 10)
    for seed in range(config.run.seed, config.run.seed + count):
        case = random_case(seed)
        with result.instance(seed):
            grad_out = None
            for name in ENGINE_NAMES:
                baseline: Optional[Tuple[np.ndarray, ...]] = None
                for workers in worker_counts:
                    engine = get_engine(name, ExecutionOptions(workers=workers))
                    for _ in range(2):
                        out = engine.forward(case.x, case.kernel, case.cfg)
                        if grad_out is None:
                            grad_out = out
                        dx, dw = engine.backward(case.x, case.kernel, grad_out, case.cfg)
                        current = (out.data, dx.data, dw.data)
                        if baseline is None:
                            baseline = current
                            continue
                        for label, got, want in zip(("output", "input grad", "kernel grad"),
                                                    current, baseline):
                            assert_bitwise(got, want, f"{name} {label} with {workers} workers")
    return result


def _loop_tasks(case: ConvCase) -> np.ndarray:
    """(input pose, kernel pose) pairs visited by the naive loop nest, as element offsets."""
    x, kernel, cfg = case.x, case.kernel, case.cfg
    h_out = (x.height + 2 * cfg.padding - kernel.k_h) // cfg.stride + 1
    w_out = (x.width + 2 * cfg.padding - kernel.k_w) // cfg.stride + 1
    pairs = []
    for b in range(x.batch):
        for p in range(kernel.out_channels):
            for i in range(h_out):
                for j in range(w_out):
                    for c in range(x.channels):
                        for m in range(kernel.k_h):
                            for n in range(kernel.k_w):
                                y = i * cfg.stride + m - cfg.padding
                                xx = j * cfg.stride + n - cfg.padding
                                if 0 <= y < x.height and 0 <= xx < x.width:
                                    pairs.append((
                                        linear_offset((b, c, y, xx, 0, 0, 0), x.shape),
                                        linear_offset((p, c, m, n, 0, 0, 0), kernel.shape),
                                    ))
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def index_table_suite(config: BenchConfig) -> SuiteResult:
    """The task table visits exactly the pose products of the loop nest."""
    result = SuiteResult("index table totality")
    for seed in range(config.run.seed, config.run.seed + config.check.instances):
        case = random_case(seed)
        with result.instance(seed):
            table = build_index_table(case.x.shape, case.kernel.shape, case.cfg)
            if len(table) and (table.input_index.max() >= case.x.flat.size
                               or table.weight_index.max() >= case.kernel.flat.size):
                raise AssertionError(f"offset out of bounds, {case.describe()}")
            pairs = np.stack([table.input_index, table.weight_index], axis=1)
            pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
            assert_bitwise(pairs, _loop_tasks(case), f"task multiset, {case.describe()}")
            if case.cfg.padding == 0 and (np.diff(table.owner_ptr) == 0).any():
                raise AssertionError(f"output pose without tasks, {case.describe()}")
    return result


def tiny_network_config(seed: int = 0) -> NetworkConfig:
    """Three padded 3x3 layers on a 3x3 map of 2x2 poses, channels 1 -> 2 -> 2 -> 1."""
    pose = PoseDims(slices=1, rows=2, cols=2)
    channels = [1, 2, 2, 1]
    layers = [LayerSpec(in_channels=c_in, out_channels=c_out, pose=pose, padding=1)
              for c_in, c_out in zip(channels[:-1], channels[1:])]
    return NetworkConfig(input=InputSpec(batch=1, channels=1, height=3, width=3, pose=pose),
                         layers=layers, scalar="f64", seed=seed)


def _network_fd(config: NetworkConfig, kernels: List[ConvKernel], x: CapsuleTensor,
                options: ExecutionOptions, h: float) -> np.ndarray:
    """Central differences over every kernel scalar followed by every input scalar."""
    sizes = [kernel.flat.size for kernel in kernels]
    accel = config.with_engine("accel")

    def loss(flat: np.ndarray) -> float:
        parts = np.split(flat, np.cumsum(sizes))
        trial = [ConvKernel(part.reshape(k.shape)) for part, k in zip(parts[:-1], kernels)]
        out, _ = CapsNet(accel, trial, options).forward(CapsuleTensor(parts[-1].reshape(x.shape)))
        return squared_loss(out)

    point = np.concatenate([kernel.flat for kernel in kernels] + [x.flat])
    return finite_diff_grad(loss, point, h)


def network_suite(config: BenchConfig) -> SuiteResult:
    """Cross-engine agreement on the configured network and a tiny end-to-end gradient check."""
    check = config.check
    result = SuiteResult("network")
    seed = config.run.seed
    options = ExecutionOptions(workers=min(config.run.workers, available_workers()))

    # batch of one keeps the naive pass short
    network = config.network.model_copy(update={
        "input": config.network.input.model_copy(update={"batch": 1}),
        "scalar": "f64",
    })
    kernels = init_parameters(network, seed)
    x = CapsuleTensor(np.random.default_rng(seed).standard_normal(network.input.shape))
    with result.instance(seed):
        naive = CapsNet(network.with_engine("naive"), kernels, options)
        out, tape = naive.forward(x)
        grad_x, grad_ws = naive.backward(tape, out)
        for name in ACCELERATED:
            net = CapsNet(network.with_engine(name), kernels, options)
            got, got_tape = net.forward(x)
            assert_bitwise(got.data, out.data, f"{name} network output")
            dx, dws = net.backward(got_tape, got)
            assert_bitwise(dx.data, grad_x.data, f"{name} network input gradient")
            for index, (dw, want) in enumerate(zip(dws, grad_ws)):
                assert_bitwise(dw.data, want.data, f"{name} layer {index} kernel gradient")

    tiny = tiny_network_config(seed)
    kernels = init_parameters(tiny)
    x = CapsuleTensor(np.random.default_rng(seed).standard_normal(tiny.input.shape))
    with result.instance(seed):
        numeric = _network_fd(tiny, kernels, x, options, check.fd_step)
        for name in ENGINE_NAMES:
            net = CapsNet(tiny.with_engine(name), kernels, options)
            out, tape = net.forward(x)
            dx, dws = net.backward(tape, out)
            analytic = np.concatenate([dw.flat for dw in dws] + [dx.flat])
            assert_close(analytic, numeric, check.network_fd_rtol,
                         f"{name} depth-{len(tiny.layers)} network gradient")
    return result


SUITES: List[Tuple[str, Callable[[BenchConfig], SuiteResult]]] = [
    ("ones", ones_suite),
    ("forward", forward_suite),
    ("backward", backward_suite),
    ("adjoint", adjoint_suite),
    ("purity", purity_suite),
    ("degenerate", degenerate_suite),
    ("determinism", determinism_suite),
    ("index-table", index_table_suite),
    ("network", network_suite),
]


def run_check(config: BenchConfig, only: Optional[Sequence[str]] = None,
              echo: Callable[[str], None] = logger.info) -> CheckSummary:
    """Run the correctness suites.

    Args:
        config: Parsed configuration; its [check] section sets counts and tolerances
        only: Suite keys to run; all suites when None
        echo: Progress callback

    Returns:
        CheckSummary; ``passed`` is true only if every instance of every suite passed

    Raises:
        ConfigError: If ``only`` names a suite that does not exist
    """
    known = [key for key, _ in SUITES]
    unknown = [key for key in only or () if key not in known]
    if unknown:
        raise ConfigError(f"Unknown suite(s) {unknown}, expected one of {known}", field="suite")
    summary = CheckSummary()
    for key, suite in SUITES:
        if only and key not in only:
            continue
        echo(f"Running {key} suite...")
        summary.results.append(suite(config))
    return summary


def with_check(config: BenchConfig, **overrides) -> BenchConfig:
    """Copy of config with [check] fields replaced."""
    check: CheckSection = config.check.model_copy(update=overrides)
    return config.model_copy(update={"check": check})
