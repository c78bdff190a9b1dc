"""Capsule convolution lowered to strided batched small-matrix products.

Forward: capsule_im2col -> input_extend / kernel_extend -> batched_matmul ->
output_reduce. Backward reuses the same stages with output_extend,
input_reduce and capsule_col2im.

Batch order for every plan is [out_channel][batch][out_row][out_col]
[in_channel][kernel_row][kernel_col][slice], which is also the block order of
ExtendedInput. Replication stages are materialized copies.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit, prange
from numpy.lib.stride_tricks import sliding_window_view

from capsconv.engines.execution import ExecutionOptions, worker_threads
from capsconv.engines.reference import check_grad_output
from capsconv.errors import ShapeError
from capsconv.tensor.layout import output_dims
from capsconv.tensor.models import CapsuleTensor, ConvConfig, ConvKernel, check_operands

logger = logging.getLogger(__name__)

Buffer = Union[np.ndarray, "FlattenedInput", "ExtendedInput", "ExtendedKernel",
               "ExtendedGradient", "BatchProduct"]


@dataclass(frozen=True)
class WindowGeometry:
    """Input extents together with the window geometry that slides over them."""
    batch: int
    in_channels: int
    height: int
    width: int
    slices: int
    rows: int
    inner: int
    k_h: int
    k_w: int
    stride: int
    padding: int
    h_out: int
    w_out: int

    @classmethod
    def from_shape(cls, input_shape: Sequence[int], k_h: int, k_w: int,
                   cfg: ConvConfig) -> "WindowGeometry":
        if len(input_shape) != 7:
            raise ShapeError(f"input shape must have 7 extents, got {tuple(input_shape)}")
        batch, channels, height, width, slices, rows, inner = (int(e) for e in input_shape)
        h_out, w_out = output_dims(height, width, k_h, k_w, cfg)
        return cls(batch, channels, height, width, slices, rows, inner,
                   k_h, k_w, cfg.stride, cfg.padding, h_out, w_out)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return (self.batch, self.in_channels, self.height, self.width,
                self.slices, self.rows, self.inner)

    @property
    def spatial(self) -> int:
        """Output positions per batch item, H' * W'."""
        return self.h_out * self.w_out

    @property
    def columns(self) -> int:
        return self.batch * self.spatial

    @property
    def group(self) -> int:
        """Pose products feeding one output pose slice, C * k_h * k_w."""
        return self.in_channels * self.k_h * self.k_w

    @property
    def input_pose(self) -> int:
        return self.slices * self.rows * self.inner

    @property
    def col_len(self) -> int:
        return self.group * self.input_pose


@dataclass(frozen=True)
class LoweringGeometry:
    """Window geometry plus the kernel's out-channels and pose columns."""
    window: WindowGeometry
    out_channels: int
    cols: int

    @classmethod
    def from_shapes(cls, input_shape: Sequence[int], kernel_shape: Sequence[int],
                    cfg: ConvConfig) -> "LoweringGeometry":
        if len(kernel_shape) != 7:
            raise ShapeError(f"kernel shape must have 7 extents, got {tuple(kernel_shape)}")
        out_channels, in_channels, k_h, k_w, slices, inner, cols = (int(e) for e in kernel_shape)
        window = WindowGeometry.from_shape(input_shape, k_h, k_w, cfg)
        if in_channels != window.in_channels:
            raise ShapeError(f"kernel in_channels {in_channels} != input channels {window.in_channels}")
        if slices != window.slices or inner != window.inner:
            raise ShapeError(
                f"kernel pose ({slices}, {inner}, ...) does not pair with input pose "
                f"({window.slices}, ..., {window.inner})"
            )
        return cls(window, out_channels, cols)

    @classmethod
    def from_operands(cls, x: CapsuleTensor, kernel: ConvKernel,
                      cfg: ConvConfig) -> "LoweringGeometry":
        check_operands(x, kernel)
        return cls.from_shapes(x.shape, kernel.shape, cfg)

    @property
    def kernel_shape(self) -> Tuple[int, ...]:
        w = self.window
        return (self.out_channels, w.in_channels, w.k_h, w.k_w, w.slices, w.inner, self.cols)

    @property
    def output_shape(self) -> Tuple[int, ...]:
        w = self.window
        return (w.batch, self.out_channels, w.h_out, w.w_out, w.slices, w.rows, self.cols)

    @property
    def kernel_block(self) -> int:
        """Scalars of one out-channel's column of kernel poses."""
        w = self.window
        return w.group * w.slices * w.inner * self.cols

    @property
    def output_pose(self) -> int:
        return self.window.slices * self.window.rows * self.cols

    @property
    def batch_count(self) -> int:
        w = self.window
        return self.out_channels * w.columns * w.group * w.slices


def _buffer(operand: Buffer) -> np.ndarray:
    data = operand if isinstance(operand, np.ndarray) else operand.data
    return data.reshape(-1)


def _check_buffer(name: str, data: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if data.shape != shape:
        raise ShapeError(f"{name} must have shape {shape}, got {data.shape}")
    return data


@dataclass(frozen=True)
class FlattenedInput:
    """One column per output position (b, i, j), each holding the whole window.

    Column slots run over (in_channel, kernel_row, kernel_col, pose element).
    """
    data: np.ndarray
    window: WindowGeometry

    def __post_init__(self):
        w = self.window
        _check_buffer("FlattenedInput", self.data, (w.columns, w.col_len))


@dataclass(frozen=True)
class ExtendedInput:
    """FlattenedInput replicated once per out-channel, replica-major."""
    data: np.ndarray
    window: WindowGeometry

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"ExtendedInput must have 3 axes, got {self.data.shape}")
        w = self.window
        _check_buffer("ExtendedInput", self.data, (self.data.shape[0], w.columns, w.col_len))

    @property
    def replicas(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ExtendedKernel:
    """Each out-channel's column of kernel poses repeated H' * W' times."""
    data: np.ndarray

    @property
    def out_channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ExtendedGradient:
    """Output gradient poses replicated to every contributing block of ExtendedInput."""
    data: np.ndarray
    geometry: LoweringGeometry

    def __post_init__(self):
        g = self.geometry
        shape = (g.out_channels, g.window.columns, g.window.group * g.output_pose)
        _check_buffer("ExtendedGradient", self.data, shape)


@dataclass(frozen=True)
class BatchPlan:
    """Strided batched multiply of uniform (m x k) @ (k x n) operands.

    Batch t reads A at t * a_stride and writes C at t * c_stride. The B
    operand is reused across ``b_broadcast`` consecutive runs of ``b_period``
    batches: its block index is (t // (b_period * b_broadcast)) * b_period
    + t % b_period.
    """
    batch_count: int
    m: int
    k: int
    n: int
    a_stride: int
    b_stride: int
    c_stride: int
    b_period: int
    b_broadcast: int = 1

    def __post_init__(self):
        if min(self.batch_count, self.m, self.k, self.n, self.b_period, self.b_broadcast) < 1:
            raise ShapeError(f"batch plan extents must be positive: {self}")
        if self.a_stride < self.m * self.k or self.b_stride < self.k * self.n \
                or self.c_stride < self.m * self.n:
            raise ShapeError(f"batch plan strides smaller than the matrices they step over: {self}")
        if self.batch_count % (self.b_period * self.b_broadcast):
            raise ShapeError(
                f"batch_count {self.batch_count} is not a multiple of "
                f"b_period * b_broadcast = {self.b_period * self.b_broadcast}"
            )

    @classmethod
    def for_forward(cls, geometry: LoweringGeometry) -> "BatchPlan":
        """ExtendedInput blocks (M x K) times ExtendedKernel blocks (K x N)."""
        w = geometry.window
        return cls(geometry.batch_count, w.rows, w.inner, geometry.cols,
                   w.rows * w.inner, w.inner * geometry.cols, w.rows * geometry.cols,
                   b_period=w.spatial * w.group * w.slices, b_broadcast=w.batch)

    @classmethod
    def for_kernel_grad(cls, geometry: LoweringGeometry) -> "BatchPlan":
        """Transposed ExtendedInput blocks (K x M) times ExtendedGradient blocks (M x N)."""
        w = geometry.window
        return cls(geometry.batch_count, w.inner, w.rows, geometry.cols,
                   w.inner * w.rows, w.rows * geometry.cols, w.inner * geometry.cols,
                   b_period=geometry.batch_count)

    @classmethod
    def for_input_grad(cls, geometry: LoweringGeometry) -> "BatchPlan":
        """ExtendedGradient blocks (M x N) times transposed ExtendedKernel blocks (N x K)."""
        w = geometry.window
        return cls(geometry.batch_count, w.rows, geometry.cols, w.inner,
                   w.rows * geometry.cols, geometry.cols * w.inner, w.rows * w.inner,
                   b_period=w.spatial * w.group * w.slices, b_broadcast=w.batch)

    @property
    def b_blocks(self) -> int:
        """Number of distinct B operand blocks the plan reads."""
        return self.batch_count // self.b_broadcast

    def b_block_index(self) -> np.ndarray:
        t = np.arange(self.batch_count, dtype=np.int64)
        return (t // (self.b_period * self.b_broadcast)) * self.b_period + t % self.b_period

    def check(self, a_size: int, b_size: int) -> None:
        """Raise ShapeError unless buffers of these sizes satisfy the plan."""
        a_needed = (self.batch_count - 1) * self.a_stride + self.m * self.k
        b_needed = (self.b_blocks - 1) * self.b_stride + self.k * self.n
        if a_size < a_needed:
            raise ShapeError(f"A operand holds {a_size} scalars, plan needs {a_needed}")
        if b_size < b_needed:
            raise ShapeError(f"B operand holds {b_size} scalars, plan needs {b_needed}")


@dataclass(frozen=True)
class BatchProduct:
    """batch_count product matrices laid out at the plan's c_stride."""
    data: np.ndarray
    plan: BatchPlan

    def __post_init__(self):
        _check_buffer("BatchProduct", self.data, (self.plan.batch_count * self.plan.c_stride,))


@njit(parallel=True, cache=True)
def _batched_matmul_kernel(a, b, out, batch_count, m, k, n,
                           a_stride, b_stride, c_stride, b_period, b_cycle):
    for t in prange(batch_count):
        a0 = t * a_stride
        b0 = ((t // b_cycle) * b_period + t % b_period) * b_stride
        c0 = t * c_stride
        for r in range(m):
            for c in range(n):
                partial = a[a0 + r * k] * b[b0 + c]
                for q in range(1, k):
                    partial += a[a0 + r * k + q] * b[b0 + q * n + c]
                out[c0 + r * n + c] = partial


@njit(parallel=True, cache=True)
def _reduce_middle_kernel(src, out):
    # out[o, e] += src[o, r, e] for r ascending; one owner per (o, e)
    outer, count, inner = src.shape
    for owner in prange(outer * inner):
        o = owner // inner
        e = owner % inner
        total = out[o, e]
        for r in range(count):
            total += src[o, r, e]
        out[o, e] = total


@njit(parallel=True, cache=True)
def _col2im_kernel(cols, out, k_h, k_w, stride, pad):
    # cols: (B, H', W', C, k_h, k_w, P); out: (B, C, H, W, P); one owner per location
    batch, channels, height, width, pose = out.shape
    h_out, w_out = cols.shape[1], cols.shape[2]
    for owner in prange(batch * channels * height * width):
        x = owner % width
        rest = owner // width
        y = rest % height
        rest = rest // height
        c = rest % channels
        b = rest // channels
        for i in range(h_out):
            m = y + pad - i * stride
            if 0 <= m < k_h:
                for j in range(w_out):
                    n = x + pad - j * stride
                    if 0 <= n < k_w:
                        for e in range(pose):
                            out[b, c, y, x, e] += cols[b, i, j, c, m, n, e]


def reduce_middle(src: np.ndarray, options: ExecutionOptions) -> np.ndarray:
    """Sum a (outer, count, inner) array over its middle axis."""
    if options.reference:
        out = np.zeros((src.shape[0], src.shape[2]), dtype=src.dtype)
        _reduce_middle_kernel(np.ascontiguousarray(src), out)
        return out
    return src.sum(axis=1)


def transpose_blocks(data: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Materialize the transpose of every consecutive (rows x cols) block."""
    blocks = data.reshape(-1, rows, cols)
    return np.ascontiguousarray(blocks.swapaxes(1, 2)).reshape(-1)


def capsule_im2col(x: CapsuleTensor, kernel_size: Tuple[int, int],
                   cfg: ConvConfig) -> FlattenedInput:
    """Gather every convolution window of x into one column.

    Args:
        x: Input feature map
        kernel_size: (k_h, k_w)
        cfg: Stride and padding

    Returns:
        FlattenedInput with B * H' * W' columns of C * k_h * k_w * S * M * K slots

    Raises:
        ShapeError: If the kernel does not fit the padded input
    """
    k_h, k_w = kernel_size
    window = WindowGeometry.from_shape(x.shape, k_h, k_w, cfg)
    pad, stride = cfg.padding, cfg.stride
    padded = x.data
    if pad:
        padded = np.pad(padded, ((0, 0), (0, 0), (pad, pad), (pad, pad), (0, 0), (0, 0), (0, 0)))
    # (B, C, Hp - k_h + 1, Wp - k_w + 1, S, M, K, k_h, k_w)
    windows = sliding_window_view(padded, (k_h, k_w), axis=(2, 3))
    windows = windows[:, :, : (window.h_out - 1) * stride + 1 : stride,
                      : (window.w_out - 1) * stride + 1 : stride]
    columns = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 7, 8, 4, 5, 6))
    logger.debug("im2col: %d columns of %d slots", window.columns, window.col_len)
    return FlattenedInput(columns.reshape(window.columns, window.col_len), window)


def input_extend(flat: FlattenedInput, out_channels: int) -> ExtendedInput:
    """Replicate the flattened input once per out-channel."""
    if out_channels < 1:
        raise ShapeError(f"out_channels must be positive, got {out_channels}")
    extended = np.broadcast_to(flat.data, (out_channels,) + flat.data.shape).copy()
    return ExtendedInput(extended, flat.window)


def kernel_extend(kernel: ConvKernel, spatial: int) -> ExtendedKernel:
    """Repeat each out-channel's column of kernel poses ``spatial`` times."""
    if spatial < 1:
        raise ShapeError(f"spatial repeat count must be positive, got {spatial}")
    block = kernel.data.reshape(kernel.out_channels, 1, -1)
    extended = np.broadcast_to(block, (kernel.out_channels, spatial, block.shape[2])).copy()
    return ExtendedKernel(extended)


def output_extend(grad_out: CapsuleTensor, geometry: LoweringGeometry) -> ExtendedGradient:
    """Replicate each output gradient pose to all C * k_h * k_w positions that fed it."""
    if grad_out.shape != geometry.output_shape:
        raise ShapeError(
            f"output gradient shape {grad_out.shape} != expected {geometry.output_shape}"
        )
    w = geometry.window
    # (C', B * H' * W', 1, S*M*N)
    per_channel = grad_out.data.transpose(1, 0, 2, 3, 4, 5, 6).reshape(
        geometry.out_channels, w.columns, 1, geometry.output_pose
    )
    extended = np.broadcast_to(
        per_channel, (geometry.out_channels, w.columns, w.group, geometry.output_pose)
    ).copy()
    return ExtendedGradient(extended.reshape(geometry.out_channels, w.columns, -1), geometry)


def batched_matmul(a: Buffer, b: Buffer, plan: BatchPlan,
                   options: Optional[ExecutionOptions] = None) -> BatchProduct:
    """Run every (m x k) @ (k x n) product described by the plan.

    In reference mode each product scalar is reduced over k in ascending
    order; batches are independent and run in parallel.

    Raises:
        ShapeError: If either buffer is too small for the plan or dtypes differ
    """
    options = options or ExecutionOptions()
    a_data, b_data = _buffer(a), _buffer(b)
    if a_data.dtype != b_data.dtype:
        raise ShapeError(f"operand dtypes differ: {a_data.dtype} vs {b_data.dtype}")
    plan.check(a_data.size, b_data.size)
    logger.debug("batched_matmul: %d batches of (%d x %d) @ (%d x %d)",
                 plan.batch_count, plan.m, plan.k, plan.k, plan.n)

    if options.reference:
        out = np.zeros(plan.batch_count * plan.c_stride, dtype=a_data.dtype)
        _batched_matmul_kernel(np.ascontiguousarray(a_data), np.ascontiguousarray(b_data), out,
                               plan.batch_count, plan.m, plan.k, plan.n,
                               plan.a_stride, plan.b_stride, plan.c_stride,
                               plan.b_period, plan.b_period * plan.b_broadcast)
        return BatchProduct(out, plan)

    mk, kn, mn = plan.m * plan.k, plan.k * plan.n, plan.m * plan.n
    a_blocks = np.lib.stride_tricks.as_strided(
        a_data, shape=(plan.batch_count, mk), strides=(plan.a_stride * a_data.itemsize, a_data.itemsize)
    ).reshape(plan.batch_count, plan.m, plan.k)
    b_blocks = np.lib.stride_tricks.as_strided(
        b_data, shape=(plan.b_blocks, kn), strides=(plan.b_stride * b_data.itemsize, b_data.itemsize)
    ).reshape(plan.b_blocks, plan.k, plan.n)
    products = np.matmul(a_blocks, b_blocks[plan.b_block_index()])
    out = np.zeros((plan.batch_count, plan.c_stride), dtype=a_data.dtype)
    out[:, :mn] = products.reshape(plan.batch_count, mn)
    return BatchProduct(out.reshape(-1), plan)


def output_reduce(product: BatchProduct, geometry: LoweringGeometry,
                  options: Optional[ExecutionOptions] = None) -> CapsuleTensor:
    """Sum each output pose slice's C * k_h * k_w partial products.

    Raises:
        ShapeError: If the product does not split into the geometry's groups
    """
    options = options or ExecutionOptions()
    w = geometry.window
    plan = product.plan
    if plan.batch_count != geometry.batch_count or plan.c_stride != w.rows * geometry.cols:
        raise ShapeError("batch product does not match the output geometry")
    grouped = product.data.reshape(geometry.out_channels * w.columns, w.group, geometry.output_pose)
    reduced = reduce_middle(grouped, options)
    out = reduced.reshape(geometry.out_channels, w.batch, w.h_out, w.w_out,
                          w.slices, w.rows, geometry.cols)
    return CapsuleTensor(np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4, 5, 6)))


def input_reduce(columns: ExtendedInput,
                 options: Optional[ExecutionOptions] = None) -> FlattenedInput:
    """Sum the per-out-channel column buffers; the adjoint of input_extend."""
    options = options or ExecutionOptions()
    data = columns.data.reshape(1, columns.replicas, -1)
    reduced = reduce_middle(data, options)
    window = columns.window
    return FlattenedInput(reduced.reshape(window.columns, window.col_len), window)


def capsule_col2im(flat_grad: FlattenedInput, window: Optional[WindowGeometry] = None,
                   options: Optional[ExecutionOptions] = None) -> CapsuleTensor:
    """Scatter-add every column slot back into its source input location.

    Slots that came from the zero padding are dropped. In reference mode each
    location sums its contributions in ascending output position order.
    """
    options = options or ExecutionOptions()
    window = window or flat_grad.window
    if window != flat_grad.window:
        raise ShapeError("column buffer was not built for this input geometry")
    w = window
    cols = flat_grad.data.reshape(w.batch, w.h_out, w.w_out, w.in_channels,
                                  w.k_h, w.k_w, w.input_pose)

    if options.reference:
        out = np.zeros((w.batch, w.in_channels, w.height, w.width, w.input_pose),
                       dtype=cols.dtype)
        _col2im_kernel(np.ascontiguousarray(cols), out, w.k_h, w.k_w, w.stride, w.padding)
        return CapsuleTensor(out.reshape(w.input_shape))

    pad, stride = w.padding, w.stride
    padded = np.zeros((w.batch, w.in_channels, w.height + 2 * pad, w.width + 2 * pad,
                       w.input_pose), dtype=cols.dtype)
    row_stop = (w.h_out - 1) * stride + 1
    col_stop = (w.w_out - 1) * stride + 1
    for m in range(w.k_h):
        for n in range(w.k_w):
            padded[:, :, m:m + row_stop:stride, n:n + col_stop:stride] += \
                cols[:, :, :, :, m, n].transpose(0, 3, 1, 2, 4)
    out = padded[:, :, pad:pad + w.height, pad:pad + w.width]
    return CapsuleTensor(np.ascontiguousarray(out).reshape(w.input_shape))


def accel_forward(x: CapsuleTensor, kernel: ConvKernel, cfg: ConvConfig,
                  options: Optional[ExecutionOptions] = None) -> CapsuleTensor:
    """Capsule convolution through the staged lowering."""
    options = options or ExecutionOptions()
    geometry = LoweringGeometry.from_operands(x, kernel, cfg)
    with worker_threads(options.workers):
        flat = capsule_im2col(x, (kernel.k_h, kernel.k_w), cfg)
        extended_input = input_extend(flat, kernel.out_channels)
        extended_kernel = kernel_extend(kernel, geometry.window.spatial)
        plan = BatchPlan.for_forward(geometry)
        product = batched_matmul(extended_input, extended_kernel, plan, options)
        return output_reduce(product, geometry, options)


def accel_backward(x: CapsuleTensor, kernel: ConvKernel, grad_out: CapsuleTensor,
                   cfg: ConvConfig, options: Optional[ExecutionOptions] = None
                   ) -> Tuple[CapsuleTensor, ConvKernel]:
    """Input and kernel gradients through the staged lowering.

    Kernel gradient: per-position partials from transposed input blocks times
    the extended output gradient, summed over the B * H' * W' positions.
    Input gradient: extended output gradient times transposed kernel blocks,
    summed over out-channels and scattered back with col2im.
    """
    options = options or ExecutionOptions()
    check_grad_output(x, kernel, grad_out, cfg)
    geometry = LoweringGeometry.from_operands(x, kernel, cfg)
    w = geometry.window
    with worker_threads(options.workers):
        extended_input = input_extend(
            capsule_im2col(x, (kernel.k_h, kernel.k_w), cfg), kernel.out_channels
        )
        extended_grad = output_extend(grad_out, geometry)

        input_t = transpose_blocks(extended_input.data, w.rows, w.inner)
        partials = batched_matmul(input_t, extended_grad,
                                  BatchPlan.for_kernel_grad(geometry), options)
        per_position = partials.data.reshape(geometry.out_channels, w.columns,
                                             geometry.kernel_block)
        grad_kernel = reduce_middle(per_position, options).reshape(geometry.kernel_shape)

        kernel_t = transpose_blocks(kernel_extend(kernel, w.spatial).data, w.inner, geometry.cols)
        column_grads = batched_matmul(extended_grad, kernel_t,
                                      BatchPlan.for_input_grad(geometry), options)
        per_channel = ExtendedInput(
            column_grads.data.reshape(geometry.out_channels, w.columns, w.col_len), w
        )
        grad_x = capsule_col2im(input_reduce(per_channel, options), w, options)
    return grad_x, ConvKernel(grad_kernel)
