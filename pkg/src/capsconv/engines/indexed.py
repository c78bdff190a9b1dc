"""Index-table capsule convolution.

Every pose multiplication task is described by three precomputed offsets
(input pose, kernel pose, output pose) into the flat canonical buffers. The
forward pass runs one flat parallel loop over output owners; each owner sums
its contiguous run of tasks sequentially, so results do not depend on the
worker count.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numba import njit, prange

from capsconv.engines.execution import ExecutionOptions, worker_threads
from capsconv.engines.lowering import LoweringGeometry
from capsconv.engines.reference import check_grad_output
from capsconv.errors import ShapeError
from capsconv.tensor.layout import linear_offset
from capsconv.tensor.models import CapsuleTensor, ConvConfig, ConvKernel, check_operands

logger = logging.getLogger(__name__)


class IndexTriple(NamedTuple):
    """Element offsets of one pose multiplication task."""
    i_idx: int
    w_idx: int
    o_idx: int


@dataclass(frozen=True)
class GradientOrder:
    """Task permutation grouping tasks by the owner of one gradient buffer."""
    order: np.ndarray
    owner_ptr: np.ndarray


@dataclass(frozen=True)
class IndexTable:
    """All pose multiplication tasks of one convolution geometry.

    Tasks are grouped contiguously by output pose; ``owner_ptr[o]`` ..
    ``owner_ptr[o + 1]`` is the run of output pose o, ordered by
    (in_channel, kernel_row, kernel_col). Tasks that would read padding are
    omitted, so an output whose window lies entirely in padding owns an
    empty run.
    """
    input_index: np.ndarray
    weight_index: np.ndarray
    output_index: np.ndarray
    owner_ptr: np.ndarray
    geometry: LoweringGeometry

    def __len__(self) -> int:
        return int(self.input_index.size)

    def __getitem__(self, task: int) -> IndexTriple:
        return IndexTriple(int(self.input_index[task]), int(self.weight_index[task]),
                           int(self.output_index[task]))

    def __iter__(self) -> Iterator[IndexTriple]:
        for task in range(len(self)):
            yield self[task]

    @property
    def output_count(self) -> int:
        return int(self.owner_ptr.size - 1)

    @property
    def config(self) -> ConvConfig:
        w = self.geometry.window
        return ConvConfig(stride=w.stride, padding=w.padding)

    @cached_property
    def kernel_grad_order(self) -> GradientOrder:
        """Tasks grouped by kernel pose, each run ordered by output position."""
        g = self.geometry
        w = g.window
        kernel_pose = w.slices * w.inner * g.cols
        owners = self.weight_index // kernel_pose
        order = np.argsort(owners, kind="stable")
        n_owners = g.out_channels * w.group
        ptr = np.searchsorted(owners[order], np.arange(n_owners + 1))
        return GradientOrder(order.astype(np.int64), ptr.astype(np.int64))

    @cached_property
    def input_grad_order(self) -> GradientOrder:
        """Tasks grouped by input location, ordered by output position then out-channel."""
        g = self.geometry
        w = g.window
        owners = self.input_index // w.input_pose
        position = self.output_index // g.output_pose
        channel = (position // w.spatial) % g.out_channels
        order = np.lexsort((channel, self.window_index, owners))
        n_owners = w.batch * w.in_channels * w.height * w.width
        ptr = np.searchsorted(owners[order], np.arange(n_owners + 1))
        return GradientOrder(order.astype(np.int64), ptr.astype(np.int64))

    @cached_property
    def window_index(self) -> np.ndarray:
        """Output position (b, i, j) of every task, ignoring the out-channel."""
        g = self.geometry
        w = g.window
        position = self.output_index // g.output_pose
        batch = position // (g.out_channels * w.spatial)
        return batch * w.spatial + position % w.spatial


def build_index_table(input_shape: Sequence[int], kernel_shape: Sequence[int],
                      cfg: ConvConfig) -> IndexTable:
    """Precompute the (input, weight, output) offsets of every pose product.

    Args:
        input_shape: (B, C, H, W, S, M, K)
        kernel_shape: (C', C, k_h, k_w, S, K, N)
        cfg: Stride and padding

    Returns:
        IndexTable in canonical task order

    Raises:
        ShapeError: If the shapes do not pair or violate the shape law
    """
    g = LoweringGeometry.from_shapes(input_shape, kernel_shape, cfg)
    w = g.window
    grid = (w.batch, g.out_channels, w.h_out, w.w_out, w.in_channels, w.k_h, w.k_w)
    b, p, i, j, c, m, n = np.indices(grid, dtype=np.int64).reshape(len(grid), -1)
    y = i * w.stride + m - w.padding
    x = j * w.stride + n - w.padding
    inside = (y >= 0) & (y < w.height) & (x >= 0) & (x < w.width)
    b, p, i, j, c, m, n, y, x = (axis[inside] for axis in (b, p, i, j, c, m, n, y, x))

    input_index = linear_offset((b, c, y, x), (w.batch, w.in_channels, w.height, w.width))
    weight_index = linear_offset((p, c, m, n), (g.out_channels, w.in_channels, w.k_h, w.k_w))
    position = linear_offset((b, p, i, j), (w.batch, g.out_channels, w.h_out, w.w_out))
    n_outputs = w.batch * g.out_channels * w.spatial
    owner_ptr = np.searchsorted(position, np.arange(n_outputs + 1)).astype(np.int64)

    table = IndexTable(
        input_index=np.asarray(input_index * w.input_pose, dtype=np.int64),
        weight_index=np.asarray(weight_index * (w.slices * w.inner * g.cols), dtype=np.int64),
        output_index=np.asarray(position * g.output_pose, dtype=np.int64),
        owner_ptr=owner_ptr,
        geometry=g,
    )
    logger.debug("index table: %d tasks over %d output poses", len(table), n_outputs)
    return table


@njit(parallel=True, cache=True)
def _indexed_forward_kernel(x, w, out, input_index, weight_index, output_index, owner_ptr,
                            slices, rows, inner, cols):
    for owner in prange(owner_ptr.size - 1):
        for task in range(owner_ptr[owner], owner_ptr[owner + 1]):
            xi = input_index[task]
            wi = weight_index[task]
            oi = output_index[task]
            for s in range(slices):
                for r in range(rows):
                    a0 = xi + (s * rows + r) * inner
                    b0 = wi + s * inner * cols
                    for c in range(cols):
                        partial = x[a0] * w[b0 + c]
                        for q in range(1, inner):
                            partial += x[a0 + q] * w[b0 + q * cols + c]
                        out[oi + (s * rows + r) * cols + c] += partial


@njit(parallel=True, cache=True)
def _indexed_kernel_grad_kernel(x, g, grad_w, input_index, output_index, order, owner_ptr,
                                slices, rows, inner, cols):
    kernel_pose = slices * inner * cols
    for owner in prange(owner_ptr.size - 1):
        wi = owner * kernel_pose
        for t in range(owner_ptr[owner], owner_ptr[owner + 1]):
            task = order[t]
            xi = input_index[task]
            oi = output_index[task]
            for s in range(slices):
                for q in range(inner):
                    for c in range(cols):
                        a0 = xi + s * rows * inner + q
                        b0 = oi + s * rows * cols + c
                        partial = x[a0] * g[b0]
                        for r in range(1, rows):
                            partial += x[a0 + r * inner] * g[b0 + r * cols]
                        grad_w[wi + (s * inner + q) * cols + c] += partial


@njit(parallel=True, cache=True)
def _indexed_input_grad_kernel(g, w, grad_x, weight_index, output_index, window_index,
                               order, owner_ptr, slices, rows, inner, cols):
    input_pose = slices * rows * inner
    for owner in prange(owner_ptr.size - 1):
        start = owner_ptr[owner]
        stop = owner_ptr[owner + 1]
        if start < stop:
            base = owner * input_pose
            pending = np.zeros_like(grad_x[base:base + input_pose])
            current = window_index[order[start]]
            for t in range(start, stop):
                task = order[t]
                if window_index[task] != current:
                    for e in range(input_pose):
                        grad_x[base + e] += pending[e]
                        pending[e] = 0
                    current = window_index[task]
                oi = output_index[task]
                wi = weight_index[task]
                for s in range(slices):
                    for r in range(rows):
                        a0 = oi + (s * rows + r) * cols
                        for q in range(inner):
                            b0 = wi + (s * inner + q) * cols
                            partial = g[a0] * w[b0]
                            for c in range(1, cols):
                                partial += g[a0 + c] * w[b0 + c]
                            pending[(s * rows + r) * inner + q] += partial
            for e in range(input_pose):
                grad_x[base + e] += pending[e]


def _check_table(table: IndexTable, x: CapsuleTensor, kernel: ConvKernel) -> LoweringGeometry:
    check_operands(x, kernel)
    g = table.geometry
    if x.shape != g.window.input_shape or kernel.shape != g.kernel_shape:
        raise ShapeError(
            f"index table was built for input {g.window.input_shape} and kernel "
            f"{g.kernel_shape}, got {x.shape} and {kernel.shape}"
        )
    return g


def indexed_forward(x: CapsuleTensor, kernel: ConvKernel, table: IndexTable,
                    options: Optional[ExecutionOptions] = None) -> CapsuleTensor:
    """Capsule convolution as one flat parallel loop over precomputed tasks.

    Raises:
        ShapeError: If the table was built for other shapes
    """
    options = options or ExecutionOptions()
    g = _check_table(table, x, kernel)
    w = g.window
    out = np.zeros(int(np.prod(g.output_shape)), dtype=x.data.dtype)
    with worker_threads(options.workers):
        _indexed_forward_kernel(x.flat, kernel.flat, out, table.input_index, table.weight_index,
                                table.output_index, table.owner_ptr,
                                w.slices, w.rows, w.inner, g.cols)
    return CapsuleTensor(out.reshape(g.output_shape))


def indexed_backward(x: CapsuleTensor, kernel: ConvKernel, grad_out: CapsuleTensor,
                     table: IndexTable, options: Optional[ExecutionOptions] = None
                     ) -> Tuple[CapsuleTensor, ConvKernel]:
    """Input and kernel gradients driven by the same task table.

    Kernel poses and input locations each get exactly one owner, which sums
    its tasks in the canonical backward order.
    """
    options = options or ExecutionOptions()
    g = _check_table(table, x, kernel)
    check_grad_output(x, kernel, grad_out, table.config)
    w = g.window
    grad_x = np.zeros(x.flat.size, dtype=x.data.dtype)
    grad_w = np.zeros(kernel.flat.size, dtype=kernel.data.dtype)
    kernel_order = table.kernel_grad_order
    input_order = table.input_grad_order
    with worker_threads(options.workers):
        _indexed_kernel_grad_kernel(x.flat, grad_out.flat, grad_w, table.input_index,
                                    table.output_index, kernel_order.order,
                                    kernel_order.owner_ptr, w.slices, w.rows, w.inner, g.cols)
        _indexed_input_grad_kernel(grad_out.flat, kernel.flat, grad_x, table.weight_index,
                                   table.output_index, table.window_index, input_order.order,
                                   input_order.owner_ptr, w.slices, w.rows, w.inner, g.cols)
    return CapsuleTensor(grad_x.reshape(x.shape)), ConvKernel(grad_w.reshape(kernel.shape))
