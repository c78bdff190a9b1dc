"""Capsule convolution engines: naive oracle, staged lowering and index table."""

from capsconv.engines.execution import ExecutionOptions, worker_threads
from capsconv.engines.indexed import (
    IndexTable,
    IndexTriple,
    build_index_table,
    indexed_backward,
    indexed_forward,
)
from capsconv.engines.lowering import (
    BatchPlan,
    BatchProduct,
    ExtendedGradient,
    ExtendedInput,
    ExtendedKernel,
    FlattenedInput,
    LoweringGeometry,
    WindowGeometry,
    accel_backward,
    accel_forward,
    batched_matmul,
    capsule_col2im,
    capsule_im2col,
    input_extend,
    input_reduce,
    kernel_extend,
    output_extend,
    output_reduce,
)
from capsconv.engines.reference import (
    finite_diff_grad,
    loss_and_grad,
    max_relative_error,
    naive_backward,
    naive_forward,
    scalar_conv2d,
    squared_loss,
)
from capsconv.engines.registry import ENGINE_NAMES, ConvEngine, get_engine

__all__ = [
    "BatchPlan", "BatchProduct", "ConvEngine", "ENGINE_NAMES", "ExecutionOptions",
    "ExtendedGradient", "ExtendedInput", "ExtendedKernel", "FlattenedInput", "IndexTable",
    "IndexTriple", "LoweringGeometry", "WindowGeometry", "accel_backward", "accel_forward",
    "batched_matmul", "build_index_table", "capsule_col2im", "capsule_im2col",
    "finite_diff_grad", "get_engine", "indexed_backward", "indexed_forward", "input_extend",
    "input_reduce", "kernel_extend", "loss_and_grad", "max_relative_error", "naive_backward", "naive_forward",
    "output_extend", "output_reduce", "scalar_conv2d", "squared_loss", "worker_threads",
]
