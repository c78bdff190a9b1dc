"""Pose data model, layouts and the small-matrix multiply primitive."""

from capsconv.tensor.kernels import pose_matmul_accumulate
from capsconv.tensor.layout import linear_offset, output_dims, row_major_strides, unravel_offset
from capsconv.tensor.models import (
    CapsuleTensor,
    ConvConfig,
    ConvKernel,
    PoseDims,
    ScalarKind,
    check_operands,
    dtype_for,
)

__all__ = [
    "CapsuleTensor",
    "ConvConfig",
    "ConvKernel",
    "PoseDims",
    "ScalarKind",
    "check_operands",
    "dtype_for",
    "linear_offset",
    "output_dims",
    "pose_matmul_accumulate",
    "row_major_strides",
    "unravel_offset",
]
