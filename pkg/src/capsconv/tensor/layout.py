"""Shape law and row-major offset arithmetic for the canonical layouts."""

from typing import Sequence, Tuple, Union

import numpy as np

from capsconv.errors import BoundsError, ShapeError
from capsconv.tensor.models import ConvConfig

Coordinate = Union[int, np.ndarray]


def output_dims(height: int, width: int, k_h: int, k_w: int, cfg: ConvConfig) -> Tuple[int, int]:
    """Spatial output extent of a convolution.

    Args:
        height: Input height H
        width: Input width W
        k_h: Kernel height
        k_w: Kernel width
        cfg: Stride and padding

    Returns:
        (H', W') with H' = floor((H + 2*padding - k_h) / stride) + 1

    Raises:
        ShapeError: If the kernel is larger than the padded input
    """
    if min(height, width, k_h, k_w) < 1:
        raise ShapeError(f"extents must be positive: H={height} W={width} k={k_h}x{k_w}")
    padded_h = height + 2 * cfg.padding
    padded_w = width + 2 * cfg.padding
    if k_h > padded_h or k_w > padded_w:
        raise ShapeError(
            f"kernel {k_h}x{k_w} larger than padded input {padded_h}x{padded_w}"
        )
    return (padded_h - k_h) // cfg.stride + 1, (padded_w - k_w) // cfg.stride + 1


def row_major_strides(dims: Sequence[int]) -> Tuple[int, ...]:
    """Element strides of a row-major array with the given extents."""
    strides = []
    step = 1
    for extent in reversed(dims):
        strides.append(step)
        step *= int(extent)
    return tuple(reversed(strides))


def linear_offset(coords: Sequence[Coordinate], dims: Sequence[int]) -> Coordinate:
    """Row-major offset of a coordinate vector.

    Coordinates may be Python ints or broadcastable integer arrays; in the
    array case the result is an int64 array of offsets.

    Raises:
        ShapeError: If coords and dims differ in length
        BoundsError: If any coordinate lies outside its extent
    """
    if len(coords) != len(dims):
        raise ShapeError(f"{len(coords)} coordinates given for {len(dims)} extents")
    strides = row_major_strides(dims)
    if all(isinstance(c, (int, np.integer)) for c in coords):
        offset = 0
        for axis, (coord, extent, stride) in enumerate(zip(coords, dims, strides)):
            if not 0 <= coord < extent:
                raise BoundsError(f"coordinate {coord} out of range [0, {extent}) on axis {axis}")
            offset += int(coord) * stride
        return offset

    offset = np.zeros((), dtype=np.int64)
    for axis, (coord, extent, stride) in enumerate(zip(coords, dims, strides)):
        coord = np.asarray(coord, dtype=np.int64)
        if coord.size and (coord.min() < 0 or coord.max() >= extent):
            raise BoundsError(f"coordinates out of range [0, {extent}) on axis {axis}")
        offset = offset + coord * stride
    return offset


def unravel_offset(offset: int, dims: Sequence[int]) -> Tuple[int, ...]:
    """Inverse of :func:`linear_offset` for a scalar offset."""
    total = int(np.prod(dims, dtype=np.int64))
    if not 0 <= offset < total:
        raise BoundsError(f"offset {offset} out of range [0, {total})")
    coords = []
    for stride in row_major_strides(dims):
        coord, offset = divmod(offset, stride)
        coords.append(coord)
    return tuple(coords)
