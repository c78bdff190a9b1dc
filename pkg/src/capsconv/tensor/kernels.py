"""Small-matrix multiply primitive shared by every engine.

Every scalar of a pose product is a fresh partial sum over the inner index in
ascending order, started from the first product. Callers add that partial into
their accumulator, which pins the canonical accumulation order.
"""

import numpy as np
from numba import njit

from capsconv.errors import ShapeError


@njit(cache=True)
def pose_matmul_into(a, b, acc):
    """acc[s] += a[s] @ b[s] for every slice s, inner index ascending."""
    slices, rows, inner = a.shape
    cols = b.shape[2]
    for s in range(slices):
        for r in range(rows):
            for c in range(cols):
                partial = a[s, r, 0] * b[s, 0, c]
                for q in range(1, inner):
                    partial += a[s, r, q] * b[s, q, c]
                acc[s, r, c] += partial


def pose_matmul_accumulate(in_pose: np.ndarray, kernel_pose: np.ndarray,
                           acc: np.ndarray) -> np.ndarray:
    """Accumulate the slice-wise product of two poses into ``acc``.

    Args:
        in_pose: (S, M, K) block
        kernel_pose: (S, K, N) block
        acc: (S, M, N) block, updated in place

    Returns:
        The updated ``acc``

    Raises:
        ShapeError: On slice count, inner dimension or accumulator mismatch
    """
    if in_pose.ndim != 3 or kernel_pose.ndim != 3 or acc.ndim != 3:
        raise ShapeError("pose blocks must be (S, rows, cols) arrays")
    slices, rows, inner = in_pose.shape
    if kernel_pose.shape[0] != slices or acc.shape[0] != slices:
        raise ShapeError(
            f"slice counts differ: {slices}, {kernel_pose.shape[0]}, {acc.shape[0]}"
        )
    if kernel_pose.shape[1] != inner:
        raise ShapeError(f"inner dims differ: {inner} vs {kernel_pose.shape[1]}")
    if acc.shape[1:] != (rows, kernel_pose.shape[2]):
        raise ShapeError(
            f"accumulator {acc.shape[1:]} does not match product {(rows, kernel_pose.shape[2])}"
        )
    if not (in_pose.dtype == kernel_pose.dtype == acc.dtype):
        raise ShapeError("pose blocks must share one scalar dtype")
    pose_matmul_into(in_pose, kernel_pose, acc)
    return acc
