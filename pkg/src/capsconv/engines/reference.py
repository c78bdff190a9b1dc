"""Naive loop-nest capsule convolution used as the correctness oracle."""

import logging
from typing import Callable, Tuple

import numpy as np

from capsconv.errors import ShapeError
from capsconv.tensor.kernels import pose_matmul_into
from capsconv.tensor.layout import output_dims
from capsconv.tensor.models import CapsuleTensor, ConvConfig, ConvKernel, check_operands

logger = logging.getLogger(__name__)


def expected_output_shape(x: CapsuleTensor, kernel: ConvKernel, cfg: ConvConfig) -> Tuple[int, ...]:
    """Shape (B, C', H', W', S, M, N) of the convolution of x by kernel."""
    check_operands(x, kernel)
    h_out, w_out = output_dims(x.height, x.width, kernel.k_h, kernel.k_w, cfg)
    return (x.batch, kernel.out_channels, h_out, w_out,
            x.pose.slices, x.pose.rows, kernel.pose.cols)


def check_grad_output(x: CapsuleTensor, kernel: ConvKernel, grad_out: CapsuleTensor,
                      cfg: ConvConfig) -> None:
    """Raise ShapeError unless grad_out has the forward output's shape and dtype."""
    expected = expected_output_shape(x, kernel, cfg)
    if grad_out.shape != expected:
        raise ShapeError(f"output gradient shape {grad_out.shape} != forward output {expected}")
    if grad_out.data.dtype != x.data.dtype:
        raise ShapeError("output gradient scalar kind differs from the input's")


def naive_forward(x: CapsuleTensor, kernel: ConvKernel, cfg: ConvConfig) -> CapsuleTensor:
    """Capsule convolution as a plain loop nest over pose products.

    Each output pose is the sum, in (in_channel, kernel row, kernel col)
    order, of the products of the input poses under the window with the
    matching kernel poses. Reads from the padded border contribute nothing.

    Raises:
        ShapeError: If the operands or the shape law do not agree
        NonFiniteError: If the result overflows
    """
    shape = expected_output_shape(x, kernel, cfg)
    batch, out_channels, h_out, w_out = shape[:4]
    in_channels, height, width = x.channels, x.height, x.width
    stride, pad = cfg.stride, cfg.padding
    xd, wd = x.data, kernel.data
    out = np.zeros(shape, dtype=xd.dtype)

    for b in range(batch):
        for p in range(out_channels):
            for i in range(h_out):
                row = i * stride - pad
                for j in range(w_out):
                    col = j * stride - pad
                    acc = out[b, p, i, j]
                    for s in range(in_channels):
                        for m in range(kernel.k_h):
                            y = row + m
                            if not 0 <= y < height:
                                continue
                            for n in range(kernel.k_w):
                                xx = col + n
                                if not 0 <= xx < width:
                                    continue
                                pose_matmul_into(xd[b, s, y, xx], wd[p, s, m, n], acc)
    return CapsuleTensor(out)


def naive_backward(x: CapsuleTensor, kernel: ConvKernel, grad_out: CapsuleTensor,
                   cfg: ConvConfig) -> Tuple[CapsuleTensor, ConvKernel]:
    """Gradients of the capsule convolution with respect to input and kernel.

    The kernel gradient of each pose is summed over output positions
    (b, i, j) in ascending order. The input gradient of each location is
    summed over output positions in ascending order, each term being the sum
    over out-channels of dO times the transposed kernel pose.

    Raises:
        ShapeError: If grad_out does not have the forward output's shape
    """
    check_grad_output(x, kernel, grad_out, cfg)
    batch, out_channels, h_out, w_out = grad_out.shape[:4]
    in_channels, height, width = x.channels, x.height, x.width
    stride, pad = cfg.stride, cfg.padding
    xd, wd, gd = x.data, kernel.data, grad_out.data
    x_t = xd.swapaxes(-1, -2)
    w_t = wd.swapaxes(-1, -2)
    grad_x = np.zeros_like(xd)
    grad_w = np.zeros_like(wd)

    for b in range(batch):
        for i in range(h_out):
            row = i * stride - pad
            for j in range(w_out):
                col = j * stride - pad
                for s in range(in_channels):
                    for m in range(kernel.k_h):
                        y = row + m
                        if not 0 <= y < height:
                            continue
                        for n in range(kernel.k_w):
                            xx = col + n
                            if not 0 <= xx < width:
                                continue
                            partial = np.zeros_like(xd[b, s, y, xx])
                            for p in range(out_channels):
                                g = gd[b, p, i, j]
                                pose_matmul_into(x_t[b, s, y, xx], g, grad_w[p, s, m, n])
                                pose_matmul_into(g, w_t[p, s, m, n], partial)
                            grad_x[b, s, y, xx] += partial
    return CapsuleTensor(grad_x), ConvKernel(grad_w)


def scalar_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Plain scalar convolution of (B, C, H, W) by (C', C, k_h, k_w).

    Written independently of the capsule engines; products are added in
    (in_channel, kernel row, kernel col) order.
    """
    batch, in_channels, height, width = x.shape
    out_channels, _, k_h, k_w = w.shape
    h_out = (height + 2 * padding - k_h) // stride + 1
    w_out = (width + 2 * padding - k_w) // stride + 1
    out = np.zeros((batch, out_channels, h_out, w_out), dtype=x.dtype)
    for b in range(batch):
        for p in range(out_channels):
            for i in range(h_out):
                for j in range(w_out):
                    total = x.dtype.type(0)
                    for c in range(in_channels):
                        for m in range(k_h):
                            for n in range(k_w):
                                y = i * stride + m - padding
                                xx = j * stride + n - padding
                                if 0 <= y < height and 0 <= xx < width:
                                    total += x[b, c, y, xx] * w[p, c, m, n]
                    out[b, p, i, j] = total
    return out


def squared_loss(out: CapsuleTensor) -> float:
    """L = sum(O**2) / 2, whose gradient with respect to O is O itself."""
    return 0.5 * float(np.sum(out.data.astype(np.float64) ** 2))


def loss_and_grad(out: CapsuleTensor) -> Tuple[float, CapsuleTensor]:
    """Squared loss of an output together with its gradient, which is the output."""
    return squared_loss(out), out


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat array.

    Args:
        loss_fn: Deterministic function of a flat parameter array
        x: Point at which to differentiate
        h: Step size, must be positive

    Returns:
        Array shaped like x with (loss(x + h e_i) - loss(x - h e_i)) / 2h
    """
    if h <= 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    x = np.array(x, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(x)
    for index in range(x.size):
        original = x[index]
        x[index] = original + h
        upper = loss_fn(x)
        x[index] = original - h
        lower = loss_fn(x)
        x[index] = original
        grad[index] = (upper - lower) / (2.0 * h)
    return grad


def max_relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Largest absolute difference scaled by the largest magnitude present."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"cannot compare shapes {actual.shape} and {expected.shape}")
    if actual.size == 0:
        return 0.0
    scale = max(np.abs(actual).max(), np.abs(expected).max())
    diff = np.abs(actual - expected).max()
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)
