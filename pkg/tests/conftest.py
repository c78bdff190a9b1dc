import numpy as np
import pytest

from capsconv.engines import ExecutionOptions
from capsconv.tensor import CapsuleTensor, ConvConfig, ConvKernel

ONES_OUTPUT = (1, 1, 2, 2, 3, 3, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ones_operands():
    """All-ones 5x5 map of 3x3x3 poses and an all-ones 4x4 kernel."""
    x = CapsuleTensor(np.ones((1, 1, 5, 5, 3, 3, 3)))
    kernel = ConvKernel(np.ones((1, 1, 4, 4, 3, 3, 3)))
    return x, kernel, ConvConfig()


@pytest.fixture
def reference_options():
    return ExecutionOptions(mode="reference", workers=2)


@pytest.fixture
def optimized_options():
    return ExecutionOptions(mode="optimized", workers=2)


@pytest.fixture
def make_operands(rng):
    """Factory for random f64 operands of a given geometry."""

    def make(batch=1, in_ch=2, out_ch=3, height=4, width=4, k=2, pose=(1, 2, 2, 2),
             stride=1, padding=0):
        slices, rows, inner, cols = pose
        x = rng.standard_normal((batch, in_ch, height, width, slices, rows, inner))
        w = rng.standard_normal((out_ch, in_ch, k, k, slices, inner, cols))
        return CapsuleTensor(x), ConvKernel(w), ConvConfig(stride=stride, padding=padding)

    return make
