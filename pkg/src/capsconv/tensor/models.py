"""Pose data model: pose dimensions, feature maps, kernels and conv settings."""

from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, Field

from capsconv.errors import NonFiniteError, ShapeError

ScalarKind = Literal["f32", "f64"]

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


def dtype_for(kind: ScalarKind) -> np.dtype:
    """Return the numpy dtype for a scalar kind name."""
    try:
        return DTYPES[kind]
    except KeyError:
        raise ValueError(f"Unknown scalar kind '{kind}', expected one of {sorted(DTYPES)}")


def scalar_kind_of(dtype: np.dtype) -> ScalarKind:
    """Return the scalar kind name for a numpy dtype."""
    for kind, candidate in DTYPES.items():
        if np.dtype(dtype) == candidate:
            return kind
    raise ShapeError(f"Unsupported scalar dtype {dtype}, expected float32 or float64")


class PoseDims(BaseModel):
    """Shape of one capsule pose: a stack of `slices` matrices of rows x cols."""

    slices: int = Field(..., ge=1, description="Slice count S")
    rows: int = Field(..., ge=1, description="Matrix rows of each slice")
    cols: int = Field(..., ge=1, description="Matrix cols of each slice")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"

    @property
    def size(self) -> int:
        """Number of scalar slots one pose occupies."""
        return self.slices * self.rows * self.cols

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.slices, self.rows, self.cols)

    @classmethod
    def parse(cls, text: str) -> "PoseDims":
        """Parse an ``SxRxC`` string such as ``1x4x4``."""
        parts = text.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"pose must look like SxRxC, got '{text}'")
        slices, rows, cols = (int(part) for part in parts)
        return cls(slices=slices, rows=rows, cols=cols)

    def __str__(self) -> str:
        return f"{self.slices}x{self.rows}x{self.cols}"


class ConvConfig(BaseModel):
    """Stride and symmetric zero padding of a capsule convolution."""

    stride: int = Field(default=1, ge=1, description="Step between windows")
    padding: int = Field(default=0, ge=0, description="Zero padding on every side")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"


def _checked_array(data: np.ndarray, name: str) -> np.ndarray:
    array = np.ascontiguousarray(data)
    if array.ndim != 7:
        raise ShapeError(f"{name} data must have 7 axes, got shape {array.shape}")
    scalar_kind_of(array.dtype)
    if any(extent < 1 for extent in array.shape):
        raise ShapeError(f"{name} extents must all be positive, got {array.shape}")
    if not np.isfinite(array).all():
        raise NonFiniteError(f"{name} contains NaN or Inf values")
    return array


@dataclass(frozen=True)
class CapsuleTensor:
    """Batched feature map of capsule poses.

    The buffer is a C-contiguous array laid out as [B][C][H][W][S][M][K];
    ``flat`` exposes it as the row-major scalar buffer.
    """

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _checked_array(self.data, "CapsuleTensor"))

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int,
              pose: PoseDims, kind: ScalarKind = "f64") -> "CapsuleTensor":
        shape = (batch, channels, height, width) + pose.shape
        return cls(np.zeros(shape, dtype=dtype_for(kind)))

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def pose(self) -> PoseDims:
        slices, rows, cols = self.data.shape[4:]
        return PoseDims(slices=slices, rows=rows, cols=cols)

    @property
    def scalar_kind(self) -> ScalarKind:
        return scalar_kind_of(self.data.dtype)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True)
class ConvKernel:
    """Capsule kernel laid out as [C'][C][k_h][k_w][S][K][N]."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _checked_array(self.data, "ConvKernel"))

    @property
    def out_channels(self) -> int:
        return self.data.shape[0]

    @property
    def in_channels(self) -> int:
        return self.data.shape[1]

    @property
    def k_h(self) -> int:
        return self.data.shape[2]

    @property
    def k_w(self) -> int:
        return self.data.shape[3]

    @property
    def pose(self) -> PoseDims:
        slices, rows, cols = self.data.shape[4:]
        return PoseDims(slices=slices, rows=rows, cols=cols)

    @property
    def scalar_kind(self) -> ScalarKind:
        return scalar_kind_of(self.data.dtype)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


def check_operands(x: CapsuleTensor, kernel: ConvKernel) -> None:
    """Raise ShapeError unless the kernel can be applied to the feature map."""
    if kernel.in_channels != x.channels:
        raise ShapeError(
            f"kernel in_channels {kernel.in_channels} != input channels {x.channels}"
        )
    x_pose, k_pose = x.pose, kernel.pose
    if k_pose.slices != x_pose.slices:
        raise ShapeError(f"kernel pose slices {k_pose.slices} != input slices {x_pose.slices}")
    if k_pose.rows != x_pose.cols:
        raise ShapeError(
            f"kernel pose inner dim {k_pose.rows} != input pose cols {x_pose.cols}"
        )
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError(f"scalar kinds differ: input {x.scalar_kind}, kernel {kernel.scalar_kind}")
