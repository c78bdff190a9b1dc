"""A stack of capsule convolution layers with end-to-end forward and backward.

Layers are applied back to back with no nonlinearity in between.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from capsconv.engines.execution import ExecutionOptions
from capsconv.engines.registry import ConvEngine, EngineName, get_engine
from capsconv.errors import ShapeError, TapeMismatchError
from capsconv.tensor.layout import output_dims
from capsconv.tensor.models import (
    CapsuleTensor,
    ConvConfig,
    ConvKernel,
    PoseDims,
    ScalarKind,
    dtype_for,
)

logger = logging.getLogger(__name__)


class InputSpec(BaseModel):
    """Shape of the feature map fed to the first layer."""

    batch: int = Field(..., ge=1, description="Batch size B")
    channels: int = Field(..., ge=1, description="Input channels C")
    height: int = Field(..., ge=1, description="Input height H")
    width: int = Field(..., ge=1, description="Input width W")
    pose: PoseDims = Field(..., description="Input pose (S, M, K)")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.batch, self.channels, self.height, self.width) + self.pose.shape


class LayerSpec(BaseModel):
    """One capsule convolution layer."""

    k_h: int = Field(default=3, ge=1, description="Kernel height")
    k_w: int = Field(default=3, ge=1, description="Kernel width")
    in_channels: int = Field(..., ge=1, description="Input channels C")
    out_channels: int = Field(..., ge=1, description="Output channels C'")
    pose: PoseDims = Field(..., description="Kernel pose (S, K, N)")
    stride: int = Field(default=1, ge=1, description="Window step")
    padding: int = Field(default=0, ge=0, description="Zero padding")
    engine: EngineName = Field(default="accel", description="naive, accel or indexed")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"

    @property
    def conv(self) -> ConvConfig:
        return ConvConfig(stride=self.stride, padding=self.padding)

    @property
    def kernel_shape(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels, self.k_h, self.k_w) + self.pose.shape


class NetworkConfig(BaseModel):
    """Input shape, ordered layers, scalar kind and initialization seed."""

    input: InputSpec = Field(..., description="Shape of the network input")
    layers: List[LayerSpec] = Field(..., min_length=1, description="Layers in order")
    scalar: ScalarKind = Field(default="f64", description="Scalar kind")
    seed: int = Field(default=0, ge=0, description="Parameter initialization seed")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"

    def with_engine(self, engine: EngineName) -> "NetworkConfig":
        """Copy of this config with every layer running on ``engine``."""
        layers = [layer.model_copy(update={"engine": engine}) for layer in self.layers]
        return self.model_copy(update={"layers": layers})

    def layer_shapes(self) -> List[Tuple[int, ...]]:
        """Feature map shapes entering each layer, followed by the output shape.

        Raises:
            ShapeError: At the first layer whose input does not fit
        """
        batch = self.input.batch
        channels, height, width = self.input.channels, self.input.height, self.input.width
        slices, rows, cols = self.input.pose.shape
        shapes = [self.input.shape]
        for index, layer in enumerate(self.layers):
            if layer.in_channels != channels:
                raise ShapeError(f"layer {index}: in_channels {layer.in_channels} != {channels}")
            if layer.pose.slices != slices or layer.pose.rows != cols:
                raise ShapeError(
                    f"layer {index}: kernel pose {layer.pose} does not pair with "
                    f"input pose {slices}x{rows}x{cols}"
                )
            try:
                height, width = output_dims(height, width, layer.k_h, layer.k_w, layer.conv)
            except ShapeError as e:
                raise ShapeError(f"layer {index}: {e}")
            channels, cols = layer.out_channels, layer.pose.cols
            shapes.append((batch, channels, height, width, slices, rows, cols))
        return shapes

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.layer_shapes()[-1]


def default_network_config(scalar: ScalarKind = "f32", seed: int = 0,
                           engine: EngineName = "accel") -> NetworkConfig:
    """Five 3x3 layers, channels 1 -> 4 -> 8 -> 8 -> 8 -> 8, 4x4 poses, 20x20 input."""
    channels = [1, 4, 8, 8, 8, 8]
    pose = PoseDims(slices=1, rows=4, cols=4)
    layers = [
        LayerSpec(in_channels=c_in, out_channels=c_out, pose=pose, engine=engine)
        for c_in, c_out in zip(channels[:-1], channels[1:])
    ]
    return NetworkConfig(
        input=InputSpec(batch=8, channels=1, height=20, width=20, pose=pose),
        layers=layers,
        scalar=scalar,
        seed=seed,
    )


def init_parameters(config: NetworkConfig, seed: Optional[int] = None) -> List[ConvKernel]:
    """Draw every kernel uniformly in [-0.5, 0.5] scaled by 1/sqrt(k_h * k_w * C * K).

    Deterministic given the seed (defaults to ``config.seed``).
    """
    config.layer_shapes()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = dtype_for(config.scalar)
    kernels = []
    for layer in config.layers:
        fan_in = layer.k_h * layer.k_w * layer.in_channels * layer.pose.rows
        values = rng.uniform(-0.5, 0.5, size=layer.kernel_shape) / np.sqrt(fan_in)
        kernels.append(ConvKernel(values.astype(dtype)))
    return kernels


@dataclass
class ActivationTape:
    """Per-layer inputs recorded by a forward pass."""
    network_id: int
    inputs: List[CapsuleTensor] = field(default_factory=list)


class CapsNet:
    """Capsule convolution layers with their kernels and engines."""

    def __init__(self, config: NetworkConfig, kernels: Optional[List[ConvKernel]] = None,
                 options: Optional[ExecutionOptions] = None):
        """Initialize the network.

        Args:
            config: Layer stack description
            kernels: Parameters; drawn with init_parameters when omitted
            options: Execution options for the accelerated engines

        Raises:
            ShapeError: If the layer chain or the given kernels do not fit
        """
        self.config = config
        self.shapes = config.layer_shapes()
        self.options = options or ExecutionOptions()
        self.kernels = kernels if kernels is not None else init_parameters(config)
        if len(self.kernels) != len(config.layers):
            raise ShapeError(f"{len(self.kernels)} kernels given for {len(config.layers)} layers")
        for index, (layer, kernel) in enumerate(zip(config.layers, self.kernels)):
            if kernel.shape != layer.kernel_shape:
                raise ShapeError(f"layer {index}: kernel shape {kernel.shape} != {layer.kernel_shape}")
        engines: Dict[str, ConvEngine] = {}
        self.engines = []
        for layer in config.layers:
            if layer.engine not in engines:
                engines[layer.engine] = get_engine(layer.engine, self.options)
            self.engines.append(engines[layer.engine])

    @property
    def depth(self) -> int:
        return len(self.config.layers)

    def forward(self, x: CapsuleTensor) -> Tuple[CapsuleTensor, ActivationTape]:
        return network_forward(self, x)

    def backward(self, tape: ActivationTape, grad_out: CapsuleTensor
                 ) -> Tuple[CapsuleTensor, List[ConvKernel]]:
        return network_backward(self, tape, grad_out)


def network_forward(net: CapsNet, x: CapsuleTensor) -> Tuple[CapsuleTensor, ActivationTape]:
    """Apply every layer in order, recording each layer's input.

    Raises:
        ShapeError: If x does not match the input spec or a layer does not fit
    """
    if x.shape != net.shapes[0]:
        raise ShapeError(f"network input shape {x.shape} != expected {net.shapes[0]}")
    tape = ActivationTape(network_id=id(net))
    current = x
    for index, (layer, kernel, engine) in enumerate(
            zip(net.config.layers, net.kernels, net.engines)):
        tape.inputs.append(current)
        try:
            current = engine.forward(current, kernel, layer.conv)
        except ShapeError as e:
            raise ShapeError(f"layer {index}: {e}")
        logger.debug("layer %d (%s) -> %s", index, engine.name, current.shape)
    return current, tape


def network_backward(net: CapsNet, tape: ActivationTape, grad_out: CapsuleTensor
                     ) -> Tuple[CapsuleTensor, List[ConvKernel]]:
    """Chain rule over the layers in reverse order.

    Returns:
        (gradient with respect to the network input, per-layer kernel gradients)

    Raises:
        TapeMismatchError: If the tape was not recorded by this network or the
            output gradient has the wrong shape
    """
    if tape.network_id != id(net) or len(tape.inputs) != net.depth:
        raise TapeMismatchError("activation tape was not recorded by this network")
    for index, recorded in enumerate(tape.inputs):
        if recorded.shape != net.shapes[index]:
            raise TapeMismatchError(f"tape entry {index} has shape {recorded.shape}")
    if grad_out.shape != net.shapes[-1]:
        raise TapeMismatchError(
            f"output gradient shape {grad_out.shape} != network output {net.shapes[-1]}"
        )
    grad = grad_out
    kernel_grads: List[Optional[ConvKernel]] = [None] * net.depth
    for index in reversed(range(net.depth)):
        layer = net.config.layers[index]
        grad, kernel_grads[index] = net.engines[index].backward(
            tape.inputs[index], net.kernels[index], grad, layer.conv
        )
    return grad, kernel_grads
