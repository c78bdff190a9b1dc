"""Capsule convolution network built from the engines."""

from capsconv.network.capsnet import (
    ActivationTape,
    CapsNet,
    InputSpec,
    LayerSpec,
    NetworkConfig,
    default_network_config,
    init_parameters,
    network_backward,
    network_forward,
)

__all__ = [
    "ActivationTape",
    "CapsNet",
    "InputSpec",
    "LayerSpec",
    "NetworkConfig",
    "default_network_config",
    "init_parameters",
    "network_backward",
    "network_forward",
]
