"""capsconv package."""

__version__ = "0.1.0"

from capsconv.engines import ExecutionOptions, get_engine
from capsconv.network import CapsNet, NetworkConfig, default_network_config
from capsconv.tensor import CapsuleTensor, ConvConfig, ConvKernel

__all__ = [
    "CapsNet",
    "CapsuleTensor",
    "ConvConfig",
    "ConvKernel",
    "ExecutionOptions",
    "NetworkConfig",
    "default_network_config",
    "get_engine",
]
