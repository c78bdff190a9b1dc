"""Engine objects with a uniform forward/backward interface."""

import logging
from collections import OrderedDict
from typing import Literal, Optional, Tuple

from capsconv.engines.execution import ExecutionOptions
from capsconv.engines.indexed import IndexTable, build_index_table, indexed_backward, indexed_forward
from capsconv.engines.lowering import accel_backward, accel_forward
from capsconv.engines.reference import naive_backward, naive_forward
from capsconv.tensor.models import CapsuleTensor, ConvConfig, ConvKernel

logger = logging.getLogger(__name__)

EngineName = Literal["naive", "accel", "indexed"]
ENGINE_NAMES: Tuple[EngineName, ...] = ("naive", "accel", "indexed")


class ConvEngine:
    """Base class: a named capsule convolution implementation."""

    name: str = ""

    def __init__(self, options: Optional[ExecutionOptions] = None):
        self.options = options or ExecutionOptions()

    def forward(self, x: CapsuleTensor, kernel: ConvKernel, cfg: ConvConfig) -> CapsuleTensor:
        raise NotImplementedError

    def backward(self, x: CapsuleTensor, kernel: ConvKernel, grad_out: CapsuleTensor,
                 cfg: ConvConfig) -> Tuple[CapsuleTensor, ConvKernel]:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(mode={self.options.mode!r}, workers={self.options.workers})"


class NaiveEngine(ConvEngine):
    """Single-threaded loop nest; ignores the execution options."""

    name = "naive"

    def forward(self, x, kernel, cfg):
        return naive_forward(x, kernel, cfg)

    def backward(self, x, kernel, grad_out, cfg):
        return naive_backward(x, kernel, grad_out, cfg)


class LoweredEngine(ConvEngine):
    """im2col lowering to strided batched products."""

    name = "accel"

    def forward(self, x, kernel, cfg):
        return accel_forward(x, kernel, cfg, self.options)

    def backward(self, x, kernel, grad_out, cfg):
        return accel_backward(x, kernel, grad_out, cfg, self.options)


class IndexedEngine(ConvEngine):
    """Precomputed task table; the most recently used geometries keep their tables."""

    name = "indexed"
    max_tables = 8

    def __init__(self, options: Optional[ExecutionOptions] = None):
        super().__init__(options)
        self._tables: "OrderedDict[tuple, IndexTable]" = OrderedDict()

    def table_for(self, x: CapsuleTensor, kernel: ConvKernel, cfg: ConvConfig) -> IndexTable:
        key = (x.shape, kernel.shape, cfg.stride, cfg.padding)
        table = self._tables.get(key)
        if table is not None:
            self._tables.move_to_end(key)
            return table
        table = build_index_table(x.shape, kernel.shape, cfg)
        self._tables[key] = table
        if len(self._tables) > self.max_tables:
            self._tables.popitem(last=False)
        logger.debug("Built index table for %s with %d tasks", key, len(table))
        return table

    def forward(self, x, kernel, cfg):
        return indexed_forward(x, kernel, self.table_for(x, kernel, cfg), self.options)

    def backward(self, x, kernel, grad_out, cfg):
        return indexed_backward(x, kernel, grad_out, self.table_for(x, kernel, cfg), self.options)


_ENGINES = {
    "naive": NaiveEngine,
    "accel": LoweredEngine,
    "indexed": IndexedEngine,
}


def get_engine(name: str, options: Optional[ExecutionOptions] = None) -> ConvEngine:
    """Instantiate an engine by name.

    Raises:
        ValueError: If the name is unknown
    """
    try:
        engine_cls = _ENGINES[name]
    except KeyError:
        raise ValueError(f"Unknown engine '{name}', expected one of {list(ENGINE_NAMES)}")
    return engine_cls(options)
