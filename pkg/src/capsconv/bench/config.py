"""Reading the flat key=value benchmark / check configuration file.

Format: ``[section]`` headers followed by ``key=value`` tokens, any number per
line. ``#`` starts a comment. Layer sections are named ``[layer.N]`` and are
applied in ascending N::

    [run]
    seed = 7
    workers = 4

    [input]
    batch=8 channels=1 height=20 width=20 pose=1x4x4

    [layer.1]
    k=3 stride=1 in_ch=1 out_ch=4 pose=1x4x4 engine=accel
"""

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator

from capsconv.engines.execution import AccumulationMode
from capsconv.errors import ConfigError, ShapeError
from capsconv.network.capsnet import InputSpec, LayerSpec, NetworkConfig
from capsconv.tensor.models import PoseDims, ScalarKind

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "default.conf"

_SECTION = re.compile(r"^\[([A-Za-z_][\w.]*)\]$")
_TOKEN = re.compile(r"([A-Za-z_][\w-]*)\s*=\s*([^\s=]+)")
_LAYER = re.compile(r"^layer\.(\d+)$")

# config key -> model field, per section kind
_LAYER_KEYS = {
    "k_h": "k_h", "k_w": "k_w", "stride": "stride", "padding": "padding",
    "in_ch": "in_channels", "out_ch": "out_channels", "pose": "pose", "engine": "engine",
}
_INPUT_KEYS = {
    "batch": "batch", "channels": "channels", "height": "height", "width": "width",
    "pose": "pose",
}


class RunSection(BaseModel):
    """Settings shared by check and bench."""

    seed: int = Field(default=0, ge=0, description="Base seed for inputs and parameters")
    workers: int = Field(default=4, ge=1, description="Threads for parallel kernels")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"


class CheckSection(BaseModel):
    """Instance counts and tolerances of the check suites."""

    instances: int = Field(default=100, ge=1, description="Forward oracle instances")
    gradient_instances: int = Field(default=20, ge=1, description="Backward oracle instances")
    degenerate_instances: int = Field(default=50, ge=1, description="Scalar-pose instances")
    adjoint_instances: int = Field(default=20, ge=1, description="Adjointness instances")
    worker_counts: List[int] = Field(default_factory=lambda: [1, 2, 8],
                                     description="Worker counts for the determinism suite")
    rtol: float = Field(default=1e-9, ge=0, description="Optimized-mode relative tolerance")
    f32_rtol: float = Field(default=1e-4, ge=0, description="Relative tolerance at f32")
    fd_rtol: float = Field(default=1e-6, ge=0, description="Finite-difference tolerance")
    network_fd_rtol: float = Field(default=1e-5, ge=0, description="Network gradient tolerance")
    adjoint_rtol: float = Field(default=1e-12, ge=0, description="Inner-product tolerance")
    fd_step: float = Field(default=1e-5, gt=0, description="Finite-difference step")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"

    @field_validator("worker_counts", mode="before")
    @classmethod
    def _split_counts(cls, value):
        if isinstance(value, str):
            return [part for part in value.split(",") if part]
        return value

    @field_validator("worker_counts")
    @classmethod
    def _positive_counts(cls, value: List[int]) -> List[int]:
        if not value or min(value) < 1:
            raise ValueError("worker counts must be a non-empty list of positive integers")
        return value


class BenchSection(BaseModel):
    """Benchmark methodology."""

    scalar: ScalarKind = Field(default="f32", description="Scalar kind of the timed network")
    reps: int = Field(default=5, ge=3, description="Timed repetitions (median reported)")
    warmup: int = Field(default=1, ge=1, description="Untimed warmup passes")
    mode: AccumulationMode = Field(default="reference", description="Accumulation mode")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"


class BenchConfig(BaseModel):
    """Everything a check or bench run needs."""

    run: RunSection = Field(default_factory=RunSection)
    check: CheckSection = Field(default_factory=CheckSection)
    bench: BenchSection = Field(default_factory=BenchSection)
    network: NetworkConfig
    source: str = Field(default="<string>", description="Where the config was read from")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"

    def with_overrides(self, workers: Optional[int] = None, scalar: Optional[str] = None,
                       seed: Optional[int] = None, reps: Optional[int] = None,
                       mode: Optional[str] = None) -> "BenchConfig":
        """Copy with command-line values replacing file values; None keeps the file value.

        Raises:
            ConfigError: If an override is out of range
        """
        run = self.run.model_dump()
        bench = self.bench.model_dump()
        network = {}
        for section, key, value in (("run", "workers", workers), ("run", "seed", seed),
                                    ("bench", "scalar", scalar), ("bench", "reps", reps),
                                    ("bench", "mode", mode)):
            if value is None:
                continue
            (run if section == "run" else bench)[key] = value
            if key in ("seed", "scalar"):
                network[key] = value
            try:
                RunSection(**run) if section == "run" else BenchSection(**bench)
            except ValidationError as e:
                raise ConfigError(e.errors()[0]["msg"], field=f"{section}.{key}")
        return self.model_copy(update={
            "run": RunSection(**run),
            "bench": BenchSection(**bench),
            "network": self.network.model_copy(update=network),
        })


@dataclass
class _Section:
    name: str
    line: int
    values: Dict[str, Tuple[str, int]] = field(default_factory=dict)


def _tokenize(text: str) -> List[_Section]:
    sections: List[_Section] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        header = _SECTION.match(line)
        if header:
            name = header.group(1)
            if any(section.name == name for section in sections):
                raise ConfigError(f"duplicate section [{name}]", line=number)
            sections.append(_Section(name, number))
            continue
        tokens = _TOKEN.findall(line)
        if not tokens or _TOKEN.sub("", line).strip():
            raise ConfigError(f"expected key=value pairs, got '{line}'", line=number)
        if not sections:
            raise ConfigError("key=value outside of a section", line=number)
        current = sections[-1]
        for key, value in tokens:
            if key in current.values:
                raise ConfigError("duplicate key", field=f"{current.name}.{key}", line=number)
            current.values[key] = (value, number)
    return sections


def _fields(section: _Section, keys: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    out = {}
    for key, (value, line) in section.values.items():
        if keys is None:
            out[key] = value
        elif key in keys:
            out[keys[key]] = value
        else:
            raise ConfigError("unknown key", field=f"{section.name}.{key}", line=line)
    return out


def _build(model, section: _Section, values: Dict[str, object], keys: Optional[Dict[str, str]]):
    """Validate one section, reporting the first failing field with its line."""
    try:
        return model(**values)
    except ValidationError as e:
        error = e.errors()[0]
        name = str(error["loc"][0]) if error["loc"] else None
        key = name
        if keys is not None and name is not None:
            key = next((k for k, v in keys.items() if v == name), name)
        line = section.values.get(key, (None, section.line))[1] if key else section.line
        raise ConfigError(error["msg"], field=f"{section.name}.{key}", line=line)


def _with_pose(section: _Section, values: Dict[str, object]) -> Dict[str, object]:
    if "pose" in values:
        try:
            values["pose"] = PoseDims.parse(str(values["pose"]))
        except (ValueError, ValidationError) as e:
            raise ConfigError(str(e).splitlines()[0], field=f"{section.name}.pose",
                              line=section.values["pose"][1])
    return values


def parse_config(text: str, source: str = "<string>") -> BenchConfig:
    """Parse config text into a validated BenchConfig.

    Raises:
        ConfigError: On syntax errors, unknown sections or keys, invalid
            values, or a layer chain whose shapes do not compose
    """
    sections = _tokenize(text)
    by_name = {section.name: section for section in sections}
    layers: List[Tuple[int, _Section]] = []
    for section in sections:
        match = _LAYER.match(section.name)
        if match:
            layers.append((int(match.group(1)), section))
        elif section.name not in ("run", "check", "bench", "input"):
            raise ConfigError(f"unknown section [{section.name}]", line=section.line)
    if "input" not in by_name:
        raise ConfigError("missing [input] section")
    if not layers:
        raise ConfigError("at least one [layer.N] section is required")

    plain = {}
    for name, model in (("run", RunSection), ("check", CheckSection), ("bench", BenchSection)):
        if name in by_name:
            plain[name] = _build(model, by_name[name], _fields(by_name[name]), None)
    run = plain.get("run", RunSection())
    bench = plain.get("bench", BenchSection())

    input_section = by_name["input"]
    input_spec = _build(InputSpec, input_section,
                        _with_pose(input_section, _fields(input_section, _INPUT_KEYS)),
                        _INPUT_KEYS)
    layer_specs = []
    for _, section in sorted(layers, key=lambda item: item[0]):
        values = dict(section.values)
        if "k" in values:
            kernel, line = values.pop("k")
            values.setdefault("k_h", (kernel, line))
            values.setdefault("k_w", (kernel, line))
        expanded = _Section(section.name, section.line, values)
        fields = _with_pose(expanded, _fields(expanded, _LAYER_KEYS))
        layer_specs.append(_build(LayerSpec, expanded, fields, _LAYER_KEYS))

    network = NetworkConfig(input=input_spec, layers=layer_specs, scalar=bench.scalar,
                            seed=run.seed)
    try:
        network.layer_shapes()
    except ShapeError as e:
        raise ConfigError(str(e), field="layer")
    config = BenchConfig(network=network, source=source, **plain)
    logger.debug("Loaded config from %s: %d layers", source, len(layer_specs))
    return config


def load_config(path: Optional[Union[str, Path]] = None) -> BenchConfig:
    """Read a config file, or the packaged default when path is None.

    Raises:
        ConfigError: If the file is malformed
        OSError: If the file cannot be read
    """
    if path is None:
        text = resources.files("capsconv.bench").joinpath(DEFAULT_CONFIG).read_text("utf-8")
        return parse_config(text, source=f"<packaged {DEFAULT_CONFIG}>")
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
