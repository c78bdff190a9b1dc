"""Benchmark report model and CSV emission."""

import csv
from pathlib import Path
from typing import List, Union

from pydantic import BaseModel, Field

from capsconv.engines.execution import AccumulationMode
from capsconv.tensor.models import ScalarKind

CSV_HEADER = ["engine", "total_ms", "forward_ms", "backward_ms", "speedup"]


class BenchRow(BaseModel):
    """Median timings of one engine."""

    engine: str = Field(..., description="Engine name")
    total_ms: float = Field(..., ge=0, description="forward_ms + backward_ms")
    forward_ms: float = Field(..., ge=0, description="Median forward wall time")
    backward_ms: float = Field(..., ge=0, description="Median backward wall time")
    speedup: float = Field(..., ge=0, description="Naive total / this engine's total")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"


class BenchReport(BaseModel):
    """Rows of engine timings plus what is needed to rerun the measurement."""

    rows: List[BenchRow] = Field(default_factory=list, description="One row per engine")
    scalar: ScalarKind = Field(default="f32", description="Scalar kind")
    workers: int = Field(default=1, ge=1, description="Worker threads in effect")
    reps: int = Field(default=5, ge=1, description="Timed repetitions")
    warmup: int = Field(default=1, ge=0, description="Warmup passes")
    seed: int = Field(default=0, ge=0, description="Input and parameter seed")
    mode: AccumulationMode = Field(default="reference", description="Accumulation mode")
    source: str = Field(default="", description="Config the run was read from")

    class Config:
        """Pydantic configuration."""
        frozen = True
        extra = "forbid"

    def row(self, engine: str) -> BenchRow:
        for row in self.rows:
            if row.engine == engine:
                return row
        raise KeyError(engine)

    def to_markdown(self) -> str:
        """Table in the layout of the timing comparison, with run metadata."""
        lines = [
            f"scalar={self.scalar} workers={self.workers} reps={self.reps} "
            f"warmup={self.warmup} seed={self.seed} mode={self.mode} config={self.source}",
            "",
            "| engine | total (ms) | forward (ms) | backward (ms) | speedup |",
            "|---|---:|---:|---:|---:|",
        ]
        for row in self.rows:
            lines.append(
                f"| {row.engine} | {row.total_ms:.3f} | {row.forward_ms:.3f} "
                f"| {row.backward_ms:.3f} | {row.speedup:.3f} |"
            )
        return "\n".join(lines)


def emit_csv(report: BenchReport, path: Union[str, Path]) -> Path:
    """Write the report rows as UTF-8 CSV with three decimals per float.

    Raises:
        OSError: If the file cannot be written
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in report.rows:
            writer.writerow([
                row.engine,
                f"{row.total_ms:.3f}",
                f"{row.forward_ms:.3f}",
                f"{row.backward_ms:.3f}",
                f"{row.speedup:.3f}",
            ])
    return path


def read_csv(path: Union[str, Path]) -> List[BenchRow]:
    """Parse a CSV written by :func:`emit_csv` back into rows.

    Raises:
        ValueError: If the header is not the expected one
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [
            BenchRow(engine=engine, total_ms=float(total), forward_ms=float(forward),
                     backward_ms=float(backward), speedup=float(speedup))
            for engine, total, forward, backward, speedup in reader
        ]
