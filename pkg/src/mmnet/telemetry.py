"""Portable resource telemetry: wall time, transient bytes, parameters, MACs."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, TextIO

import numpy as np

from .model import ArchitectureSpec, count_flops, count_params, forward
from .weights import WeightStore

SCHEMA = "mmnet.telemetry/1"
WARMUP = 3
# fields that legitimately differ between identical runs
TIMING_FIELDS = ("ms_per_forward",)


@dataclass
class TelemetryRecord:
    phase: str
    ms_per_forward: float
    peak_bytes: int
    params: int
    head_params: int
    flops: int
    batch_size: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "phase" and v < 0:
                raise ValueError(f"telemetry field {k} is negative")

    def to_json(self) -> str:
        return json.dumps({"schema": SCHEMA, **asdict(self)}, sort_keys=True)


def measure_inference(
    spec: ArchitectureSpec,
    weights: WeightStore,
    batch: np.ndarray,
    repeats: int = 5,
    warmup: int = WARMUP,
    phase: str = "infer",
) -> TelemetryRecord:
    """Time ``repeats`` inference passes after discarding ``warmup`` of them."""
    stats: dict = {}
    times = []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        forward(spec, weights, batch, "infer", stats=stats, batch_size=len(batch))
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    return TelemetryRecord(
        phase=phase,
        ms_per_forward=1000.0 * float(np.median(times)),
        peak_bytes=int(stats.get("peak_bytes", 0)),
        params=count_params(spec),
        head_params=count_params(spec, "head"),
        flops=count_flops(spec) * len(batch),
        batch_size=len(batch),
    )


def telemetry_report(records: Iterable[TelemetryRecord], out: Optional[TextIO] = None) -> list[str]:
    lines = [r.to_json() for r in records]
    if out is not None:
        for line in lines:
            print(line, file=out)
    return lines
