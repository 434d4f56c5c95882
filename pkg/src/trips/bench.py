"""Wall-clock timing of forwards with and without patch selection."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .backbone import ModelConfig, SelectionConfig, ViTTrips, encode
from .kernels import SeededRng, seeded_init


@dataclass
class BenchResult:
    label: str
    selection: SelectionConfig
    times: list[float]
    final_length: int

    @property
    def median(self) -> float:
        return statistics.median(self.times)

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "locations": list(self.selection.locations),
            "rates": list(self.selection.rates),
            "median_s": self.median,
            "times_s": self.times,
            "final_length": self.final_length,
        }


def time_forward(model: ViTTrips, image, guidance, repeats: int = 5, warmup: int = 1) -> tuple[list[float], int]:
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    for _ in range(warmup):
        encode(model, image, guidance)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        out, _ = encode(model, image, guidance)
        times.append(time.perf_counter() - start)
    return times, len(out)


def benchmark(
    config: ModelConfig,
    selections: dict[str, SelectionConfig],
    repeats: int = 5,
    warmup: int = 1,
    seed: int = 0,
) -> list[BenchResult]:
    """Time one baseline (no selection) plus each named selection on the same weights.

    Runs are interleaved round-robin so slow drift in machine load spreads
    evenly over the configurations.
    """
    model = ViTTrips.from_seed(config)
    rng = SeededRng(seed)
    image = np.clip(0.5 + 0.2 * rng.normal(3 * config.image_size**2), 0, 1).reshape(
        3, config.image_size, config.image_size
    )
    guidance = seeded_init(config.width, 1.0, rng)
    runs = {"baseline": SelectionConfig(), **selections}
    models = {label: model.with_config(selection=sel) for label, sel in runs.items()}
    for m in models.values():
        for _ in range(warmup):
            encode(m, image, guidance)
    times: dict[str, list[float]] = {label: [] for label in runs}
    lengths: dict[str, int] = {}
    for _ in range(repeats):
        for label, m in models.items():
            t, lengths[label] = time_forward(m, image, guidance, repeats=1, warmup=0)
            times[label].extend(t)
    return [BenchResult(label, runs[label], times[label], lengths[label]) for label in runs]


def speedups(results: list[BenchResult]) -> dict[str, float]:
    """Baseline median time over each configuration's median time."""
    base = next(r for r in results if r.label == "baseline").median
    return {r.label: base / r.median for r in results}
