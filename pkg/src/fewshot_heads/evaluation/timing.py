"""Wallclock timing harness for few-shot learning and per-frame inference."""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fewshot_heads.data_pipeline import FrameRecord
from fewshot_heads.evaluation.protocols import ModelFactory

MIN_REPETITIONS = 20


@dataclass(frozen=True)
class TimingRow:
    kind: str  # "few_shot_learning" or "inference_per_frame"
    t: int
    mean_s: float
    std_s: float
    repetitions: int


@dataclass
class TimingTable:
    rows: list[TimingRow]
    hardware: str = field(default_factory=lambda: f"{platform.platform()} / {os.cpu_count()} cpu")

    def to_csv(self, path: Path | str) -> None:
        lines = ["kind,t,mean_s,std_s,repetitions"]
        lines += [f"{r.kind},{r.t},{r.mean_s!r},{r.std_s!r},{r.repetitions}" for r in self.rows]
        lines.append(f"# hardware: {self.hardware}")
        Path(path).write_text("\n".join(lines) + "\n")


def _timed(fn, repetitions: int) -> tuple[float, float]:
    fn()  # warm-up, excluded from the statistics
    samples = []
    for _ in range(repetitions):
        started = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - started)
    arr = np.asarray(samples)
    return float(arr.mean()), float(arr.std())


def measure_times(
    personalize: ModelFactory,
    frames: Sequence[FrameRecord],
    t_values: Sequence[int],
    repetitions: int = MIN_REPETITIONS,
) -> TimingTable:
    """Mean wallclock of personalization at each T, plus single-frame inference.

    Personalization timing includes everything the factory does (for the
    feed-forward variant that is embedding estimation plus projection, with no
    optimizer step). Inference is timed one frame per call.
    """
    if repetitions < MIN_REPETITIONS:
        raise ValueError(f"use at least {MIN_REPETITIONS} repetitions, got {repetitions}")
    t_values = [int(t) for t in t_values]
    if any(t < 1 for t in t_values):
        raise ValueError("every T must be >= 1")
    if len(frames) < max(t_values):
        raise ValueError(f"need {max(t_values)} frames, have {len(frames)}")

    rows = []
    synthesize = None
    for t in t_values:
        subset = list(frames[:t])

        def personalize_once(subset=subset):
            nonlocal synthesize
            synthesize = personalize(subset)

        mean_s, std_s = _timed(personalize_once, repetitions)
        rows.append(TimingRow("few_shot_learning", t, mean_s, std_s, repetitions))

    landmark_image = frames[0].landmark_image
    mean_s, std_s = _timed(lambda: synthesize([landmark_image]), repetitions)
    rows.append(TimingRow("inference_per_frame", max(t_values), mean_s, std_s, repetitions))
    return TimingTable(rows=rows)
