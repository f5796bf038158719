"""Sliding-window streaming inference with a bidirectional encoder.

Each output frame ``t`` is recomputed from scratch on the window
``x[t-H .. t+L]`` (history ``H``, lookahead ``L``); no state is carried
between windows.  The representation of ``t`` is read at ``t``'s index inside
the window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .measure import _map, full_states, windowed_states
from .model import measurement_model
from .train import ProbeClassifier, frame_error_rate, resolve_layer

SWEEP_HEADER = ("history_s", "lookahead_s", "history_frames", "lookahead_frames",
                "probe_error", "mean_l2_dev", "frames_evaluated")


@dataclass
class StreamingConfig:
    """``history``/``lookahead`` in frames; ``None`` means unlimited."""

    history: int | None = None
    lookahead: int | None = 0
    stride: int = 1
    layer: int = -1

    def __post_init__(self):
        for name in ("history", "lookahead"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0 or None (unlimited)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def approximate(self) -> bool:
        """Chunked (stride > 1) windows only approximate per-frame streaming."""
        return self.stride > 1

    def latency_s(self, frame_rate_hz: float) -> float:
        return math.inf if self.lookahead is None else self.lookahead / frame_rate_hz

    def windows(self, T: int) -> list[tuple[int, int, int]]:
        H = T if self.history is None else self.history
        L = T if self.lookahead is None else self.lookahead
        wins = []
        for c in range(0, T, self.stride):
            last = min(T, c + self.stride) - 1
            lo, hi = max(0, c - H), min(T, last + L + 1)
            wins.extend((lo, hi, t) for t in range(c, last + 1))
        return wins


@dataclass
class StreamingResult:
    states: list[np.ndarray]
    mean_l2_dev: float
    frames: int
    probe_error: float | None = None
    full_error: float | None = None
    approximate: bool = False


def stream_extract(model, frames: np.ndarray, cfg: StreamingConfig) -> np.ndarray:
    """Per-frame representations of one utterance under streaming windows."""
    model = measurement_model(model)
    layer = resolve_layer(model, cfg.layer)
    return windowed_states(model, frames, layer, cfg.windows(len(frames)))


def evaluate_streaming(model, dataset: Dataset, cfg: StreamingConfig,
                       probe: ProbeClassifier | None = None, threads: int = 1) -> StreamingResult:
    """Streaming representations over a dataset, with their deviation from full
    context and (optionally) the frozen probe's error on them."""
    model = measurement_model(model)
    layer = resolve_layer(model, cfg.layer if probe is None else probe.source_layer)

    def one(n):
        x = dataset.features[n]
        full = full_states(model, x, [layer])[layer]
        states = windowed_states(model, x, layer, cfg.windows(len(x)))
        return full, states

    pairs = _map(one, range(len(dataset)), threads)
    devs = [float(v) for full, st in pairs for v in np.linalg.norm(st - full, axis=1)]
    frames = len(devs)
    res = StreamingResult([st for _, st in pairs], math.fsum(devs) / frames, frames,
                          approximate=cfg.approximate)
    if probe is not None:
        labels = list(dataset.labels)
        res.probe_error = frame_error_rate([probe.predict(st) for _, st in pairs], labels)
        res.full_error = frame_error_rate([probe.predict(f) for f, _ in pairs], labels)
    return res


def sweep(model, probe: ProbeClassifier, dataset: Dataset, histories, lookaheads,
          stride: int = 1, threads: int = 1) -> list[tuple]:
    """Probe error and representation drift on a history x lookahead grid.

    ``None`` in either list means unlimited.  Rows follow ``SWEEP_HEADER``;
    seconds use the dataset frame rate (``inf`` for unlimited).
    """
    model = measurement_model(model)
    fr = dataset.frame_rate_hz
    checksum = probe.checksum()
    rows = []
    for H in histories:
        for L in lookaheads:
            cfg = StreamingConfig(H, L, stride, probe.source_layer)
            r = evaluate_streaming(model, dataset, cfg, probe, threads)
            rows.append((
                math.inf if H is None else H / fr,
                math.inf if L is None else L / fr,
                -1 if H is None else H,
                -1 if L is None else L,
                r.probe_error, r.mean_l2_dev, r.frames,
            ))
    if probe.checksum() != checksum:
        raise RuntimeError("probe changed during the streaming sweep")
    return rows
