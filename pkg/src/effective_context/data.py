"""Synthetic frame-labelled tasks with a known context radius, and the
CTXM binary container for precomputed feature matrices.

CTXM layout (all integers little-endian u32, floats little-endian f32)::

    b"CTXM" | version | N
    repeated N times:
        T | K | label_kind | T*K floats (row-major) | T labels

``label_kind`` is 0 for class ids (u32 labels) and 1 for real targets (f32
labels).  Frame rate and task metadata live in a JSON sidecar next to the
binary file (``<path>.json``).
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes, read_json, write_json

MAGIC = b"CTXM"
FORMAT_VERSION = 1
LABEL_CLASS = 0
LABEL_REAL = 1
TASK_KINDS = ("window_majority", "window_sum_mod", "window_hash", "smooth_regression")
DEFAULT_FRAME_RATE = 50.0

_SPLIT_STREAMS = {"train": 1, "dev": 2, "test": 3}


class FormatError(ValueError):
    """Malformed CTXM payload; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_rate_hz: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty T x K matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SyntheticTaskSpec:
    context_radius: int = 2
    vocab_size: int = 2
    num_classes: int = 2
    embed_noise_std: float = 0.1
    seed: int = 0
    task_kind: str = "window_majority"
    input_dim: int = 16
    frame_rate_hz: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        if self.context_radius < 0:
            raise ValueError("context_radius must be >= 0")
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if self.vocab_size < 1 or self.num_classes < 1:
            raise ValueError("vocab_size and num_classes must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Dataset:
    """N utterances of ``(frames T_n x K, labels T_n)``."""

    features: list[np.ndarray]
    labels: list[np.ndarray]
    frame_rate_hz: float = DEFAULT_FRAME_RATE
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.features:
            raise ValueError("a dataset needs at least one utterance")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in utterance count")
        for n, (x, y) in enumerate(zip(self.features, self.labels)):
            if len(y) != len(x):
                raise ValueError(f"utterance {n}: {len(x)} frames but {len(y)} labels")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def input_dim(self) -> int:
        return self.features[0].shape[1]

    @property
    def label_kind(self) -> int:
        return LABEL_CLASS if self.labels[0].dtype.kind in "iu" else LABEL_REAL

    @property
    def num_frames(self) -> int:
        return sum(len(x) for x in self.features)

    @property
    def num_classes(self) -> int:
        if "num_classes" in self.meta:
            return int(self.meta["num_classes"])
        return int(max(int(y.max()) for y in self.labels)) + 1

    def sequence(self, n: int) -> FeatureSequence:
        return FeatureSequence(self.features[n], self.frame_rate_hz)

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset([self.features[i] for i in idx], [self.labels[i] for i in idx],
                       self.frame_rate_hz, self.split, dict(self.meta))

    def equals(self, other: "Dataset") -> bool:
        return (
            len(self) == len(other)
            and self.frame_rate_hz == other.frame_rate_hz
            and all(np.array_equal(a, b) and a.dtype == b.dtype
                    for a, b in zip(self.features, other.features))
            and all(np.array_equal(a, b) and a.dtype == b.dtype
                    for a, b in zip(self.labels, other.labels))
        )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def embedding_table(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return rng.standard_normal((spec.vocab_size, spec.input_dim))


def window_labels(symbols: np.ndarray, radius: int, num_classes: int,
                  kind: str = "window_sum_mod", vocab_size: int | None = None) -> np.ndarray:
    """Class label of every frame from the symbols within ``radius``.

    Windows are clipped at the utterance edges.
    """
    T = len(symbols)
    out = np.empty(T, dtype=np.uint32)
    if kind == "window_sum_mod":
        csum = np.concatenate([[0], np.cumsum(symbols, dtype=np.int64)])
        for t in range(T):
            lo, hi = max(0, t - radius), min(T, t + radius + 1)
            out[t] = (csum[hi] - csum[lo]) % num_classes
    elif kind == "window_majority":
        V = max(vocab_size or 0, int(symbols.max()) + 1)
        for t in range(T):
            lo, hi = max(0, t - radius), min(T, t + radius + 1)
            win = symbols[lo:hi]
            counts = np.bincount(win, minlength=V)
            tied = np.flatnonzero(counts == counts.max())
            if len(tied) == 1 or symbols[t] in tied:
                out[t] = tied[0] if len(tied) == 1 else symbols[t]
            else:
                dist = np.abs(np.arange(lo, hi) - t)
                out[t] = min(tied, key=lambda s: (dist[win == s].min(), s))
        out %= num_classes
    elif kind == "window_hash":
        base = (vocab_size or int(symbols.max()) + 1) + 1
        prime = 2_147_483_647
        padded = np.concatenate([np.full(radius, base - 1), symbols, np.full(radius, base - 1)])
        for t in range(T):
            h = 0
            for s in padded[t:t + 2 * radius + 1]:
                h = (h * base + int(s) + 1) % prime
            out[t] = (h * 2654435761 % prime) % num_classes
    else:
        raise ValueError(f"window_labels does not handle {kind!r}")
    return out


def moving_average(values: np.ndarray, radius: int) -> np.ndarray:
    T = len(values)
    csum = np.concatenate([[0.0], np.cumsum(values, dtype=np.float64)])
    lo = np.maximum(0, np.arange(T) - radius)
    hi = np.minimum(T, np.arange(T) + radius + 1)
    return (csum[hi] - csum[lo]) / (hi - lo)


def generate(spec: SyntheticTaskSpec, num_utts: int, min_len: int, max_len: int,
             split: str = "train") -> Dataset:
    """Draw ``num_utts`` utterances whose labels depend on ``+-radius`` frames.

    Features are a fixed random embedding of each symbol plus gaussian noise.
    The embedding table depends only on ``spec.seed``, so every split of one
    task shares it; utterances of different splits come from independent
    streams.
    """
    r = spec.context_radius
    if min_len < 2 * r + 1:
        raise ValueError(f"min_len {min_len} < 2*radius+1 = {2 * r + 1}")
    if max_len < min_len or num_utts < 1:
        raise ValueError("need num_utts >= 1 and max_len >= min_len")
    table = embedding_table(spec)
    stream = _SPLIT_STREAMS.get(split, sum(split.encode()) + 100)
    rng = np.random.default_rng([spec.seed, stream])
    feats, labels = [], []
    for _ in range(num_utts):
        T = int(rng.integers(min_len, max_len + 1))
        symbols = rng.integers(0, spec.vocab_size, size=T)
        noise = rng.standard_normal((T, spec.input_dim)) * spec.embed_noise_std
        x = (table[symbols] + noise).astype(np.float32)
        if spec.task_kind == "smooth_regression":
            y = moving_average(x[:, 0].astype(np.float64), r).astype(np.float32)
        else:
            y = window_labels(symbols, r, spec.num_classes, spec.task_kind, spec.vocab_size)
        feats.append(x)
        labels.append(y)
    meta = {"task": spec.to_dict(), "num_classes": spec.num_classes,
            "num_utts": num_utts, "min_len": min_len, "max_len": max_len}
    return Dataset(feats, labels, spec.frame_rate_hz, split, meta)


# ---------------------------------------------------------------------------
# CTXM binary format
# ---------------------------------------------------------------------------

def dump_matrix(dataset: Dataset) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(dataset))]
    for x, y in zip(dataset.features, dataset.labels):
        T, K = x.shape
        kind = LABEL_CLASS if y.dtype.kind in "iu" else LABEL_REAL
        parts.append(struct.pack("<III", T, K, kind))
        parts.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(y, dtype="<u4" if kind == LABEL_CLASS else "<f4").tobytes())
    return b"".join(parts)


def parse_matrix(buf: bytes) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if len(buf) < 12:
        raise FormatError(f"header needs 12 bytes, file has {len(buf)}", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    version, n = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = 12
    feats, labels = [], []
    for u in range(n):
        if off + 12 > len(buf):
            raise FormatError(f"truncated header of utterance {u}", off)
        T, K, kind = struct.unpack_from("<III", buf, off)
        if kind not in (LABEL_CLASS, LABEL_REAL):
            raise FormatError(f"utterance {u}: unknown label kind {kind}", off + 8)
        if T < 1 or K < 1:
            raise FormatError(f"utterance {u}: empty matrix {T}x{K}", off)
        off += 12
        need = 4 * T * K + 4 * T
        if off + need > len(buf):
            raise FormatError(f"utterance {u}: payload needs {need} bytes, "
                              f"{len(buf) - off} remain", off)
        x = np.frombuffer(buf, dtype="<f4", count=T * K, offset=off).reshape(T, K)
        off += 4 * T * K
        y = np.frombuffer(buf, dtype="<u4" if kind == LABEL_CLASS else "<f4", count=T, offset=off)
        off += 4 * T
        feats.append(x.astype(np.float32))
        labels.append(y.astype(np.uint32 if kind == LABEL_CLASS else np.float32))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after {n} utterances", off)
    return feats, labels


def save_matrix(dataset: Dataset, path) -> None:
    path = Path(path)
    atomic_write_bytes(path, dump_matrix(dataset))
    write_json(sidecar_path(path), {"frame_rate_hz": dataset.frame_rate_hz,
                                    "split": dataset.split, "meta": dataset.meta})


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_matrix(path) -> Dataset:
    path = Path(path)
    feats, labels = parse_matrix(path.read_bytes())
    if not feats:
        raise FormatError("file holds zero utterances", 8)
    side = sidecar_path(path)
    info = read_json(side) if side.exists() else {}
    return Dataset(feats, labels, float(info.get("frame_rate_hz", DEFAULT_FRAME_RATE)),
                   info.get("split", "train"), info.get("meta", {}))
