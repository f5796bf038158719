"""Effective-context measurement: input truncation and Jacobian influence.

Everything here runs in 64-bit.  Models are anything with ``num_layers`` and
``forward(x, start_position=0, mask=None) -> [h_0, ..., h_L]``; the
transformer encoder is converted to float64 on entry.
"""

from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .model import measurement_model
from .train import ProbeClassifier, frame_error_rate, resolve_layer

DISTANCES = ("l2_per_frame", "error_flip")
VARIANTS = ("sum", "pair_mean")


def _positional_restart(model) -> bool:
    cfg = getattr(model, "config", None)
    return getattr(cfg, "positional_mode", "restart") == "restart"


def full_states(model, frames: np.ndarray, layers) -> dict[int, np.ndarray]:
    """Hidden vectors of the requested layers on the whole utterance."""
    with ad.no_grad():
        outs = model.forward(np.asarray(frames, dtype=np.float64)[None])
    return {l: outs[l].data[0] for l in layers}


def windowed_states(model, frames: np.ndarray, layer: int, windows) -> np.ndarray:
    """Hidden vector of frame ``t`` when the model only sees ``frames[lo:hi]``.

    ``windows`` is a sequence of ``(lo, hi, t)`` with ``lo <= t < hi``.  Each
    distinct window is encoded once; windows of equal length are batched.  A
    window covering the whole utterance goes through exactly the same
    computation as :func:`full_states`, so its outputs are bit-identical.
    """
    frames = np.asarray(frames, dtype=np.float64)
    restart = _positional_restart(model)
    uniq: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, (lo, hi, t) in enumerate(windows):
        if not lo <= t < hi:
            raise ValueError(f"frame {t} is outside its window [{lo}, {hi})")
        uniq[(lo, hi)].append(i)
    groups: dict[tuple, list[tuple[int, int]]] = defaultdict(list)
    for lo, hi in uniq:
        groups[(hi - lo, 0 if restart else lo)].append((lo, hi))
    D = None
    out: np.ndarray | None = None
    with ad.no_grad():
        for (length, start), spans in sorted(groups.items()):
            batch = np.stack([frames[lo:hi] for lo, hi in spans])
            h = model.forward(batch, start_position=start)[layer].data
            if out is None:
                D = h.shape[-1]
                out = np.empty((len(windows), D))
            for b, (lo, hi) in enumerate(spans):
                for i in uniq[(lo, hi)]:
                    out[i] = h[b, windows[i][2] - lo]
    return out


def truncation_windows(T: int, half_window: int, stride: int = 1, exclude_edges: bool = False):
    wins = []
    for t in range(0, T, stride):
        lo, hi = max(0, t - half_window), min(T, t + half_window + 1)
        if exclude_edges and (t - half_window < 0 or t + half_window >= T):
            continue
        wins.append((lo, hi, t))
    return wins


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------

@dataclass
class TruncationConfig:
    half_window: int
    distance: str = "l2_per_frame"
    layer: int = -1
    frame_stride: int = 1
    exclude_edges: bool = False

    def __post_init__(self):
        if self.half_window < 0:
            raise ValueError("half_window must be >= 0")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")


@dataclass
class TruncationResult:
    half_window: int
    distance: str
    layer: int
    value: float
    frames: int
    full_error: float | None = None
    truncated_error: float | None = None


def truncation_sweep(model, dataset: Dataset, half_windows, distance: str = "l2_per_frame",
                     layer: int = -1, probe: ProbeClassifier | None = None,
                     frame_stride: int = 1, exclude_edges: bool = False,
                     threads: int = 1) -> list[TruncationResult]:
    """Distance between full-input and truncated-input outputs for several W.

    ``l2_per_frame`` averages the Euclidean distance of the hidden vectors
    over frames; ``error_flip`` reports the probe's error on truncated inputs
    minus its error on full inputs.
    """
    if distance not in DISTANCES:
        raise ValueError(f"distance must be one of {DISTANCES}")
    if distance == "error_flip" and probe is None:
        raise ValueError("error_flip distance needs a probe for the measured layer")
    model = measurement_model(model)
    layer = resolve_layer(model, layer if probe is None else probe.source_layer)

    def one(n):
        x = dataset.features[n]
        full = full_states(model, x, [layer])[layer]
        per_w = []
        for W in half_windows:
            wins = truncation_windows(len(x), W, frame_stride, exclude_edges)
            if not wins:
                per_w.append((np.empty(0), np.empty((0, full.shape[1])), []))
                continue
            ts = [t for _, _, t in wins]
            trunc = windowed_states(model, x, layer, wins)
            per_w.append((np.linalg.norm(trunc - full[ts], axis=1), trunc, ts))
        return full, per_w

    results = _map(one, range(len(dataset)), threads)
    out = []
    for wi, W in enumerate(half_windows):
        dists = [r[1][wi][0] for r in results]
        frames = int(sum(len(d) for d in dists))
        if frames == 0:
            raise ValueError(f"no frames selected for W={W}")
        if distance == "l2_per_frame":
            value = math.fsum(float(v) for d in dists for v in d) / frames
            out.append(TruncationResult(W, distance, layer, value, frames))
        else:
            full_pred, trunc_pred, labels = [], [], []
            for n, (full, per_w) in enumerate(results):
                _, trunc, ts = per_w[wi]
                if not ts:
                    continue
                full_pred.append(probe.predict(full[ts]))
                trunc_pred.append(probe.predict(trunc))
                labels.append(dataset.labels[n][ts])
            fe = frame_error_rate(full_pred, labels)
            te = frame_error_rate(trunc_pred, labels)
            out.append(TruncationResult(W, distance, layer, te - fe, frames, fe, te))
    return out


def measure_truncation(model, dataset: Dataset, cfg: TruncationConfig,
                       probe: ProbeClassifier | None = None, threads: int = 1) -> TruncationResult:
    return truncation_sweep(model, dataset, [cfg.half_window], cfg.distance, cfg.layer, probe,
                            cfg.frame_stride, cfg.exclude_edges, threads)[0]


def sufficient_window(results: list[TruncationResult], fraction: float = 0.05,
                      tolerance: float | None = None) -> int | None:
    """Smallest W from which every larger swept W stays below the threshold.

    The threshold is ``tolerance`` when given (absolute, the natural choice for
    ``error_flip``), otherwise ``fraction`` of the W=0 distance.
    """
    by_w = {r.half_window: r.value for r in results}
    if tolerance is None:
        if 0 not in by_w:
            raise ValueError("the sweep must include W=0")
        tolerance = fraction * by_w[0]
    best = None
    for W in sorted(by_w, reverse=True):
        if by_w[W] >= tolerance:
            break
        best = W
    return best


# ---------------------------------------------------------------------------
# Jacobian influence
# ---------------------------------------------------------------------------

@dataclass
class InfluenceMatrix:
    """``values[i, tau]`` is the influence of input frame ``tau`` on output
    frame ``targets[i]``."""

    values: np.ndarray
    targets: np.ndarray
    layer: int
    utterance: int = 0

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    def full(self) -> np.ndarray:
        """Dense T x T matrix (rows of unsampled targets are NaN)."""
        m = np.full((self.num_frames, self.num_frames), np.nan)
        m[self.targets] = self.values
        return m


def influence_matrices(model, frames: np.ndarray, layers, stride: int = 1,
                       seed_chunk: int = 512, utterance: int = 0) -> dict[int, InfluenceMatrix]:
    """Influence of every input frame on (strided) output frames, per layer.

    One forward graph is built and retained; for each layer and target frame
    ``t`` the ``D`` standard-basis seeds of ``h_t`` are back-propagated
    (batched along the seed axis), giving ``d h_t / d x`` whose per-input-frame
    Frobenius norms are the influences.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    model = measurement_model(model)
    layers = [resolve_layer(model, l) for l in layers]
    x = Tensor(np.asarray(frames, dtype=np.float64), requires_grad=True)
    outs = model.forward(x)
    T = x.shape[0]
    targets = np.arange(0, T, stride)
    result = {}
    for l in layers:
        h = outs[l]
        D = h.shape[-1]
        per_chunk = max(1, seed_chunk // D)
        vals = np.empty((len(targets), T))
        for c0 in range(0, len(targets), per_chunk):
            ts = targets[c0:c0 + per_chunk]
            seeds = np.zeros((len(ts) * D, T, D))
            rows = np.arange(len(ts) * D)
            seeds[rows, np.repeat(ts, D), np.tile(np.arange(D), len(ts))] = 1.0
            g = ad.vjp(h, seeds, x)
            if not np.all(np.isfinite(g)):
                bad = int(np.flatnonzero(~np.isfinite(g).reshape(len(rows), -1).all(axis=1))[0])
                raise FloatingPointError(
                    f"non-finite gradient at target frame t={ts[bad // D]}, basis d={bad % D}"
                )
            g = g.reshape(len(ts), D, T, -1)
            vals[c0:c0 + len(ts)] = np.sqrt((g * g).sum(axis=(1, 3)))
        result[l] = InfluenceMatrix(vals, targets.copy(), l, utterance)
    return result


def influence_matrix(model, frames: np.ndarray, layer: int, stride: int = 1,
                     utterance: int = 0) -> InfluenceMatrix:
    model = measurement_model(model)
    l = resolve_layer(model, layer)
    return influence_matrices(model, frames, [l], stride, utterance=utterance)[l]


def finite_difference_influence(model, frames: np.ndarray, layer: int, step: float = 1e-5) -> np.ndarray:
    """Dense T x T influence from a central-difference Jacobian (test oracle)."""
    model = measurement_model(model)
    layer = resolve_layer(model, layer)

    def f(v):
        with ad.no_grad():
            return model.forward(v)[layer].data

    J = ad.finite_difference_jacobian(f, np.asarray(frames, dtype=np.float64), step)
    return np.sqrt((J * J).sum(axis=(1, 3)))


# ---------------------------------------------------------------------------
# relative influence and contextualization
# ---------------------------------------------------------------------------

@dataclass
class RelativeInfluenceCurve:
    half_window: int
    raw: np.ndarray
    values: np.ndarray
    pair_counts: np.ndarray
    normalized: bool
    variant: str = "sum"
    layer: int | None = None

    @property
    def sigmas(self) -> np.ndarray:
        return np.arange(-self.half_window, self.half_window + 1)

    @property
    def empty_shifts(self) -> list[int]:
        """Shifts with no valid (t, t+sigma) pair; their value is 0."""
        return [int(s) for s, c in zip(self.sigmas, self.pair_counts) if c == 0]

    def at(self, sigma: int) -> float:
        return float(self.values[sigma + self.half_window])


def relative_influence(matrices, half_window: int, variant: str = "sum") -> RelativeInfluenceCurve:
    """Influence summed over all (t, t+sigma) pairs for |sigma| <= W, normalised to sum 1.

    ``variant="pair_mean"`` divides each shift's sum by its pair count before
    normalising, which removes the edge bias of short utterances.  Sums are
    compensated (``math.fsum``) so the result is independent of the order of
    ``matrices``.
    """
    if half_window < 1:
        raise ValueError("half_window must be >= 1")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    matrices = list(matrices)
    if not matrices:
        raise ValueError("no influence matrices given")
    layers = {m.layer for m in matrices}
    if len(layers) > 1:
        raise ValueError(f"matrices come from different layers {sorted(layers)}")
    W = half_window
    terms: list[list[float]] = [[] for _ in range(2 * W + 1)]
    counts = np.zeros(2 * W + 1, dtype=np.int64)
    for m in matrices:
        if np.any(m.values < 0) or not np.all(np.isfinite(m.values)):
            raise ValueError("influence values must be finite and non-negative")
        T = m.num_frames
        for j, sigma in enumerate(range(-W, W + 1)):
            tau = m.targets + sigma
            ok = (tau >= 0) & (tau < T)
            if ok.any():
                terms[j].extend(m.values[np.flatnonzero(ok), tau[ok]].tolist())
                counts[j] += int(ok.sum())
    raw = np.array([math.fsum(t) for t in terms])
    base = raw.copy()
    if variant == "pair_mean":
        base = np.divide(raw, counts, out=np.zeros_like(raw), where=counts > 0)
    total = math.fsum(base)
    if total > 0:
        return RelativeInfluenceCurve(W, raw, base / total, counts, True, variant, layers.pop())
    return RelativeInfluenceCurve(W, raw, base, counts, False, variant, layers.pop())


def contextualization(curve: RelativeInfluenceCurve) -> float:
    """1 - S(0): 0 when only the aligned input frame matters."""
    if not curve.normalized:
        raise ValueError("contextualization needs a normalised relative-influence curve")
    return 1.0 - curve.at(0)


def mass_radius(curve: RelativeInfluenceCurve, fraction: float = 0.9) -> int:
    """Smallest r with sum_{|sigma|<=r} S(sigma) >= fraction."""
    W = curve.half_window
    for r in range(W + 1):
        if math.fsum(curve.values[W - r:W + r + 1]) >= fraction - 1e-12:
            return r
    return W


def asymmetry(curve: RelativeInfluenceCurve) -> float:
    v = curve.values
    total = math.fsum(v)
    return math.fsum(abs(a - b) for a, b in zip(v, v[::-1])) / total if total > 0 else 0.0


# ---------------------------------------------------------------------------
# layerwise report
# ---------------------------------------------------------------------------

@dataclass
class ContextSummary:
    model_id: str
    layer: int
    half_window: int
    contextualization: float
    width90: int
    stride: int = 1


@dataclass
class LayerwiseReport:
    model_id: str
    half_window: int
    stride: int
    frame_rate_hz: float
    curves: dict[int, RelativeInfluenceCurve] = field(default_factory=dict)
    summaries: list[ContextSummary] = field(default_factory=list)

    def contextualization(self, layer: int) -> float:
        for s in self.summaries:
            if s.layer == layer:
                return s.contextualization
        raise KeyError(layer)

    def curve_rows(self):
        for layer in sorted(self.curves):
            c = self.curves[layer]
            for sigma, raw, norm, cnt in zip(c.sigmas, c.raw, c.values, c.pair_counts):
                yield (self.model_id, layer, int(sigma), float(sigma) / self.frame_rate_hz,
                       float(raw), float(norm), int(cnt))

    def summary_rows(self):
        for s in self.summaries:
            yield (s.model_id, s.layer, s.half_window, s.contextualization, s.width90, s.stride)


CURVE_HEADER = ("model_id", "layer", "sigma_frames", "sigma_seconds", "S_raw", "S_norm", "pair_count")
SUMMARY_HEADER = ("model_id", "layer", "W", "contextualization", "width90_frames", "stride")


def dataset_influence(model, dataset: Dataset, layers, stride: int = 1, max_utts: int | None = None,
                      threads: int = 1) -> dict[int, list[InfluenceMatrix]]:
    model = measurement_model(model)
    layers = [resolve_layer(model, l) for l in layers]
    n = len(dataset) if max_utts is None else min(max_utts, len(dataset))
    per_utt = _map(lambda i: influence_matrices(model, dataset.features[i], layers, stride,
                                                utterance=i), range(n), threads)
    return {l: [m[l] for m in per_utt] for l in layers}


def layerwise_report(model, dataset: Dataset, half_window: int, layers=None, stride: int = 1,
                     max_utts: int | None = None, model_id: str = "model", variant: str = "sum",
                     threads: int = 1) -> LayerwiseReport:
    """Relative-influence curve and contextualization for every layer."""
    model = measurement_model(model)
    if layers is None:
        layers = list(range(model.num_layers + 1))
    mats = dataset_influence(model, dataset, layers, stride, max_utts, threads)
    rep = LayerwiseReport(model_id, half_window, stride, dataset.frame_rate_hz)
    for l, ms in mats.items():
        curve = relative_influence(ms, half_window, variant)
        rep.curves[l] = curve
        rep.summaries.append(ContextSummary(model_id, l, half_window, contextualization(curve),
                                            mass_radius(curve), stride))
    return rep


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
