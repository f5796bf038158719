"""Static SVG figures for the report and sweep outputs.

Figures are written with a fixed hash salt and no date stamp, so the same
data always produces the same bytes.
"""

from __future__ import annotations

import io
import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

_RC = {"svg.hashsalt": "effective-context", "svg.fonttype": "path", "font.size": 9}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    with matplotlib.rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_curves(rows, path, title: str = "Relative influence") -> None:
    """One panel per model; one line per layer.  ``rows`` follow CURVE_HEADER."""
    by_model = defaultdict(lambda: defaultdict(list))
    for model_id, layer, _, sec, _, norm, _ in rows:
        by_model[model_id][int(layer)].append((float(sec), float(norm)))
    models = sorted(by_model)
    with matplotlib.rc_context(_RC):
        fig, axes = plt.subplots(1, len(models), figsize=(4 * len(models), 3), squeeze=False,
                                 sharey=True)
        for ax, mid in zip(axes[0], models):
            layers = sorted(by_model[mid])
            cmap = plt.get_cmap("viridis", max(2, len(layers)))
            for i, layer in enumerate(layers):
                pts = sorted(by_model[mid][layer])
                ax.plot([p[0] for p in pts], [p[1] for p in pts], color=cmap(i),
                        label=f"layer {layer}", lw=1)
            ax.set_title(str(mid))
            ax.set_xlabel("time shift (s)")
        axes[0][0].set_ylabel(title)
        axes[0][-1].legend(fontsize=7)
        fig.tight_layout()
    _save(fig, path)


def plot_contextualization(rows, path) -> None:
    """Contextualization against layer, one line per model (SUMMARY_HEADER rows)."""
    by_model = defaultdict(list)
    for model_id, layer, _, ctx, *_ in rows:
        by_model[model_id].append((int(layer), float(ctx)))
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for mid in sorted(by_model):
            pts = sorted(by_model[mid])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, lw=1, label=str(mid))
        ax.set_xlabel("layer")
        ax.set_ylabel("contextualization")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        fig.tight_layout()
    _save(fig, path)


def plot_truncation(half_windows, values, path, frame_rate_hz: float, ylabel: str) -> None:
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot([(2 * w + 1) / frame_rate_hz for w in half_windows], values, marker="o", ms=3, lw=1)
        ax.set_xlabel("window size 2W+1 (s)")
        ax.set_ylabel(ylabel)
        fig.tight_layout()
    _save(fig, path)


def plot_streaming(rows, path) -> None:
    """Probe error against lookahead (unlimited history) and against history
    (unlimited lookahead).  ``rows`` follow SWEEP_HEADER."""
    def finite(rows_, col):
        pts = sorted((r[col], r[4]) for r in rows_ if math.isfinite(r[col]))
        return [p[0] for p in pts], [p[1] for p in pts]

    with matplotlib.rc_context(_RC):
        fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
        la = [r for r in rows if math.isinf(r[0])]
        hi = [r for r in rows if math.isinf(r[1])]
        for ax, sel, col, label in ((left, la, 1, "lookahead (s), unlimited history"),
                                    (right, hi, 0, "history (s), unlimited lookahead")):
            xs, ys = finite(sel, col)
            if xs:
                ax.plot(xs, ys, marker="o", ms=3, lw=1)
            full = [r[4] for r in sel if math.isinf(r[0]) and math.isinf(r[1])]
            if full:
                ax.axhline(full[0], color="grey", ls="--", lw=0.8, label="full context")
                ax.legend(fontsize=7)
            ax.set_xlabel(label)
        left.set_ylabel("probe error")
        fig.tight_layout()
    _save(fig, path)
