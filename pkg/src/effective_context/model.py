"""Bidirectional transformer encoder with frame-level heads."""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "effective-context-checkpoint"
CHECKPOINT_VERSION = 1
POSITIONAL_MODES = ("restart", "absolute_offset")
HEAD_KINDS = ("classifier", "regressor")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    input_dim: int = 16
    head: str = "classifier"
    num_classes: int = 4
    output_dim: int = 1
    positional_mode: str = "restart"
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim", "input_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ValueError(f"positional_mode must be one of {POSITIONAL_MODES}")

    @property
    def head_dim(self) -> int:
        return self.num_classes if self.head == "classifier" else self.output_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerActivations:
    """Hidden vectors of every layer; ``per_layer[0]`` is the encoder input."""

    per_layer: list[np.ndarray] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.per_layer[0].shape[0]

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.per_layer[layer]

    def __len__(self) -> int:
        return len(self.per_layer)


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class TransformerEncoder:
    """Pre-LayerNorm encoder; the head is a linear map on the last layer."""

    def __init__(self, config: ModelConfig, dtype=np.float32, params: dict | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        if params is None:
            params = self._init_params()
        self.params: dict[str, Tensor] = {
            k: Tensor(np.asarray(v, dtype=self.dtype), requires_grad=True)
            for k, v in params.items()
        }

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def _init_params(self) -> dict[str, np.ndarray]:
        c = self.config
        rng = np.random.default_rng(c.seed)
        D, F, K = c.model_dim, c.ffn_dim, c.input_dim
        p = {
            "input.w": _uniform(rng, K, (K, D), self.dtype),
            "input.b": np.zeros(D, self.dtype),
        }
        for i in range(c.num_layers):
            pre = f"layer{i}."
            p[pre + "ln1.g"] = np.ones(D, self.dtype)
            p[pre + "ln1.b"] = np.zeros(D, self.dtype)
            for name in ("q", "k", "v", "o"):
                p[pre + f"attn.{name}.w"] = _uniform(rng, D, (D, D), self.dtype)
                p[pre + f"attn.{name}.b"] = np.zeros(D, self.dtype)
            p[pre + "ln2.g"] = np.ones(D, self.dtype)
            p[pre + "ln2.b"] = np.zeros(D, self.dtype)
            p[pre + "ffn.w1"] = _uniform(rng, D, (D, F), self.dtype)
            p[pre + "ffn.b1"] = np.zeros(F, self.dtype)
            p[pre + "ffn.w2"] = _uniform(rng, F, (F, D), self.dtype)
            p[pre + "ffn.b2"] = np.zeros(D, self.dtype)
        p["head.w"] = _uniform(rng, D, (D, c.head_dim), self.dtype)
        p["head.b"] = np.zeros(c.head_dim, self.dtype)
        return p

    def astype(self, dtype) -> "TransformerEncoder":
        return TransformerEncoder(self.config, dtype, {k: v.data for k, v in self.params.items()})

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def checksum(self) -> str:
        return ad.parameters_checksum(self.parameters())

    # -- forward ----------------------------------------------------------
    def forward(self, x, start_position: int = 0, mask=None) -> list[Tensor]:
        """Run the encoder on ``x`` of shape ``(B, T, K)`` (or ``(T, K)``).

        ``mask`` is a boolean ``(B, T)`` array marking real (non-padded)
        frames; padded keys receive no attention.  Returns the hidden states of
        layers ``0..L`` in the input's batch layout.
        """
        c = self.config
        x = ad.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != c.input_dim:
            raise ad.ShapeError(
                f"expected input (B, T, {c.input_dim}), got {x.shape if not squeeze else x.shape[1:]}"
            )
        if start_position < 0:
            raise ValueError("start_position must be >= 0")
        if c.positional_mode == "restart":
            start_position = 0
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype)) if not x.requires_grad else x
        B, T, _ = x.shape
        P = self.params

        bias = None
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(B, T)
            if not mask.all():
                bias = Tensor(np.where(mask, 0.0, -1e9).astype(self.dtype).reshape(B, 1, 1, T))

        h = ad.sinusoidal_embedding_add(x @ P["input.w"] + P["input.b"], start_position)
        layers = [h]
        H = c.num_heads
        dh = c.model_dim // H
        scale = 1.0 / np.sqrt(dh)
        for i in range(c.num_layers):
            pre = f"layer{i}."
            a = ad.layer_norm(h) * P[pre + "ln1.g"] + P[pre + "ln1.b"]

            def heads(name):
                t = a @ P[pre + f"attn.{name}.w"] + P[pre + f"attn.{name}.b"]
                return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = (q @ ad.swapaxes(k, -1, -2)) * scale
            if bias is not None:
                scores = scores + bias
            att = ad.softmax(scores, axis=-1)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, c.model_dim)
            h = h + (o @ P[pre + "attn.o.w"] + P[pre + "attn.o.b"])
            a2 = ad.layer_norm(h) * P[pre + "ln2.g"] + P[pre + "ln2.b"]
            f = ad.gelu(a2 @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"])
            h = h + (f @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"])
            layers.append(h)
        if squeeze:
            layers = [t.reshape(t.shape[1:]) for t in layers]
        return layers

    def head(self, h: Tensor) -> Tensor:
        return h @ self.params["head.w"] + self.params["head.b"]

    # -- checkpoint ---------------------------------------------------------
    def save(self, path) -> None:
        write_npz(path, {k: v.data for k, v in self.params.items()},
                  {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                   "dtype": self.dtype.name, "config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "TransformerEncoder":
        arrays, meta = read_npz(path)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a model checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        return cls(ModelConfig.from_dict(meta["config"]), np.dtype(meta["dtype"]), arrays)


def measurement_model(model):
    """The 64-bit twin of ``model`` (returned unchanged if already 64-bit)."""
    if getattr(model, "dtype", np.float64) != np.float64 and hasattr(model, "astype"):
        return model.astype(np.float64)
    return model


def encode(model, frames: np.ndarray, start_position: int = 0) -> LayerActivations:
    """Activations of every layer for one utterance (no graph is kept)."""
    with ad.no_grad():
        outs = model.forward(np.asarray(frames), start_position=start_position)
    return LayerActivations([o.data for o in outs])


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest index."""
    return np.argmax(scores, axis=-1)


def predict_frames(model: TransformerEncoder, frames: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        h = model.forward(np.asarray(frames))[-1]
        out = model.head(h).data
    if model.config.head == "classifier":
        return argmax_lowest(out)
    return out[..., 0] if model.config.output_dim == 1 else out


# ---------------------------------------------------------------------------
# deterministic npz container
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def write_npz(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write an ``.npz`` whose bytes depend only on its contents."""
    from .io import atomic_write_bytes

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        entries = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)}
        entries.update(arrays)
        for name in sorted(entries):
            arr_buf = io.BytesIO()
            np.lib.format.write_array(arr_buf, np.ascontiguousarray(entries[name]),
                                      allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, arr_buf.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def read_npz(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable container ({exc})") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing metadata record")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return arrays, meta
