"""Supervised training, linear probes and frame error rates."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .model import (ModelConfig, TransformerEncoder, argmax_lowest, measurement_model, read_npz,
                    write_npz)

log = logging.getLogger(__name__)

PROBE_FORMAT = "effective-context-probe"
PROBE_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    schedule: str = "cosine"
    warmup_steps: int = 100
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    grad_clip: float = 1.0
    l2: float = 0.0
    patience: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Optimizer:
    """Adam or plain SGD over a fixed list of tensors, with global-norm clipping."""

    def __init__(self, params: list[Tensor], cfg: TrainConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = max(1, total_steps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def lr(self) -> float:
        c, s = self.cfg, self.step_count
        if c.warmup_steps and s <= c.warmup_steps:
            return c.lr * s / c.warmup_steps
        if c.schedule == "cosine":
            span = max(1, self.total_steps - c.warmup_steps)
            frac = min(1.0, (s - c.warmup_steps) / span)
            return c.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return c.lr

    def step(self) -> float:
        self.step_count += 1
        c = self.cfg
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if c.l2:
            grads = [g + c.l2 * p.data for g, p in zip(grads, self.params)]
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        if c.grad_clip and norm > c.grad_clip:
            grads = [g * (c.grad_clip / norm) for g in grads]
        lr = self.lr()
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if c.optimizer == "sgd":
                p.data = (p.data - lr * g).astype(p.dtype)
            else:
                self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
                self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
                mhat = self.m[i] / (1 - c.beta1 ** self.step_count)
                vhat = self.v[i] / (1 - c.beta2 ** self.step_count)
                p.data = (p.data - lr * mhat / (np.sqrt(vhat) + c.eps)).astype(p.dtype)
            p.grad = None
        return norm


def frame_error_rate(predictions, labels) -> float:
    """Fraction of frames whose prediction differs from the label."""
    p = np.concatenate([np.ravel(a) for a in predictions]) if _is_ragged(predictions) else np.ravel(predictions)
    y = np.concatenate([np.ravel(a) for a in labels]) if _is_ragged(labels) else np.ravel(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ValueError("no frames to score")
    return float(np.count_nonzero(p != y)) / p.size


def _is_ragged(x) -> bool:
    return isinstance(x, (list, tuple)) and len(x) > 0 and isinstance(x[0], np.ndarray)


def length_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None):
    """Index batches of similar-length utterances; batch order shuffled by ``rng``."""
    lengths = np.array([len(x) for x in dataset.features])
    order = np.argsort(lengths, kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


def pad_batch(dataset: Dataset, idx, dtype=np.float32):
    T = max(len(dataset.features[i]) for i in idx)
    K = dataset.input_dim
    x = np.zeros((len(idx), T, K), dtype=dtype)
    mask = np.zeros((len(idx), T), dtype=bool)
    real = dataset.label_kind != 0
    y = np.zeros((len(idx), T), dtype=np.float64 if real else np.int64)
    for b, i in enumerate(idx):
        n = len(dataset.features[i])
        x[b, :n] = dataset.features[i]
        y[b, :n] = dataset.labels[i]
        mask[b, :n] = True
    return x, y, mask


def _batch_loss(model: TransformerEncoder, x, y, mask) -> tuple[Tensor, np.ndarray]:
    h = model.forward(x, mask=mask)[-1]
    out = model.head(h)
    if model.config.head == "classifier":
        return ad.cross_entropy(out, y, mask), out.data
    return ad.mse(out.reshape(out.shape[:-1]), y, mask), out.data


@dataclass
class TrainResult:
    model: TransformerEncoder
    history: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.history[-1]


def evaluate(model: TransformerEncoder, dataset: Dataset, batch_size: int = 32) -> dict:
    """Mean loss and frame error rate (or RMSE for regressors)."""
    tot_loss, tot_frames, wrong, sq = 0.0, 0, 0, 0.0
    with ad.no_grad():
        for idx in length_batches(dataset, batch_size, None):
            x, y, mask = pad_batch(dataset, idx, model.dtype)
            loss, out = _batch_loss(model, x, y, mask)
            n = int(mask.sum())
            tot_loss += float(loss.data) * n
            tot_frames += n
            if model.config.head == "classifier":
                wrong += int(((argmax_lowest(out) != y) & mask).sum())
            else:
                sq += float((((out[..., 0] - y) ** 2) * mask).sum())
    res = {"loss": tot_loss / tot_frames}
    if model.config.head == "classifier":
        res["error"] = wrong / tot_frames
    else:
        res["rmse"] = math.sqrt(sq / tot_frames)
    return res


def train_supervised(model_cfg: ModelConfig, dataset: Dataset, train_cfg: TrainConfig,
                     dev: Dataset | None = None, callback=None) -> TrainResult:
    """Train an encoder with a frame-level head; returns per-epoch metrics."""
    if model_cfg.input_dim != dataset.input_dim:
        raise ValueError(f"model input_dim {model_cfg.input_dim} != dataset K {dataset.input_dim}")
    is_cls = dataset.label_kind == 0
    if is_cls != (model_cfg.head == "classifier"):
        raise ValueError(f"{model_cfg.head} head does not match dataset labels")
    if is_cls and dataset.num_classes > model_cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, head has {model_cfg.num_classes}")
    model = TransformerEncoder(model_cfg, np.float32)
    rng = np.random.default_rng(train_cfg.seed)
    n_batches = len(length_batches(dataset, train_cfg.batch_size, None))
    opt = Optimizer(model.parameters(), train_cfg, n_batches * train_cfg.epochs)
    result = TrainResult(model)
    for epoch in range(1, train_cfg.epochs + 1):
        tot, frames = 0.0, 0
        for idx in length_batches(dataset, train_cfg.batch_size, rng):
            x, y, mask = pad_batch(dataset, idx)
            loss, _ = _batch_loss(model, x, y, mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, value)
            loss.backward()
            opt.step()
            n = int(mask.sum())
            tot += value * n
            frames += n
        row = {"epoch": epoch, "train_loss": tot / frames, "lr": opt.lr()}
        if dev is not None:
            ev = evaluate(model, dev)
            row.update({f"dev_{k}": v for k, v in ev.items()})
        result.history.append(row)
        log.info("epoch %d %s", epoch, row)
        if callback is not None:
            callback(row)
    return result


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeClassifier:
    """Multinomial logistic regression on one layer's hidden vectors."""

    weights: np.ndarray
    bias: np.ndarray
    source_layer: int

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return argmax_lowest(self.logits(features))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def checksum(self) -> str:
        return ad.parameters_checksum([Tensor(self.weights), Tensor(self.bias)])

    def save(self, path) -> None:
        write_npz(path, {"weights": self.weights, "bias": self.bias},
                  {"format": PROBE_FORMAT, "version": PROBE_VERSION,
                   "source_layer": int(self.source_layer)})

    @classmethod
    def load(cls, path) -> "ProbeClassifier":
        arrays, meta = read_npz(path)
        if meta.get("format") != PROBE_FORMAT or meta.get("version") != PROBE_VERSION:
            raise ValueError(f"{path}: not a version-{PROBE_VERSION} probe file")
        return cls(arrays["weights"], arrays["bias"], int(meta["source_layer"]))


def resolve_layer(model, layer: int) -> int:
    L = model.num_layers
    if layer < 0:
        layer += L + 1
    if not 0 <= layer <= L:
        raise ValueError(f"layer must be in [0, {L}] (or negative from the end)")
    return layer


def layer_features(model, dataset: Dataset, layer: int) -> list[np.ndarray]:
    """Per-utterance 64-bit hidden vectors of ``layer`` from a frozen model.

    Each utterance is encoded alone and unpadded, the same computation the
    measurement and streaming code uses for full-context references.
    """
    model = measurement_model(model)
    layer = resolve_layer(model, layer)
    out = []
    with ad.no_grad():
        for x in dataset.features:
            out.append(model.forward(np.asarray(x, dtype=np.float64)[None])[layer].data[0])
    return out


def fit_logistic(features: np.ndarray, labels: np.ndarray, num_classes: int, cfg: TrainConfig,
                 dev_features: np.ndarray | None = None, dev_labels: np.ndarray | None = None):
    """Minibatch-Adam multinomial logistic regression.

    Features are standardised internally and the scaling is folded back into
    the returned ``(weights, bias)``, so the classifier is affine in the raw
    features.  With dev data the parameters of the lowest dev loss are kept.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (X - mu) / sd
    Zd = None if dev_features is None else (np.asarray(dev_features, np.float64) - mu) / sd

    W = Tensor(np.zeros((X.shape[1], num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(Z) / cfg.batch_size)
    opt = Optimizer([W, b], dataclasses.replace(cfg, l2=0.0), n_batches * cfg.epochs)
    best = (math.inf, W.data.copy(), b.data.copy())
    stale = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(Z))
        for lo in range(0, len(Z), cfg.batch_size):
            sel = perm[lo:lo + cfg.batch_size]
            loss = ad.cross_entropy(Tensor(Z[sel]) @ W + b, y[sel])
            if cfg.l2:
                loss = loss + (W * W).sum() * (0.5 * cfg.l2)
            loss.backward()
            opt.step()
        if Zd is not None:
            with ad.no_grad():
                dl = float(ad.cross_entropy(Tensor(Zd) @ W + b, dev_labels).data)
            if dl < best[0] - 1e-6:
                best, stale = (dl, W.data.copy(), b.data.copy()), 0
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    break
    w_std, b_std = (best[1], best[2]) if Zd is not None else (W.data, b.data)
    weights = w_std / sd[:, None]
    bias = b_std - (mu / sd) @ w_std
    return weights, bias


DEFAULT_PROBE_CONFIG = TrainConfig(lr=1e-2, schedule="cosine", warmup_steps=0, batch_size=256,
                                   epochs=30, grad_clip=0.0, patience=5)


def train_probe(model, layer: int, dataset: Dataset, train_cfg: TrainConfig | None = None,
                dev: Dataset | None = None) -> ProbeClassifier:
    """Fit a linear probe on a frozen model's layer; model weights are untouched."""
    cfg = train_cfg or DEFAULT_PROBE_CONFIG
    layer = resolve_layer(model, layer)
    if dataset.label_kind != 0:
        raise ValueError("probes need class labels")
    C = dataset.num_classes
    X = np.concatenate(layer_features(model, dataset, layer))
    y = np.concatenate(dataset.labels).astype(np.int64)
    Xd = yd = None
    if dev is not None:
        Xd = np.concatenate(layer_features(model, dev, layer))
        yd = np.concatenate(dev.labels).astype(np.int64)
    w, b = fit_logistic(X, y, C, cfg, Xd, yd)
    return ProbeClassifier(w, b, layer)


def probe_error(model, probe: ProbeClassifier, dataset: Dataset) -> float:
    feats = layer_features(model, dataset, probe.source_layer)
    return frame_error_rate([probe.predict(f) for f in feats], list(dataset.labels))
