"""Dense reverse-mode automatic differentiation on top of numpy.

Every gradient that flows backward carries a leading *seed axis*: a backward
pass started from ``S`` seed vectors at once propagates arrays of shape
``(S, *node.shape)``.  Ordinary training uses ``S = 1``; Jacobian assembly
pushes a whole block of standard-basis seeds through the retained graph in
one sweep.

Gradients are accumulated in per-call buffers, never on the graph nodes, so a
built graph can be differentiated many times (and from several threads) with
different seeds.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's algebraic rule."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional array node in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    # make ndarray <op> Tensor dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and requires_grad:
            raise TypeError("only floating tensors can require gradients")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{rg})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- differentiation ----------------------------------------------------
    def backward(self, seed=None) -> None:
        """Accumulate d(seed . self)/d(leaf) into ``.grad`` of every leaf."""
        if seed is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() without a seed needs a scalar output, got shape {self.shape}"
                )
            seed = np.ones(self.shape, dtype=self.dtype)
        seed = np.asarray(seed, dtype=self.dtype)
        if seed.shape != self.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {self.shape}")
        order = _toposort(self)
        leaves = [n for n in order if not n._parents and n.requires_grad]
        grads = _propagate(self, seed[None], order, None)
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            g = g[0]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and np.isscalar(x) else None
    return Tensor(x, dtype=dtype)


def _node(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a seeded gradient ``(S, *broadcast_shape)`` to ``(S, *shape)``."""
    extra = g.ndim - 1 - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(1, 1 + extra)))
    axes = tuple(i + 1 for i, n in enumerate(shape) if n == 1 and g.shape[i + 1] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _neg_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis - ndim if axis >= 0 else axis


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g, needs):
        return (
            _unbroadcast(g / b.data, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None,
        )

    return _node(out, (a, b), backward, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g, needs: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g, needs: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g, needs: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                 lambda g, needs: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    th = np.tanh(u)
    out = 0.5 * xd * (1.0 + th)

    def backward(g, needs):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _node(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, tuple(a + 1 for a in axes))
        return (np.broadcast_to(g, (g.shape[0],) + x.shape),)

    return _node(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _node(out, (x,), lambda g, needs: (g.reshape((g.shape[0],) + x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _node(
        x.data.transpose(axes), (x,),
        lambda g, needs: (g.transpose((0,) + tuple(i + 1 for i in inv)),),
        "transpose",
    )


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    if not isinstance(idx, tuple):
        idx = (idx,)
    basic = all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in idx)

    def backward(g, needs):
        full = np.zeros((g.shape[0],) + x.shape, dtype=g.dtype)
        key = (slice(None),) + idx
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _node(x.data[idx], (x,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, bounds, axis=axis + 1))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and neural-net ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g, needs):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if needs[1] else None
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _neg_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _neg_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g, needs):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g, needs):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _node(xhat, (x,), backward, "layer_norm")


def sinusoidal_table(length: int, dim: int, start: int = 0, dtype=np.float64) -> np.ndarray:
    pos = np.arange(start, start + length, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table.astype(dtype)


def sinusoidal_embedding_add(x: Tensor, start: int = 0) -> Tensor:
    """Add sinusoidal position codes for positions ``start .. start+T-1``.

    ``x`` is ``(..., T, D)``; the codes are constants, so the Jacobian is the
    identity.
    """
    if x.ndim < 2:
        raise ShapeError(f"sinusoidal_embedding_add needs (..., T, D), got {x.shape}")
    if start < 0:
        raise ValueError(f"start position must be >= 0, got {start}")
    pe = sinusoidal_table(x.shape[-2], x.shape[-1], start, x.dtype)
    return _node(x.data + pe, (x,), lambda g, needs: (g,), "posenc")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood over all leading positions."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != targets.shape:
        raise ShapeError(f"cross_entropy: weights {w.shape} vs targets {targets.shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = -(w * picked).sum() / total

    def backward(g, needs):
        d = np.exp(logp)
        np.put_along_axis(d, targets[..., None].astype(np.intp),
                          np.take_along_axis(d, targets[..., None].astype(np.intp), axis=-1) - 1.0,
                          axis=-1)
        d = d * (w / total)[..., None]
        return (g.reshape((g.shape[0],) + (1,) * logits.ndim) * d.astype(logits.dtype),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target, weights=None) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    w = np.ones(pred.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("mse: weights sum to zero")
    diff = pred.data - target
    loss = (w * diff * diff).sum() / total

    def backward(g, needs):
        d = (2.0 * w * diff / total).astype(pred.dtype)
        return (g.reshape((g.shape[0],) + (1,) * pred.ndim) * d,)

    return _node(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "mse")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    """Nodes that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, seed: np.ndarray, order: list[Tensor],
               reach: set[int] | None) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if g is None or not node._parents:
            continue
        needs = tuple(
            p.requires_grad and (reach is None or id(p) in reach) for p in node._parents
        )
        if not any(needs):
            continue
        for p, pg, need in zip(node._parents, node._backward(g, needs), needs):
            if not need or pg is None:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return grads


def vjp(output: Tensor, seed, wrt):
    """Vector-Jacobian product ``seed^T . d(output)/d(wrt)``.

    ``seed`` has the shape of ``output`` or carries an extra leading batch axis
    ``(S, *output.shape)``, in which case each of the ``S`` seeds is pushed
    through the same retained graph and the result gains the same leading
    axis.  ``wrt`` is a tensor or a sequence of tensors; a tensor that is not
    on any path to ``output`` gets a zero gradient.
    """
    seed = np.asarray(seed)
    if seed.dtype.kind not in "fc":
        seed = seed.astype(output.dtype)
    batched = seed.ndim == output.ndim + 1
    if not batched and seed.shape != output.shape:
        raise ShapeError(f"vjp: seed shape {seed.shape} != output shape {output.shape}")
    if batched and seed.shape[1:] != output.shape:
        raise ShapeError(f"vjp: seed batch {seed.shape} != (S, *{output.shape})")
    seeds = seed if batched else seed[None]

    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    for t in targets:
        if not t.requires_grad:
            raise ValueError("vjp: wrt tensor does not require grad")

    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        order = _toposort(output)
        want = {id(t) for t in targets}
        reach: set[int] = set()
        for node in order:
            if id(node) in want or any(id(p) in reach for p in node._parents):
                reach.add(id(node))
        if id(output) in reach:
            grads = _propagate(output, seeds, order, reach)

    results = []
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros((seeds.shape[0],) + t.shape, dtype=np.result_type(seeds.dtype, t.dtype))
        else:
            g = np.broadcast_to(g, (seeds.shape[0],) + t.shape).copy()
        results.append(g if batched else g[0])
    return results[0] if single else results


def jacobian(output: Tensor, wrt: Tensor, chunk: int = 256) -> np.ndarray:
    """Full Jacobian, assembled row by row from standard-basis seeds."""
    n_out = output.size
    rows = []
    for lo in range(0, n_out, chunk):
        hi = min(n_out, lo + chunk)
        seeds = np.zeros((hi - lo, n_out), dtype=output.dtype)
        seeds[np.arange(hi - lo), np.arange(lo, hi)] = 1.0
        g = vjp(output, seeds.reshape((hi - lo,) + output.shape), wrt)
        rows.append(g.reshape(hi - lo, -1))
    return np.concatenate(rows, axis=0).reshape(output.shape + wrt.shape)


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``; shape ``out.shape + x.shape``.

    ``f`` receives and returns plain arrays (a returned Tensor is unwrapped).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    def call(v):
        out = f(v)
        return np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)

    base = call(x)
    jac = np.empty(base.shape + (x.size,))
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp, fm = call(xp.reshape(x.shape)), call(xm.reshape(x.shape))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            coord = tuple(int(c) for c in np.unravel_index(i, x.shape))
            raise FloatingPointError(f"non-finite output when perturbing coordinate {coord}")
        jac[..., i] = (fp - fm) / (2.0 * step)
    return jac.reshape(base.shape + x.shape)


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
