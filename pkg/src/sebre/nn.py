"""Minimal differentiable compute substrate for the detector.

A define-by-run tape over numpy arrays: each :class:`Tensor` remembers its
parents and a backward closure, and ``backward()`` on a scalar walks the
graph in reverse topological order.  Storage is 32-bit by default; loss
reductions accumulate in 64-bit.  :func:`grad_check` runs the whole check
at 64-bit so central differences are not drowned by storage quantization.

Only the operations the detector needs are provided; this is not a
general-purpose autodiff framework.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class NnError(ValueError):
    """Shape mismatch or invalid configuration in a tensor operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    ``grad`` is accumulated additively by ``backward()`` on leaf tensors
    (those with ``requires_grad`` and no parents), so calling backward twice
    doubles it exactly.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; adds into leaf ``grad`` buffers."""
        if self.data.size != 1:
            raise NnError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        flowing: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data)
        }
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a computed array as a graph node with a custom backward closure.

    Extension point for differentiable operations defined outside this
    module (feature pooling, custom losses).  ``backward`` receives the
    upstream gradient and returns one gradient (or None) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise NnError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    return make_op(x.data * np.asarray(s, dtype=x.dtype), (x,), lambda g: (g * s,))


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    inverse = np.argsort(axes)
    return make_op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return make_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar; accumulates in 64-bit."""
    x = _as_tensor(x)
    value = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.dtype)
    return make_op(value, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


# ---------------------------------------------------------------------------
# layers


def _check_conv_shapes(x, w, b, stride, padding):
    if x.ndim != 4:
        raise NnError(f"conv2d input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise NnError(f"conv2d weight must be [C_out,C_in,k,k], got {w.shape}")
    k = w.shape[2]
    if k % 2 != 1:
        raise NnError(f"kernel size must be odd, got {k}")
    if x.shape[1] != w.shape[1]:
        raise NnError(
            f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise NnError(f"conv2d bias must be [{w.shape[0]}], got {b.shape}")
    h_out = (x.shape[2] + 2 * padding - k) // stride + 1
    w_out = (x.shape[3] + 2 * padding - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise NnError(
            f"conv2d output would be empty for input {x.shape[2]}x{x.shape[3]}, "
            f"k={k}, stride={stride}, padding={padding}"
        )
    return k, h_out, w_out


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, h_out: int, w_out: int):
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols.reshape(n, c * k * k, h_out * w_out)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, padding: int, h_out: int, w_out: int):
    n, c, h, w = x_shape
    c6 = cols.reshape(n, c, k, k, h_out, w_out)
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            buf[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += c6[:, :, i, j]
    if padding:
        buf = buf[:, :, padding : padding + h, padding : padding + w]
    return buf


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with exact gradients for input, weight and bias.

    Accepts a single image [C,H,W] or a batch [N,C,H,W].
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    k, h_out, w_out = _check_conv_shapes(xd, weight.data, bias.data, stride, padding)
    n, _, h, w = xd.shape
    c_out = weight.shape[0]
    cols = _im2col(xd, k, stride, padding, h_out, w_out)
    w2 = weight.data.reshape(c_out, -1)
    out = np.matmul(w2, cols) + bias.data[None, :, None]
    out = out.reshape(n, c_out, h_out, w_out)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(n, c_out, h_out * w_out)
        db = g2.sum(axis=(0, 2))
        dw = np.einsum("nol,nkl->ok", g2, cols).reshape(weight.shape)
        dcols = np.matmul(w2.T, g2)
        dx = _col2im(dcols, xd.shape, k, stride, padding, h_out, w_out)
        return (dx[0] if squeeze else dx, dw, db)

    return make_op(out, (x, weight, bias), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map rows -> rows: x [N,D] @ weight [D,K] + bias [K]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise NnError(f"dense shape mismatch: x {x.shape} @ w {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise NnError(f"dense bias must be [{weight.shape[1]}], got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return (g @ weight.data.T, x.data.T @ g, g.sum(axis=0))

    return make_op(out, (x, weight, bias), backward)


def resample2d(x: Tensor, mode: str) -> Tensor:
    """2x spatial resampling over the trailing two axes.

    ``max_pool_2x2`` halves H and W taking window maxima (even extents
    required); the gradient flows only to the first argmax of each window.
    ``nearest_upsample_2x`` doubles H and W by replication; the gradient sums
    each 2x2 block back to its source.
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise NnError(f"resample2d needs at least 2 spatial dims, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    if mode == "max_pool_2x2":
        if h % 2 or w % 2:
            raise NnError(f"max_pool_2x2 needs even extents, got {h}x{w}")
        windows = (
            x.data.reshape(*lead, h // 2, 2, w // 2, 2)
            .swapaxes(-3, -2)
            .reshape(*lead, h // 2, w // 2, 4)
        )
        argmax = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

        def backward(g):
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, argmax[..., None], g[..., None], axis=-1)
            return (
                dwin.reshape(*lead, h // 2, w // 2, 2, 2)
                .swapaxes(-3, -2)
                .reshape(x.shape),
            )

        return make_op(np.ascontiguousarray(out), (x,), backward)
    if mode == "nearest_upsample_2x":
        out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

        def backward(g):
            return (
                g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),
            )

        return make_op(out, (x,), backward)
    raise NnError(f"unknown resample mode {mode!r}")


def activation(x: Tensor, mode: str) -> Tensor:
    """Elementwise relu/sigmoid, or row-wise softmax with max subtraction."""
    x = _as_tensor(x)
    if mode == "relu":
        mask = x.data > 0
        return make_op(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))
    if mode == "sigmoid":
        out = _sigmoid(x.data)
        return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))
    if mode == "softmax_rows":
        if x.ndim != 2:
            raise NnError(f"softmax_rows needs rank-2 input, got {x.shape}")
        z = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            dot = (g * out).sum(axis=1, keepdims=True)
            return ((g - dot) * out,)

        return make_op(out, (x,), backward)
    raise NnError(f"unknown activation mode {mode!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def channel_affine(x: Tensor, scl: Tensor, shift: Tensor) -> Tensor:
    """Per-channel scale and shift over [C,H,W] or [N,C,H,W] feature maps."""
    x, scl, shift = _as_tensor(x), _as_tensor(scl), _as_tensor(shift)
    axis = x.ndim - 3
    c = x.shape[axis]
    if scl.shape != (c,) or shift.shape != (c,):
        raise NnError(f"channel_affine expects per-channel [{c}] scale/shift")
    view = (1,) * axis + (c, 1, 1)
    out = x.data * scl.data.reshape(view) + shift.data.reshape(view)

    def backward(g):
        reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
        return (
            g * scl.data.reshape(view),
            (g * x.data).sum(axis=reduce_axes),
            g.sum(axis=reduce_axes),
        )

    return make_op(out, (x, scl, shift), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# loss primitives

# Losses reduce with 64-bit accumulation and support an optional constant
# per-element weight so callers can mask contributions (e.g. positive RoIs
# only) without gather operations.


def _reduce(values: np.ndarray, reduction: str, dtype):
    if reduction == "sum":
        return np.asarray(np.sum(values, dtype=np.float64), dtype=dtype), 1.0
    if reduction == "mean":
        return (
            np.asarray(np.sum(values, dtype=np.float64) / values.size, dtype=dtype),
            1.0 / values.size,
        )
    raise NnError(f"unknown reduction {reduction!r}")


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean", weight=None) -> Tensor:
    """Row-wise cross-entropy between logits [N,K] and integer labels [N]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise NnError(f"cross-entropy shapes: logits {logits.shape}, labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    losses = logsumexp - z[np.arange(n), labels]
    w = np.ones(n, dtype=logits.dtype) if weight is None else np.asarray(weight, dtype=logits.dtype)
    value, factor = _reduce(losses * w, reduction, logits.dtype)

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (w * factor * float(g))[:, None], )

    return make_op(value, (logits,), backward)


def sigmoid_cross_entropy(logits: Tensor, targets, reduction: str = "mean", weight=None) -> Tensor:
    """Per-element binary cross-entropy on logits, computed stably."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise NnError(f"BCE shapes: logits {logits.shape}, targets {t.shape}")
    z = logits.data
    losses = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    w = 1.0 if weight is None else np.asarray(weight, dtype=logits.dtype)
    value, factor = _reduce(losses * w, reduction, logits.dtype)

    def backward(g):
        return ((_sigmoid(z) - t) * w * (factor * float(g)),)

    return make_op(value, (logits,), backward)


def smooth_l1(pred: Tensor, target, reduction: str = "sum", weight=None) -> Tensor:
    """Huber-style regression loss: 0.5 d^2 for |d| < 1, |d| - 0.5 beyond."""
    pred = _as_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise NnError(f"smooth_l1 shapes: pred {pred.shape}, target {t.shape}")
    d = pred.data - t
    ad = np.abs(d)
    losses = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    w = 1.0 if weight is None else np.asarray(weight, dtype=pred.dtype)
    value, factor = _reduce(losses * w, reduction, pred.dtype)

    def backward(g):
        return (np.clip(d, -1.0, 1.0) * w * (factor * float(g)),)

    return make_op(value, (pred,), backward)


# ---------------------------------------------------------------------------
# parameters and optimization


class Parameter:
    """Named trainable tensor with a momentum buffer.

    Names are '.'-joined paths (e.g. ``backbone.stage1.block0.conv1.weight``)
    so training stages can freeze parameter groups by prefix.
    """

    __slots__ = ("name", "value", "momentum", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        self.momentum = np.zeros(self.value.shape, dtype=np.float32)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def sgd_step(params: Iterable[Parameter], learning_rate: float, momentum: float) -> None:
    """One SGD-with-momentum update; clears gradients afterwards.

    buffer <- momentum * buffer + grad;  value <- value - lr * buffer.
    """
    for p in params:
        g = p.value.grad
        if g is None:
            raise NnError(f"parameter {p.name!r} has no gradient; run backward first")
        p.momentum *= np.float32(momentum)
        p.momentum += g
        p.value.data -= np.float32(learning_rate) * p.momentum
        p.value.grad = None


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Zero-mean uniform weights with standard deviation 1/sqrt(fan_in)."""
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The check runs at 64-bit: inputs are cast to float64 copies so that the
    difference quotient ``(f(x+eps) - f(x-eps)) / (2 eps)`` is not quantized
    away by 32-bit storage.  ``fn`` must be deterministic.
    """
    if eps <= 0:
        raise NnError("eps must be positive")
    inputs64 = [Tensor(t.data.astype(np.float64), requires_grad=True, dtype=np.float64) for t in inputs]
    out = fn(*inputs64)
    if out.data.size != 1:
        raise NnError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data):
        raise NnError("non-finite value in forward pass")
    out.backward()
    worst = 0.0
    for t in inputs64:
        analytic = np.zeros(t.shape, dtype=np.float64) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric = np.zeros(flat.shape, dtype=np.float64)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(fn(*inputs64).data)
                flat[i] = orig - eps
                lo = float(fn(*inputs64).data)
                flat[i] = orig
                numeric[i] = (hi - lo) / (2.0 * eps)
        if not np.all(np.isfinite(numeric)):
            raise NnError("non-finite value in finite-difference pass")
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
