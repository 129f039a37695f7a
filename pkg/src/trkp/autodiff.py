"""Small reverse-mode autodiff engine over dense numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the upstream gradient back into them.  Node ids are
drawn from a global counter, so sorting by id is a valid topological order
and the backward sweep (descending id) is fully deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An autodiff precondition was violated (e.g. non-scalar loss)."""


def resolve_dtype(precision) -> np.dtype:
    if precision in (None, "f32", "float32", np.float32):
        return np.dtype(np.float32)
    if precision in ("f64", "float64", np.float64):
        return np.dtype(np.float64)
    raise ValueError(f"unknown precision {precision!r}")


class Tensor:
    __slots__ = ("data", "grad", "parents", "op", "_backward", "id", "name", "__weakref__")

    def __init__(self, data, parents: Sequence["Tensor"] = (), op: str = "leaf",
                 backward: Callable[[np.ndarray], None] | None = None,
                 dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def __deepcopy__(self, memo):
        # a copy is a new graph leaf; sharing the id would merge it with the original
        if not self.is_leaf:
            raise ContractError("only leaf tensors can be copied")
        return Tensor(self.data.copy(), name=self.name)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ "
                         "(only scalar-tensor broadcasting is supported)")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=t.dtype)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _binary_shapes(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a))
        _accumulate(b, _unbroadcast(g, b))

    return Tensor(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _binary_shapes(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a))
        _accumulate(b, _unbroadcast(-g, b))

    return Tensor(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _binary_shapes(a, b, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a))
        _accumulate(b, _unbroadcast(g * a.data, b))

    return Tensor(a.data * b.data, (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, np.zeros((), x.dtype))

    def backward(g):
        _accumulate(x, g * mask)

    return Tensor(out, (x,), "relu", backward)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = np.asarray(0.5, z.dtype)
    return half * (np.tanh(half * z) + 1)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def backward(g):
        _accumulate(x, g * s * (1 - s))

    return Tensor(s, (x,), "sigmoid", backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(x, s * (g - dot))

    return Tensor(s, (x,), "softmax", backward)


def grl(x: Tensor, mu: float) -> Tensor:
    """Gradient reversal: identity forward, ``-mu * g`` backward."""
    if mu < 0:
        raise ValueError(f"GRL factor must be non-negative, got {mu}")
    factor = np.asarray(-mu, dtype=x.dtype)

    def backward(g):
        _accumulate(x, g * factor)

    return Tensor(x.data, (x,), "grl", backward)


# ---------------------------------------------------------------------------
# structural


def take(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accumulate(x, full)

    return Tensor(out, (x,), "take", backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return Tensor(out, (x,), "reshape", backward)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axes), x.shape).astype(x.dtype))

    return Tensor(np.asarray(out, dtype=x.dtype), (x,), "sum", backward)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor(a.data @ b.data, (a, b), "matmul", backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x{x.shape} w{w.shape} b{b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data + b.data).reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        _accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        _accumulate(w, x2.T @ g2)
        _accumulate(b, g2.sum(axis=0))

    return Tensor(out, (x, w, b), "affine", backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NHWC input and (kh, kw, cin, cout) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: x{x.shape} w{w.shape} b{b.shape}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    p = padding
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wd + 2 * p - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (n, ho, wo, cin, kh, kw) -> rows of (kh, kw, cin)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + b.data).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        _accumulate(w, (cols.T @ g2).reshape(w.shape))
        _accumulate(b, g2.sum(axis=0))
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        _accumulate(x, dxp[:, p:p + h, p:p + wd, :] if p else dxp)

    return Tensor(out, (x, w, b), "conv2d", backward)


# ---------------------------------------------------------------------------
# fused losses (elementwise outputs; reduce with tensor_sum)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid_focal(logits: Tensor, targets: np.ndarray, alpha: float = 0.25,
                  gamma: float = 2.0) -> Tensor:
    """Binary focal loss per element, ``-a_t (1 - p_t)^gamma log p_t``.

    ``targets`` is a constant 0/1 array of the same shape as ``logits``.
    """
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_focal: targets {t.shape} vs logits {logits.shape}")
    sign = 2 * t - 1
    z = logits.data * sign
    q = _sigmoid_np(-z)                  # 1 - p_t
    s = _softplus(-z)                    # -log p_t
    a_t = np.where(t > 0, alpha, 1 - alpha).astype(logits.dtype)
    qg = q ** gamma
    out = a_t * qg * s

    def backward(g):
        dz = -a_t * qg * (gamma * (1 - q) * s + q)
        _accumulate(logits, g * dz * sign)

    return Tensor(out, (logits,), "sigmoid_focal", backward)


def softmax_focal(logits: Tensor, labels: np.ndarray, alpha: float = 0.25,
                  gamma: float = 2.0) -> Tensor:
    """Multi-class focal loss on the last axis; output drops that axis.

    ``labels`` holds integer class ids with shape ``logits.shape[:-1]``.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_focal: labels {labels.shape} vs logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, labels[..., None].astype(np.intp), 1, axis=-1)
    logp_t = (logp * onehot).sum(axis=-1)
    p_t = np.exp(logp_t)
    ell = -logp_t
    out = alpha * (1 - p_t) ** gamma * ell

    def backward(g):
        coef = alpha * (gamma * (1 - p_t) ** (gamma - 1) * p_t * ell + (1 - p_t) ** gamma)
        _accumulate(logits, (g * coef)[..., None] * (p - onehot))

    return Tensor(out.astype(logits.dtype), (logits,), "softmax_focal", backward)


def smooth_l1(pred: Tensor, target: np.ndarray, delta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber with ``delta``) against a constant target."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"smooth_l1: target {target.shape} vs pred {pred.shape}")
    d = pred.data - target
    ad = np.abs(d)
    quad = ad < delta
    out = np.where(quad, 0.5 * d * d / delta, ad - 0.5 * delta)

    def backward(g):
        _accumulate(pred, g * np.where(quad, d / delta, np.sign(d)))

    return Tensor(out.astype(pred.dtype), (pred,), "smooth_l1", backward)


# ---------------------------------------------------------------------------
# backward pass


def _collect(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        stack.extend(t.parents)
    return sorted(seen.values(), key=lambda t: t.id, reverse=True)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Run the reverse sweep from ``loss``; return ``{leaf: d loss / d leaf}``.

    Every reachable accumulator is reset first, so repeated calls give the
    same answer.  ``grad`` seeds a non-scalar root (vector-Jacobian product).
    """
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(grad, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise ShapeError(f"seed gradient {seed.shape} vs root {loss.shape}")
    order = _collect(loss)
    for t in order:
        t.grad = np.zeros_like(t.data)
    loss.grad = seed.copy()
    leaves = {}
    for t in order:
        if t._backward is not None:
            t._backward(t.grad)
        elif t.is_leaf:
            leaves[t] = t.grad
    return leaves


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), name=name)


def numerical_grad(f: Callable[[], float], leaves: Iterable[Tensor], eps: float) -> list[np.ndarray]:
    """Central finite differences of scalar ``f()`` w.r.t. each leaf, in place."""
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data, dtype=np.float64)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads
