"""Dense real tensors with tape-based reverse-mode differentiation.

Arrays are plain numpy buffers; a :class:`Tensor` wraps one and, when
gradients are being recorded, remembers its parents and a closure that maps
the upstream gradient onto them (a vector-Jacobian product).  Every op in
this module and in :mod:`fouriernat.spectral` follows that contract, which
is what lets :func:`grad_check` target any of them.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# per thread, so concurrent decoding workers cannot leave recording switched off
_grad_state = threading.local()


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class GradCheckError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class Rng:
    """Seeded random stream. Same seed and call sequence give the same draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, scale=1.0, dtype=DEFAULT_DTYPE):
        return (self._gen.standard_normal(shape) * scale).astype(dtype, copy=False)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, tag: int) -> "Rng":
        # independent child stream keyed by (seed, tag)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, tag])
        return Rng(int(ss.generate_state(2, np.uint64)[0]))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) * grad into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)


class Parameter(Tensor):
    """Named trainable leaf; ``grad`` starts as zeros of the value's shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.array(value), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _needs_grad(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._backward is not None)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap both operands; a bare scalar takes its partner's dtype so float32 stays float32."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _make(data, parents, backward, op):
    if is_grad_enabled() and any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if shared:
        # shared weight: flatten leading axes into one GEMM
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        if shared:
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a.data.reshape(-1, k).T @ g2
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a 2-D weight shared over the leading axes of ``x``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine shape mismatch: {x.shape} @ {w.shape} + {b.shape}")
    k, n = w.shape
    flat = x.data.reshape(-1, k)
    out = flat @ w.data
    out += b.data

    def backward(g):
        g2 = g.reshape(-1, n)
        return (g2 @ w.data.T).reshape(x.shape), flat.T @ g2, g2.sum(axis=0)

    return _make(out.reshape(x.shape[:-1] + (n,)), (x, w, b), backward, "affine")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _make(out, (x,), backward, "relu")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), backward, "transpose")


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def concat(xs: Sequence, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(xs), backward, "concat")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back with ``np.add.at``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), backward, "embedding")


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    xhat = x.data - x.data.sum(axis=-1, keepdims=True) * (1.0 / d)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] * (1.0 / d)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gain.data
    out += bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain.reshape(gain.shape), gbias.reshape(bias.shape)

    return _make(out, (x, gain, bias), backward, "layer_norm")


def dropout(x, p: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.generator.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return _make(out, (x,), backward, "dropout")


def cross_entropy(logits, targets, weights, label_smoothing=0.0) -> Tensor:
    """Weighted sum of per-row cross-entropies.

    ``weights`` is a non-differentiable array broadcastable to ``targets``;
    zero weight removes a row entirely (its logits get zero gradient).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=logits.dtype) * np.ones(targets.shape, dtype=logits.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    V = logits.shape[-1]
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    if label_smoothing:
        smooth = -logp.mean(axis=-1)
        per = (1 - label_smoothing) * nll + label_smoothing * smooth
    else:
        per = nll
    out = np.asarray((per * w).sum())

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        tgt = (1 - label_smoothing) * onehot + label_smoothing / V
        return ((p - tgt) * (w * g)[..., None],)

    return _make(out, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5,
               rng: Rng | None = None, wrt: Iterable[int] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The output is reduced to a scalar by a random projection ``r``; the
    error for each input coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    rng = rng or Rng(0)
    arrays = [np.array(_raw(x), dtype=np.float64) for x in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    name = getattr(f, "__name__", "op")

    leaves = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = f(*leaves)
    _check_finite(out.data, name)
    r = rng.normal(out.shape)
    out.backward(r)

    def scalar(vals):
        y = f(*[Tensor(v) for v in vals]).data
        _check_finite(y, name)
        return float((y * r).sum())

    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = scalar(arrays)
            flat[j] = orig - eps
            lo = scalar(arrays)
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      eps: float = 1e-5, rng: Rng | None = None,
                      max_coords: int | None = None) -> float:
    """Same check as :func:`grad_check` but over model parameters in place.

    ``max_coords`` caps the number of probed coordinates per parameter
    (sampled with ``rng``) to keep large models tractable.
    """
    rng = rng or Rng(0)
    for p in params:
        p.zero_grad()
    out = loss_fn()
    _check_finite(out.data, "loss")
    r = rng.normal(out.shape) if out.data.size > 1 else np.ones(out.shape)
    out.backward(r)
    analytic = {id(p): p.grad.copy() for p in params}

    def scalar():
        with no_grad():
            y = loss_fn().data
        _check_finite(y, "loss")
        return float((y * r).sum())

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.generator.choice(flat.size, size=max_coords, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            hi = scalar()
            flat[j] = orig - eps
            lo = scalar()
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic[id(p)].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise GradCheckError(f"non-finite value produced by {name}")


def xavier(rng: Rng, fan_in: int, fan_out: int, shape=None):
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(shape or (fan_in, fan_out), std)
