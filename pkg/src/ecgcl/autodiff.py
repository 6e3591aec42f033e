"""Small reverse-mode differentiation core.

Only the operators needed by the encoder and the contrastive/supervised
losses are provided. Values are float64 numpy arrays; every operation that
touches a tensor requiring gradients records a node carrying a monotonically
increasing tape position, and :meth:`Tensor.backward` replays those nodes in
reverse recording order.
"""

from __future__ import annotations

import itertools
import math
import os
import struct
import tempfile

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_tape_counter = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-dimensional float64 value that participates in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._pos = next(_tape_counter)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        nodes = _record_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _record_order(root):
    """Nodes reachable from ``root`` that require gradients, in recording order."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n._pos)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise and structural primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def reciprocal(a):
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    return _make(a.data ** 2, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (g.T,))


def flatten(a):
    """[K, ...] -> [K, prod(...)]"""
    return reshape(a, (a.shape[0], -1))


def stop_gradient(a):
    return Tensor(a.data)


# network layers

def conv1d(x, weight, bias, stride=1):
    """Valid (unpadded) 1-D cross-correlation.

    x: [K, C_in, L_in], weight: [C_out, C_in, k], bias: [C_out]
    returns [K, C_out, floor((L_in - k) / stride) + 1]
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be [K, C_in, L], got shape {x.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d C_in mismatch: input has {x.shape[1]} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
    if x.shape[2] < k:
        raise ShapeError(f"conv1d L_in={x.shape[2]} shorter than kernel k={k}")
    windows = sliding_window_view(x.data, k, axis=2)[:, :, ::stride, :]  # [K, C_in, L_out, k]
    l_out = windows.shape[2]
    out = np.einsum("bclj,ocj->bol", windows, weight.data, optimize=True) + bias.data[None, :, None]

    def backward(g):
        gw = np.einsum("bclj,bol->ocj", windows, g, optimize=True)
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = np.einsum("bol,ocj->bclj", g, weight.data, optimize=True)
            gx = np.zeros_like(x.data)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gx[:, :, j:j + span:stride] += gcols[:, :, :, j]
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward)


def conv1d_output_length(l_in, k, stride):
    return (l_in - k) // stride + 1


def batchnorm1d(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):
    """Per-channel normalization of [K, C, L] over the (K, L) axes.

    ``running_mean``/``running_var`` are plain arrays updated in place when
    ``training`` is true (unbiased variance for the running estimate).
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm1d input must be [K, C, L], got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm1d affine parameters must have shape ({c},)")
    n = x.shape[0] * x.shape[2]
    if training:
        if n < 2:
            raise ValueError("batchnorm1d in training mode needs K*L >= 2")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = g * gamma.data[None, :, None]
        if training:
            gx = (inv_std[None, :, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def maxpool1d(x, kernel=2, stride=2):
    """Max pooling along the last axis; ties route gradient to the first maximum."""
    if kernel != stride:
        raise NotImplementedError("only non-overlapping pooling (stride == kernel) is supported")
    k_, c, length = x.shape
    l_out = length // kernel
    if l_out < 1:
        raise ShapeError(f"maxpool1d input length {length} shorter than kernel {kernel}")
    blocks = x.data[:, :, :l_out * kernel].reshape(k_, c, l_out, kernel)
    idx = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, :, :l_out * kernel] = gblocks.reshape(k_, c, l_out * kernel)
        return (gx,)

    return _make(out, (x,), backward)


def dropout(x, p, training, rng=None):
    """Inverted dropout: scales kept units by 1/(1-p) in training, identity otherwise."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def linear(x, weight, bias):
    """x: [K, D_in], weight: [D_in, D_out], bias: [D_out]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    return matmul(x, weight) + bias


def cosine_similarity_matrix(a, b, eps=None):
    """M[i, j] = a_i . b_j / (|a_i| |b_j|) for a: [K_a, E], b: [K_b, E].

    With ``eps`` set, norms are floored at ``eps`` instead of raising on
    zero rows (an all-dead ReLU embedding then scores 0 against everything).
    """
    a, b = as_tensor(a), as_tensor(b)
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if eps is None:
        for label, norms in (("A", na), ("B", nb)):
            zero = np.flatnonzero(norms == 0)
            if zero.size:
                raise ValueError(f"cosine similarity undefined: row {int(zero[0])} of {label} has zero norm")
        ca = cb = np.zeros(0, dtype=bool)
    else:
        ca, cb = na < eps, nb < eps
        na, nb = np.maximum(na, eps), np.maximum(nb, eps)
    an = a.data / na[:, None]
    bn = b.data / nb[:, None]
    out = an @ bn.T

    def backward(g):
        gan = g @ bn
        gbn = g.T @ an
        ga = (gan - an * (gan * an).sum(axis=1, keepdims=True)) / na[:, None]
        gb = (gbn - bn * (gbn * bn).sum(axis=1, keepdims=True)) / nb[:, None]
        # floored rows are divided by a constant, so no projection term
        if ca.any():
            ga[ca] = gan[ca] / na[ca, None]
        if cb.any():
            gb[cb] = gbn[cb] / nb[cb, None]
        return ga, gb

    return _make(out, (a, b), backward)


def log_sum_exp(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(total) + m).squeeze(axis)
    soft = shifted / total
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))


def log_softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy of integer class targets against [K, C] logits."""
    targets = np.asarray(targets, dtype=np.int64)
    k, c = logits.shape
    if targets.shape != (k,):
        raise ShapeError(f"targets must have shape ({k},), got {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"target index out of range for {c} classes")
    onehot = np.zeros((k, c))
    onehot[np.arange(k), targets] = 1.0
    return -(log_softmax(logits, axis=1) * onehot).sum() * (1.0 / k)


def sigmoid_bce(logits, targets):
    """Mean binary cross-entropy with logits over all entries (multi-hot targets)."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"targets shape {y.shape} differs from logits {logits.shape}")
    z = logits.data
    n = z.size
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _make(np.asarray(loss), (logits,), lambda g: (g * (sig - y) / n,))


def mse(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return square(a - b).mean()


# optimization

def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``param``, ``m`` and ``v``.

    ``step`` is the 1-based index of this update. Returns nothing.
    """
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a name -> Tensor mapping."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, self.m[name], self.v[name], self.step_count,
                      self.lr, self.beta1, self.beta2, self.eps)

    def state_dict(self):
        state = {"adam.step": np.array(self.step_count, dtype=np.float64)}
        for name in self.params:
            state[f"adam.m.{name}"] = self.m[name]
            state[f"adam.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["adam.step"])
        for name in self.params:
            self.m[name] = np.array(state[f"adam.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"adam.v.{name}"], dtype=np.float64)


# verification

def finite_difference_check(f, point, eps=1e-5, indices=None):
    """Max relative error between the analytic gradient of ``f`` at ``point``
    and central differences.

    ``f`` maps a float64 array to a scalar :class:`Tensor`; ``point`` is an
    array. ``indices`` optionally restricts the flat coordinates probed.
    The relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    out = f(x)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(point)
    analytic = analytic.ravel()
    flat = point.ravel()
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(point)).item()
        flat[i] = orig - eps
        fm = f(Tensor(point)).item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# checkpoint container

CHECKPOINT_MAGIC = b"CLCK"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _pack_blocks(blocks):
    parts = [struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_bytes(params, optimizer_state=None):
    body = _pack_blocks(params) + _pack_blocks(optimizer_state or {})
    return CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + body


def save_checkpoint(path, params, optimizer_state=None):
    """Write parameter and optimizer blocks atomically (float32 payloads)."""
    data = checkpoint_bytes(params, optimizer_state)
    _atomic_write(path, data)


def _atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_checkpoint(data):
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    sections = []
    for _ in range(2):
        (count,) = struct.unpack("<I", take(4))
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            n = math.prod(dims)
            arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
            blocks[name] = arr.astype(np.float64)
        sections.append(blocks)
    if pos != len(data):
        raise CheckpointFormatError("trailing bytes after checkpoint blocks")
    return sections[0], sections[1]


def load_checkpoint(path):
    """Return ``(params, optimizer_state)`` dictionaries of float64 arrays."""
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
