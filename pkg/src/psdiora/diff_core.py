"""Small reverse-mode autodiff over numpy float64 arrays.

Only the handful of operations the inside-outside chart needs are provided.
Every op checks its output for NaN/Inf and raises :class:`NumericalError`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse


class NumericalError(FloatingPointError):
    """Raised when an operation produces a non-finite value."""


def _check(value, name):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite value produced by {name}")
    return value


def _unbroadcast(grad, shape):
    # sum out the axes numpy broadcast over
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self._op = op
        _check(self.value, op)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, op={self._op})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return Tensor(
        a.value + b.value,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        op="add",
    )


def neg(a):
    return Tensor(-a.value, parents=(a,), backward=lambda g: (-g,), op="neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return Tensor(
        av * bv,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        op="mul",
    )


def matmul(x, w):
    """``x @ w`` with ``x`` of shape (..., m) and ``w`` a matrix (m, k)."""
    x, w = as_tensor(x), as_tensor(w)
    xv, wv = x.value, w.value

    def backward(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return Tensor(xv @ wv, parents=(x, w), backward=backward, op="matmul")


def tanh(x):
    out = np.tanh(x.value)
    return Tensor(out, parents=(x,), backward=lambda g: (g * (1.0 - out * out),), op="tanh")


def tsum(x, axis=None):
    shape = x.value.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor(x.value.sum(axis=axis), parents=(x,), backward=backward, op="sum")


def index(x, key):
    """Basic or advanced indexing; gradients scatter-add back."""
    shape = x.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return Tensor(x.value[key], parents=(x,), backward=backward, op="index")


_SCATTER_CACHE = {}


def _scatter_matrix(flat, size):
    key = (flat.tobytes(), size)
    mat = _SCATTER_CACHE.get(key)
    if mat is None:
        if len(_SCATTER_CACHE) > 4096:
            _SCATTER_CACHE.clear()
        data = np.ones(flat.size)
        mat = sparse.csr_matrix((data, (flat, np.arange(flat.size))), shape=(size, flat.size))
        _SCATTER_CACHE[key] = mat
    return mat


def take(x, idx, axis):
    """Gather ``x`` along ``axis`` with an integer index array of any shape."""
    idx = np.asarray(idx)
    shape = x.value.shape
    flat = idx.reshape(-1)

    def backward(g):
        gm = np.moveaxis(g.reshape(shape[:axis] + (flat.size,) + shape[axis + 1:]), axis, 0)
        rest = gm.shape[1:]
        summed = _scatter_matrix(flat, shape[axis]) @ gm.reshape(flat.size, -1)
        return (np.moveaxis(np.asarray(summed).reshape((shape[axis],) + rest), 0, axis),)

    return Tensor(np.take(x.value, idx, axis=axis), parents=(x,), backward=backward, op="take")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(
        np.concatenate([t.value for t in tensors], axis=axis),
        parents=tuple(tensors),
        backward=backward,
        op="concat",
    )


def broadcast_to(x, shape):
    src = x.value.shape
    return Tensor(
        np.broadcast_to(x.value, shape).copy(),
        parents=(x,),
        backward=lambda g: (_unbroadcast(g, src),),
        op="broadcast",
    )


def bilinear(left, mat, right):
    """``left^T mat right`` over the last axis, batched over leading axes."""
    lv, mv, rv = left.value, mat.value, right.value
    lm = lv @ mv  # (..., D)
    rm = rv @ mv.T

    def backward(g):
        ge = g[..., None]
        gl = ge * rm
        gr = ge * lm
        gm = (lv * ge).reshape(-1, lv.shape[-1]).T @ rv.reshape(-1, rv.shape[-1])
        return gl, gm, gr

    return Tensor(
        np.einsum("...d,...d->...", lm, rv),
        parents=(left, mat, right),
        backward=backward,
        op="bilinear",
    )


def weighted_sum(a, h):
    """``sum_k a[..., k] * h[..., k, :]``: mix vectors h by weights a."""
    av, hv = a.value, h.value

    def backward(g):
        ge = g[..., None, :]
        return (ge * hv).sum(axis=-1), av[..., None] * ge

    return Tensor(np.einsum("...k,...kd->...d", av, hv), parents=(a, h), backward=backward, op="weighted_sum")


def softmax_values(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    v = x.value
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    p = softmax_values(v, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor(p, parents=(x,), backward=backward, op="softmax")


def log_softmax(x, axis=-1):
    v = x.value
    z = v - np.max(v, axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, parents=(x,), backward=backward, op="log_softmax")


def pick(x, idx):
    """``x[..., idx[...]]``: select one entry of the last axis per position."""
    idx = np.asarray(idx)
    ex = idx[..., None]
    shape = x.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, ex, g[..., None], axis=-1)
        return (out,)

    return Tensor(np.take_along_axis(x.value, ex, axis=-1)[..., 0], parents=(x,), backward=backward, op="pick")


# ---------------------------------------------------------------------------
# Model parameters


PARAM_NAMES = ("embed", "compose_W", "compose_b", "score_S", "root", "out_proj")


class ModelParams:
    """Named parameter tensors of the chart encoder.

    ``compose_W`` maps the concatenated ``[left; right]`` (2D) to D,
    ``score_S`` is the D x D bilinear scoring matrix.
    """

    def __init__(self, tensors):
        missing = set(PARAM_NAMES) - set(tensors)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        self.tensors = {name: tensors[name] for name in PARAM_NAMES}
        for t in self.tensors.values():
            t.requires_grad = True

    @classmethod
    def init(cls, vocab_size, dim, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)

        def u(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape))

        return cls(
            {
                "embed": u(vocab_size, dim),
                "compose_W": u(2 * dim, dim),
                "compose_b": Tensor(np.zeros(dim)),
                "score_S": u(dim, dim),
                "root": u(dim),
                "out_proj": u(dim, vocab_size),
            }
        )

    @property
    def dim(self):
        return self.tensors["root"].value.shape[0]

    @property
    def vocab_size(self):
        return self.tensors["embed"].value.shape[0]

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self):
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.value)) for n, t in self.items()}

    def arrays(self):
        return {n: t.value.copy() for n, t in self.items()}

    def load_arrays(self, arrays):
        for n, t in self.items():
            if arrays[n].shape != t.value.shape:
                raise ValueError(f"shape mismatch for {n}: {arrays[n].shape} vs {t.value.shape}")
            t.value = np.array(arrays[n], dtype=np.float64, copy=True)

    def copy(self):
        return ModelParams({n: Tensor(v) for n, v in self.arrays().items()})


def compose(left, right, params):
    """tanh(W [left; right] + b), batched over leading axes."""
    if left.value.shape[-1] != right.value.shape[-1]:
        raise ValueError("compose: dimension mismatch")
    return tanh(add(matmul(concat([left, right], axis=-1), params["compose_W"]), params["compose_b"]))


def score(left, right, params):
    """Bilinear compatibility ``left^T S right``."""
    if left.value.shape[-1] != right.value.shape[-1]:
        raise ValueError("score: dimension mismatch")
    return bilinear(left, params["score_S"], right)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, arrays, meta):
    """Write ``arrays`` (name -> ndarray) and JSON ``meta`` into an .npz file.

    The JSON header is stored as a uint8 array under ``__meta__``; it always
    carries ``format_version``.
    """
    meta = dict(meta, format_version=CHECKPOINT_VERSION)
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=header, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return arrays, meta


# ---------------------------------------------------------------------------
# Finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple  # (param name, flat index)
    n_checked: int

    def passed(self, tol):
        return self.max_rel_error < tol


def grad_check(loss_fn, params, eps=1e-5, tol=1e-4, max_coords=None, seed=0, floor=1e-6):
    """Compare analytic gradients of ``loss_fn(params) -> Tensor`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` limits the number of coordinates sampled per parameter.
    ``params`` is either a :class:`ModelParams` or a dict of Tensors.
    """
    tensors = dict(params.items())
    for t in tensors.values():
        t.grad = None
    loss = loss_fn(params)
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value)) for n, t in tensors.items()}
    rng = np.random.default_rng(seed)
    worst_err, worst_at, count = 0.0, None, 0
    for name, t in tensors.items():
        size = t.value.size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        flat = t.value.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = np.asarray(loss_fn(params).value).item()
            flat[c] = orig - eps
            fm = np.asarray(loss_fn(params).value).item()
            flat[c] = orig
            num = (fp - fm) / (2 * eps)
            ana = analytic[name].reshape(-1)[c]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            count += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (name, int(c))
    for t in tensors.values():
        t.grad = None
    return GradCheckReport(worst_err, worst_at, count)
