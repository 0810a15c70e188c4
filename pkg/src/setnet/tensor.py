"""Dense float64 tensors with reverse-mode gradients.

Only the operations PointNet needs are provided.  Every forward matrix
product goes through :mod:`setnet._kernels`, so a row's output never depends
on which other rows share the batch; backward products use BLAS because
gradients only need run-to-run determinism, not row independence.

Set reductions (``mean_over_set``, ``attention_pool``) sum their addends in
sorted order, which makes them bitwise invariant to row permutations.
"""

import contextlib
import itertools
import threading

import numpy as np

from ._kernels import batched_matmul_rows, matmul_rows
from .errors import ConfigError, DimensionError, EmptySetError, LabelError, NumericError

_ids = itertools.count()
_mode = threading.local()


def grad_enabled():
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


class Node:
    """One recorded operation: its inputs and how to push gradients to them."""

    __slots__ = ("id", "op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self):
        return f"Node({self.id}, {self.op!r})"


class Tensor:
    """A value array paired with a same-shaped gradient array.

    ``grad`` is allocated lazily as zeros.  Parameters can pass an explicit
    ``grad`` buffer so that many tensors share one flat gradient vector.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, grad=None):
        data = np.asarray(data, dtype=np.float64)
        if grad is not None and grad.shape != data.shape:
            raise DimensionError(f"grad shape {grad.shape} != data shape {data.shape}")
        self.data = data
        self._grad = grad
        self.requires_grad = requires_grad
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=np.float64).reshape(self.data.shape)

    @property
    def is_leaf(self):
        return self._node is None

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def backward(self, grad=None):
        Graph.from_root(self).backward(self, grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op, data, inputs, backward):
    """Wrap ``data`` as the output of ``op`` applied to ``inputs``.

    ``backward(upstream)`` must return one gradient (or ``None``) per input.
    Nothing is recorded when no input needs a gradient or recording is off.
    """
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward)
    return out


class Graph:
    """The recorded operations reachable from one root, in insertion order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        seen = set()
        tensors = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            tensors.append(t)
            stack.extend(t._node.inputs)
        tensors.sort(key=lambda t: t._node.id)
        return cls(tensors)

    def __len__(self):
        return len(self.nodes)

    def backward(self, root, grad=None):
        """Propagate from ``root`` in reverse insertion order.

        Intermediate gradients are rebuilt on every call while leaf gradients
        accumulate, so two calls leave exactly twice the leaf gradient.
        """
        if grad is None:
            if root.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar root")
            grad = np.ones_like(root.data)
        for t in self.nodes:
            t._grad = None
        root._grad = np.array(grad, dtype=np.float64).reshape(root.shape)
        for t in reversed(self.nodes):
            if t._grad is None:
                continue
            grads = t._node.backward(t._grad)
            for inp, g in zip(t._node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp._grad is None:
                    inp._grad = np.array(g, dtype=np.float64).reshape(inp.shape)
                else:
                    inp._grad += g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def square(x):
    return record("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def relu(x):
    """Elementwise ``max(x, 0)``; the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def _same_or_scalar(a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"shapes {a.shape} and {b.shape} differ")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# ------------------------------------------------------------------- shaping


def reshape(x, shape):
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x):
    """Swap the last two axes."""
    return record("transpose", np.swapaxes(x.data, -1, -2), (x,),
                  lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", data, tuple(tensors), backward)


def expand_points(x, n):
    """Repeat a ``(B, K)`` per-set vector over ``n`` points: ``(B, n, K)``."""
    data = np.repeat(x.data[:, None, :], n, axis=1)
    return record("expand_points", data, (x,), lambda g: (g.sum(axis=1),))


def gather_rows(x, index):
    """Select rows along the point axis.

    A 1-D ``index`` is shared by every batch entry; a ``(B, m)`` index
    selects per batch entry.  Either may repeat rows, whose gradients add up.
    """
    index = np.asarray(index)
    data = np.take_along_axis(x.data, index[..., None], axis=-2) if index.ndim > 1 else x.data[..., index, :]

    def backward(g):
        out = np.zeros_like(x.data)
        if index.ndim > 1:
            for b in np.ndindex(index.shape[:-1]):
                np.add.at(out[b], index[b], g[b])
        else:
            np.add.at(out, (Ellipsis, index, slice(None)), g)
        return (out,)

    return record("gather_rows", data, (x,), backward)


# ---------------------------------------------------------------- reductions


def sum_all(x):
    return record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x):
    n = x.size
    return record("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ------------------------------------------------------------ linear algebra


def matmul(a, b):
    """``(r, k) @ (k, c)``, or the batched ``(B, r, k) @ (B, k, c)`` form."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul needs two 2-D or two 3-D operands, got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    data = matmul_rows(a.data, b.data) if a.ndim == 2 else batched_matmul_rows(a.data, b.data)

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return record("matmul", data, (a, b), backward)


def dense(x, weight, bias=None):
    """Affine map of the last axis: ``x @ weight + bias`` for any leading shape."""
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"dense expects last dim {d_in}, got {x.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, d_in)
    out = matmul_rows(flat, weight.data)
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, d_out)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("dense", out, inputs, backward)


# -------------------------------------------------------------- batch norm


class BatchNormStats:
    """Running mean and variance of one normalization layer."""

    def __init__(self, width):
        self.mean = np.zeros(width)
        self.var = np.ones(width)

    def __repr__(self):
        return f"BatchNormStats(width={self.mean.size})"


def batch_norm(x, gamma, beta, stats, mode="eval", momentum=0.5, eps=1e-5):
    """Normalize each channel (last axis) over all leading positions.

    In ``train`` mode the batch statistics are used and the running ones
    become ``momentum * running + (1 - momentum) * batch``.  ``eval`` mode
    normalizes with the running statistics.
    """
    width = x.shape[-1]
    flat = x.data.reshape(-1, width)
    rows = flat.shape[0]
    if mode == "train":
        if rows < 2:
            raise ConfigError("batch_norm in train mode needs at least 2 rows")
        mu = flat.mean(axis=0)
        centered = flat - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        stats.mean *= momentum
        stats.mean += (1.0 - momentum) * mu
        stats.var *= momentum
        stats.var += (1.0 - momentum) * var
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(stats.var + eps)
        xhat = (flat - stats.mean) * inv_std
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, width)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        if mode == "train":
            dx = inv_std / rows * (rows * dxhat - dxhat.sum(axis=0)
                                   - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx.reshape(x.shape), dgamma, dbeta

    return record("batch_norm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------- set aggregation


def _check_set(x):
    if x.ndim < 2:
        raise DimensionError(f"set input needs a point axis, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise EmptySetError("cannot aggregate an empty set")


def max_over_set(x):
    """Column-wise maximum over the point axis (``-2``).

    Returns ``(values, argmax)``; argmax is the first row attaining the max,
    and the backward pass routes each column's gradient to that row only.
    """
    _check_set(x)
    values = x.data.max(axis=-2)
    # first row equal to the column max; much faster than a strided argmax
    arg = np.argmax(x.data == values[..., None, :], axis=-2)

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, arg[..., None, :], g[..., None, :], axis=-2)
        return (out,)

    return record("max_over_set", values, (x,), backward), arg


def _set_sum(a):
    # sorted addends make the sum independent of row order
    return np.sort(a, axis=-2).sum(axis=-2)


def mean_over_set(x):
    """Column-wise mean over the point axis, bitwise order independent."""
    _check_set(x)
    n = x.shape[-2]
    values = _set_sum(x.data) / n

    def backward(g):
        return (np.broadcast_to(g[..., None, :] / n, x.shape).copy(),)

    return record("mean_over_set", values, (x,), backward)


def attention_pool(x, score_weight, score_bias):
    """Softmax-weighted sum of rows with per-row scores ``x @ w + b``.

    ``score_weight`` has shape ``(K, 1)`` and ``score_bias`` shape ``(1,)``.
    """
    _check_set(x)
    k = x.shape[-1]
    scores = matmul_rows(x.data.reshape(-1, k), score_weight.data).reshape(x.shape[:-1])
    scores = scores + score_bias.data[0]
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    w = e / z
    values = _set_sum(w[..., None] * x.data)

    def backward(g):
        dw = np.einsum("...nk,...k->...n", x.data, g)
        ds = w * (dw - (w * dw).sum(axis=-1, keepdims=True))
        dx = w[..., None] * g[..., None, :] + ds[..., None] * score_weight.data[:, 0]
        dsw = (x.data.reshape(-1, k).T @ ds.reshape(-1))[:, None]
        dsb = np.array([ds.sum()])
        return dx, dsw, dsb

    return record("attention_pool", values, (x, score_weight, score_bias), backward)


# -------------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels):
    """Mean over rows of ``-log softmax(logits)[label]``.

    ``logits`` is ``(N, C)``; max subtraction keeps large logits finite.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes})")
    labels = labels.astype(np.int64)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logz - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return record("softmax_cross_entropy", np.array(loss), (logits,), backward)


# ------------------------------------------------------------------- dropout


def dropout(x, keep_prob, mode, rng=None):
    """Inverted dropout: train mode keeps each entry with ``keep_prob`` and
    rescales survivors by ``1 / keep_prob``; eval mode is the identity."""
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if mode == "eval" or keep_prob == 1.0:
        return x
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------- adam


class AdamState:
    """Moment estimates for a flat parameter vector."""

    def __init__(self, size, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.step = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    def __repr__(self):
        return f"AdamState(step={self.step}, size={self.m.size})"


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise DimensionError(
            f"params {params.shape}, grads {grads.shape} and state {state.m.shape} disagree")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params


# --------------------------------------------------------- gradient checking


def finite_difference_check(fn, inputs, h=1e-5, coords=None, max_coords=None, rng=None):
    """Largest ``|analytic - numeric| / max(1, |analytic|)`` over coordinates.

    ``fn(*inputs)`` must return a scalar tensor and be smooth at ``inputs``;
    kinks (ReLU at 0, max ties) break the central-difference estimate, so
    test points should avoid them.  ``coords`` optionally maps input
    position to an array of flat indices; ``max_coords`` samples at most that
    many per input instead of checking all.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.zero_grad()
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite")
    out.backward()
    worst = 0.0
    for pos, t in enumerate(inputs):
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        if coords is not None and pos in coords:
            idx = np.asarray(coords[pos])
        elif max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        else:
            idx = np.arange(flat.size)
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                down = fn(*inputs).item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"non-finite value perturbing input {pos}[{i}]")
                numeric = (up - down) / (2.0 * h)
                err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
                worst = max(worst, err)
    return worst
