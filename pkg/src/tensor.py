"""
Tensor module for jamident.
Dense n-dimensional arrays with reverse-mode automatic differentiation,
the layer base class and the SGD optimizer used by the classifier.
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class AutogradError(RuntimeError):
    """Base class for misuse of the autodiff engine."""


class GraphReleasedError(AutogradError):
    """Raised when backward runs a second time over the same graph."""


class MissingGradientError(AutogradError):
    """Raised when an optimizer step finds a parameter without gradient."""


_state = threading.local()


def get_default_dtype():
    """Floating type used for new tensors and parameters in this thread."""
    return getattr(_state, "dtype", np.float32)


@contextmanager
def default_dtype(dtype):
    """
    Temporarily switch the default floating type.

    Gradient checks run under ``default_dtype(np.float64)``; training stays f32.
    """
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Build no backprop records inside the block."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    Value node of a computation graph.

    Leaves created by the user carry ``grad`` after ``backward``; interior
    nodes carry the op tag, their parents and the rule mapping the output
    gradient to parent gradients.
    """

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, (np.ndarray, np.generic)):
            array = np.asarray(data)
            if not np.issubdtype(array.dtype, np.floating):
                array = array.astype(get_default_dtype())
        else:
            array = np.asarray(data, dtype=get_default_dtype())
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def backward(self, params=None):
        backward(self, params)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} op={self._op} grad={'yes' if self.grad is not None else 'no'}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """Tensor with persistent identity owned by a layer."""

    def __init__(self, data, name, trainable=True):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=trainable, name=name)
        self.trainable = trainable


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise and linear algebra

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b):
    """Hadamard product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward_fn, "mul")


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), backward_fn, "scale")


def matmul(a, b):
    """
    Batched matrix product over the last two axes.

    Leading axes broadcast; the model relies on this to apply per-head
    projection stacks of shape (h, C, k) to inputs of shape (B, 1, N, C).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward_fn, "matmul")


def relu(a):
    a = as_tensor(a)
    positive = a.data > 0

    def backward_fn(g):
        return (g * positive,)

    return _make(np.where(positive, a.data, 0).astype(a.dtype), (a,), backward_fn, "relu")


def silu(a):
    """Sigmoid linear unit x * sigmoid(x)."""
    a = as_tensor(a)
    s = expit(a.data)

    def backward_fn(g):
        return (g * s * (1 + a.data * (1 - s)),)

    return _make(a.data * s, (a,), backward_fn, "silu")


def log(a):
    a = as_tensor(a)

    def backward_fn(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward_fn, "log")


def gaussian_noise_add(a, std, rng):
    """Add N(0, std^2) noise; the noise is a constant for backprop."""
    a = as_tensor(a)
    if std == 0:
        return a
    noise = (rng.standard_normal(a.shape) * std).astype(a.dtype)

    def backward_fn(g):
        return (g,)

    return _make(a.data + noise, (a,), backward_fn, "noise")


# ----------------------------------------------------------------------
# shape manipulation

def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward_fn, "reshape")


def transpose(a, axes=None):
    """Permute axes; swaps the last two when ``axes`` is omitted."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {tuple(axes)} do not permute shape {a.shape}")
    inverse = np.argsort(axes)

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), backward_fn, "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        first = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != ndim or other != first:
            raise ShapeError(f"concat along axis {axis}: shapes {tensors[0].shape} and {t.shape} differ")
    sizes = [t.shape[axis] for t in tensors]

    def backward_fn(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn, "concat")


def _slice(a, axis, start, stop):
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), backward_fn, "slice")


def split(a, sections, axis=-1):
    """Split into ``sections`` equal parts along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if a.shape[axis] % sections:
        raise ShapeError(f"split: axis {axis} of shape {a.shape} does not divide into {sections} parts")
    step = a.shape[axis] // sections
    return [_slice(a, axis, i * step, (i + 1) * step) for i in range(sections)]


def take(a, indices, axis):
    """Select entries ``indices`` along ``axis``; gradients of skipped entries are zero."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[axis]):
        raise ShapeError(f"take: indices out of range for axis {axis} of shape {a.shape}")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), backward_fn, "take")


# ----------------------------------------------------------------------
# reductions and normalization

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward_fn, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward_fn, "mean")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward_fn, "softmax")


def standardize(a, axes, eps=1e-5):
    """
    Zero-mean, unit-variance normalization over ``axes`` (biased variance).

    Returns:
        Tuple (normalized tensor, mean array, variance array)
    """
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    mu = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mu
    var = (centered ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward_fn(g):
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - g_mean - xhat * gx_mean),)

    return _make(xhat, (a,), backward_fn, "standardize"), mu, var


def layer_norm(a, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then apply the optional affine map."""
    out, _, _ = standardize(a, -1, eps)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def batch_norm1d(a, gamma, beta, running_mean, running_var, training,
                 momentum=0.1, eps=1e-5, track_stats=True):
    """
    Per-channel normalization of (..., C) features over every other axis.

    In training mode batch statistics are used and, when ``track_stats``,
    the running buffers are updated in place with ``momentum`` (unbiased
    variance). Evaluation mode uses the running buffers.
    """
    a = as_tensor(a)
    if a.shape[-1] != running_mean.shape[-1]:
        raise ShapeError(f"batch_norm1d: features {a.shape} do not match {running_mean.shape[-1]} channels")
    axes = tuple(range(a.ndim - 1))
    if training:
        out, mu, var = standardize(a, axes, eps)
        if track_stats:
            count = int(np.prod([a.shape[ax] for ax in axes]))
            unbiased = var.reshape(-1) * count / max(count - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(a.dtype)
        out = mul(sub(a, Tensor(running_mean.astype(a.dtype))), Tensor(inv))
    return add(mul(out, gamma), beta)


# ----------------------------------------------------------------------
# convolution and losses

def conv1d(x, weight, bias=None, padding=None):
    """
    Stride-1 convolution along the sequence axis.

    Args:
        x: Tensor (B, N, C_in)
        weight: Tensor (K, C_in, C_out)
        bias: optional Tensor (C_out,)
        padding: zero padding on both ends, (K - 1) // 2 when omitted

    Returns:
        Tensor (B, N + 2 * padding - K + 1, C_out)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {weight.shape}")
    kernel = weight.shape[0]
    if padding is None:
        padding = (kernel - 1) // 2
    padded = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    length = padded.shape[1] - kernel + 1
    if length < 1:
        raise ShapeError(f"conv1d: sequence of {x.shape[1]} is shorter than kernel {kernel}")
    out = sum(np.matmul(padded[:, k:k + length, :], weight.data[k]) for k in range(kernel))

    def backward_fn(g):
        g_padded = np.zeros_like(padded)
        g_weight = np.zeros_like(weight.data)
        for k in range(kernel):
            g_padded[:, k:k + length, :] += np.matmul(g, weight.data[k].T)
            g_weight[k] = np.einsum("bnc,bno->co", padded[:, k:k + length, :], g)
        g_x = g_padded[:, padding:padding + x.shape[1], :]
        return g_x, g_weight

    result = _make(out.astype(np.result_type(x.dtype, weight.dtype)), (x, weight), backward_fn, "conv1d")
    if bias is not None:
        result = add(result, bias)
    return result


def _check_labels(labels, batch, classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"got {labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in 0..{classes - 1}, got {labels.min()}..{labels.max()}")
    return labels


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, K) or (K,) logits against integer labels."""
    logits = as_tensor(logits)
    z = logits.data.reshape(-1, logits.shape[-1])
    labels = _check_labels(labels, z.shape[0], z.shape[1])
    shifted = z - z.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = -log_probs[rows, labels].mean()

    def backward_fn(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1
        return ((g * probs / z.shape[0]).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn, "cross_entropy")


def nll_loss(probs, labels, eps=1e-12):
    """Mean negative log-likelihood of (B, K) probability rows."""
    probs = as_tensor(probs)
    labels = _check_labels(labels, probs.shape[0], probs.shape[-1])
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(probs.shape[0]), labels] = 1
    picked = reduce_sum(mul(log(add(probs, eps)), Tensor(onehot)), axis=-1)
    return scale(mean(picked), -1.0)


# ----------------------------------------------------------------------
# backward pass

def _graph_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _propagate(root):
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {root.shape}")
    if not root.requires_grad:
        raise AutogradError("loss does not depend on any tensor that requires grad")
    order = _graph_order(root)
    if any(node._released for node in order):
        raise GraphReleasedError("backward already ran over this graph; run a fresh forward pass first")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    for node in order:
        if node._backward is not None:
            node._released = True
    return order, grads


def backward(loss, params=None):
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Args:
        loss: scalar Tensor
        params: optional parameter list; members the loss does not reach
            receive a zero gradient

    Raises:
        GraphReleasedError: the graph was already consumed by a backward call
    """
    order, grads = _propagate(loss)
    for node in order:
        if node._backward is None and node.requires_grad and id(node) in grads:
            g = np.array(grads[id(node)], dtype=node.dtype, copy=True)
            node.grad = g if node.grad is None else node.grad + g
    for param in params or ():
        if param.grad is None:
            param.grad = np.zeros_like(param.data)


def grad(loss, inputs):
    """Gradients of ``loss`` w.r.t. ``inputs`` without touching any ``grad`` field."""
    _, grads = _propagate(loss)
    return [np.array(grads[id(t)], copy=True) if id(t) in grads else np.zeros_like(t.data) for t in inputs]


def sgd_step(params, lr=0.001):
    """
    Plain SGD update p <- p - lr * grad, then zero the gradients.

    Raises:
        MissingGradientError: a trainable parameter has no gradient
    """
    params = [p for p in params if getattr(p, "trainable", True)]
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {', '.join(missing)}; run backward before stepping")
    for param in params:
        param.data -= (lr * param.grad).astype(param.dtype, copy=False)
        param.grad.fill(0)


class Module:
    """
    Base class for layers.

    Params, sub-modules (also inside lists) and ndarray buffers are found by
    walking instance attributes, so layers only assign them.
    """

    training = True

    def _children(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield f"{prefix}{key}", value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{prefix}{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Param):
                yield f"{prefix}{key}", value
        for name, child in self._children(prefix):
            yield from child.named_parameters(f"{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield f"{prefix}{key}", value
        for name, child in self._children(prefix):
            yield from child.named_buffers(f"{name}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None
