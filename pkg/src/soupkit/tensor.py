"""A small reverse-mode automatic differentiation engine over numpy arrays.

Forward operations build a graph of Tensor nodes. Each non-leaf node keeps
references to its parents and a vector-Jacobian closure. backward() collects
the nodes reachable from a scalar loss, orders them by creation index (which
is a topological order, since parents are always created before children),
and sweeps the closures in reverse.

Gradient policy: backward() may be called once per loss, and it refuses to
write into a tensor whose .grad is already set. Callers reset grads to None
(for models, via zero_grad) between backward passes. Passing wrt= restricts
the sweep to the subgraph that feeds the requested tensors, which is how
attacks obtain input gradients without touching parameter gradients.

Default precision is float32. A float64 mode exists for finite-difference
gradient checking only; switch it with set_default_dtype or the using_dtype
context manager before building tensors.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from .kernels import conv2d_backward_input, conv2d_backward_weight, conv2d_forward

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_counter = itertools.count()


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in _FLOAT_DTYPES:
        raise ValueError("default dtype must be float32 or float64, got %s" % dtype)
    _default_dtype = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (used by gradient-check tests)."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block; forwards only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op",
                 "_id", "_backwarded")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np.dtype(dtype), copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._id = next(_counter)
        self._backwarded = False

    @classmethod
    def _from_op(cls, data, parents, vjp, op):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if t.requires_grad:
            t._parents = tuple(parents)
            t._vjp = vjp
        else:
            t._parents = ()
            t._vjp = None
        t._op = op
        t._id = next(_counter)
        t._backwarded = False
        return t

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

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """A grad-less leaf viewing the same data."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

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

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, op=%s, requires_grad=%s)" % (
            tuple(self.shape), self.data.dtype, self._op, self.requires_grad)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad, shape):
    """Sum grad down to the given shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError("%s: shapes %s and %s are not broadcastable"
                         % (op, tuple(a.shape), tuple(b.shape))) from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "mul")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError("matmul: shapes %s and %s are incompatible"
                         % (tuple(a.shape), tuple(b.shape)))
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), vjp, "relu")


def conv2d(x, w, stride=1, padding=0):
    """2-D convolution, NCHW input against OIHW kernel."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d: expected 4-d input and kernel, got %s and %s"
                         % (tuple(x.shape), tuple(w.shape)))
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            "conv2d: input channels %d do not match kernel channels %d "
            "(input %s, kernel %s)"
            % (x.shape[1], w.shape[1], tuple(x.shape), tuple(w.shape)))
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError("conv2d: kernel %s does not fit input %s with padding %d"
                         % (tuple(w.shape), tuple(x.shape), padding))
    out = conv2d_forward(x.data, w.data, stride, padding)
    x_data, w_data = x.data, w.data

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = conv2d_backward_input(g, w_data, stride, padding, h, wd)
        gw = conv2d_backward_weight(g, x_data, stride, padding, kh, kw)
        return gx, gw

    return Tensor._from_op(out, (x, w), vjp, "conv2d")


def avg_pool2d(x, k):
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError("avg_pool2d: expected 4-d input, got %s" % (tuple(x.shape),))
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError("avg_pool2d: window %d does not divide input %s"
                         % (k, tuple(x.shape)))
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (up / (k * k),)

    return Tensor._from_op(out, (x,), vjp, "avg_pool2d")


def reshape(x, shape):
    x = _as_tensor(x)
    old_shape = x.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old_shape),)

    return Tensor._from_op(out, (x,), vjp, "reshape")


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ValueError("flatten: expected batched input, got shape %s"
                         % (tuple(x.shape),))
    return reshape(x, (x.shape[0], -1))


def sum_all(x):
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).astype(x.data.dtype, copy=False),)

    return Tensor._from_op(out, (x,), vjp, "sum")


def mean_all(x):
    x = _as_tensor(x)
    out = np.asarray(x.data.mean())
    shape, count = x.shape, x.size

    def vjp(g):
        return (np.broadcast_to(g / count, shape).astype(x.data.dtype, copy=False),)

    return Tensor._from_op(out, (x,), vjp, "mean")


def _log_softmax_data(z, axis):
    m = z.max(axis=axis, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return shifted - lse


def softmax(x, axis=-1):
    x = _as_tensor(x)
    out = np.exp(_log_softmax_data(x.data, axis))

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (x,), vjp, "softmax")


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    out = _log_softmax_data(x.data, axis)
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), vjp, "log_softmax")


def _as_logit_matrix(logits, op):
    logits = _as_tensor(logits)
    if logits.ndim == 1:
        return reshape(logits, (1, -1))
    if logits.ndim == 2:
        return logits
    raise ValueError("%s: expected 1-d or 2-d logits, got shape %s"
                     % (op, tuple(logits.shape)))


def _reduce(per_example, reduction, op):
    if reduction == "none":
        return per_example
    if reduction == "sum":
        return sum_all(per_example)
    if reduction == "mean":
        return mean_all(per_example)
    raise ValueError("%s: unknown reduction %r" % (op, reduction))


def cross_entropy(logits, labels, reduction="mean"):
    """Mean (by default) negative log-softmax probability of the labels."""
    mat = _as_logit_matrix(logits, "cross_entropy")
    n, k = mat.shape
    if k < 2:
        raise ValueError("cross_entropy: need at least 2 classes, got %d" % k)
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape != (n,):
        raise ValueError("cross_entropy: %d labels for %d rows" % (y.size, n))
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("cross_entropy: labels must be integers, got %s" % y.dtype)
    if (y < 0).any() or (y >= k).any():
        bad = int(y[(y < 0) | (y >= k)][0])
        raise ValueError("cross_entropy: label %d out of range for %d classes"
                         % (bad, k))
    log_probs = _log_softmax_data(mat.data, 1)
    per = -log_probs[np.arange(n), y]
    probs = np.exp(log_probs)
    onehot_rows = np.arange(n)

    def vjp(g):
        gz = probs.copy()
        gz[onehot_rows, y] -= 1.0
        return (gz * np.asarray(g).reshape(-1, 1),)

    per_t = Tensor._from_op(per, (mat,), vjp, "cross_entropy")
    return _reduce(per_t, reduction, "cross_entropy")


def kl_divergence(logits_p, logits_q, reduction="mean"):
    """KL(softmax(logits_p) || softmax(logits_q)), per row then reduced."""
    p_mat = _as_logit_matrix(logits_p, "kl_divergence")
    q_mat = _as_logit_matrix(logits_q, "kl_divergence")
    if p_mat.shape != q_mat.shape:
        raise ValueError("kl_divergence: shapes %s and %s differ"
                         % (tuple(p_mat.shape), tuple(q_mat.shape)))
    lp = _log_softmax_data(p_mat.data, 1)
    lq = _log_softmax_data(q_mat.data, 1)
    p = np.exp(lp)
    q = np.exp(lq)
    per = (p * (lp - lq)).sum(axis=1)

    def vjp(g):
        g_col = np.asarray(g).reshape(-1, 1)
        gp = p * ((lp - lq) - per.reshape(-1, 1)) * g_col
        gq = (q - p) * g_col
        return gp, gq

    per_t = Tensor._from_op(per, (p_mat, q_mat), vjp, "kl_divergence")
    return _reduce(per_t, reduction, "kl_divergence")


class Tape:
    """Reverse-pass bookkeeping for one loss.

    nodes: the graph reachable from the loss, in creation (topological)
    order. grads: one gradient slot per node id, filled and drained during
    run(). Only nodes that feed a target receive gradient flow.
    """

    def __init__(self, root, wrt=None):
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if id(p) not in seen)
        nodes.sort(key=lambda t: t._id)
        self.nodes = nodes
        self._root = root

        if wrt is None:
            targets = {id(t) for t in nodes if t.requires_grad and not t._parents}
        else:
            wrt_list = [wrt] if isinstance(wrt, Tensor) else list(wrt)
            for t in wrt_list:
                if not t.requires_grad:
                    raise ValueError("backward: wrt tensor does not require grad")
                if id(t) not in seen:
                    raise ValueError("backward: wrt tensor is not reachable "
                                     "from the loss")
            targets = {id(t) for t in wrt_list}
        self._targets = targets

        needed = {}
        for t in nodes:
            needed[id(t)] = id(t) in targets or any(
                needed.get(id(p), False) for p in t._parents)
        self._needed = needed
        self.grads = {}

    def run(self):
        root = self._root
        self.grads[id(root)] = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = self.grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in self._targets:
                if node.grad is not None:
                    raise RuntimeError(
                        "backward: tensor already holds a gradient; reset "
                        ".grad to None before the next backward pass")
                node.grad = g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not self._needed.get(id(parent), False):
                    continue
                slot = self.grads.get(id(parent))
                self.grads[id(parent)] = pg if slot is None else slot + pg


def backward(loss, wrt=None):
    """Run reverse-mode differentiation from a scalar loss.

    Populates .grad on every requires_grad leaf reachable from the loss, or
    only on the tensors in wrt when given. Raises if the loss is not scalar,
    if it has already been differentiated, or if a receiving tensor still
    holds a gradient from an earlier pass.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward: loss must be a Tensor")
    if loss.size != 1:
        raise ValueError("backward: loss must be a scalar, got shape %s"
                         % (tuple(loss.shape),))
    if loss._backwarded:
        raise RuntimeError("backward: this loss was already differentiated; "
                           "rebuild the graph to differentiate again")
    loss._backwarded = True
    tape = Tape(loss, wrt)
    tape.run()
    return tape
