"""Dense float32 tensors with a reverse-mode tape.

Every differentiable op creates an output :class:`Tensor` carrying a
:class:`ComputationRecord` that points at its inputs and a closure computing
input gradients from the output gradient.  :func:`backward` walks the records
reachable from a scalar root in reverse topological order and accumulates into
``Tensor.grad`` of every leaf that requires a gradient.
"""

import contextlib
import enum
import threading

import numpy as np

from .errors import ContractError, TapeReuseError

DTYPE = np.float32

_state = threading.local()


def dtype():
    """Active floating type: float32 unless inside :func:`precision`."""
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def precision(float_type):
    """Run the block at another float precision (float64 serves as a verification reference)."""
    prev = dtype()
    _state.dtype = np.dtype(float_type).type
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class OpKind(enum.Enum):
    CONV2D = "conv2d"
    POOL2D = "pool2d"
    AFFINE = "affine"
    MATMUL = "matmul"
    BATCH_NORM = "batch_norm"
    RELU = "relu"
    TANH = "tanh"
    SQRT = "sqrt"
    ADD = "add"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    SUM = "sum"
    MEAN = "mean"
    MAXIMUM = "maximum"
    CONCAT = "concat"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    INDEX = "index"
    L2_NORMALIZE = "l2_normalize"
    LOG_SOFTMAX = "log_softmax"


class ComputationRecord:
    """Tape node: which op produced a tensor, from what, and how to differentiate it."""

    __slots__ = ("op_kind", "inputs", "backward_fn", "consumed")

    def __init__(self, op_kind, inputs, backward_fn):
        self.op_kind = op_kind
        self.inputs = tuple(inputs)
        # backward_fn(grad_out) -> sequence of grads aligned with inputs (None allowed)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "record", "__weakref__")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.record = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    @property
    def tracked(self):
        return self.requires_grad or self.record is not None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic is delegated to ops; imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(as_tensor(other)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(as_tensor(other), ops.neg(self))

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``group`` selects the learning-rate group used by the optimizer
    (``"backbone"`` or ``"head"``).  ``name`` is assigned when the owning
    network is built.
    """

    __slots__ = ("name", "group")

    def __init__(self, data, name="", group="head"):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.group = group
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, op_kind, inputs, backward_fn):
    """Wrap an op output, attaching a tape record when any input is tracked."""
    out = Tensor(data)
    if grad_enabled() and any(t.tracked for t in inputs):
        out.record = ComputationRecord(op_kind, inputs, backward_fn)
    return out


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.record is not None:
            for parent in node.record.inputs:
                if id(parent) not in seen and parent.tracked:
                    stack.append((parent, False))
    return order


def backward(root):
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    Gradients add onto whatever is already stored, so several losses can be
    accumulated before one optimizer step.  The tape is released afterwards;
    calling this again on the same graph raises :class:`TapeReuseError`.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root.record is None:
        if root.requires_grad:
            _accumulate(root, np.ones_like(root.data))
        return
    order = _topological_order(root)
    for node in order:
        if node.record is not None and node.record.consumed:
            raise TapeReuseError("computation graph was already consumed by a previous backward call")

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        rec = node.record
        if rec is None:
            if node.requires_grad:
                _accumulate(node, g)
            continue
        in_grads = rec.backward_fn(g)
        for parent, pg in zip(rec.inputs, in_grads):
            if pg is None or not parent.tracked:
                continue
            pg = np.asarray(pg, dtype=dtype())
            if pg.shape != parent.data.shape:
                pg = pg.reshape(parent.data.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if node.requires_grad:
            _accumulate(node, g)

    for node in order:
        if node.record is not None:
            node.record.consumed = True
            node.record.backward_fn = None


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=dtype(), copy=True)
    else:
        t.grad = t.grad + g
