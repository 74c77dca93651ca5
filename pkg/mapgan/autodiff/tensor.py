import contextlib
import threading

import numpy as np

from typing import Any, Dict, List, Optional, Sequence, Tuple  # noqa F401


DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    pass


def is_grad_enabled():
    # type: () -> bool
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording on the current thread.

    Tensors produced inside the block are constants: they carry no creator
    and never require gradients.
    """
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Function(object):
    """A recorded, differentiable operation.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient w.r.t. the output to one gradient (or None) per input.
    """

    def __init__(self, *inputs):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError("forward not implemented for {}".format(
            type(self).__name__))

    def backward(self, grad):
        raise NotImplementedError("backward not implemented for {}".format(
            type(self).__name__))

    @classmethod
    def apply(cls, *inputs, **kwargs):
        # type: (*Tensor, **Any) -> Tensor
        func = cls(*inputs)
        out_data = func.forward(*(t.data for t in inputs), **kwargs)

        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            return Tensor(out_data, requires_grad=True, creator=func)
        return Tensor(out_data)


class Tensor(object):
    """N-dimensional float32 array with optional gradient tracking.

    `grad` is only ever populated on leaves (tensors without a creator) that
    require gradients; it accumulates across `backward` calls until
    `zero_grad` is called.
    """

    def __init__(self, data, requires_grad=False, creator=None, name=None):
        # type: (Any, bool, Optional[Function], Optional[str]) -> None
        array = np.ascontiguousarray(data, dtype=DTYPE)
        if any(d <= 0 for d in array.shape):
            raise ShapeError(
                "tensor dimensions must be positive, got {}".format(array.shape)
            )
        self.data = array
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name
        self.grad = None  # type: Optional[np.ndarray]

    def __repr__(self):
        return "Tensor(shape={}, requires_grad={}, name={!r})".format(
            self.shape, self.requires_grad, self.name
        )

    @property
    def shape(self):
        # type: () -> Tuple[int, ...]
        return self.data.shape

    @property
    def size(self):
        # type: () -> int
        return int(self.data.size)

    @property
    def is_leaf(self):
        # type: () -> bool
        return self.creator is None

    def item(self):
        # type: () -> float
        if self.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self):
        # type: () -> np.ndarray
        return self.data

    def detach(self):
        # type: () -> Tensor
        """Share this tensor's data without its history."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.creator = None
        out.name = self.name
        out.grad = None
        return out

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, grad):
        # type: (np.ndarray) -> None
        if grad.shape != self.shape:
            raise ShapeError(
                "gradient shape {} does not match tensor shape {}".format(
                    grad.shape, self.shape
                )
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE)
        else:
            self.grad += grad

    def backward(self):
        """Populate `grad` on every requires_grad leaf reachable from here."""
        if self.size != 1:
            raise ShapeError(
                "backward requires a scalar loss, got shape {}".format(self.shape)
            )
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        Graph(self).backward()

    # arithmetic

    def __add__(self, other):
        return Add.apply(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _as_tensor(other))

    def __rsub__(self, other):
        return Sub.apply(_as_tensor(other), self)

    def __mul__(self, other):
        return Mul.apply(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return Neg.apply(self)

    def sum(self):
        return Sum.apply(self)

    def mean(self):
        return Mean.apply(self)

    def log(self):
        return Log.apply(self)

    def abs(self):
        return Abs.apply(self)

    def clamp(self, low, high):
        return Clamp.apply(self, low=low, high=high)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Graph(object):
    """The recorded operations leading to `output`, in topological order.

    Every tensor appears after all tensors it was computed from; the backward
    pass walks that order in reverse and visits each operation once. The
    graph is not consumed, so it can be differentiated again.
    """

    def __init__(self, output):
        # type: (Tensor) -> None
        self.output = output
        self.nodes = self._topological_order(output)

    def __len__(self):
        return sum(1 for node in self.nodes if node.creator is not None)

    @staticmethod
    def _topological_order(output):
        # type: (Tensor) -> List[Tensor]
        order = []  # type: List[Tensor]
        visited = set()
        stack = [(output, False)]

        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        return order

    def backward(self):
        grads = {id(self.output): np.ones(self.output.shape, dtype=DTYPE)}

        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                node.accumulate_grad(grad)
                continue

            input_grads = node.creator.backward(grad)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)

            for parent, parent_grad in zip(node.creator.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=DTYPE)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad


def _reduce_to(grad, shape):
    # Binary ops accept either identical shapes or a single-element operand.
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(shape)


def _check_binary(x, y, op_name):
    if x.shape != y.shape and x.size != 1 and y.size != 1:
        raise ShapeError(
            "{} requires equal shapes or a scalar operand, got {} and {}".format(
                op_name, x.shape, y.shape
            )
        )


class Add(Function):
    def forward(self, x, y):
        _check_binary(x, y, "add")
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        _check_binary(x, y, "sub")
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        _check_binary(x, y, "mul")
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            _reduce_to(grad * self.y, self.x.shape),
            _reduce_to(grad * self.x, self.y.shape),
        )


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return -grad


class Sum(Function):
    def forward(self, x):
        self.in_shape = x.shape
        # accumulate in 64 bits; the result is rounded once
        return np.asarray(x.sum(dtype=np.float64), dtype=DTYPE)

    def backward(self, grad):
        return np.full(self.in_shape, grad, dtype=DTYPE)


class Mean(Function):
    def forward(self, x):
        self.in_shape = x.shape
        self.count = x.size
        return np.asarray(x.mean(dtype=np.float64), dtype=DTYPE)

    def backward(self, grad):
        return np.full(self.in_shape, grad / self.count, dtype=DTYPE)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return grad / self.x


class Abs(Function):
    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return grad * self.sign


class Clamp(Function):
    """Clip into [low, high]; gradient passes only where no clipping happened."""

    def forward(self, x, low, high):
        self.inside = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return grad * self.inside
