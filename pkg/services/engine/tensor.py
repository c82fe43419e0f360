"""
Tensor and reverse-mode autodiff core

Every primitive is a `Function` subclass. `Function.apply` runs the forward pass on the
input arrays and, when any input requires grad, records itself as the creator of the
output tensor. The recorded creators form the computation graph; `Tensor.backward`
walks it once in reverse execution order and then consumes it.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from typing import Any, Optional, Tuple

import numpy as np

from services.errors import NumericalError, UsageError

logger = logging.getLogger(__name__)

# Execution order of recorded primitives, shared by all graphs
_sequence = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad():
    """Run forward passes without recording a graph (per thread)"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Function:
    """
    Base class for differentiable primitives.

    Subclasses implement `forward(*arrays, **kwargs) -> ndarray` and
    `backward(grad) -> tuple` where the tuple holds one gradient (or None) per input
    tensor, in input order. Gradients may be returned in the broadcast shape; the
    engine sums them back down to each input's shape.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors
        self.saved = {}
        self.seq = next(_sequence)
        self.consumed = False

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: Any, **kwargs: Any) -> "Tensor":
        tensors = tuple(as_tensor(t) for t in tensors)
        func = cls(*tensors)
        out = np.asarray(func.forward(*(t.data for t in tensors), **kwargs), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"{cls.__name__} produced non-finite values")

        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            return Tensor(out, requires_grad=True, creator=func)
        return Tensor(out)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out the dimensions numpy broadcasting added or stretched"""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for dim, extent in enumerate(shape):
            if extent == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


class Tensor:
    """Dense float64 array that can take part in a recorded graph"""

    # numpy defers binary operators to Tensor
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, creator: Optional[Function] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator = creator

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Populate .grad on every requires_grad ancestor of this scalar"""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")

        seed = np.ones_like(self.data)
        if self.creator is None:
            self.grad = seed if self.grad is None else self.grad + seed
            return
        if self.creator.consumed:
            raise UsageError("graph already consumed by a previous backward(); run forward again")

        # Collect every recorded node reachable from this output
        producers = {}
        visited = set()
        stack = [self]
        while stack:
            tensor = stack.pop()
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            func = tensor.creator
            if func is None:
                continue
            if func.consumed:
                raise UsageError("graph already consumed by a previous backward(); run forward again")
            producers[func] = tensor
            stack.extend(func.tensors)

        self.grad = seed if self.grad is None else self.grad + seed
        for func in sorted(producers, key=lambda f: f.seq, reverse=True):
            output = producers[func]
            if output.grad is not None:
                grads = func.backward(output.grad)
                for tensor, grad in zip(func.tensors, grads):
                    if grad is None or not tensor.requires_grad:
                        continue
                    grad = Function.unbroadcast(np.asarray(grad, dtype=np.float64), tensor.shape)
                    tensor.grad = np.array(grad) if tensor.grad is None else tensor.grad + grad
            func.consumed = True
            func.saved = None
            func.tensors = ()

        logger.debug("🔁 ENGINE: backward visited %d nodes", len(producers))

    # Operators, implemented in functional

    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(other, self)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(other, self)

    def __neg__(self):
        return F.neg(self)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def relu(self):
        return F.relu(self)

    def sum(self, axis=None, keepdims=False):
        return F.reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return F.reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# functional imports Tensor and Function from here, so it is bound last
from services.engine import functional as F  # noqa: E402
