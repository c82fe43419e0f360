"""
Finite-difference verification of autodiff gradients
"""

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from services.engine.tensor import Tensor, no_grad
from services.errors import UsageError

logger = logging.getLogger(__name__)


def _scalar(value: Tensor) -> float:
    if not isinstance(value, Tensor) or value.size != 1:
        shape = getattr(value, 'shape', type(value).__name__)
        raise UsageError(f"grad_check closure must return a scalar Tensor, got {shape}")
    return value.item()


def grad_check(op_closure: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               max_elements: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare autodiff gradients of `op_closure(*inputs)` against central differences.

    Returns the maximum relative error |a - n| / max(|a|, |n|, 1e-8) over the checked
    elements. With `max_elements`, each input is checked on a seeded random subset of
    that many elements instead of every element.
    """
    if step <= 0:
        raise UsageError(f"grad_check step must be positive, got {step}")

    for tensor in inputs:
        tensor.grad = None
    output = op_closure(*inputs)
    _scalar(output)
    output.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            # perturbations go through a flat view, which needs contiguous storage
            tensor.data = np.ascontiguousarray(tensor.data)
            flat = tensor.data.reshape(-1)
            indices = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            for index in indices:
                original = flat[index]
                flat[index] = original + step
                plus = _scalar(op_closure(*inputs))
                flat[index] = original - step
                minus = _scalar(op_closure(*inputs))
                flat[index] = original

                numeric = (plus - minus) / (2.0 * step)
                exact = grad.reshape(-1)[index]
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
                worst = max(worst, error)

    logger.debug("🔍 GRADCHECK: max relative error %.3e", worst)
    return worst
