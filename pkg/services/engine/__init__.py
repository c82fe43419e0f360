# Autodiff engine package

from services.engine.tensor import Function, Tensor, no_grad, is_grad_enabled
from services.engine.functional import GroupNormParams

__all__ = ['Function', 'Tensor', 'no_grad', 'is_grad_enabled', 'GroupNormParams']
