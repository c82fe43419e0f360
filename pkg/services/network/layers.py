"""
Parameter store and the conv / group-norm building blocks the network is assembled from
"""

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from services.engine import functional as F
from services.engine.functional import GroupNormParams
from services.engine.tensor import Tensor
from services.errors import ConfigurationError


class ParameterStore:
    """Named learnable tensors, created in a fixed order from one seeded generator"""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name '{name}'")
        tensor = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def conv(self, name: str, c_out: int, c_in: int, kernel: int, std: float):
        self.add(f"{name}.weight", self.rng.standard_normal((c_out, c_in, kernel, kernel)) * std)
        self.add(f"{name}.bias", np.zeros(c_out))

    def group_norm(self, name: str, channels: int):
        F.group_count(channels)
        self.add(f"{name}.gamma", np.ones(channels))
        self.add(f"{name}.beta", np.zeros(channels))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def count(self) -> int:
        """Total number of scalar weights"""
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.grad = None


def he_std(c_in: int, kernel: int) -> float:
    return float(np.sqrt(2.0 / (c_in * kernel * kernel)))


def conv(params: ParameterStore, name: str, x: Tensor, padding: int = 0, dilation: int = 1) -> Tensor:
    return F.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=padding, dilation=dilation)


def group_norm(params: ParameterStore, name: str, x: Tensor, epsilon: float) -> Tensor:
    gn = GroupNormParams(gamma=params[f"{name}.gamma"], beta=params[f"{name}.beta"], epsilon=epsilon)
    return F.group_normalize(x, gn)


def conv_gn_relu(params: ParameterStore, name: str, x: Tensor, epsilon: float,
                 padding: int = 0, dilation: int = 1, gn_name: Optional[str] = None) -> Tensor:
    y = conv(params, name, x, padding=padding, dilation=dilation)
    y = group_norm(params, gn_name or f"{name}_gn", y, epsilon)
    return F.relu(y)
