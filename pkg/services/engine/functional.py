"""
Differentiable primitives
Elementwise math, reductions, shape ops, convolution, pooling, resampling, group normalization and softmax
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from services.engine.tensor import Function, Tensor
from services.errors import ConfigurationError


# Elementwise

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        self.saved = {'a': a, 'b': b}
        return a * b

    def backward(self, grad):
        return grad * self.saved['b'], grad * self.saved['a']


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class ReLU(Function):
    def forward(self, x):
        self.saved = {'mask': x > 0}
        return np.where(self.saved['mask'], x, 0.0)

    def backward(self, grad):
        # subgradient 0 at 0
        return (grad * self.saved['mask'],)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Add.apply(a, Neg.apply(b))


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def relu(x) -> Tensor:
    return ReLU.apply(x)


# Reductions and shape

class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.saved = {'shape': x.shape, 'axis': axis, 'keepdims': keepdims}
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape, axis, keepdims = self.saved['shape'], self.saved['axis'], self.saved['keepdims']
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            for a in sorted(axes):
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad, shape),)


class Reshape(Function):
    def forward(self, x, shape=None):
        self.saved = {'shape': x.shape}
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved['shape']),)


class Transpose(Function):
    def forward(self, x, axes=None):
        axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        self.saved = {'axes': axes}
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.saved['axes'])),)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.saved = {'axis': axis, 'sizes': [a.shape[axis] for a in arrays]}
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        edges = np.cumsum(self.saved['sizes'])[:-1]
        return tuple(np.split(grad, edges, axis=self.saved['axis']))


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(Sum.apply(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Output channel i reads input channel perm[i]: position j of group a comes from group (a + j) mod groups"""
    if groups < 1 or channels % groups:
        raise ConfigurationError(f"channel_shuffle: {channels} channels not divisible into {groups} groups")
    size = channels // groups
    index = np.arange(channels)
    group, position = index // size, index % size
    return ((group + position) % groups) * size + position


class ChannelShuffle(Function):
    def forward(self, x, groups=2):
        perm = shuffle_permutation(x.shape[1], groups)
        self.saved = {'inverse': np.argsort(perm)}
        return x[:, perm]

    def backward(self, grad):
        return (grad[:, self.saved['inverse']],)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """
    Rotate every within-group position across the groups by its own index.

    Odd positions trade places between the two halves when groups is 2, so the two
    sources mix and shuffling twice restores the order. With g groups, g shuffles do.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"channel_shuffle expects 4-D input, got {x.shape}")
    return ChannelShuffle.apply(x, groups=int(groups))


# Matrix product and softmax

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ConfigurationError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ConfigurationError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ConfigurationError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}")
        self.saved = {'a': a, 'b': b}
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved['a'], self.saved['b']
        return np.matmul(grad, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), grad)


class SoftmaxRows(Function):
    def forward(self, x):
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        y = shifted / shifted.sum(axis=-1, keepdims=True)
        self.saved = {'y': y}
        return y

    def backward(self, grad):
        y = self.saved['y']
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def softmax_rows(x) -> Tensor:
    return SoftmaxRows.apply(x)


# Convolution

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


class Conv2d(Function):
    """Cross-correlation with zero padding, stride and dilation (im2col over kernel taps)"""

    def forward(self, x, w, *bias, stride=1, padding=0, dilation=1):
        batch, c_in, height, width = x.shape
        c_out, w_in, kh, kw = w.shape
        out_h = conv_output_size(height, kh, stride, padding, dilation)
        out_w = conv_output_size(width, kw, stride, padding, dilation)

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = np.empty((batch, c_in, kh, kw, out_h, out_w))
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                cols[:, :, i, j] = xp[:, :,
                                      r0:r0 + stride * (out_h - 1) + 1:stride,
                                      c0:c0 + stride * (out_w - 1) + 1:stride]

        out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias:
            out = out + bias[0][None, :, None, None]
        self.saved = {'cols': cols, 'w': w, 'padded_shape': xp.shape, 'x_shape': x.shape,
                      'stride': stride, 'padding': padding, 'dilation': dilation, 'has_bias': bool(bias)}
        return out

    def backward(self, grad):
        s = self.saved
        cols, w = s['cols'], s['w']
        stride, padding, dilation = s['stride'], s['padding'], s['dilation']
        _, _, kh, kw = w.shape
        out_h, out_w = grad.shape[2], grad.shape[3]

        grad_w = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 4, 5]))
        grad_cols = np.tensordot(grad, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        grad_xp = np.zeros(s['padded_shape'])
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                grad_xp[:, :,
                        r0:r0 + stride * (out_h - 1) + 1:stride,
                        c0:c0 + stride * (out_w - 1) + 1:stride] += grad_cols[:, :, i, j]

        height, width = s['x_shape'][2], s['x_shape'][3]
        grad_x = grad_xp[:, :, padding:padding + height, padding:padding + width]
        if s['has_bias']:
            return grad_x, grad_w, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ConfigurationError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    if stride < 1 or dilation < 1:
        raise ConfigurationError(f"conv2d stride and dilation must be positive, got {stride} and {dilation}")
    if padding < 0:
        raise ConfigurationError(f"conv2d padding must be non-negative, got {padding}")
    for size, k in ((x.shape[2], kernel.shape[2]), (x.shape[3], kernel.shape[3])):
        if size + 2 * padding < dilation * (k - 1) + 1:
            raise ConfigurationError(
                f"conv2d kernel {k} with dilation {dilation} does not fit input extent {size} + 2*{padding}")
    if bias is not None:
        if bias.shape != (kernel.shape[0],):
            raise ConfigurationError(f"conv2d bias shape {bias.shape} does not match {kernel.shape[0]} outputs")
        return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding, dilation=dilation)
    return Conv2d.apply(x, kernel, stride=stride, padding=padding, dilation=dilation)


# Pooling and resampling

class MaxPool2(Function):
    def forward(self, x):
        batch, channels, height, width = x.shape
        windows = (x.reshape(batch, channels, height // 2, 2, width // 2, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(batch, channels, height // 2, width // 2, 4))
        # argmax keeps the first row-major element on ties
        index = windows.argmax(axis=-1)
        self.saved = {'index': index, 'shape': x.shape}
        return np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        batch, channels, height, width = self.saved['shape']
        routed = np.zeros(grad.shape + (4,))
        np.put_along_axis(routed, self.saved['index'][..., None], grad[..., None], axis=-1)
        return (routed.reshape(batch, channels, height // 2, width // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(batch, channels, height, width),)


class AvgPool(Function):
    def forward(self, x, kernel=2):
        batch, channels, height, width = x.shape
        self.saved = {'kernel': kernel}
        return x.reshape(batch, channels, height // kernel, kernel, width // kernel, kernel).mean(axis=(3, 5))

    def backward(self, grad):
        k = self.saved['kernel']
        return (np.repeat(np.repeat(grad, k, axis=2), k, axis=3) / (k * k),)


def _align_corners_matrix(size_in: int, factor: int) -> np.ndarray:
    """Row i holds the interpolation weights of output sample i over the input samples"""
    size_out = size_in * factor
    matrix = np.zeros((size_out, size_in))
    if size_in == 1:
        matrix[:, 0] = 1.0
        return matrix
    source = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    lower = np.minimum(np.floor(source).astype(int), size_in - 2)
    frac = source - lower
    rows = np.arange(size_out)
    matrix[rows, lower] += 1.0 - frac
    matrix[rows, lower + 1] += frac
    return matrix


class BilinearUpsample(Function):
    def forward(self, x, factor=2):
        rows = _align_corners_matrix(x.shape[2], factor)
        cols = _align_corners_matrix(x.shape[3], factor)
        self.saved = {'rows': rows, 'cols': cols}
        return np.matmul(np.matmul(rows, x), cols.T)

    def backward(self, grad):
        rows, cols = self.saved['rows'], self.saved['cols']
        return (np.matmul(np.matmul(rows.T, grad), cols),)


def max_pool2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"max_pool2 expects 4-D input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ConfigurationError(f"max_pool2 needs even height and width, got {x.shape[2]}x{x.shape[3]}")
    return MaxPool2.apply(x)


def avg_pool(x: Tensor, kernel: int) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"avg_pool expects 4-D input, got {x.shape}")
    if kernel < 1 or x.shape[2] % kernel or x.shape[3] % kernel:
        raise ConfigurationError(f"avg_pool kernel {kernel} does not tile {x.shape[2]}x{x.shape[3]}")
    return AvgPool.apply(x, kernel=kernel)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"bilinear_upsample expects 4-D input, got {x.shape}")
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"bilinear_upsample factor must be a positive integer, got {factor}")
    return BilinearUpsample.apply(x, factor=int(factor))


# Group normalization

@dataclass
class GroupNormParams:
    gamma: Tensor
    beta: Tensor
    epsilon: float = 1e-5
    group_size_cap: int = 16

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError(f"group norm epsilon must be positive, got {self.epsilon}")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ConfigurationError(f"gamma {self.gamma.shape} and beta {self.beta.shape} must be matching vectors")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def group_count(channels: int, group_size_cap: int = 16) -> int:
    """Groups of `group_size_cap` channels above the cap, one channel per group at or below it"""
    if channels > group_size_cap:
        if channels % group_size_cap:
            raise ConfigurationError(
                f"{channels} channels: counts above {group_size_cap} must be divisible by {group_size_cap}")
        return channels // group_size_cap
    return channels


class GroupNorm(Function):
    def forward(self, x, gamma, beta, groups=1, epsilon=1e-5):
        batch, channels, height, width = x.shape
        grouped = x.reshape(batch, groups, -1)
        mu = grouped.mean(axis=-1, keepdims=True)
        sigma = np.sqrt(grouped.var(axis=-1, keepdims=True) + epsilon)
        x_hat = ((grouped - mu) / sigma).reshape(x.shape)
        self.saved = {'x_hat': x_hat, 'sigma': sigma, 'gamma': gamma, 'groups': groups}
        return x_hat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        s = self.saved
        x_hat, sigma, gamma, groups = s['x_hat'], s['sigma'], s['gamma'], s['groups']
        batch = grad.shape[0]

        d_hat = (grad * gamma[None, :, None, None]).reshape(batch, groups, -1)
        flat_hat = x_hat.reshape(batch, groups, -1)
        grad_x = (d_hat
                  - d_hat.mean(axis=-1, keepdims=True)
                  - flat_hat * (d_hat * flat_hat).mean(axis=-1, keepdims=True)) / sigma
        grad_gamma = (grad * x_hat).sum(axis=(0, 2, 3))
        grad_beta = grad.sum(axis=(0, 2, 3))
        return grad_x.reshape(grad.shape), grad_gamma, grad_beta


def group_normalize(x: Tensor, params: GroupNormParams) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"group_normalize expects 4-D input, got {x.shape}")
    if x.shape[1] != params.channels:
        raise ConfigurationError(f"group_normalize: input has {x.shape[1]} channels, params cover {params.channels}")
    groups = group_count(x.shape[1], params.group_size_cap)
    return GroupNorm.apply(x, params.gamma, params.beta, groups=groups, epsilon=params.epsilon)
