"""
SACANet at desk scale

Pyramid contextual front-end (shared-weight VGG stem on the full and quarter resolution
image), three scale-adaptive self-attention branches with dilations (1, 2, 3), a
hierarchical fusion cascade, a two-block backend and a one-channel density head.
Output stride is 8.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from services.engine import functional as F
from services.engine.checkpoint import read_container, write_container
from services.engine.tensor import Tensor
from services.errors import CheckpointError, ConfigurationError, UsageError
from services.network.config import ModelConfig
from services.network.layers import ParameterStore, conv, conv_gn_relu, he_std

logger = logging.getLogger(__name__)

STEM_PREFIX = 'stem.'


class SacaModel:
    def __init__(self, config: ModelConfig, params: ParameterStore):
        self.config = config
        self.params = params

    def __repr__(self):
        return (f"SacaModel(variant={self.config.variant}, channel_scale={self.config.channel_scale}, "
                f"parameters={self.parameter_count()})")

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def parameter_count(self) -> int:
        return self.params.count()

    def zero_grad(self):
        self.params.zero_grad()

    def head_inputs(self, image: Tensor) -> Tensor:
        """Backend features the 1x1 density head reads"""
        if image.ndim != 4 or image.shape[1] != self.config.input_channels:
            raise ConfigurationError(
                f"model expects B x {self.config.input_channels} x H x W input, got {image.shape}")
        features = pyramid_context_forward(self, image)
        branches = [sasa_branch_forward(self, features, index) for index in range(3)]
        return backend_forward(self, branches)

    def forward(self, image: Tensor) -> Tensor:
        return density_head(self, self.head_inputs(image))

    __call__ = forward


def build_model(config: ModelConfig) -> SacaModel:
    """Create every parameter in a fixed order from config.seed"""
    config.validate()
    params = ParameterStore(config.seed)
    scale = config.init_scale

    # Stem gets He init, everything after it the small Gaussian
    c_in = config.input_channels
    layer = 0
    for width in config.stem_plan():
        if width == 'M':
            continue
        layer += 1
        params.conv(f"stem.conv{layer}", width, c_in, 3, he_std(c_in, 3))
        c_in = width

    features = config.feature_channels
    if config.use_pyramid:
        params.conv('pyramid.fuse', features, 2 * features, 1, scale)
        params.group_norm('pyramid.fuse_gn', features)

    branch = config.branch_channels
    for index in range(3):
        prefix = f"branch{index}"
        params.conv(f"{prefix}.reduce", branch, features, 1, scale)
        params.group_norm(f"{prefix}.reduce_gn", branch)
        params.conv(f"{prefix}.dilated", branch, branch, 3, scale)
        params.group_norm(f"{prefix}.dilated_gn", branch)
        if config.use_attention:
            for role in ('query', 'key', 'value'):
                params.conv(f"{prefix}.{role}", branch, branch, 1, scale)

    if config.use_hierarchical:
        for stage in (1, 2):
            params.conv(f"fusion.stage{stage}.project", branch, branch, 1, scale)
            params.conv(f"fusion.stage{stage}.refine", branch, branch, 3, scale)
            params.group_norm(f"fusion.stage{stage}.refine_gn", branch)
    else:
        params.conv('fusion.merge', branch, 3 * branch, 1, scale)
        params.group_norm('fusion.merge_gn', branch)

    for block in (1, 2):
        params.conv(f"backend.conv{block}", branch, branch, 3, scale)
        params.group_norm(f"backend.conv{block}_gn", branch)
    params.conv('output', 1, branch, 1, scale)

    model = SacaModel(config, params)
    logger.info("🏗️ SACANET: built %s variant, %d parameter tensors, %d weights",
                config.variant, len(params), model.parameter_count())
    return model


# Front-end

def stem_forward(model: SacaModel, x: Tensor) -> Tensor:
    layer = 0
    for width in model.config.stem_plan():
        if width == 'M':
            x = F.max_pool2(x)
        else:
            layer += 1
            x = F.relu(conv(model.params, f"stem.conv{layer}", x, padding=1))
    return x


def pyramid_features(model: SacaModel, image: Tensor) -> Tuple[Tensor, Tensor]:
    """Stride-8 features of the full image and of the quarter image (upsampled back to stride 8)"""
    full = stem_forward(model, image)
    quarter = stem_forward(model, F.avg_pool(image, 4))
    return full, F.bilinear_upsample(quarter, 4)


def pyramid_context_forward(model: SacaModel, image: Tensor) -> Tensor:
    multiple = model.config.input_multiple
    height, width = image.shape[2], image.shape[3]
    if height % multiple or width % multiple:
        raise ConfigurationError(f"input {height}x{width} must have height and width divisible by {multiple}")

    if not model.config.use_pyramid:
        return stem_forward(model, image)

    full, upsampled = pyramid_features(model, image)
    merged = F.channel_shuffle(F.concat([full, upsampled], axis=1), 2)
    return conv_gn_relu(model.params, 'pyramid.fuse', merged, model.config.gn_epsilon)


# Scale-adaptive self-attention

def spatial_attention(query: Tensor, key: Tensor, value: Tensor) -> Tuple[Tensor, Tensor]:
    """Y = softmax(Q K^T) V over flattened positions; returns (Y as B x C x H x W, attention B x L x L)"""
    batch, channels, height, width = value.shape
    length = height * width
    q = F.transpose(F.reshape(query, (batch, query.shape[1], length)), (0, 2, 1))
    k = F.reshape(key, (batch, key.shape[1], length))
    v = F.transpose(F.reshape(value, (batch, channels, length)), (0, 2, 1))

    attention = F.softmax_rows(F.matmul(q, k))
    y = F.matmul(attention, v)
    y = F.reshape(F.transpose(y, (0, 2, 1)), (batch, channels, height, width))
    return y, attention


def self_attention(model: SacaModel, x: Tensor, branch_index: int, return_attention: bool = False):
    length = x.shape[2] * x.shape[3]
    if length > model.config.attention_cap:
        raise UsageError(
            f"attention over {length} positions exceeds the cap of {model.config.attention_cap}; "
            f"use a smaller input or a smaller channel_scale/attention_cap trade-off")
    prefix = f"branch{branch_index}"
    query = conv(model.params, f"{prefix}.query", x)
    key = conv(model.params, f"{prefix}.key", x)
    value = conv(model.params, f"{prefix}.value", x)
    y, attention = spatial_attention(query, key, value)
    return (y, attention) if return_attention else y


def sasa_branch_forward(model: SacaModel, features: Tensor, branch_index: int) -> Tensor:
    if branch_index not in (0, 1, 2):
        raise UsageError(f"branch_index must be 0, 1 or 2, got {branch_index}")
    if features.shape[1] % 4:
        raise ConfigurationError(f"branch input channels must be divisible by 4, got {features.shape[1]}")

    eps = model.config.gn_epsilon
    dilation = model.config.dilations[branch_index]
    prefix = f"branch{branch_index}"
    x = conv_gn_relu(model.params, f"{prefix}.reduce", features, eps)
    x = conv_gn_relu(model.params, f"{prefix}.dilated", x, eps, padding=dilation, dilation=dilation)
    if model.config.use_attention:
        x = self_attention(model, x, branch_index)
    return x


# Fusion and head

def backend_forward(model: SacaModel, branch_outputs: Sequence[Tensor]) -> Tensor:
    if len(branch_outputs) != 3:
        raise UsageError(f"fusion needs three branch outputs, got {len(branch_outputs)}")
    shapes = {tuple(b.shape) for b in branch_outputs}
    if len(shapes) != 1:
        raise ConfigurationError(f"branch outputs differ in shape: {sorted(shapes)}")

    params, eps = model.params, model.config.gn_epsilon
    if model.config.use_hierarchical:
        # Largest dilation seeds the estimate, smaller ones refine it
        order = sorted(range(3), key=lambda i: model.config.dilations[i], reverse=True)
        fused = branch_outputs[order[0]]
        for stage, index in enumerate(order[1:], start=1):
            fused = F.add(conv(params, f"fusion.stage{stage}.project", fused), branch_outputs[index])
            fused = conv_gn_relu(params, f"fusion.stage{stage}.refine", fused, eps, padding=1)
    else:
        fused = conv_gn_relu(params, 'fusion.merge', F.concat(list(branch_outputs), axis=1), eps)

    for block in (1, 2):
        fused = conv_gn_relu(params, f"backend.conv{block}", fused, eps, padding=1)
    return fused


def density_head(model: SacaModel, features: Tensor) -> Tensor:
    return F.relu(conv(model.params, 'output', features))


def hierarchical_fuse(model: SacaModel, branch_outputs: Sequence[Tensor]) -> Tensor:
    return density_head(model, backend_forward(model, branch_outputs))


def predict_count(density) -> np.ndarray:
    """Per-image sum of a B x 1 x h x w density map"""
    grid = density.data if isinstance(density, Tensor) else np.asarray(density, dtype=np.float64)
    if grid.ndim != 4:
        raise UsageError(f"predict_count expects a B x 1 x h x w map, got shape {grid.shape}")
    if np.any(grid < 0):
        raise UsageError("predict_count expects a non-negative density map")
    return grid.sum(axis=(1, 2, 3))


# Weights

def save_weights(model: SacaModel, path):
    return write_container(path, ((name, tensor.data) for name, tensor in model.params.items()))


def load_weights(model: SacaModel, path, stem_only: bool = False) -> SacaModel:
    """Load a CKWT file; with stem_only, only stem.* records are taken and the rest keep their init"""
    staged = {}
    for name, array in read_container(path):
        if stem_only and not name.startswith(STEM_PREFIX):
            continue
        if name not in model.params:
            raise CheckpointError(f"{path}: unknown parameter '{name}'")
        expected = model.params[name].shape
        if array.shape != expected:
            raise CheckpointError(
                f"{path}: parameter '{name}' has shape {array.shape} in the file, model expects {expected}")
        staged[name] = array

    if stem_only:
        if not staged:
            raise CheckpointError(f"{path}: no stem parameters found")
    else:
        missing = [name for name in model.params if name not in staged]
        if missing:
            raise CheckpointError(f"{path}: missing parameters {', '.join(missing[:5])}"
                                  + (" ..." if len(missing) > 5 else ""))

    for name, array in staged.items():
        model.params[name].data = np.array(array)
    logger.info("📦 SACANET: loaded %d parameter tensors from %s%s",
                len(staged), path, " (stem only)" if stem_only else "")
    return model
