"""
Model configuration
Architecture hyperparameters, channel-width scaling and the key-value config file format
"""

from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Tuple, Union

from dotenv import dotenv_values

from services.engine.functional import group_count
from services.errors import ConfigurationError
from services.tools.io_tools import atomic_write_text

# First ten convolutions of VGG-16 with its first three pooling layers ('M')
VGG_STEM = (64, 64, 'M', 128, 128, 'M', 256, 256, 256, 'M', 512, 512, 512)

# Ablation ladder: each variant adds one component to the previous one
VARIANTS = ('baseline', 'context', 'context_sasa', 'full')


def _parse_fraction(raw) -> Fraction:
    try:
        value = Fraction(str(raw).strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"channel_scale must be a positive rational like 1/8, got {raw!r}")
    if value <= 0:
        raise ConfigurationError(f"channel_scale must be positive, got {raw!r}")
    return value


@dataclass(frozen=True)
class ModelConfig:
    channel_scale: Fraction = Fraction(1, 8)
    input_channels: int = 3
    dilations: Tuple[int, int, int] = (1, 2, 3)
    gn_epsilon: float = 1e-5
    seed: int = 0
    init_scale: float = 0.01
    attention_cap: int = 4096
    variant: str = 'full'

    def __post_init__(self):
        object.__setattr__(self, 'channel_scale', _parse_fraction(self.channel_scale))
        object.__setattr__(self, 'dilations', tuple(int(d) for d in self.dilations))

    # Channel plan

    def scaled(self, width: int) -> int:
        value = Fraction(width) * self.channel_scale
        if value.denominator != 1 or value < 1:
            raise ConfigurationError(
                f"channel_scale {self.channel_scale} turns a {width}-channel layer into {value} channels; "
                f"widths must stay positive integers")
        return int(value)

    def stem_plan(self) -> List[Union[int, str]]:
        return [item if item == 'M' else self.scaled(item) for item in VGG_STEM]

    @property
    def feature_channels(self) -> int:
        return self.scaled(VGG_STEM[-1])

    @property
    def branch_channels(self) -> int:
        if self.feature_channels % 4:
            raise ConfigurationError(
                f"branch reduction needs feature channels divisible by 4, got {self.feature_channels}")
        return self.feature_channels // 4

    @property
    def use_pyramid(self) -> bool:
        return self.variant != 'baseline'

    @property
    def use_attention(self) -> bool:
        return self.variant in ('context_sasa', 'full')

    @property
    def use_hierarchical(self) -> bool:
        return self.variant == 'full'

    @property
    def input_multiple(self) -> int:
        """Height and width must be multiples of this"""
        return 32 if self.use_pyramid else 8

    def validate(self) -> "ModelConfig":
        if self.input_channels < 1:
            raise ConfigurationError(f"input_channels must be positive, got {self.input_channels}")
        if len(self.dilations) != 3 or any(d < 1 for d in self.dilations):
            raise ConfigurationError(f"dilations must be three positive integers, got {self.dilations}")
        if self.gn_epsilon <= 0:
            raise ConfigurationError(f"gn_epsilon must be positive, got {self.gn_epsilon}")
        if self.init_scale <= 0:
            raise ConfigurationError(f"init_scale must be positive, got {self.init_scale}")
        if self.attention_cap < 1:
            raise ConfigurationError(f"attention_cap must be positive, got {self.attention_cap}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}")

        widths = [w for w in self.stem_plan() if w != 'M'] + [self.branch_channels]
        for width in widths:
            group_count(width)
        return self

    # Key-value file format

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {', '.join(unknown)}")

        kwargs = {}
        try:
            for key, raw in values.items():
                if raw is None:
                    raise ConfigurationError(f"model config key '{key}' has no value")
                if key == 'channel_scale':
                    kwargs[key] = _parse_fraction(raw)
                elif key == 'dilations':
                    kwargs[key] = tuple(int(part) for part in raw.split(','))
                elif key in ('input_channels', 'seed', 'attention_cap'):
                    kwargs[key] = int(raw)
                elif key in ('gn_epsilon', 'init_scale'):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw.strip()
        except ValueError as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(f"model config value not understood: {e}")
        return cls(**kwargs).validate()

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"model config not found: {path}")
        return cls.from_mapping(dict(dotenv_values(path)))

    def to_mapping(self) -> Dict[str, str]:
        return {
            'channel_scale': str(self.channel_scale),
            'input_channels': str(self.input_channels),
            'dilations': ",".join(str(d) for d in self.dilations),
            'gn_epsilon': repr(self.gn_epsilon),
            'seed': str(self.seed),
            'init_scale': repr(self.init_scale),
            'attention_cap': str(self.attention_cap),
            'variant': self.variant,
        }

    def to_file(self, path) -> Path:
        lines = [f"{key}={value}" for key, value in self.to_mapping().items()]
        return atomic_write_text(path, "\n".join(lines) + "\n")
