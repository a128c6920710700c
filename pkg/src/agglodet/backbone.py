"""Config-driven trunk producing the base feature maps at six strides.

A VGG-flavored stack scaled down to desk widths: stage 1 downsamples twice
(stride 4), every later stage is conv-relu, conv-relu, pool, doubling the
stride up to 128. The trunk is width-agnostic; widths come from the config.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .layers import ConvUnit
from .tensor import Parameter, Tensor

STRIDES = (4, 8, 16, 32, 64, 128)
N_LAYERS = 6


@dataclass
class BackboneConfig:
    input_size: int = 128
    stage_channels: tuple[int, ...] = (32, 64, 128, 128, 128, 128)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.input_size % STRIDES[-1] != 0:
            raise ConfigurationError(
                f"backbone.input_size: {self.input_size} is not divisible by "
                f"the largest stride {STRIDES[-1]}")
        if len(self.stage_channels) != N_LAYERS:
            raise ConfigurationError(
                f"backbone.stage_channels: expected {N_LAYERS} widths, "
                f"got {len(self.stage_channels)}")


class Trunk:
    """Six stages; the tap after stage l sits at stride STRIDES[l-1]."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator,
                 params: list[Parameter]):
        self.config = config
        ch = config.stage_channels
        self.stages: list[list[ConvUnit]] = []
        prev = 3
        for i, c in enumerate(ch):
            stage = [
                ConvUnit(f"trunk.stage{i + 1}.conv1", prev, c, 3, 3, rng, params),
                ConvUnit(f"trunk.stage{i + 1}.conv2", c, c, 3, 3, rng, params),
            ]
            self.stages.append(stage)
            prev = c

    def forward(self, image: Tensor) -> list[Tensor]:
        """Run the trunk, returning the six tap maps shallow-to-deep."""
        n, c, h, w = image.shape
        s = self.config.input_size
        if c != 3 or h != s or w != s:
            raise ConfigurationError(
                f"forward_trunk: input {image.shape} does not match configured "
                f"size (N, 3, {s}, {s})")
        return self._forward_any(image)

    def _forward_any(self, image: Tensor) -> list[Tensor]:
        # size-agnostic path used by multi-scale inference; each map must stay
        # pool-able, which holds whenever H == W is divisible by 128
        if image.shape[2] % STRIDES[-1] != 0 or image.shape[2] != image.shape[3]:
            raise ConfigurationError(
                f"forward_trunk: input spatial size {image.shape[2:]} must be "
                f"square and divisible by {STRIDES[-1]}")
        taps = []
        x = image
        for i, stage in enumerate(self.stages):
            if i == 0:
                # stride-4 first tap: conv-relu-pool twice
                x = T.maxpool2x2(T.relu(stage[0](x)))
                x = T.maxpool2x2(T.relu(stage[1](x)))
            else:
                x = T.relu(stage[0](x))
                x = T.maxpool2x2(T.relu(stage[1](x)))
            taps.append(x)
        return taps


def forward_trunk(image: Tensor, trunk: Trunk) -> list[Tensor]:
    return trunk.forward(image)


def count_parameters(params: list[Parameter]) -> int:
    return sum(int(p.tensor.data.size) for p in params)


def parameter_breakdown(params: list[Parameter]) -> dict[str, int]:
    """Scalar counts grouped by the first two name components."""
    out: dict[str, int] = {}
    for p in params:
        key = ".".join(p.name.split(".")[:2])
        out[key] = out.get(key, 0) + int(p.tensor.data.size)
    return out
