"""Full detector assembly: trunk, fusion blocks, prediction heads.

Heads are one 3x3 conv per (level, layer) emitting 6 channels (2 class
logits + 4 box deltas). Every level of the hierarchy carries its own heads
so each level can be supervised during training; inference reads only the
top level's heads. Heads over aliased slots share the feature tensor but
keep distinct parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .agglomeration import (ABlock, AblockConfig, FeatureHierarchy,
                            HierarchySpec, build_hierarchy)
from .backbone import (BackboneConfig, Trunk, count_parameters,
                       parameter_breakdown)
from .errors import ConfigurationError
from .layers import ConvUnit
from .tensor import Parameter, Tensor

HEAD_CHANNELS = 6  # 2 class logits + 4 box deltas per anchor cell


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ablock: AblockConfig = field(default_factory=AblockConfig)
    hierarchy: HierarchySpec = field(default_factory=HierarchySpec)


class DetectionModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: list[Parameter] = []
        self.trunk = Trunk(config.backbone, rng, self.params)

        spec = config.hierarchy
        self.blocks: dict[tuple[int, int], ABlock] = {}
        for level in range(2, spec.levels + 1):
            for layer in spec.computed_layers(level):
                shallow_ch = self._row_channels(level - 1)[layer - 1]
                deep_ch = self._row_channels(level - 1)[layer]
                self.blocks[(level, layer)] = ABlock(
                    f"fusion.level{level}_layer{layer}", shallow_ch, deep_ch,
                    config.ablock, rng, self.params)

        self.heads: dict[tuple[int, int], ConvUnit] = {}
        for level in range(1, spec.levels + 1):
            chans = self._row_channels(level)
            for layer in range(1, spec.n_layers + 1):
                self.heads[(level, layer)] = ConvUnit(
                    f"head.level{level}_layer{layer}", chans[layer - 1],
                    HEAD_CHANNELS, 3, 3, rng, self.params)

    def _row_channels(self, level: int) -> list[int]:
        """Channel width of each layer's slot at a hierarchy level."""
        stage = list(self.config.backbone.stage_channels)
        if level == 1:
            return stage
        x = self.config.ablock.context_channels
        start = self.config.hierarchy.agglomerate_start_layer
        return [x if layer <= start else stage[layer - 1]
                for layer in range(1, self.config.hierarchy.n_layers + 1)]

    # ------------------------------------------------------------------
    # forward passes

    def hierarchy(self, image: Tensor, any_size: bool = False) -> FeatureHierarchy:
        taps = self.trunk._forward_any(image) if any_size else self.trunk.forward(image)
        return build_hierarchy(taps, self.config.hierarchy, self.blocks)

    def head_outputs(self, hier: FeatureHierarchy, level: int) -> list[tuple[Tensor, Tensor]]:
        """(class logits [N,2,H,W], box deltas [N,4,H,W]) per layer."""
        outs = []
        for layer in range(1, self.config.hierarchy.n_layers + 1):
            raw = self.heads[(level, layer)](hier.slot(layer, level))
            outs.append((T.slice_channels(raw, 0, 2), T.slice_channels(raw, 2, 6)))
        return outs

    # ------------------------------------------------------------------
    # bookkeeping

    def parameters(self) -> list[Parameter]:
        return self.params

    def parameter_count(self) -> int:
        return count_parameters(self.params)

    def parameter_breakdown(self) -> dict[str, int]:
        return parameter_breakdown(self.params)

    def set_dtype(self, dtype) -> None:
        """Switch all parameters to a dtype (float64 for gradient checks)."""
        for p in self.params:
            p.tensor.data = p.tensor.data.astype(dtype)
            p.momentum_buffer = p.momentum_buffer.astype(dtype)
            p.tensor.grad = None
