"""Fusion blocks and the multi-level feature hierarchy builder.

Each fusion block enriches a shallow map with one adjacent deeper map: the
shallow side goes through a four-branch context module (or a plain 1x1
lateral when context is disabled), the deep side is channel-reduced to 1/8
and upsampled 2x, and a 3x3 smooth conv mixes the concatenation. Stacking
blocks level by level yields a hierarchy grid whose non-computed slots alias
the tensor one level below (same storage, no copy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .layers import ConvUnit
from .tensor import Parameter, Tensor

DEEP_REDUCE_DIVISOR = 8


@dataclass
class AblockConfig:
    context_channels: int = 256  # X: output width of every fusion block
    use_context: bool = True     # False: replace the context module with a 1x1 lateral

    def __post_init__(self):
        if self.context_channels % 4 != 0:
            raise ConfigurationError(
                f"ablock.context_channels: {self.context_channels} is not "
                "divisible by 4 (four equal context branches)")


@dataclass
class HierarchySpec:
    levels: int = 3
    agglomerate_start_layer: int = 4
    n_layers: int = 6

    def __post_init__(self):
        if not 1 <= self.levels <= 3:
            raise ConfigurationError(
                f"hierarchy.levels: {self.levels} outside the supported 1..3")
        if not 2 <= self.agglomerate_start_layer <= self.n_layers - 1:
            raise ConfigurationError(
                f"hierarchy.agglomerate_start_layer: {self.agglomerate_start_layer} "
                f"must lie in 2..{self.n_layers - 1}")

    def computed_layers(self, level: int) -> list[int]:
        """1-based layers whose slot is computed (not aliased) at ``level``.

        Level 2 fuses layers 1..start (deep inputs: layers 2..start+1 of the
        trunk); level 3 fuses layers 1..start-1 and aliases layer `start`
        from level 2. Level 1 is the trunk itself.
        """
        if level == 1:
            return list(range(1, self.n_layers + 1))
        if level == 2:
            return list(range(1, self.agglomerate_start_layer + 1))
        return list(range(1, self.agglomerate_start_layer))


class ContextModule:
    """1x1 entry conv to X channels, then four parallel branches (1x1, 1x3,
    3x1, 3x3) of X/4 channels each, concatenated back to X."""

    def __init__(self, name: str, in_ch: int, cfg: AblockConfig,
                 rng: np.random.Generator, params: list[Parameter]):
        x = cfg.context_channels
        quarter = x // 4
        self.entry = ConvUnit(f"{name}.entry", in_ch, x, 1, 1, rng, params)
        self.branches = [
            ConvUnit(f"{name}.b1x1", x, quarter, 1, 1, rng, params),
            ConvUnit(f"{name}.b1x3", x, quarter, 1, 3, rng, params),
            ConvUnit(f"{name}.b3x1", x, quarter, 3, 1, rng, params),
            ConvUnit(f"{name}.b3x3", x, quarter, 3, 3, rng, params),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        e = T.relu(self.entry(x))
        outs = [T.relu(b(e)) for b in self.branches]
        merged = outs[0]
        for o in outs[1:]:
            merged = T.concat_channels(merged, o)
        return merged


class Lateral:
    """Context-free shallow path: a single 1x1 conv to X channels."""

    def __init__(self, name: str, in_ch: int, cfg: AblockConfig,
                 rng: np.random.Generator, params: list[Parameter]):
        self.conv = ConvUnit(f"{name}.lateral", in_ch, cfg.context_channels, 1, 1, rng, params)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.conv(x))


class ABlock:
    """Fuse a shallow map with the adjacent deeper map (exactly half its
    spatial size) into an X-channel map at the shallow resolution."""

    def __init__(self, name: str, shallow_ch: int, deep_ch: int, cfg: AblockConfig,
                 rng: np.random.Generator, params: list[Parameter]):
        self.name = name
        self.cfg = cfg
        shallow_cls = ContextModule if cfg.use_context else Lateral
        self.shallow_path = shallow_cls(name, shallow_ch, cfg, rng, params)
        self.deep_reduced_ch = max(1, deep_ch // DEEP_REDUCE_DIVISOR)
        self.reduce = ConvUnit(f"{name}.reduce", deep_ch, self.deep_reduced_ch, 1, 1, rng, params)
        self.smooth = ConvUnit(
            f"{name}.smooth", cfg.context_channels + self.deep_reduced_ch,
            cfg.context_channels, 3, 3, rng, params)

    @property
    def concat_channels(self) -> int:
        return self.cfg.context_channels + self.deep_reduced_ch

    def __call__(self, shallow: Tensor, deep: Tensor) -> Tensor:
        sh, sw = shallow.shape[2:]
        dh, dw = deep.shape[2:]
        if (dh * 2, dw * 2) != (sh, sw):
            raise ConfigurationError(
                f"{self.name}: deep map {dh}x{dw} is not half of shallow "
                f"{sh}x{sw}; fusion blocks join adjacent layers only")
        s = self.shallow_path(shallow)
        d = T.bilinear_upsample2x(T.relu(self.reduce(deep)))
        return T.relu(self.smooth(T.concat_channels(s, d)))


class FeatureHierarchy:
    """Grid of feature maps indexed by (layer 1..n, level 1..m).

    ``slot(l, k)`` returns the tensor occupying a grid cell; aliased cells
    hold the identical tensor object as the level below. ``source_level``
    records where each slot was actually computed.
    """

    def __init__(self, rows: list[list[Tensor]], source_level: list[list[int]]):
        self.rows = rows
        self.source_level = source_level

    @property
    def levels(self) -> int:
        return len(self.rows)

    @property
    def n_layers(self) -> int:
        return len(self.rows[0])

    def slot(self, layer: int, level: int) -> Tensor:
        return self.rows[level - 1][layer - 1]

    def slot_source(self, layer: int, level: int) -> int:
        return self.source_level[level - 1][layer - 1]

    def is_alias(self, layer: int, level: int) -> bool:
        return self.slot_source(layer, level) < level

    def taps(self) -> list[Tensor]:
        """The detection maps: the top-level row, shallow to deep."""
        return list(self.rows[-1])

    def tap_sources(self) -> list[int]:
        return list(self.source_level[-1])


def build_hierarchy(level1: list[Tensor], spec: HierarchySpec,
                    blocks: dict[tuple[int, int], ABlock]) -> FeatureHierarchy:
    """Stack fusion levels on top of the trunk maps.

    ``blocks`` maps (level, layer) to the fusion block computing that slot;
    every slot without a block aliases the tensor one level below.
    """
    if len(level1) != spec.n_layers:
        raise ConfigurationError(
            f"build_hierarchy: expected {spec.n_layers} trunk maps, got {len(level1)}")
    rows = [list(level1)]
    sources = [[1] * spec.n_layers]
    for level in range(2, spec.levels + 1):
        below = rows[-1]
        below_src = sources[-1]
        computed = set(spec.computed_layers(level))
        row: list[Tensor] = []
        src: list[int] = []
        for layer in range(1, spec.n_layers + 1):
            if layer in computed:
                block = blocks[(level, layer)]
                row.append(block(below[layer - 1], below[layer]))
                src.append(level)
            else:
                row.append(below[layer - 1])  # alias: same tensor object
                src.append(below_src[layer - 1])
        rows.append(row)
        sources.append(src)
    return FeatureHierarchy(rows, sources)
