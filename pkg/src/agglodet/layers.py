"""Small trainable building blocks shared by the trunk and the fusion blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class ConvUnit:
    """A conv layer with xavier weight, zero bias and same-padding.

    Padding is (kh//2, kw//2), i.e. "same" for 3-wide kernel sides and zero
    for 1-wide ones.
    """

    def __init__(self, name: str, in_ch: int, out_ch: int, kh: int, kw: int,
                 rng: np.random.Generator, params: list[Parameter]):
        self.name = name
        self.pad = (kh // 2, kw // 2)
        self.weight = Parameter(f"{name}.weight", T.xavier_init((out_ch, in_ch, kh, kw), rng))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(out_ch, dtype=T.DEFAULT_DTYPE)))
        params.extend([self.weight, self.bias])

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight.tensor, self.bias.tensor,
                        pad=self.pad, name=self.name)

    def to_dtype(self, dtype) -> None:
        self.weight.tensor.data = self.weight.tensor.data.astype(dtype)
        self.bias.tensor.data = self.bias.tensor.data.astype(dtype)
