"""Encoder-to-core bridge: positional embedding, ltc_input and the initial state s0."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import ShapeError, Tensor


@dataclass
class InterfaceOutput:
    ltc_input: Tensor
    s0: Tensor
    pos_emb: Tensor


class TauFlowInterface(Module):
    def __init__(self, base_channel: int, embed_dim: int, hidden: int, kernel: int, grid: int,
                 rng: np.random.Generator):
        self.grid = grid
        self.pos_conv = Conv2d(1, embed_dim, kernel, rng=rng)
        self.init_linear = Linear(base_channel, hidden, rng=rng)

    def make_positional_embedding(self, batch: int) -> Tensor:
        """Learnable embedding from a constant all-ones plane; the same for every image."""
        const = T.ones((batch, 1, self.grid, self.grid), dtype=self.pos_conv.weight.dtype)
        return self.pos_conv(const)

    @staticmethod
    def build_ltc_input(f3: Tensor, pos_emb: Tensor) -> Tensor:
        if f3.shape[0] != pos_emb.shape[0] or f3.shape[2:] != pos_emb.shape[2:]:
            raise ShapeError(f"cannot concatenate f3 {f3.shape} with pos_emb {pos_emb.shape}")
        return T.concat([f3, pos_emb], axis=1)

    def init_hidden_state(self, f3: Tensor) -> Tensor:
        """tanh(Linear(spatial mean of f3)) broadcast over the grid."""
        B, _, h, w = f3.shape
        pooled = T.reduce_mean(f3, axes=(2, 3))
        vec = T.tanh(self.init_linear(pooled))
        hidden = vec.shape[1]
        return T.reshape(vec, (B, hidden, 1, 1)) * T.ones((B, hidden, h, w), dtype=vec.dtype)

    def __call__(self, f3: Tensor) -> InterfaceOutput:
        pos = self.make_positional_embedding(f3.shape[0])
        return InterfaceOutput(ltc_input=self.build_ltc_input(f3, pos), s0=self.init_hidden_state(f3),
                               pos_emb=pos)
