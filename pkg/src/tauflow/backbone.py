"""Convolutional encoder (three-scale pyramid) and skip-connection decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvNormAct, Module
from .tensor import ShapeError, Tensor


@dataclass
class FeaturePyramid:
    f1: Tensor  # full resolution
    f2: Tensor  # 1/2
    f3: Tensor  # 1/4


@dataclass
class SegOutputs:
    seg_logits: Tensor
    aux_logits: Tensor


class Encoder(Module):
    """Three stages of two conv blocks; stages 2 and 3 open with a stride-2 conv."""

    def __init__(self, base_channel: int, input_size: int, rng: np.random.Generator):
        c = base_channel
        self.input_size = input_size
        self.stage1 = [ConvNormAct(3, c, rng=rng), ConvNormAct(c, c, rng=rng)]
        self.stage2 = [ConvNormAct(c, c, stride=2, rng=rng), ConvNormAct(c, c, rng=rng)]
        self.stage3 = [ConvNormAct(c, c, stride=2, rng=rng), ConvNormAct(c, c, rng=rng)]

    def __call__(self, x: Tensor) -> FeaturePyramid:
        n = self.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (n, n):
            raise ShapeError(f"encoder expects (B, 3, {n}, {n}) input, got {x.shape}")
        feats = []
        h = x
        for stage in (self.stage1, self.stage2, self.stage3):
            for block in stage:
                h = block(h)
            feats.append(h)
        return FeaturePyramid(*feats)


class Decoder(Module):
    def __init__(self, base_channel: int, fused_channels: int, rng: np.random.Generator):
        c = base_channel
        self.up_a = ConvNormAct(fused_channels + c, c, rng=rng)
        self.aux_head = Conv2d(c, 1, 1, rng=rng)
        self.up_b = ConvNormAct(c + c, c, rng=rng)
        self.seg_head = Conv2d(c, 1, 1, rng=rng)

    def __call__(self, fused: Tensor, f2: Tensor, f1: Tensor) -> SegOutputs:
        B, _, h, w = fused.shape
        if f2.shape[0] != B or f2.shape[2:] != (2 * h, 2 * w) or f1.shape[2:] != (4 * h, 4 * w):
            raise ShapeError(f"decoder got fused {fused.shape}, f2 {f2.shape}, f1 {f1.shape}")
        a = T.bilinear_resize(fused, 2 * h, 2 * w)
        a = self.up_a(T.concat([a, f2], axis=1))
        aux = self.aux_head(a)
        b = T.bilinear_resize(a, 4 * h, 4 * w)
        b = self.up_b(T.concat([b, f1], axis=1))
        return SegOutputs(seg_logits=self.seg_head(b), aux_logits=aux)
