"""Group-level sigmoid gating from pooled QK interaction, mask mass and tau statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module, Scalar
from .tensor import Tensor


@dataclass
class AttentionOutput:
    attn_weights: Tensor  # (B, G_max)
    U_weighted: Tensor    # (B, G_max, C, H, W)


class TauAttention(Module):
    def __init__(self, channels: int, qk_dim: int, rng: np.random.Generator):
        self.q_conv = Conv2d(channels, qk_dim, 1, bias=False, rng=rng)
        self.k_conv = Conv2d(channels, qk_dim, 1, bias=False, rng=rng)
        self.score = Linear(qk_dim, 1, rng=rng)
        self.a = Scalar(1.0)
        self.b = Scalar(1.0)
        self.c = Scalar(1.0)

    def __call__(self, U: Tensor, masks: Tensor, tau: Tensor) -> AttentionOutput:
        B, G, C, H, W = U.shape
        # a 1x1 conv commutes with spatial averaging, so pool first
        pooled = T.reshape(T.reduce_mean(U, axes=(3, 4)), (B * G, C, 1, 1))
        q = T.reshape(self.q_conv(pooled), (B * G, -1))
        k = T.reshape(self.k_conv(pooled), (B * G, -1))
        base = T.reshape(self.score(q * k), (B, G))

        mpool = T.reduce_mean(masks, axes=(2, 3))
        tau_bar = T.reshape(T.reduce_mean(tau, axes=1), (B, 1, H, W))
        tau_mean = (masks * tau_bar).sum(axes=(2, 3)) / (masks.sum(axes=(2, 3)) + 1e-6)

        logits = self.a() * base + self.b() * mpool + self.c() * tau_mean
        attn = T.sigmoid(logits)
        weighted = U * T.reshape(attn, (B, G, 1, 1, 1))
        return AttentionOutput(attn_weights=attn, U_weighted=weighted)
