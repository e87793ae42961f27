"""AdamW with decoupled weight decay and the cosine warm-restart schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps,
                                    m=[np.zeros_like(p.data) for p in self.params],
                                    v=[np.zeros_like(p.data) for p in self.params])

    def step(self, grads: Sequence[np.ndarray]) -> None:
        st = self.state
        if len(grads) != len(self.params):
            raise ShapeError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            g = np.asarray(g.data if isinstance(g, Tensor) else g)
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            # decoupled decay first, then the adaptive-moment update
            if st.weight_decay:
                p.data *= 1.0 - st.lr * st.weight_decay
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.data -= (st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)).astype(p.dtype)


def lr_at(epoch: float, base_lr: float, T0: int = 10, Tmult: int = 2, eta_min: float = 0.0) -> float:
    """Cosine annealing with warm restarts; cycles last T0, T0*Tmult, T0*Tmult^2, ..."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if Tmult == 1:
        T_i = T0
        T_cur = epoch % T0
    else:
        n = int(math.floor(math.log(epoch / T0 * (Tmult - 1) + 1, Tmult)))
        start = T0 * (Tmult ** n - 1) / (Tmult - 1)
        # guard float error right at a boundary
        if epoch < start:
            n -= 1
            start = T0 * (Tmult ** n - 1) / (Tmult - 1)
        T_i = T0 * Tmult ** n
        T_cur = epoch - start
        if T_cur >= T_i:
            T_cur -= T_i
            T_i *= Tmult
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + math.cos(math.pi * T_cur / T_i))
