"""Per-group ConvLTC cell with explicit-Euler state evolution and mask-weighted fusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .grouping import tau_from_raw
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor, TensorError


@dataclass
class CellTrace:
    """Everything the STDP regulariser needs, for the G active groups.

    Tensors are flattened over (batch, group): ``inputs`` is (B*G, Cin, H, W),
    each entry of ``states`` is (B*G, hidden, H, W) with ``states[0] == s0``.
    """
    batch: int
    groups: int
    inputs: Tensor
    tau: Tensor
    states: list[Tensor] = field(default_factory=list)


class TauFlowCell(Module):
    def __init__(self, in_channels: int, hidden: int, out_channels: int, dt: float, tau_min: float,
                 tau_max: float, rng: np.random.Generator):
        self.dt = dt
        self.tau_min, self.tau_max = tau_min, tau_max
        self.tau_conv = Conv2d(in_channels, hidden, 1, rng=rng)
        self.w_u = Conv2d(in_channels, hidden, 1, rng=rng)
        self.w_s_depthwise = Conv2d(hidden, hidden, 3, groups=hidden, rng=rng)
        self.w_s_pointwise = Conv2d(hidden, hidden, 1, rng=rng)
        self.norm = GroupNorm(hidden, 8)
        self.proj = Conv2d(hidden, hidden, 1, rng=rng)
        self.out_proj = Conv2d(hidden, out_channels, 1, rng=rng)

    def compute_group_tau(self, u: Tensor) -> Tensor:
        return tau_from_raw(self.tau_conv(u), self.tau_min, self.tau_max)

    def step_size(self, tau: Tensor, dt: float | None = None) -> Tensor:
        """min(dt / tau, 1): the Euler step never overshoots the drive target."""
        dt = self.dt if dt is None else dt
        return T.clamp(dt / tau, None, 1.0)

    def drive(self, s: Tensor, u_term: Tensor) -> Tensor:
        return T.tanh(self.w_s_pointwise(self.w_s_depthwise(s)) + u_term)

    def cell_step(self, s: Tensor, u: Tensor, tau: Tensor, dt: float | None = None) -> Tensor:
        """One Euler step of ds/dt = (-s + f(s, u)) / tau with the capped step size."""
        return self._step(s, self.w_u(u), self.step_size(tau, dt))

    def _step(self, s: Tensor, u_term: Tensor, eta: Tensor) -> Tensor:
        f = self.drive(s, u_term)
        s_next = s + eta * (f - s)
        if not np.isfinite(s_next.data).all():
            raise TensorError("cell_step produced a non-finite state")
        return s_next

    def evolve(self, u: Tensor, s0: Tensor, steps: int) -> tuple[list[Tensor], Tensor]:
        """Run ``steps`` Euler steps from ``s0`` with the input held fixed."""
        tau = self.compute_group_tau(u)
        eta = self.step_size(tau)
        u_term = self.w_u(u)
        states = [s0]
        s = s0
        for _ in range(steps):
            s = self._step(s, u_term, eta)
            states.append(s)
        return states, tau

    def readout(self, s: Tensor) -> Tensor:
        return self.out_proj(self.proj(self.norm(s)))

    def evolve_and_fuse(self, U_weighted: Tensor, masks: Tensor, s0: Tensor, G: int,
                        steps: int) -> tuple[Tensor, CellTrace]:
        """Evolve each active group from ``s0`` and fuse the group outputs with the masks."""
        if steps < 1:
            raise TensorError("need at least one time step")
        B, _, C, H, W = U_weighted.shape
        hidden = s0.shape[1]
        u = T.reshape(U_weighted[:, :G], (B * G, C, H, W))
        s_init = T.reshape(T.reshape(s0, (B, 1, hidden, H, W)) * T.ones((B, G, hidden, H, W), dtype=s0.dtype),
                           (B * G, hidden, H, W))
        states, tau = self.evolve(u, s_init, steps)
        out = self.readout(states[-1])
        out = T.reshape(out, (B, G, -1, H, W))
        weights = T.reshape(masks[:, :G], (B, G, 1, H, W))
        fused = (out * weights).sum(axes=1)
        return fused, CellTrace(batch=B, groups=G, inputs=u, tau=tau, states=states)
