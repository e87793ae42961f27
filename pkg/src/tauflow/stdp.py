"""Differentiable spike events and the causal-consistency (STDP) regulariser.

Pre-synaptic events come from the group input, post-synaptic events from the
state after each Euler step. The loss rewards pre(t) * post(t+1)
co-activation and penalises the reversed order with strength ``beta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cell import CellTrace
from .config import StdpConfig
from .tensor import ShapeError, Tensor, TensorError

NORM_EPS = 1e-5


@dataclass
class EventMaps:
    e_pre: Tensor   # (B, G, T, H, W)
    e_post: Tensor  # (B, G, T, H, W)


def standardized_activation(x: Tensor) -> Tensor:
    """Per-pixel scalar: z-score every channel over space, then average channels.

    (N, C, H, W) -> (N, H, W). A spatially constant map scores 0 everywhere.
    """
    N, C, H, W = x.shape
    mean = T.reduce_mean(x, axes=(2, 3), keepdims=True)
    centred = x - mean
    std = T.sqrt(T.reduce_mean(centred * centred, axes=(2, 3), keepdims=True) + NORM_EPS ** 2)
    return T.reduce_mean(centred / (std + NORM_EPS), axes=1)


def event(x_hat: Tensor, kappa: float, theta: float) -> Tensor:
    return T.sigmoid(kappa * (x_hat - theta))


def event_approx(trace: CellTrace, cfg: StdpConfig) -> EventMaps:
    steps = len(trace.states) - 1
    if steps < 2:
        raise TensorError(f"STDP needs at least two time steps, trace has {steps}")
    B, G = trace.batch, trace.groups
    H, W = trace.inputs.shape[2:]
    # the group input is held fixed, so the pre-synaptic event repeats over t
    pre = T.reshape(event(standardized_activation(trace.inputs), cfg.kappa, cfg.theta_u), (B, G, 1, H, W))
    pre = pre * T.ones((B, G, steps, H, W), dtype=pre.dtype)
    post = T.stack([T.reshape(event(standardized_activation(s), cfg.kappa, cfg.theta_s), (B, G, H, W))
                    for s in trace.states[1:]], axis=2)
    return EventMaps(e_pre=pre, e_post=post)


def tau_weights(tau: Tensor, batch: int, groups: int) -> Tensor:
    """Channel-mean tau divided by its global mean, shape (B, G, H, W)."""
    H, W = tau.shape[2:]
    tbar = T.reshape(T.reduce_mean(tau, axes=1), (batch, groups, H, W))
    return tbar / T.reduce_mean(tbar)


def stdp_loss(events: EventMaps, w_tau: Tensor | None, cfg: StdpConfig) -> Tensor:
    """Weighted causal loss, averaged over batch, groups, pixels and transitions.

    ``w_tau`` is (B, G, H, W); ``None`` means unit weights.
    """
    pre, post = events.e_pre, events.e_post
    if pre.shape != post.shape or pre.ndim != 5:
        raise ShapeError(f"event maps must share a (B, G, T, H, W) shape, got {pre.shape}, {post.shape}")
    B, G, steps, H, W = pre.shape
    if steps < 2:
        raise TensorError("STDP needs at least two time steps")
    causal = pre[:, :, :-1] * post[:, :, 1:]
    anti = pre[:, :, 1:] * post[:, :, :-1]
    kernel = (causal - cfg.beta * anti).sum(axes=2)
    if w_tau is not None:
        if w_tau.shape != (B, G, H, W):
            raise ShapeError(f"tau weights {w_tau.shape} != {(B, G, H, W)}")
        kernel = kernel * w_tau
    Z = B * G * H * W * (steps - 1)
    return -kernel.sum() / float(Z)


def blend_teacher(events: EventMaps, target_small, rho: float) -> EventMaps:
    """Convex blend of post-synaptic events with the downsampled target."""
    if target_small is None:
        raise TensorError("supervised STDP needs a target")
    post = events.e_post
    B, G, steps, H, W = post.shape
    y = target_small.data if isinstance(target_small, Tensor) else np.asarray(target_small)
    if y.shape != (B, 1, H, W):
        raise ShapeError(f"teacher target {y.shape} != ({B}, 1, {H}, {W})")
    y = Tensor(y.astype(post.dtype).reshape(B, 1, 1, H, W))
    return EventMaps(e_pre=events.e_pre, e_post=(1.0 - rho) * post + rho * y)


def stdp_loss_supervised(events: EventMaps, w_tau: Tensor | None, target_small, cfg: StdpConfig) -> Tensor:
    return stdp_loss(blend_teacher(events, target_small, cfg.rho), w_tau, cfg)


def stdp_from_trace(trace: CellTrace, cfg: StdpConfig, target_small=None) -> Tensor:
    events = event_approx(trace, cfg)
    w = tau_weights(trace.tau, trace.batch, trace.groups)
    if target_small is None:
        return stdp_loss(events, w, cfg)
    return stdp_loss_supervised(events, w, target_small, cfg)


def time_reversed(events: EventMaps) -> EventMaps:
    """Mirror image in time: every causal pair becomes an anti-causal one."""
    return EventMaps(e_pre=events.e_pre[:, :, ::-1], e_post=events.e_post[:, :, ::-1])
