"""Dynamic grouping: time-constant field, complexity-driven group count,
soft group masks with flow-step refinement, and grouped features."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import dice_loss
from .nn import Conv2d, ConvNormAct, Linear, Module
from .tensor import ShapeError, Tensor

TAU_EPS = 1e-6
KEY_EPS = 1e-6
FAST_CHANNELS = 8
COMPLEXITY_HIDDEN = 16


def tau_from_raw(raw: Tensor, tau_min: float, tau_max: float) -> Tensor:
    return T.clamp(T.softplus(raw) + TAU_EPS, tau_min, tau_max)


def groups_from_score(score: float, max_groups: int) -> int:
    return min(max_groups, 1 + int(math.floor(score * max_groups)))


@dataclass
class GroupPlan:
    score: Tensor               # (B,) complexity scores in [0, 1]
    per_image: list[int]        # group count each image asks for
    G: int                      # batch-wide active group count (max over images)


@dataclass
class RefineResult:
    masks: Tensor
    rewards: list[float] = field(default_factory=list)
    temperatures: list[float] = field(default_factory=list)


def masks_from_logits(logits: Tensor, G: int, temperature=None) -> Tensor:
    """Softmax over the first ``G`` group logits; the remaining groups are exactly zero."""
    B, G_max, H, W = logits.shape
    if not 1 <= G <= G_max:
        raise ShapeError(f"active groups {G} outside 1..{G_max}")
    active = T.softmax_axis(logits[:, :G], axis=1, temperature=temperature)
    if G == G_max:
        return active
    return T.concat([active, T.zeros((B, G_max - G, H, W), dtype=logits.dtype)], axis=1)


def group_features(ltc_input: Tensor, masks: Tensor) -> Tensor:
    """U[b, g, c] = ltc_input[b, c] * masks[b, g]."""
    B, C, H, W = ltc_input.shape
    if masks.shape[0] != B or masks.shape[2:] != (H, W):
        raise ShapeError(f"masks {masks.shape} do not match ltc_input {ltc_input.shape}")
    G = masks.shape[1]
    return T.reshape(ltc_input, (B, 1, C, H, W)) * T.reshape(masks, (B, G, 1, H, W))


def tau_input_gradient_map(raw: np.ndarray, weight: np.ndarray, tau_min: float, tau_max: float,
                           normalize: bool = True) -> np.ndarray:
    """Per-pixel norm of d(mean_c tau)/d(input) for a 1x1 tau convolution.

    ``raw`` is the pre-activation (B, C, H, W); ``weight`` the (C, Cin, 1, 1)
    kernel. Clamped entries have zero derivative. Returns (B, 1, H, W),
    min-max scaled per image when ``normalize``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64).reshape(weight.shape[0], -1)
    sig = 0.5 * (1.0 + np.tanh(0.5 * raw))
    tau = np.logaddexp(0.0, raw) + TAU_EPS
    sig = np.where((tau > tau_min) & (tau < tau_max), sig, 0.0)
    v = np.einsum("bchw,cd->bdhw", sig, w) / w.shape[0]
    key = np.sqrt((v * v).sum(axis=1, keepdims=True))
    if normalize:
        lo = key.min(axis=(1, 2, 3), keepdims=True)
        hi = key.max(axis=(1, 2, 3), keepdims=True)
        key = (key - lo) / (hi - lo + KEY_EPS)
    return key


def downsample_mask(target, size: int) -> np.ndarray:
    """Bilinear resize of a binary mask followed by a 0.5 threshold."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-1] == size and t.shape[-2] == size:
        return (t > 0.5).astype(np.float64)
    small = T.bilinear_resize(Tensor(t), size, size).data
    return (small > 0.5).astype(np.float64)


class DynamicGrouping(Module):
    def __init__(self, in_channels: int, hidden: int, max_groups: int, tau_min: float, tau_max: float,
                 max_flow_steps: int, reward_scale: float, rng: np.random.Generator):
        self.max_groups = max_groups
        self.tau_min, self.tau_max = tau_min, tau_max
        self.max_flow_steps = max_flow_steps
        self.reward_scale = reward_scale
        self.tau_conv = Conv2d(in_channels, hidden, 1, rng=rng)
        self.complexity_fc1 = Linear(2 * in_channels + 1, COMPLEXITY_HIDDEN, rng=rng)
        self.complexity_fc2 = Linear(COMPLEXITY_HIDDEN, 1, rng=rng)
        self.pattern = [ConvNormAct(in_channels + hidden, 32, rng=rng), ConvNormAct(32, 32, rng=rng)]
        self.pattern_out = Conv2d(32, max_groups, 1, rng=rng)
        self.fast_proj = Conv2d(in_channels, FAST_CHANNELS, 1, rng=rng)
        self.fast_out = Conv2d(FAST_CHANNELS, 1, 1, rng=rng)

    # -- time constants ---------------------------------------------------
    def compute_tau(self, ltc_input: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(tau, raw)``."""
        raw = self.tau_conv(ltc_input)
        return tau_from_raw(raw, self.tau_min, self.tau_max), raw

    def key_map(self, raw: Tensor) -> np.ndarray:
        return tau_input_gradient_map(raw.data, self.tau_conv.weight.data, self.tau_min, self.tau_max)

    # -- complexity -------------------------------------------------------
    @staticmethod
    def edge_density(image, grid: int) -> np.ndarray:
        """Mean gradient magnitude of the grayscale image at grid resolution,
        divided by the batch maximum."""
        img = image.data if isinstance(image, Tensor) else np.asarray(image)
        luma = img.astype(np.float64).mean(axis=1, keepdims=True)
        small = T.bilinear_resize(Tensor(luma), grid, grid).data[:, 0]
        gy, gx = np.gradient(small, axis=(1, 2))
        dens = np.sqrt(gx * gx + gy * gy).mean(axis=(1, 2))
        return dens / (dens.max() + 1e-6)

    def assess_complexity(self, ltc_input: Tensor, image, force_groups: int | None = None) -> GroupPlan:
        B, C, H, W = ltc_input.shape
        mean = T.reduce_mean(ltc_input, axes=(2, 3))
        centred = ltc_input - T.reshape(mean, (B, C, 1, 1))
        std = T.sqrt(T.reduce_mean(centred * centred, axes=(2, 3)) + 1e-6)
        edge = Tensor(self.edge_density(image, H).reshape(B, 1).astype(ltc_input.dtype))
        feats = T.concat([mean, std, edge], axis=1)
        hidden = T.relu(self.complexity_fc1(feats))
        score = T.reshape(T.sigmoid(self.complexity_fc2(hidden)), (B,))
        if force_groups is not None:
            per_image = [force_groups] * B
        else:
            per_image = [groups_from_score(float(s), self.max_groups) for s in score.data]
        return GroupPlan(score=score, per_image=per_image, G=max(per_image))

    # -- masks ------------------------------------------------------------
    def mask_logits(self, ltc_input: Tensor, tau: Tensor) -> Tensor:
        h = T.concat([ltc_input, tau], axis=1)
        for block in self.pattern:
            h = block(h)
        return self.pattern_out(h)

    def generate_masks(self, ltc_input: Tensor, tau: Tensor, G: int) -> tuple[Tensor, Tensor]:
        logits = self.mask_logits(ltc_input, tau)
        return logits, masks_from_logits(logits, G)

    def fast_logits(self, masks: Tensor, ltc_input: Tensor) -> Tensor:
        z = self.fast_proj(ltc_input)
        B, G, H, W = masks.shape
        mixed = (T.reshape(masks, (B, G, 1, H, W)) * T.reshape(z, (B, 1, FAST_CHANNELS, H, W))).sum(axes=1)
        return self.fast_out(mixed)

    def refine_masks(self, mask_logits: Tensor, key_map: np.ndarray, ltc_input: Tensor, G: int,
                     target_small=None) -> RefineResult:
        """Flow-step refinement via a per-pixel softmax temperature.

        Each step scores the current masks with the fast head, converts the
        score into a reward centred at 0.5 and rescales the temperature by
        ``exp(-reward_scale * reward)``. The returned masks use the
        temperature after the final update. Rewards and the key map are
        constants for differentiation.
        """
        B, _, H, W = mask_logits.shape
        key = np.asarray(key_map, dtype=mask_logits.dtype).reshape(B, 1, H, W)
        if target_small is not None:
            tgt = target_small.data if isinstance(target_small, Tensor) else np.asarray(target_small)
            if tgt.shape != (B, 1, H, W):
                raise ShapeError(f"refinement target {tgt.shape} != ({B}, 1, {H}, {W})")
            tgt = tgt.astype(mask_logits.dtype)
        temp = 1.0
        result = RefineResult(masks=mask_logits, temperatures=[temp])
        with T.no_grad():
            logits_c = mask_logits.detach()
            inp = ltc_input.detach()
            for _ in range(self.max_flow_steps):
                masks_k = masks_from_logits(logits_c, G, temp / (1.0 + key))
                p = T.sigmoid(self.fast_logits(masks_k, inp))
                if target_small is not None:
                    reward = 1.0 - dice_loss(p, Tensor(tgt)).item() - 0.5
                else:
                    reward = 2.0 * float(np.abs(p.data - 0.5).mean()) - 0.5
                temp = temp * math.exp(-self.reward_scale * reward)
                result.rewards.append(reward)
                result.temperatures.append(temp)
        result.masks = masks_from_logits(mask_logits, G, temp / (1.0 + key))
        return result
