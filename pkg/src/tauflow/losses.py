"""Training objectives: Dice-Focal supervision, mask regularisers and the weighted total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights
from .tensor import ShapeError, Tensor

DICE_EPS = 1e-6
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_CLIP = 1e-7
DIVERSITY_MASS_FRACTION = 0.05
BOUNDARY_SATURATION = 0.05


def _as_const(t, like: Tensor) -> Tensor:
    return t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=like.dtype))


def dice_loss(p: Tensor, t) -> Tensor:
    """Soft Dice loss with sums taken jointly over batch and pixels."""
    t = _as_const(t, p)
    if p.shape != t.shape:
        raise ShapeError(f"dice_loss: prediction {p.shape} vs target {t.shape}")
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (p.sum() + t.sum() + DICE_EPS)


def focal_loss(p: Tensor, t, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    t = _as_const(t, p)
    if p.shape != t.shape:
        raise ShapeError(f"focal_loss: prediction {p.shape} vs target {t.shape}")
    pc = T.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP)
    pos = alpha * t * (1.0 - pc) ** gamma * T.log(pc)
    neg = (1.0 - alpha) * (1.0 - t) * pc ** gamma * T.log(1.0 - pc)
    return -T.reduce_mean(pos + neg)


def dice_focal(logits: Tensor, target) -> Tensor:
    p = T.sigmoid(logits)
    return 0.5 * dice_loss(p, target) + 0.5 * focal_loss(p, target)


main_loss = dice_focal


def flow_smooth_loss(masks: Tensor) -> Tensor:
    """Mean absolute forward difference of the masks along x and y.

    The last column/row has no forward neighbour and contributes zero.
    """
    if masks.ndim != 4:
        raise ShapeError(f"flow_smooth_loss expects (B, G, H, W), got {masks.shape}")
    dx = T.abs_(masks[:, :, :, 1:] - masks[:, :, :, :-1]).sum()
    dy = T.abs_(masks[:, :, 1:, :] - masks[:, :, :-1, :]).sum()
    return (dx + dy) / float(masks.size)


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour; outside counts as background."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)], constant_values=False)
    interior = (padded[..., :-2, 1:-1] & padded[..., 2:, 1:-1]
                & padded[..., 1:-1, :-2] & padded[..., 1:-1, 2:])
    return m & ~interior


def complexity_target(target: np.ndarray) -> np.ndarray:
    """Per-image boundary density of the ground truth, saturating at 5% of the pixels."""
    t = np.asarray(target) > 0.5
    if t.ndim == 4:
        t = t[:, 0]
    H, W = t.shape[-2:]
    counts = boundary_map(t).reshape(t.shape[0], -1).sum(axis=1)
    return np.minimum(1.0, counts / (BOUNDARY_SATURATION * H * W))


def diversity_reward(masks, max_groups: int) -> float:
    """Fraction of groups whose total mask mass reaches 5% of all mass."""
    m = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    mass = m.sum(axis=(0, 2, 3))
    total = mass.sum()
    if total <= 0:
        return 0.0
    return float((mass >= DIVERSITY_MASS_FRACTION * total).sum()) / max_groups


@dataclass
class LossBreakdown:
    main: float
    aux: float
    complexity: float
    diversity_reward: float
    flow: float
    stdp: float
    total: float
    total_tensor: Tensor | None = None

    TERMS = ("main", "aux", "complexity", "diversity_reward", "flow", "stdp", "total")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.TERMS}

    def first_non_finite(self) -> str | None:
        for k in self.TERMS:
            if not np.isfinite(getattr(self, k)):
                return k
        return None


def combine(main, aux, complexity, diversity, flow, stdp, weights: LossWeights | None = None):
    """Weighted total; works on floats and Tensors alike."""
    w = weights or LossWeights()
    return (w.main * main + w.aux * aux + w.complexity * complexity - w.diversity * diversity
            + w.flow * flow + w.stdp * stdp)


def total_loss(main: Tensor, aux: Tensor, complexity_score: Tensor, target_complexity, masks: Tensor,
               stdp: Tensor | None, max_groups: int, weights: LossWeights | None = None) -> LossBreakdown:
    """Assemble every objective into a :class:`LossBreakdown`.

    ``complexity_score`` has one entry per image; ``target_complexity`` is the
    matching array from :func:`complexity_target`. ``stdp`` is ``None`` when the
    regulariser is disabled.
    """
    tc = Tensor(np.asarray(target_complexity, dtype=complexity_score.dtype).reshape(complexity_score.shape))
    diff = complexity_score - tc
    complexity = T.reduce_mean(diff * diff)
    div = diversity_reward(masks, max_groups)
    flow = flow_smooth_loss(masks)
    stdp_t = stdp if stdp is not None else Tensor(np.zeros((), dtype=main.dtype))
    total = combine(main, aux, complexity, div, flow, stdp_t, weights)
    return LossBreakdown(main=main.item(), aux=aux.item(), complexity=complexity.item(),
                         diversity_reward=div, flow=flow.item(), stdp=stdp_t.item(),
                         total=total.item(), total_tensor=total)
