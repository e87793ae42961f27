"""Full network: encoder -> interface -> dynamic grouping -> tau-attention
-> ConvLTC cell -> decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import TauAttention
from .backbone import Decoder, Encoder
from .cell import CellTrace, TauFlowCell
from .config import ModelConfig
from .grouping import DynamicGrouping, GroupPlan, downsample_mask, group_features
from .interface import TauFlowInterface
from .nn import Module
from .stdp import stdp_from_trace
from .tensor import Tensor


@dataclass
class ModelOutput:
    seg_logits: Tensor
    aux_logits: Tensor
    masks: Tensor
    mask_logits: Tensor
    tau: Tensor
    plan: GroupPlan
    attn_weights: Tensor
    fused: Tensor
    trace: CellTrace
    key_map: np.ndarray
    flow_rewards: list[float] = field(default_factory=list)
    stdp: Tensor | None = None

    @property
    def G(self) -> int:
        return self.plan.G


class TauFlow(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int | None = None):
        cfg = config or ModelConfig()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
        c, hidden, emb = cfg.base_channel, cfg.hidden_channels, cfg.group_embed_dim
        ltc = c + emb
        self.encoder = Encoder(c, cfg.input_size, rng)
        self.interface = TauFlowInterface(c, emb, hidden, cfg.pos_kernel, cfg.grid, rng)
        self.grouping = DynamicGrouping(ltc, hidden, cfg.max_groups, cfg.tau_min, cfg.tau_max,
                                        cfg.max_flow_steps, cfg.reward_scale, rng)
        self.attention = TauAttention(ltc, cfg.qk_dim, rng)
        self.cell = TauFlowCell(ltc, hidden, c, cfg.dt, cfg.tau_min, cfg.tau_max, rng)
        self.decoder = Decoder(c, c, rng)

    def __call__(self, image, target=None, training: bool = False) -> ModelOutput:
        """Forward pass.

        ``target`` (B, 1, H, W) feeds the Dice reward of the mask refinement and
        the teacher-forced STDP term; both fall back to their label-free forms
        when it is absent. STDP is only evaluated when ``training`` is set and
        the regulariser is enabled.
        """
        cfg = self.config
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        pyramid = self.encoder(x)
        bridge = self.interface(pyramid.f3)
        ltc_input = bridge.ltc_input

        grid = cfg.grid
        target_small = downsample_mask(target, grid).astype(x.dtype) if target is not None else None

        tau, raw = self.grouping.compute_tau(ltc_input)
        plan = self.grouping.assess_complexity(ltc_input, x, cfg.force_groups)
        mask_logits, _ = self.grouping.generate_masks(ltc_input, tau, plan.G)
        key = self.grouping.key_map(raw)
        refined = self.grouping.refine_masks(mask_logits, key, ltc_input, plan.G, target_small)
        masks = refined.masks
        U = group_features(ltc_input, masks)

        att = self.attention(U, masks, tau)
        fused, trace = self.cell.evolve_and_fuse(att.U_weighted, masks, bridge.s0, plan.G, cfg.T)
        seg = self.decoder(fused, pyramid.f2, pyramid.f1)

        stdp = None
        if training and cfg.stdp.enabled:
            stdp = stdp_from_trace(trace, cfg.stdp, target_small)
        return ModelOutput(seg_logits=seg.seg_logits, aux_logits=seg.aux_logits, masks=masks,
                           mask_logits=mask_logits, tau=tau, plan=plan, attn_weights=att.attn_weights,
                           fused=fused, trace=trace, key_map=key, flow_rewards=refined.rewards, stdp=stdp)

    @property
    def dtype(self):
        return self.encoder.stage1[0].conv.weight.dtype

    def predict(self, image) -> np.ndarray:
        """Foreground probabilities (B, 1, H, W)."""
        with T.no_grad():
            out = self(image)
        return T.sigmoid(out.seg_logits).data
