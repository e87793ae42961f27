"""Analytic parameter and FLOPs accounting.

The cost model is a flat list of layer descriptions derived from the config
alone; it never inspects a built network, so comparing its parameter total
with :meth:`Module.num_parameters` is a genuine cross-check.

Conventions: one multiply-accumulate is 2 FLOPs, so a convolution costs
``2 * Cout * Cin/groups * k^2 * H' * W'``; normalisation, activations,
resampling, softmax and elementwise products cost 1 FLOP per output element.
Costs are per image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .config import ModelConfig
from .grouping import COMPLEXITY_HIDDEN, FAST_CHANNELS

ELEMENTWISE_KINDS = {"groupnorm", "relu", "tanh", "sigmoid", "softplus", "clamp", "resize", "softmax",
                     "elementwise", "mean"}


class AccountingError(ValueError):
    pass


@dataclass
class Layer:
    module: str
    kind: str
    cin: int = 0
    cout: int = 0
    kernel: int = 1
    groups: int = 1
    hw: int = 0            # output spatial extent (square)
    bias: bool = True
    per_group: bool = False
    per_step: bool = False
    per_flow_step: bool = False

    def params(self) -> int:
        if self.kind == "conv":
            return self.cout * (self.cin // self.groups) * self.kernel ** 2 + (self.cout if self.bias else 0)
        if self.kind == "linear":
            return self.cin * self.cout + (self.cout if self.bias else 0)
        if self.kind == "groupnorm":
            return 2 * self.cout
        if self.kind == "scalar":
            return 1
        if self.kind in ELEMENTWISE_KINDS:
            return 0
        raise AccountingError(f"unsupported layer kind {self.kind!r}")

    def flops(self) -> int:
        if self.kind == "conv":
            return 2 * self.cout * (self.cin // self.groups) * self.kernel ** 2 * self.hw * self.hw
        if self.kind == "linear":
            return 2 * self.cin * self.cout
        if self.kind == "scalar":
            return 0
        if self.kind in ELEMENTWISE_KINDS:
            return self.cout * self.hw * self.hw
        raise AccountingError(f"unsupported layer kind {self.kind!r}")

    def multiplier(self, G: int, T: int, flow_steps: int) -> int:
        m = G if self.per_group else 1
        if self.per_step:
            m *= T
        if self.per_flow_step:
            m *= flow_steps
        return m


def _block(module: str, cin: int, cout: int, hw: int) -> list[Layer]:
    return [Layer(module, "conv", cin, cout, 3, hw=hw), Layer(module, "groupnorm", cout=cout, hw=hw),
            Layer(module, "relu", cout=cout, hw=hw)]


def describe(cfg: ModelConfig) -> list[Layer]:
    """Every parameterised or costed layer of the network, in forward order."""
    c, hid, emb, Gm = cfg.base_channel, cfg.hidden_channels, cfg.group_embed_dim, cfg.max_groups
    n1, n2, n3 = cfg.input_size, cfg.input_size // 2, cfg.grid
    ltc = c + emb
    L: list[Layer] = []
    # encoder
    L += _block("encoder", 3, c, n1) + _block("encoder", c, c, n1)
    L += _block("encoder", c, c, n2) + _block("encoder", c, c, n2)
    L += _block("encoder", c, c, n3) + _block("encoder", c, c, n3)
    # interface
    L += [Layer("interface", "conv", 1, emb, cfg.pos_kernel, hw=n3),
          Layer("interface", "mean", cout=c, hw=1),
          Layer("interface", "linear", c, hid),
          Layer("interface", "tanh", cout=hid, hw=1)]
    # dynamic grouping
    L += [Layer("grouping", "conv", ltc, hid, 1, hw=n3),
          Layer("grouping", "softplus", cout=hid, hw=n3),
          Layer("grouping", "clamp", cout=hid, hw=n3),
          Layer("grouping", "mean", cout=2 * ltc, hw=n3),
          Layer("grouping", "linear", 2 * ltc + 1, COMPLEXITY_HIDDEN),
          Layer("grouping", "relu", cout=COMPLEXITY_HIDDEN, hw=1),
          Layer("grouping", "linear", COMPLEXITY_HIDDEN, 1),
          Layer("grouping", "sigmoid", cout=1, hw=1)]
    L += _block("grouping", ltc + hid, 32, n3) + _block("grouping", 32, 32, n3)
    L += [Layer("grouping", "conv", 32, Gm, 1, hw=n3),
          Layer("grouping", "conv", ltc, FAST_CHANNELS, 1, hw=n3),
          Layer("grouping", "softmax", cout=Gm, hw=n3, per_flow_step=True),
          Layer("grouping", "elementwise", cout=FAST_CHANNELS, hw=n3, per_group=True, per_flow_step=True),
          Layer("grouping", "conv", FAST_CHANNELS, 1, 1, hw=n3, per_flow_step=True),
          Layer("grouping", "sigmoid", cout=1, hw=n3, per_flow_step=True),
          Layer("grouping", "softmax", cout=Gm, hw=n3),
          Layer("grouping", "elementwise", cout=ltc, hw=n3, per_group=True)]
    # tau-attention (1x1 projections act on pooled features)
    L += [Layer("attention", "mean", cout=ltc, hw=n3, per_group=True),
          Layer("attention", "conv", ltc, cfg.qk_dim, 1, hw=1, bias=False, per_group=True),
          Layer("attention", "conv", ltc, cfg.qk_dim, 1, hw=1, bias=False, per_group=True),
          Layer("attention", "linear", cfg.qk_dim, 1),
          Layer("attention", "scalar"), Layer("attention", "scalar"), Layer("attention", "scalar"),
          Layer("attention", "elementwise", cout=2, hw=n3, per_group=True),
          Layer("attention", "sigmoid", cout=1, hw=1, per_group=True),
          Layer("attention", "elementwise", cout=ltc, hw=n3, per_group=True)]
    # ConvLTC cell
    L += [Layer("cell", "conv", ltc, hid, 1, hw=n3, per_group=True),
          Layer("cell", "softplus", cout=hid, hw=n3, per_group=True),
          Layer("cell", "clamp", cout=hid, hw=n3, per_group=True),
          Layer("cell", "conv", ltc, hid, 1, hw=n3, per_group=True),
          Layer("cell", "conv", hid, hid, 3, groups=hid, hw=n3, per_group=True, per_step=True),
          Layer("cell", "conv", hid, hid, 1, hw=n3, per_group=True, per_step=True),
          Layer("cell", "tanh", cout=hid, hw=n3, per_group=True, per_step=True),
          Layer("cell", "elementwise", cout=3 * hid, hw=n3, per_group=True, per_step=True),
          Layer("cell", "groupnorm", cout=hid, hw=n3, per_group=True),
          Layer("cell", "conv", hid, hid, 1, hw=n3, per_group=True),
          Layer("cell", "conv", hid, c, 1, hw=n3, per_group=True),
          Layer("cell", "elementwise", cout=c, hw=n3, per_group=True)]
    # decoder
    L += [Layer("decoder", "resize", cout=c, hw=n2)] + _block("decoder", 2 * c, c, n2)
    L += [Layer("decoder", "conv", c, 1, 1, hw=n2),
          Layer("decoder", "resize", cout=c, hw=n1)] + _block("decoder", 2 * c, c, n1)
    L += [Layer("decoder", "conv", c, 1, 1, hw=n1)]
    return L


@dataclass
class CostReport:
    params_total: int
    params_by_module: dict[str, int]
    flops_static: int
    flops_by_groups: dict[int, int] = field(default_factory=dict)

    def flops_dynamic(self, G: int) -> int:
        return self.flops_by_groups[G]

    def to_dict(self) -> dict:
        return {"params_total": self.params_total, "params_by_module": self.params_by_module,
                "flops_static": self.flops_static,
                "flops_dynamic": {str(g): f for g, f in self.flops_by_groups.items()}}

    def table(self) -> str:
        lines = ["module        params"]
        lines += [f"{name:<12}{count:>9,}" for name, count in self.params_by_module.items()]
        lines.append(f"{'total':<12}{self.params_total:>9,}")
        lines.append("")
        lines.append(f"static FLOPs (G-independent): {self.flops_static:,}")
        for g, f in self.flops_by_groups.items():
            lines.append(f"G={g}: {f:,} FLOPs ({f / 1e9:.3f} G)")
        return "\n".join(lines)


def count_params(cfg: ModelConfig) -> tuple[int, dict[str, int]]:
    by_module: dict[str, int] = {}
    for layer in describe(cfg):
        by_module[layer.module] = by_module.get(layer.module, 0) + layer.params()
    return sum(by_module.values()), by_module


def estimate_flops(cfg: ModelConfig, G: int, input_size: int | None = None) -> int:
    if input_size is not None and input_size != cfg.input_size:
        cfg = _with_size(cfg, input_size)
    if not 1 <= G <= cfg.max_groups:
        raise AccountingError(f"G={G} outside 1..{cfg.max_groups}")
    return sum(layer.flops() * layer.multiplier(G, cfg.T, cfg.max_flow_steps) for layer in describe(cfg))


def static_flops(cfg: ModelConfig) -> int:
    return sum(layer.flops() for layer in describe(cfg)
               if not (layer.per_group or layer.per_step or layer.per_flow_step))


def _with_size(cfg: ModelConfig, size: int) -> ModelConfig:
    from dataclasses import replace
    return replace(cfg, input_size=size)


def cost_report(cfg: ModelConfig, input_size: int | None = None) -> CostReport:
    if input_size is not None and input_size != cfg.input_size:
        cfg = _with_size(cfg, input_size)
    total, by_module = count_params(cfg)
    return CostReport(params_total=total, params_by_module=by_module, flops_static=static_flops(cfg),
                      flops_by_groups={g: estimate_flops(cfg, g) for g in range(1, cfg.max_groups + 1)})
