"""Autodiff-versus-finite-difference comparison helpers and the per-module suite."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor, finite_diff_gradient, precision

TOLERANCE = 1e-4
ZERO_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger max-norm of the two gradients.

    Elementwise ratios blow up on entries that are zero up to rounding, so the
    error is normalised once per tensor. Gradients whose max-norm is below
    ``ZERO_FLOOR`` (for example a conv bias feeding a one-channel norm group)
    are effectively compared in absolute terms.
    """
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), ZERO_FLOOR)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4) -> float:
    """Worst relative error over every input of scalar ``fn`` (float64).

    ``fn`` receives one Tensor per input array.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    with precision(np.float64):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = fn(*leaves)
        grads = tape.backward(out, wrt=leaves)

        worst = 0.0
        for i, leaf in enumerate(leaves):
            def partial(x, i=i):
                args = [Tensor(a) for a in arrays]
                args[i] = x
                return fn(*args)
            numeric = finite_diff_gradient(partial, Tensor(arrays[i]), eps)
            worst = max(worst, relative_error(grads[leaf].data, numeric.data))
    return worst


def check_closure(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                  max_entries: int | None = None, seed: int = 0) -> float:
    """Like :func:`check_gradients` for a closure over existing tensors
    (module parameters included); the tensors are perturbed in place and restored.

    With ``max_entries``, larger tensors are checked on a fixed random subset
    of that many coordinates.
    """
    for t in tensors:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
    pick = np.random.default_rng(seed)
    with precision(np.float64):
        with Tape() as tape:
            out = loss_fn()
        grads = tape.backward(out, wrt=tensors)
        worst = 0.0
        for t in tensors:
            original = t.data.copy()
            analytic = grads[t].data.ravel()
            if max_entries is None or t.size <= max_entries:
                def f(x, t=t):
                    t.data = x.data
                    return loss_fn()
                numeric = finite_diff_gradient(f, Tensor(original), eps).data.ravel()
                t.data = original
            else:
                idx = pick.choice(t.size, size=max_entries, replace=False)
                numeric = np.empty(max_entries)
                for j, flat in enumerate(idx):
                    vals = []
                    for sign in (1.0, -1.0):
                        bumped = original.copy()
                        bumped.reshape(-1)[flat] += sign * eps
                        t.data = bumped
                        vals.append(loss_fn().item())
                    numeric[j] = (vals[0] - vals[1]) / (2 * eps)
                t.data = original
                analytic = analytic[idx]
            worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# Per-module suite
# ---------------------------------------------------------------------------

def _check_tensor(eps: float) -> float:
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(2, 4, 8, 8))
    k1 = rng.uniform(-1, 1, size=(4, 4, 3, 3))
    k2 = rng.uniform(-1, 1, size=(2, 2, 3, 3))
    gamma, beta = rng.uniform(0.5, 1.5, size=4), rng.uniform(-1, 1, size=4)

    def f(a, w1, w2, g, b):
        h = T.group_norm(T.conv2d(a, w1, None, padding=1), 2, g, b)
        h = T.tanh(T.conv2d(h, w2, None, stride=2, padding=1, groups=2))
        h = T.bilinear_resize(h, 6, 6)
        return (T.softmax_axis(h, 1) * Tensor(rng_w)).sum() + T.reduce_mean(T.softplus(h))
    rng_w = rng.normal(size=(2, 2, 6, 6))
    return check_gradients(f, [x, k1, k2, gamma, beta], eps)


def _check_interface(eps: float) -> float:
    from .interface import TauFlowInterface
    rng = np.random.default_rng(1)
    with precision(np.float64):
        mod = TauFlowInterface(4, 4, 8, 3, 6, rng)
        f3 = Tensor(rng.uniform(-1, 1, size=(2, 4, 6, 6)))
    wrng = np.random.default_rng(11)
    w1, w2 = wrng.normal(size=(2, 8, 6, 6)), wrng.normal(size=(2, 8, 6, 6))

    def loss():
        out = mod(f3)
        return (out.ltc_input * Tensor(w1)).sum() + (out.s0 * Tensor(w2)).sum()
    return check_closure(loss, [f3] + mod.parameters(), eps)


def _check_grouping(eps: float) -> float:
    from .grouping import DynamicGrouping, masks_from_logits
    rng = np.random.default_rng(2)
    with precision(np.float64):
        mod = DynamicGrouping(8, 8, 3, 1e-2, 1e3, 3, 0.1, rng)
        ltc = Tensor(rng.uniform(-1, 1, size=(2, 8, 6, 6)))
    image = rng.uniform(0, 1, size=(2, 3, 24, 24))
    temp = 1.0 / (1.0 + rng.uniform(0, 1, size=(2, 1, 6, 6)))
    wrng = np.random.default_rng(12)
    w_tau, w_mask, w_score = wrng.normal(size=(2, 8, 6, 6)), wrng.normal(size=(2, 3, 6, 6)), wrng.normal(size=2)

    def loss():
        tau, _ = mod.compute_tau(ltc)
        plan = mod.assess_complexity(ltc, image)
        logits = mod.mask_logits(ltc, tau)
        masks = masks_from_logits(logits, 2, temp)
        return ((tau * Tensor(w_tau)).sum() + (masks * Tensor(w_mask)).sum()
                + (plan.score * Tensor(w_score)).sum())
    return check_closure(loss, [ltc] + mod.parameters(), eps, max_entries=256)


def _check_attention(eps: float) -> float:
    from .attention import TauAttention
    rng = np.random.default_rng(3)
    with precision(np.float64):
        mod = TauAttention(4, 7, rng)
    U = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 5, 5)))
    masks = Tensor(rng.dirichlet(np.ones(3), size=(2, 5, 5)).transpose(0, 3, 1, 2).copy())
    tau = Tensor(rng.uniform(0.1, 2.0, size=(2, 4, 5, 5)))
    wrng = np.random.default_rng(13)
    w_u, w_a = wrng.normal(size=U.shape), wrng.normal(size=(2, 3))

    def loss():
        out = mod(U, masks, tau)
        return (out.U_weighted * Tensor(w_u)).sum() + (out.attn_weights * Tensor(w_a)).sum()
    return check_closure(loss, [U, masks, tau] + mod.parameters(), eps)


def _check_cell(eps: float) -> float:
    from .cell import TauFlowCell
    rng = np.random.default_rng(4)
    with precision(np.float64):
        # dt below the typical tau keeps the step size off its cap, exercising the tau path
        mod = TauFlowCell(4, 8, 4, 0.3, 1e-2, 1e3, rng)
    U = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 5, 5)))
    masks = Tensor(rng.dirichlet(np.ones(3), size=(2, 5, 5)).transpose(0, 3, 1, 2).copy())
    s0 = Tensor(rng.uniform(-0.9, 0.9, size=(2, 8, 5, 5)))
    w = np.random.default_rng(14).normal(size=(2, 4, 5, 5))

    def loss():
        fused, _ = mod.evolve_and_fuse(U, masks, s0, 2, 2)
        return (fused * Tensor(w)).sum()
    return check_closure(loss, [U, masks, s0] + mod.parameters(), eps)


def _check_losses(eps: float) -> float:
    from .losses import dice_focal, flow_smooth_loss
    rng = np.random.default_rng(5)
    logits = rng.uniform(-2, 2, size=(2, 1, 8, 8))
    target = (rng.uniform(size=(2, 1, 8, 8)) > 0.5).astype(np.float64)
    masks = rng.dirichlet(np.ones(3), size=(2, 8, 8)).transpose(0, 3, 1, 2).copy()
    score = rng.uniform(0.1, 0.9, size=2)
    tc = rng.uniform(0, 1, size=2)
    e1 = check_gradients(lambda z: dice_focal(z, target), [logits], eps)
    e2 = check_gradients(flow_smooth_loss, [masks], eps)
    e3 = check_gradients(lambda s: T.reduce_mean((s - Tensor(tc)) * (s - Tensor(tc))), [score], eps)
    return max(e1, e2, e3)


def _check_stdp(eps: float) -> float:
    from .cell import CellTrace
    from .config import StdpConfig
    from .stdp import stdp_from_trace
    rng = np.random.default_rng(6)
    B, G, H, W = 1, 2, 4, 4
    u = rng.uniform(-1, 1, size=(B * G, 4, H, W))
    s1, s2, s3 = rng.uniform(-1, 1, size=(3, B * G, 4, H, W))
    tau = rng.uniform(0.1, 2.0, size=(B * G, 4, H, W))
    target = (rng.uniform(size=(B, 1, H, W)) > 0.5).astype(np.float64)
    cfg = StdpConfig(kappa=2.0)

    def make(supervised):
        def f(uu, a, b, c, tt):
            trace = CellTrace(batch=B, groups=G, inputs=uu, tau=tt, states=[a, a, b, c])
            return stdp_from_trace(trace, cfg, target if supervised else None)
        return f
    return max(check_gradients(make(False), [u, s1, s2, s3, tau], eps),
               check_gradients(make(True), [u, s1, s2, s3, tau], eps))


def _check_backbone(eps: float) -> float:
    from .backbone import Decoder, Encoder
    # seed chosen so no ReLU pre-activation lies within eps of its kink
    rng = np.random.default_rng(11)
    with precision(np.float64):
        enc = Encoder(4, 8, rng)
        dec = Decoder(4, 4, rng)
    x = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)))
    fused = Tensor(rng.uniform(-1, 1, size=(1, 4, 2, 2)))
    wrng = np.random.default_rng(17)
    w1, w2 = wrng.normal(size=(1, 1, 8, 8)), wrng.normal(size=(1, 1, 4, 4))

    def loss():
        pyr = enc(x)
        out = dec(fused + pyr.f3, pyr.f2, pyr.f1)
        return (out.seg_logits * Tensor(w1)).sum() + (out.aux_logits * Tensor(w2)).sum()
    return check_closure(loss, [x, fused] + enc.parameters() + dec.parameters(), eps)


SUITE: dict[str, Callable[[float], float]] = {
    "tensor": _check_tensor,
    "interface": _check_interface,
    "grouping": _check_grouping,
    "attention": _check_attention,
    "cell": _check_cell,
    "losses": _check_losses,
    "stdp": _check_stdp,
    "backbone": _check_backbone,
}


def run_suite(modules: Sequence[str] | None = None, eps: float = 1e-4) -> dict[str, float]:
    names = list(modules) if modules else list(SUITE)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradcheck module(s) {unknown}; choose from {sorted(SUITE)}")
    return {name: SUITE[name](eps) for name in names}
