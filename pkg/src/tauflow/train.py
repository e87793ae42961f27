"""Training loop, validation and the per-epoch metric log."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Sample, augment, to_batch
from .grouping import downsample_mask
from .losses import LossBreakdown, complexity_target, dice_focal, total_loss
from .metrics import EvalSummary, binarize, evaluate_masks
from .model import ModelOutput, TauFlow
from .optim import AdamW, lr_at

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss") + LossBreakdown.TERMS + ("val_dice", "val_iou", "val_hd95", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    terms: dict[str, float]
    val_dice: float
    val_iou: float
    val_hd95: float
    lr: float

    def to_line(self) -> str:
        values = [str(self.epoch), f"{self.train_loss:.6g}"]
        values += [f"{self.terms[k]:.6g}" for k in LossBreakdown.TERMS]
        values += [f"{self.val_dice:.6f}", f"{self.val_iou:.6f}", f"{self.val_hd95:.4f}", f"{self.lr:.6g}"]
        return "\t".join(values)


@dataclass
class TrainResult:
    best_dice: float
    best_epoch: int
    epochs_run: int
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_state: dict[str, np.ndarray] = field(default_factory=dict)


def compute_losses(model: TauFlow, images: np.ndarray, masks: np.ndarray) -> tuple[ModelOutput, LossBreakdown]:
    """Training-mode forward and the full loss breakdown (call inside a Tape)."""
    cfg = model.config
    out = model(images, masks, training=True)
    main = dice_focal(out.seg_logits, masks)
    aux_size = out.aux_logits.shape[-1]
    aux = dice_focal(out.aux_logits, downsample_mask(masks, aux_size).astype(images.dtype))
    breakdown = total_loss(main, aux, out.plan.score, complexity_target(masks), out.masks, out.stdp,
                           cfg.max_groups, cfg.loss)
    return out, breakdown


def predict_masks(model: TauFlow, samples: Sequence[Sample], batch: int = 8) -> list[np.ndarray]:
    preds = []
    for i in range(0, len(samples), batch):
        images, _ = to_batch(samples[i:i + batch])
        probs = model.predict(images)
        preds.extend(binarize(p[0]) for p in probs)
    return preds


def evaluate(model: TauFlow, samples: Sequence[Sample], batch: int = 8) -> EvalSummary:
    preds = predict_masks(model, samples, batch)
    return evaluate_masks(preds, [s.mask[0] > 0.5 for s in samples], [s.id for s in samples])


def train(model: TauFlow, train_data: Sequence[Sample], val_data: Sequence[Sample] | None = None,
          config: ModelConfig | None = None, log_file: TextIO | None = None,
          max_epochs: int | None = None,
          on_step: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Fit ``model`` and keep the parameters with the best validation Dice.

    Validation falls back to the training set when ``val_data`` is None.
    Training stops after ``patience`` epochs without a strict improvement or
    after ``max_epochs``. On return the model holds the best parameters.
    """
    cfg = config or model.config
    tc = cfg.train
    val = list(val_data) if val_data is not None else list(train_data)
    epochs = max_epochs if max_epochs is not None else tc.max_epochs
    rng = np.random.default_rng(tc.seed)
    params = model.parameters()
    opt = AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)

    if log_file is not None:
        log_file.write("\t".join(LOG_COLUMNS) + "\n")

    result = TrainResult(best_dice=-1.0, best_epoch=0, epochs_run=0)
    stale = 0
    step = 0
    for epoch in range(1, epochs + 1):
        lr = lr_at(epoch - 1, tc.lr, tc.T0, tc.Tmult)
        opt.state.lr = lr
        order = rng.permutation(len(train_data))
        sums = dict.fromkeys(LossBreakdown.TERMS, 0.0)
        n_batches = 0
        pending: list[np.ndarray] | None = None
        pending_count = 0
        for start in range(0, len(order), tc.batch):
            chosen = [train_data[i] for i in order[start:start + tc.batch]]
            if tc.augment:
                chosen = [augment(s, rng) for s in chosen]
            images, masks = to_batch(chosen)
            with T.Tape() as tape:
                _, breakdown = compute_losses(model, images, masks)
            bad = breakdown.first_non_finite()
            if bad is not None:
                raise TrainingDiverged(f"non-finite loss term '{bad}' at epoch {epoch}, step {step}: "
                                       f"{breakdown.as_dict()}")
            grads = tape.backward(breakdown.total_tensor, wrt=params)
            g = [grads[p].data for p in params]
            if pending is None:
                pending = g
            else:
                pending = [a + b for a, b in zip(pending, g)]
            pending_count += 1
            if pending_count == tc.accum_steps:
                opt.step([a / pending_count for a in pending])
                pending, pending_count = None, 0
            for k in sums:
                sums[k] += getattr(breakdown, k)
            n_batches += 1
            result.step_losses.append(breakdown.total)
            if on_step is not None:
                on_step(step, breakdown)
            step += 1
        if pending is not None:
            opt.step([a / pending_count for a in pending])

        summary = evaluate(model, val, tc.batch)
        terms = {k: v / max(n_batches, 1) for k, v in sums.items()}
        rec = EpochRecord(epoch=epoch, train_loss=terms["total"], terms=terms, val_dice=summary.dice,
                          val_iou=summary.iou, val_hd95=summary.hd95, lr=lr)
        result.history.append(rec)
        result.epochs_run = epoch
        if log_file is not None:
            log_file.write(rec.to_line() + "\n")
            log_file.flush()
        log.info("epoch %d loss %.4f val dice %.4f", epoch, rec.train_loss, rec.val_dice)

        if summary.dice > result.best_dice:
            result.best_dice, result.best_epoch = summary.dice, epoch
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= tc.patience:
                break

    if result.best_state:
        model.load_state_dict(result.best_state)
    return result
