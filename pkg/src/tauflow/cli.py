"""Command-line entry point: ``tauflow <command> ...``.

Failures print one line ``error: <kind>: <message>`` to stderr and exit with a
nonzero status (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .accounting import AccountingError, cost_report
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .data import DataError, generate_synthetic, load_dataset, read_ppm, resize_chw, save_dataset, write_pgm
from .gradcheck import TOLERANCE, run_suite
from .metrics import MetricError
from .model import TauFlow
from .tensor import TensorError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print multi-line usage and exit
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tauflow", description="Dynamic-grouping liquid time-constant segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True)
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset directory with images/ and masks/")
    src.add_argument("--synth", type=int, metavar="N", help="train on N synthetic samples")
    t.add_argument("--val", help="validation dataset directory (defaults to the training set)")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, help="override max_epochs")
    t.add_argument("--log", help="metric log path (default: <out>.log.tsv)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)

    g = sub.add_parser("gradcheck", help="compare autodiff with finite differences")
    g.add_argument("--module", action="append", help="restrict to one module (repeatable)")
    g.add_argument("--eps", type=float, default=1e-4)

    c = sub.add_parser("cost", help="parameter and FLOPs report")
    c.add_argument("--config", required=True)
    c.add_argument("--groups", type=int)
    c.add_argument("--json", action="store_true", help="emit the machine-readable record")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=224)

    i = sub.add_parser("infer", help="segment one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    return p


def _cmd_train(args) -> int:
    from .train import train
    cfg = load_config(args.config)
    cfg.validate()
    size = cfg.input_size
    data = generate_synthetic(args.synth, cfg.train.seed, (size, size)) if args.synth is not None \
        else load_dataset(args.data, size)
    val = load_dataset(args.val, size) if args.val else None
    model = TauFlow(cfg)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.tsv")
    with open(log_path, "w") as fh:
        result = train(model, data, val, cfg, log_file=fh, max_epochs=args.epochs)
    save_checkpoint(args.out, model, cfg)
    print(f"best_dice\t{result.best_dice:.6f}\tbest_epoch\t{result.best_epoch}\tepochs\t{result.epochs_run}")
    print(f"checkpoint\t{args.out}\nlog\t{log_path}")
    return 0


def _cmd_eval(args) -> int:
    from .train import evaluate
    model, ckpt = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data, ckpt.config.input_size)
    summary = evaluate(model, samples, ckpt.config.train.batch)
    for sid, d, j, h in summary.per_sample:
        print(f"sample\t{sid}\tdice\t{d:.6f}\tiou\t{j:.6f}\thd95\t{h:.4f}")
    print(f"mean\tdice\t{summary.dice:.6f}\tiou\t{summary.iou:.6f}\thd95\t{summary.hd95:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    try:
        errors = run_suite(args.module, args.eps)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    failed = False
    for name, err in errors.items():
        ok = err <= TOLERANCE
        failed |= not ok
        print(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def _cmd_cost(args) -> int:
    cfg = load_config(args.config)
    cfg.validate()
    report = cost_report(cfg)
    if args.groups is not None and args.groups not in report.flops_by_groups:
        raise AccountingError(f"--groups {args.groups} outside 1..{cfg.max_groups}")
    if args.json:
        record = report.to_dict()
        if args.groups is not None:
            record["flops_dynamic"] = {str(args.groups): report.flops_by_groups[args.groups]}
        print(json.dumps(record, sort_keys=True))
    elif args.groups is not None:
        print(f"params_total\t{report.params_total}")
        print(f"flops\tG={args.groups}\t{report.flops_by_groups[args.groups]}")
    else:
        print(f"params_total\t{report.params_total}")
        print(report.table())
    return 0


def _cmd_synth(args) -> int:
    if args.n < 1:
        raise DataError(f"--n must be positive, got {args.n}")
    samples = generate_synthetic(args.n, args.seed, (args.size, args.size))
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_infer(args) -> int:
    model, ckpt = load_checkpoint(args.ckpt)
    size = ckpt.config.input_size
    img = read_ppm(args.image)
    h, w = img.shape[1:]
    x = resize_chw(img.astype(np.float32) / 255.0, size)[None]
    with T.no_grad():
        out = model(x)
        prob = T.sigmoid(out.seg_logits).data[0]
    if (h, w) != (size, size):
        prob = T.bilinear_resize(T.Tensor(prob[None]), h, w).data[0]
    write_pgm(args.out, prob[0] > 0.5)
    plan = out.plan
    masks = out.masks.data[0]
    share = masks.reshape(masks.shape[0], -1).mean(axis=1)
    print(f"image\t{args.image}\tcomplexity\t{float(plan.score.data[0]):.4f}\tactive_groups\t{plan.per_image[0]}")
    for g in range(plan.G):
        print(f"group\t{g}\tattention\t{float(out.attn_weights.data[0, g]):.4f}\tarea_share\t{share[g]:.4f}")
    print(f"mask\t{args.out}")
    return 0


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "gradcheck": _cmd_gradcheck, "cost": _cmd_cost,
            "synth": _cmd_synth, "infer": _cmd_infer}

_KINDS = ((UsageError, "usage", 2), (ConfigError, "config", 1), (CheckpointError, "checkpoint", 1),
          (DataError, "data", 1), (MetricError, "metric", 1), (AccountingError, "cost", 1),
          (TensorError, "tensor", 1), (FileNotFoundError, "file", 1), (OSError, "io", 1))


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except tuple(k for k, _, _ in _KINDS) as exc:
        kind, code = next((kind, code) for cls, kind, code in _KINDS if isinstance(exc, cls))
        msg = " ".join(str(exc).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
