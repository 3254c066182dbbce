"""Command-line entry points.

Subcommands cover the whole synthetic workflow: generate phantoms, train,
evaluate, run single-image or ensemble inference, run the ablation grid, and
render overlays. One --seed flag governs every source of randomness (default
0; wall-clock time is never used), so any invocation is reproducible.

Exit codes: 0 success, 2 validation error (bad flags, configs, schemas,
shapes), 3 runtime failure (diverged training, generation failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .errors import (
    CardioSegError,
    EmptyMaskError,
    GenerationError,
    TrainingDivergedError,
)
from .inference import ensemble_infer, predict
from .metadata import ABSENT
from .synthdata import AugmentParams, PhantomSpec, load_dataset, make_dataset, make_splits
from .training import (
    ARM_NAMES,
    arm_setup,
    desk_net_config,
    desk_train_config,
    evaluate_checkpoint,
    load_checkpoint,
    run_ablation_grid,
    run_training,
)
from .metrics import write_metric_csv
from .viz import overlay

RUNTIME_ERRORS = (TrainingDivergedError, GenerationError, EmptyMaskError)


def _load_config(path: str | None):
    """YAML config with optional net:, train:, augment: sections; desk-scale
    presets fill anything left unspecified."""
    raw = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
    net_over = raw.get("net", {})
    train_over = raw.get("train", {})
    for key in ("stage_channels",):
        if key in net_over and isinstance(net_over[key], list):
            net_over[key] = tuple(net_over[key])
    net = desk_net_config(**net_over)
    train = desk_train_config(**train_over)
    aug = None
    if raw.get("augment"):
        aug = AugmentParams(**raw["augment"])
    return net, train, aug


def _cmd_make_synth(args) -> int:
    spec = PhantomSpec(
        image_size=args.image_size,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    out = Path(args.out)
    if args.splits:
        counts = {}
        for part in args.splits.split(","):
            name, _, num = part.partition("=")
            if not num:
                raise argparse.ArgumentTypeError(
                    f"bad --splits entry {part!r}; expected name=count"
                )
            counts[name.strip()] = int(num)
        make_splits(out, counts, spec, base_seed=args.seed)
        for name, count in counts.items():
            print(f"{name}: {count} cases at {out / name}")
    else:
        make_dataset(out, args.num_cases, spec, base_seed=args.seed)
        print(f"{args.num_cases} cases at {out}")
    return 0


def _cmd_train(args) -> int:
    net, train_cfg, aug = _load_config(args.config)
    train_cfg = replace(train_cfg, seed=args.seed)
    samples, schema, _ = load_dataset(args.data_dir)
    net, schema = arm_setup(args.arm, net, schema)
    val = None
    if args.val_dir:
        val, _, _ = load_dataset(args.val_dir)
    result = run_training(
        samples, net, train_cfg,
        schema=schema if net.use_cmfi else None,
        val_samples=val, out_dir=args.out, augment_params=aug,
    )
    last = result.history[-1]
    print(
        f"arm={args.arm} epochs={train_cfg.epochs} "
        f"l_total={last['l_total']:.4f} best_epoch={result.best_epoch}"
    )
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    samples, schema, _ = load_dataset(args.data_dir)
    report = evaluate_checkpoint(args.checkpoint, samples, schema)
    for name in report.class_dice:
        hd = report.class_hd[name]
        hd_text = f"{hd:.2f} mm" if hd is not None else "n/a"
        print(f"{name}: dice {report.class_dice[name]:.2f}%  hd {hd_text}")
    print(f"mean foreground dice: {report.mean_fg_dice:.2f}%")
    if report.mean_super_dice is not None:
        print(f"super dice: {report.mean_super_dice:.2f}%")
    if report.hd_misses:
        print(f"hausdorff misses (empty masks): {report.hd_misses}")
    for name, acc in report.meta_accuracy.items():
        print(f"meta accuracy {name}: {acc:.3f}")
    for name, err in report.meta_l1.items():
        print(f"meta L1 {name}: {err:.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metric_csv(out / "metrics.csv", report.rows)
        print(f"rows: {out / 'metrics.csv'}")
    return 0


def _prepare_eval_batch(samples):
    from .training import _zscore

    arr = np.stack([_zscore(s.image) for s in samples])
    return torch.from_numpy(arr).unsqueeze(1)


def _cmd_infer(args) -> int:
    samples, schema, _ = load_dataset(args.data_dir)
    model, _ = load_checkpoint(args.checkpoint)
    if args.case:
        samples = [s for s in samples if s.case_id == args.case]
        if not samples:
            raise CardioSegError(f"case {args.case!r} not found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        images = _prepare_eval_batch([sample])
        if model.config.use_cmfi:
            record = sample.record.restricted_to(model.schema)
            pred = predict(model, images, records=[record])
        else:
            pred = predict(model, images)
        arrays = {"sub_mask": pred.sub_mask[0]}
        if pred.super_mask is not None:
            arrays["super_mask"] = pred.super_mask[0]
        np.savez_compressed(out / f"{sample.case_id}_pred.npz", **arrays)
        if args.png:
            overlay(
                sample.image, pred.sub_mask[0],
                pred.super_mask[0] if pred.super_mask is not None else None,
                out_path=out / f"{sample.case_id}_pred.png",
            )
    print(f"wrote predictions for {len(samples)} case(s) to {out}")
    return 0


def _cmd_ensemble_infer(args) -> int:
    samples, schema, _ = load_dataset(args.data_dir)
    model, _ = load_checkpoint(args.checkpoint)
    if args.case:
        samples = [s for s in samples if s.case_id == args.case]
        if not samples:
            raise CardioSegError(f"case {args.case!r} not found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        images = _prepare_eval_batch([sample])
        record = sample.record.replace(args.missing_entity, ABSENT)
        result = ensemble_infer(model, images, record, args.missing_entity)
        arrays = {"sub_mask": result.sub_mask[0]}
        if result.super_mask is not None:
            arrays["super_mask"] = result.super_mask[0]
        np.savez_compressed(out / f"{sample.case_id}_ensemble.npz", **arrays)
        if args.png:
            overlay(
                sample.image, result.sub_mask[0],
                result.super_mask[0] if result.super_mask is not None else None,
                out_path=out / f"{sample.case_id}_ensemble.png",
            )
    print(
        f"ensembled over {args.missing_entity} for {len(samples)} case(s) -> {out}"
    )
    return 0


def _cmd_ablate(args) -> int:
    net, train_cfg, aug = _load_config(args.config)
    train_samples, schema, _ = load_dataset(args.data_dir)
    eval_samples, _, _ = load_dataset(args.eval_dir)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    arms = tuple(args.arms.split(",")) if args.arms else ARM_NAMES
    results = run_ablation_grid(
        train_samples, eval_samples, net, train_cfg, schema,
        seeds=seeds, arms=arms, out_dir=args.out, augment_params=aug,
    )
    for arm, data in results["arms"].items():
        print(f"{arm:12s} mean fg dice {data['mean_fg_dice']:6.2f}  "
              f"params {data['param_count']}")
    if args.out:
        print(f"table: {Path(args.out) / 'ablation.csv'}")
        with open(Path(args.out) / "ablation.json", "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


def _cmd_overlay(args) -> int:
    samples, schema, _ = load_dataset(args.data_dir)
    matches = [s for s in samples if s.case_id == args.case]
    if not matches:
        raise CardioSegError(f"case {args.case!r} not found")
    sample = matches[0]
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        images = _prepare_eval_batch([sample])
        if model.config.use_cmfi:
            record = sample.record.restricted_to(model.schema)
            pred = predict(model, images, records=[record])
        else:
            pred = predict(model, images)
        sub = pred.sub_mask[0]
        sup = pred.super_mask[0] if pred.super_mask is not None else None
    else:
        sub = sample.sub_labels
        sup = sample.super_label
    overlay(sample.image, sub, sup, out_path=args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardioseg",
        description="Compositional cardiac segmentation on synthetic phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-cases", type=int, default=200)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.06)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--splits", default=None,
        help="comma list like train=200,val=32 (overrides --num-cases)",
    )
    p.set_defaults(func=_cmd_make_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--val-dir", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="YAML net/train/augment config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arm", choices=ARM_NAMES, default="full")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="predict masks for dataset cases")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--case", default=None)
    p.add_argument("--png", action="store_true", help="also write overlays")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser(
        "ensemble-infer",
        help="average predictions over all values of a missing entity",
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--missing-entity", required=True)
    p.add_argument("--case", default=None)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=_cmd_ensemble_infer)

    p = sub.add_parser("ablate", help="train and compare ablation arms")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--eval-dir", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--arms", default=None, help=f"subset of {','.join(ARM_NAMES)}")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("overlay", help="render contour overlay for one case")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="predict instead of ground truth")
    p.set_defaults(func=_cmd_overlay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except CardioSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
