"""Training loop, evaluation, checkpointing, fold management, and the
ablation grid.

The optimizer is Adam (fixed); the objective is the composite loss with
alpha = 0.7. Runs are deterministic given the config seed: model init,
shuffling, augmentation, and dropout all derive from it. A non-finite loss
aborts with a diagnostic snapshot instead of training onward through NaNs.
"""

from __future__ import annotations

import copy
import csv
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import (
    CheckpointMismatchError,
    ConfigError,
    TrainingDivergedError,
)
from .inference import predict
from .losses import dice_loss, meta_loss, total_loss
from .metadata import MetadataSchema, encode_metadata, schema_from_text
from .metrics import MetricRow, dice_score, hausdorff_mm, write_metric_csv
from .errors import EmptyMaskError
from .network import CompositionalSegNet, NetConfig
from .synthdata import CLASS_NAMES, AugmentParams, Sample, augment

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 500
    batch_size: int = 16
    alpha: float = 0.7
    seed: int = 0
    folds: int = 5
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.optimizer != "adam":
            raise ConfigError("only the adam optimizer is supported")


def desk_net_config(**overrides) -> NetConfig:
    """Architecture shrunk to desk scale: same shape, fewer channels."""
    base = dict(stage_channels=(8, 16, 32, 64, 80))
    base.update(overrides)
    return NetConfig(**base)


def desk_train_config(**overrides) -> TrainConfig:
    """Desk-scale schedule: 64x64 phantoms, 30 epochs, batch 8. The lr is
    raised to 1e-3 so the shrunk model converges within those 30 epochs."""
    base = dict(lr=1e-3, epochs=30, batch_size=8)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainResult:
    model: CompositionalSegNet
    history: list[dict]
    best_epoch: int
    checkpoint_path: Optional[Path]
    net_config: NetConfig
    train_config: TrainConfig


@dataclass
class EvalReport:
    rows: list[MetricRow]
    num_cases: int
    hd_misses: int
    class_dice: dict[str, float]
    class_hd: dict[str, Optional[float]]
    mean_fg_dice: float
    mean_super_dice: Optional[float]
    meta_accuracy: dict[str, float]
    meta_l1: dict[str, float]


def _zscore(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    std = arr.std()
    if std < 1e-8:
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - arr.mean()) / std).astype(np.float32)


def _assemble_batch(
    samples: Sequence[Sample],
    indices: Sequence[int],
    num_classes: int,
    augment_params: Optional[AugmentParams],
    rng: Optional[np.random.Generator],
):
    images = []
    labels = []
    for i in indices:
        s = samples[i]
        if augment_params is not None:
            img, lab = augment(s.image, s.sub_labels, augment_params, rng)
        else:
            img, lab = s.image, s.sub_labels
        images.append(_zscore(img))
        labels.append(lab)
    image_t = torch.from_numpy(np.stack(images)).unsqueeze(1)
    lab_arr = np.stack(labels).astype(np.int64)
    onehot = np.eye(num_classes, dtype=np.float32)[lab_arr]
    sub_t = torch.from_numpy(onehot).permute(0, 3, 1, 2).contiguous()
    super_t = torch.from_numpy((lab_arr > 0).astype(np.float32)).unsqueeze(1)
    return image_t, sub_t, super_t


def _prepare_metadata(
    samples: Sequence[Sample], schema: MetadataSchema
) -> tuple[list, np.ndarray]:
    restricted = [s.record.restricted_to(schema) for s in samples]
    encoded = np.stack([encode_metadata(r, schema) for r in restricted]).astype(
        np.float32
    )
    return restricted, encoded


def run_training(
    train_samples: Sequence[Sample],
    net_config: NetConfig,
    train_config: TrainConfig,
    schema: Optional[MetadataSchema] = None,
    val_samples: Optional[Sequence[Sample]] = None,
    out_dir: Optional[str | Path] = None,
    augment_params: Optional[AugmentParams] = None,
) -> TrainResult:
    """Train a model from scratch. Returns the model at its best epoch
    (validation mean foreground Dice when a validation set is given, else
    the final epoch) plus the per-epoch loss log."""
    if not train_samples:
        raise ConfigError("empty training set")
    if net_config.use_cmfi and schema is None:
        raise ConfigError("metadata fusion enabled: a schema is required")

    torch.manual_seed(train_config.seed)
    data_rng = np.random.default_rng(train_config.seed)
    dropout_gen = torch.Generator().manual_seed(train_config.seed + 1)

    model = CompositionalSegNet(net_config, schema if net_config.use_cmfi else None)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.lr)

    records = encoded = None
    if net_config.use_cmfi:
        records, encoded = _prepare_metadata(train_samples, schema)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    best_score = -math.inf
    best_state = None
    best_epoch = -1
    n = len(train_samples)

    for epoch in range(train_config.epochs):
        model.train()
        order = data_rng.permutation(n)
        sums = {"l_super": 0.0, "l_sub": 0.0, "l_seg": 0.0, "l_meta": 0.0, "l_total": 0.0}
        steps = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            image_t, sub_t, super_t = _assemble_batch(
                train_samples, idx, net_config.num_sub_classes, augment_params, data_rng
            )
            enc_t = None
            batch_records = None
            if net_config.use_cmfi:
                enc_t = torch.from_numpy(encoded[idx])
                batch_records = [records[i] for i in idx]

            out = model(image_t, encoded_meta=enc_t, generator=dropout_gen)
            sub_probs = torch.softmax(out.sub_logits, dim=1)
            l_sub = dice_loss(sub_probs[:, 1:], sub_t[:, 1:])
            if out.super_logits is not None:
                l_super = dice_loss(torch.sigmoid(out.super_logits), super_t)
            else:
                l_super = torch.zeros((), dtype=image_t.dtype)
            if out.entity_outputs is not None:
                l_meta = meta_loss(out.entity_outputs, batch_records, schema)
            else:
                l_meta = torch.zeros((), dtype=image_t.dtype)

            components = {
                "l_sub": float(l_sub.detach()),
                "l_super": float(l_super.detach()),
                "l_meta": float(l_meta.detach()),
            }
            if not all(math.isfinite(v) for v in components.values()):
                snapshot = {"epoch": epoch, "step": steps, **components}
                if out_dir is not None:
                    save_checkpoint(
                        out_dir / "diverged.pt", model, net_config, train_config,
                        extra={"diverged": snapshot},
                    )
                raise TrainingDivergedError(f"non-finite loss: {snapshot}")
            breakdown = total_loss(l_sub, l_super, l_meta, alpha=train_config.alpha)

            optimizer.zero_grad()
            breakdown.l_total.backward()
            optimizer.step()

            logged = breakdown.detached()
            for key in sums:
                sums[key] += getattr(logged, key)
            steps += 1

        row = {"epoch": epoch, "alpha": train_config.alpha}
        row.update({key: value / steps for key, value in sums.items()})
        if val_samples:
            report = evaluate(model, val_samples, schema=schema)
            row["val_fg_dice"] = report.mean_fg_dice
            if report.mean_fg_dice > best_score:
                best_score = report.mean_fg_dice
                best_state = copy.deepcopy(model.state_dict())
                best_epoch = epoch
        history.append(row)

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = train_config.epochs - 1

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "checkpoint.pt"
        save_checkpoint(
            checkpoint_path, model, net_config, train_config,
            extra={"best_epoch": best_epoch},
        )
        _write_history_csv(out_dir / "history.csv", history)

    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        checkpoint_path=checkpoint_path,
        net_config=net_config,
        train_config=train_config,
    )


def _write_history_csv(path: Path, history: list[dict]) -> None:
    if not history:
        return
    keys = ["epoch", "l_super", "l_sub", "l_seg", "l_meta", "l_total", "alpha"]
    if any("val_fg_dice" in row for row in history):
        keys.append("val_fg_dice")
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(keys)
        for row in history:
            writer.writerow([row.get(k, "") for k in keys])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _class_names(num_classes: int) -> list[str]:
    if num_classes == len(CLASS_NAMES):
        return list(CLASS_NAMES)
    return [f"class_{k}" for k in range(num_classes)]


@torch.no_grad()
def evaluate(
    model: CompositionalSegNet,
    samples: Sequence[Sample],
    schema: Optional[MetadataSchema] = None,
    batch_size: int = 8,
) -> EvalReport:
    """Deterministic evaluation: per-case, per-foreground-class Dice (%) and
    Hausdorff (mm). Cases whose prediction or target mask is empty get no
    distance; they are tallied as misses rather than assigned a penalty."""
    if not samples:
        raise ConfigError("empty evaluation set")
    if model.config.use_cmfi and schema is None:
        schema = model.schema
    model.eval()

    records = encoded = None
    if model.config.use_cmfi:
        records, encoded = _prepare_metadata(samples, schema)

    names = _class_names(model.config.num_sub_classes)
    rows: list[MetricRow] = []
    misses = 0
    super_dices: list[float] = []
    meta_hits: dict[str, int] = {}
    meta_abs: dict[str, float] = {}

    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        image_t, _, _ = _assemble_batch(
            samples, range(start, start + len(batch)), model.config.num_sub_classes,
            None, None,
        )
        enc_t = torch.from_numpy(encoded[start : start + len(batch)]) if encoded is not None else None
        pred = predict(model, image_t, encoded_meta=enc_t)
        sub_masks = pred.sub_mask
        super_masks = pred.super_mask

        for j, sample in enumerate(batch):
            for k in range(1, model.config.num_sub_classes):
                pred_mask = sub_masks[j] == k
                target_mask = sample.sub_labels == k
                dice = dice_score(pred_mask, target_mask)
                try:
                    hd = hausdorff_mm(pred_mask, target_mask, sample.spacing_mm)
                except EmptyMaskError:
                    hd = None
                    misses += 1
                rows.append(MetricRow(sample.case_id, names[k], dice, hd))
            if super_masks is not None:
                super_dices.append(
                    dice_score(super_masks[j], sample.super_label)
                )
            if pred.entity_outputs is not None:
                for entity in schema.entities:
                    out_row = pred.entity_outputs[entity.name][j].cpu().numpy()
                    truth = records[start + j].values[entity.name]
                    if entity.kind == "categorical":
                        hit = entity.categories[int(np.argmax(out_row))] == truth
                        meta_hits[entity.name] = meta_hits.get(entity.name, 0) + int(hit)
                    else:
                        err = abs(float(out_row[0]) - entity.encode(truth))
                        meta_abs[entity.name] = meta_abs.get(entity.name, 0.0) + err

    num_cases = len(samples)
    class_dice: dict[str, float] = {}
    class_hd: dict[str, Optional[float]] = {}
    for k in range(1, model.config.num_sub_classes):
        name = names[k]
        dices = [r.dice_pct for r in rows if r.class_name == name]
        hds = [r.hd_mm for r in rows if r.class_name == name and r.hd_mm is not None]
        class_dice[name] = float(np.mean(dices))
        class_hd[name] = float(np.mean(hds)) if hds else None
    mean_fg_dice = float(np.mean([r.dice_pct for r in rows]))

    return EvalReport(
        rows=rows,
        num_cases=num_cases,
        hd_misses=misses,
        class_dice=class_dice,
        class_hd=class_hd,
        mean_fg_dice=mean_fg_dice,
        mean_super_dice=float(np.mean(super_dices)) if super_dices else None,
        meta_accuracy={k: v / num_cases for k, v in meta_hits.items()},
        meta_l1={k: v / num_cases for k, v in meta_abs.items()},
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: CompositionalSegNet,
    net_config: NetConfig,
    train_config: Optional[TrainConfig] = None,
    extra: Optional[dict] = None,
) -> None:
    """Single-file checkpoint, written atomically (temp file + rename)."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "net_config": asdict(net_config),
        "train_config": asdict(train_config) if train_config is not None else None,
        "schema_text": model.schema.to_text() if model.schema is not None else None,
        "schema_fingerprint": (
            model.schema.fingerprint() if model.schema is not None else None
        ),
        "model_state": model.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[CompositionalSegNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            f"checkpoint version {version!r} != supported {CHECKPOINT_VERSION}"
        )
    net_config = NetConfig(**payload["net_config"])
    schema = (
        schema_from_text(payload["schema_text"])
        if payload.get("schema_text")
        else None
    )
    model = CompositionalSegNet(net_config, schema)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


def evaluate_checkpoint(
    path: str | Path, samples: Sequence[Sample], schema: MetadataSchema
) -> EvalReport:
    """Load and evaluate, refusing if the checkpoint was trained against a
    different metadata schema than the dataset's."""
    model, payload = load_checkpoint(path)
    stored = payload.get("schema_fingerprint")
    if stored is not None and stored != schema.fingerprint():
        raise CheckpointMismatchError(
            "checkpoint schema fingerprint does not match the dataset schema"
        )
    return evaluate(model, samples, schema=schema if model.config.use_cmfi else None)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------

def make_folds(
    case_ids: Sequence[str], folds: int, seed: int
) -> list[tuple[list[str], list[str]]]:
    """Shuffled k-fold partition: returns (train_ids, val_ids) per fold.
    Validation chunks are disjoint and cover every case exactly once."""
    if folds < 2:
        raise ConfigError(f"folds must be >= 2, got {folds}")
    if folds > len(case_ids):
        raise ConfigError(f"{folds} folds for {len(case_ids)} cases")
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate case ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, folds)
    result = []
    for f in range(folds):
        val = [ids[i] for i in chunks[f]]
        train = [ids[i] for g, chunk in enumerate(chunks) if g != f for i in chunk]
        result.append((train, val))
    return result


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ARM_NAMES = ("full", "no-cmfi", "no-super", "no-disease")


def arm_setup(
    arm: str, net_config: NetConfig, schema: MetadataSchema
) -> tuple[NetConfig, Optional[MetadataSchema]]:
    if arm == "full":
        return replace(net_config, use_super_decoder=True, use_cmfi=True), schema
    if arm == "no-cmfi":
        return replace(net_config, use_super_decoder=True, use_cmfi=False), None
    if arm == "no-super":
        return replace(net_config, use_super_decoder=False, use_cmfi=False), None
    if arm == "no-disease":
        return (
            replace(net_config, use_super_decoder=True, use_cmfi=True),
            schema.without("disease"),
        )
    raise ConfigError(f"unknown ablation arm {arm!r}; choose from {ARM_NAMES}")


def run_ablation_grid(
    train_samples: Sequence[Sample],
    eval_samples: Sequence[Sample],
    net_config: NetConfig,
    train_config: TrainConfig,
    schema: MetadataSchema,
    seeds: Sequence[int] = (0, 1, 2),
    arms: Sequence[str] = ARM_NAMES,
    out_dir: Optional[str | Path] = None,
    augment_params: Optional[AugmentParams] = None,
) -> dict:
    """Train every arm with the same seeds and data, evaluate on the same
    held-out set, and aggregate per-arm means. Numbers are desk-scale
    synthetic results, not clinical benchmarks."""
    results: dict = {"seeds": list(seeds), "arms": {}}
    for arm in arms:
        arm_net, arm_schema = arm_setup(arm, net_config, schema)
        per_seed = []
        for seed in seeds:
            cfg = replace(train_config, seed=seed)
            outcome = run_training(
                train_samples, arm_net, cfg, schema=arm_schema,
                augment_params=augment_params,
            )
            report = evaluate(
                outcome.model, eval_samples,
                schema=arm_schema if arm_net.use_cmfi else None,
            )
            per_seed.append(
                {
                    "seed": seed,
                    "mean_fg_dice": report.mean_fg_dice,
                    "mean_super_dice": report.mean_super_dice,
                    "class_dice": report.class_dice,
                    "class_hd": report.class_hd,
                    "hd_misses": report.hd_misses,
                }
            )
        mean_fg = float(np.mean([r["mean_fg_dice"] for r in per_seed]))
        class_names = per_seed[0]["class_dice"].keys()
        results["arms"][arm] = {
            "per_seed": per_seed,
            "mean_fg_dice": mean_fg,
            "class_dice": {
                name: float(np.mean([r["class_dice"][name] for r in per_seed]))
                for name in class_names
            },
            "class_hd": {
                name: (
                    float(np.mean(vals)) if (vals := [
                        r["class_hd"][name]
                        for r in per_seed
                        if r["class_hd"][name] is not None
                    ]) else None
                )
                for name in class_names
            },
            "param_count": CompositionalSegNet(
                arm_net, arm_schema if arm_net.use_cmfi else None
            ).parameter_count(),
        }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_ablation_csv(out_dir / "ablation.csv", results)
    return results


def _write_ablation_csv(path: Path, results: dict) -> None:
    arms = results["arms"]
    first = next(iter(arms.values()))
    class_names = list(first["class_dice"].keys())
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write("# desk-scale synthetic benchmark; not clinical results\n")
        writer = csv.writer(handle)
        writer.writerow(
            ["arm", "params", *[f"dice_{c}" for c in class_names],
             *[f"hd_{c}" for c in class_names], "mean_fg_dice"]
        )
        for arm, data in arms.items():
            writer.writerow(
                [
                    arm,
                    data["param_count"],
                    *[f"{data['class_dice'][c]:.2f}" for c in class_names],
                    *[
                        "" if data["class_hd"][c] is None else f"{data['class_hd'][c]:.2f}"
                        for c in class_names
                    ],
                    f"{data['mean_fg_dice']:.2f}",
                ]
            )
