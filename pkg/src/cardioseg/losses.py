"""Training objective: Dice losses for both decoders, metadata loss, and
their weighted combination.

The composite objective is

    l_total = alpha * (l_sub + l_super) + (1 - alpha) * l_meta

with alpha = 0.7 by default. The metadata loss sums a cross-entropy term per
categorical entity and an L1 term (in encoded space) per continuous entity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import torch
import torch.nn.functional as F

from .errors import ConfigError, DecodingError, MissingMetadataError, ShapeError
from .metadata import ABSENT, MetadataRecord, MetadataSchema

Scalar = Union[float, torch.Tensor]

DEFAULT_ALPHA = 0.7
DICE_SMOOTH = 1e-6


@dataclass
class LossBreakdown:
    """All components of the composite objective for one step."""

    l_super: Scalar
    l_sub: Scalar
    l_seg: Scalar
    l_meta: Scalar
    l_total: Scalar
    alpha: float

    def detached(self) -> "LossBreakdown":
        """Plain-float copy for logging."""

        def scalar(v: Scalar) -> float:
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBreakdown(
            l_super=scalar(self.l_super),
            l_sub=scalar(self.l_sub),
            l_seg=scalar(self.l_seg),
            l_meta=scalar(self.l_meta),
            l_total=scalar(self.l_total),
            alpha=self.alpha,
        )


def dice_loss(
    pred_probs: torch.Tensor,
    target_onehot: torch.Tensor,
    smooth: float = DICE_SMOOTH,
) -> torch.Tensor:
    """Soft Dice loss, averaged over batch and channel.

    pred_probs and target_onehot are (B, K, H, W); predictions must lie in
    [0, 1] and targets must be binary. Returns 1 - mean Dice, a scalar in
    [0, 1].
    """
    if pred_probs.shape != target_onehot.shape:
        raise ShapeError(
            f"pred {tuple(pred_probs.shape)} vs target {tuple(target_onehot.shape)}"
        )
    if pred_probs.dim() != 4:
        raise ShapeError(f"expected (B, K, H, W), got {tuple(pred_probs.shape)}")
    if pred_probs.min() < 0 or pred_probs.max() > 1:
        raise ValueError("pred_probs must lie in [0, 1]")
    if not torch.all((target_onehot == 0) | (target_onehot == 1)):
        raise ValueError("target_onehot must be binary")
    target = target_onehot.to(pred_probs.dtype)
    inter = (pred_probs * target).sum(dim=(2, 3))
    sums = pred_probs.sum(dim=(2, 3)) + target.sum(dim=(2, 3))
    dice = (2.0 * inter + smooth) / (sums + smooth)
    return 1.0 - dice.mean()


def meta_loss(
    entity_outputs: Mapping[str, torch.Tensor],
    records: Sequence[MetadataRecord],
    schema: MetadataSchema,
) -> torch.Tensor:
    """Metadata prediction loss, summed over schema entities.

    Categorical entities contribute a cross-entropy term (logits vs the
    category index); continuous entities contribute an L1 term in encoded
    space. Each term is a batch mean; terms are summed across entities.
    Records must be complete for the schema.
    """
    missing_heads = set(e.name for e in schema.entities) - set(entity_outputs)
    if missing_heads:
        raise DecodingError(f"no head outputs for entities {sorted(missing_heads)}")
    total = None
    for entity in schema.entities:
        out = entity_outputs[entity.name]
        if out.dim() != 2 or out.shape[0] != len(records):
            raise ShapeError(
                f"entity {entity.name!r}: expected ({len(records)}, "
                f"{entity.num_outputs}), got {tuple(out.shape)}"
            )
        if out.shape[1] != entity.num_outputs:
            raise DecodingError(
                f"entity {entity.name!r}: head width {out.shape[1]} != "
                f"{entity.num_outputs}"
            )
        for rec in records:
            if entity.name not in rec.values or rec.values[entity.name] is ABSENT:
                raise MissingMetadataError(
                    f"record lacks entity {entity.name!r}; meta loss needs "
                    f"complete records"
                )
        if entity.kind == "categorical":
            idx = torch.tensor(
                [entity.categories.index(rec.values[entity.name]) for rec in records],
                dtype=torch.long,
                device=out.device,
            )
            term = F.cross_entropy(out, idx)
        else:
            target = torch.tensor(
                [entity.encode(rec.values[entity.name]) for rec in records],
                dtype=out.dtype,
                device=out.device,
            )
            term = (out.squeeze(1) - target).abs().mean()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float32)
    return total


def _check_component(name: str, value: Scalar) -> None:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise ConfigError(f"{name} is not finite: {v!r}")
    if v < 0:
        raise ConfigError(f"{name} must be nonnegative, got {v!r}")


def total_loss(
    l_sub: Scalar,
    l_super: Scalar,
    l_meta: Scalar,
    alpha: float = DEFAULT_ALPHA,
) -> LossBreakdown:
    """Combine the loss components; works on floats and on torch scalars.

    l_seg = l_sub + l_super and l_total = alpha*l_seg + (1-alpha)*l_meta hold
    exactly (same arithmetic for the returned fields).
    """
    if not (0.0 < alpha < 1.0):
        raise ConfigError(f"alpha must be in (0, 1), got {alpha!r}")
    for name, value in (("l_sub", l_sub), ("l_super", l_super), ("l_meta", l_meta)):
        _check_component(name, value)
    l_seg = l_sub + l_super
    l_total = alpha * l_seg + (1.0 - alpha) * l_meta
    return LossBreakdown(
        l_super=l_super,
        l_sub=l_sub,
        l_seg=l_seg,
        l_meta=l_meta,
        l_total=l_total,
        alpha=alpha,
    )
