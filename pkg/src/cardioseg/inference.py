"""Inference helpers: probability maps, hard masks, and ensemble inference
over the values of a missing categorical metadata entity.

When a record arrives with exactly one categorical entity absent, the model
is run once per possible value of that entity and the probability maps are
averaged arithmetically. Cost is therefore linear in the number of
categories. Missing continuous entities are not supported: there is no
finite value set to enumerate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, MissingMetadataError
from .metadata import ABSENT, MetadataRecord
from .network import CompositionalSegNet, SegmentationOutput


@dataclass
class Prediction:
    """Probability maps (and hard masks) for one forward pass."""

    sub_probs: torch.Tensor               # (B, K, H, W), softmax
    super_probs: Optional[torch.Tensor]   # (B, 1, H, W), sigmoid, or None
    entity_outputs: Optional[dict[str, torch.Tensor]]

    @property
    def sub_mask(self) -> np.ndarray:
        return self.sub_probs.argmax(dim=1).cpu().numpy().astype(np.uint8)

    @property
    def super_mask(self) -> Optional[np.ndarray]:
        if self.super_probs is None:
            return None
        return (self.super_probs[:, 0] > 0.5).cpu().numpy()


@torch.no_grad()
def predict(
    model: CompositionalSegNet,
    images: torch.Tensor,
    records: Optional[Sequence[MetadataRecord]] = None,
    encoded_meta: Optional[torch.Tensor] = None,
) -> Prediction:
    was_training = model.training
    model.eval()
    try:
        out: SegmentationOutput = model(images, records=records, encoded_meta=encoded_meta)
    finally:
        if was_training:
            model.train()
    return Prediction(
        sub_probs=torch.softmax(out.sub_logits, dim=1),
        super_probs=None if out.super_logits is None else torch.sigmoid(out.super_logits),
        entity_outputs=out.entity_outputs,
    )


@dataclass
class EnsembleResult:
    sub_probs: torch.Tensor
    super_probs: Optional[torch.Tensor]
    per_value: dict[str, Prediction]
    entity: str

    @property
    def sub_mask(self) -> np.ndarray:
        return self.sub_probs.argmax(dim=1).cpu().numpy().astype(np.uint8)

    @property
    def super_mask(self) -> Optional[np.ndarray]:
        if self.super_probs is None:
            return None
        return (self.super_probs[:, 0] > 0.5).cpu().numpy()


def ensemble_infer(
    model: CompositionalSegNet,
    images: torch.Tensor,
    record: MetadataRecord,
    missing_entity: str,
) -> EnsembleResult:
    """Average predictions over every value of one absent categorical entity.

    The record must be complete except for exactly that entity.
    """
    if not model.config.use_cmfi or model.schema is None:
        raise ConfigError("ensemble inference needs a model with metadata fusion")
    schema = model.schema
    entity = schema.entity(missing_entity)
    if entity.kind != "categorical":
        raise ConfigError(
            f"entity {missing_entity!r} is continuous; ensemble inference only "
            f"enumerates categorical values"
        )
    record = record.restricted_to(schema)
    absent = record.absent_entities(schema)
    if missing_entity not in absent:
        raise ConfigError(
            f"entity {missing_entity!r} is present in the record; nothing to marginalize"
        )
    extra = [name for name in absent if name != missing_entity]
    if extra:
        raise MissingMetadataError(
            f"record is missing more than one entity: {sorted(absent)}"
        )

    n = images.shape[0]
    per_value: dict[str, Prediction] = {}
    sub_sum = None
    super_sum = None
    for label in entity.categories:
        filled = record.replace(missing_entity, label)
        pred = predict(model, images, records=[filled] * n)
        per_value[label] = pred
        sub_sum = pred.sub_probs if sub_sum is None else sub_sum + pred.sub_probs
        if pred.super_probs is not None:
            super_sum = (
                pred.super_probs if super_sum is None else super_sum + pred.super_probs
            )
    count = len(entity.categories)
    return EnsembleResult(
        sub_probs=sub_sum / count,
        super_probs=None if super_sum is None else super_sum / count,
        per_value=per_value,
        entity=missing_entity,
    )
