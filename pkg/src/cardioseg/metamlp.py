"""Metadata branch: a stack of linear blocks mirroring the encoder stage
widths. Each stage's activations are exposed for cross-modal fusion, and the
deepest stage feeds a 128-d representation with one small prediction head
per metadata entity (classification for categorical, regression for
continuous)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .metadata import MetadataSchema

DEFAULT_STAGE_WIDTHS = (32, 64, 128, 256, 320)


@dataclass
class MetaMlpConfig:
    stage_widths: Sequence[int] = DEFAULT_STAGE_WIDTHS
    head_dim: int = 128
    dropout_rate: float = 0.1
    negative_slope: float = 0.01

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ConfigError(f"stage_widths must be positive, got {self.stage_widths}")
        if self.head_dim < 1:
            raise ConfigError(f"head_dim must be positive, got {self.head_dim}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class MetadataFeatureSet:
    """Per-stage metadata features plus the prediction-head outputs."""

    stage_features: list[torch.Tensor]          # one (B, C_s) per stage
    head_input: torch.Tensor                    # (B, head_dim)
    entity_outputs: dict[str, torch.Tensor]     # (B, #categories) or (B, 1)


def seeded_dropout(
    x: torch.Tensor,
    p: float,
    training: bool,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Inverted dropout that can draw its mask from an explicit generator,
    which the builtin functional form does not support."""
    if not training or p == 0.0:
        return x
    keep = 1.0 - p
    mask = torch.rand(x.shape, generator=generator, device=x.device, dtype=x.dtype) < keep
    return x * mask.to(x.dtype) / keep


class MetadataMLP(nn.Module):
    """Linear -> BatchNorm1d -> LeakyReLU -> Dropout per stage, then a
    head_dim projection off the deepest stage and per-entity heads."""

    def __init__(self, config: MetaMlpConfig, schema: MetadataSchema):
        super().__init__()
        self.config = config
        self.schema = schema
        self.num_entities = len(schema)
        if self.num_entities == 0:
            raise ConfigError("schema has no entities; nothing to embed")

        self.linears = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_width = self.num_entities
        for width in config.stage_widths:
            self.linears.append(nn.Linear(in_width, width))
            self.norms.append(nn.BatchNorm1d(width))
            in_width = width
        self.head_proj = nn.Linear(in_width, config.head_dim)
        self.entity_heads = nn.ModuleDict(
            {e.name: nn.Linear(config.head_dim, e.num_outputs) for e in schema.entities}
        )
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                nn.init.uniform_(module.weight, -bound, bound)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.BatchNorm1d):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def _normalize(self, x: torch.Tensor, bn: nn.BatchNorm1d) -> torch.Tensor:
        if self.training and x.shape[0] == 1:
            # batch statistics are undefined for a single sample; fall back
            # to the affine part only
            warnings.warn(
                "metadata MLP: batch size 1 in train mode, batch norm reduced "
                "to its affine transform",
                RuntimeWarning,
                stacklevel=3,
            )
            return x * bn.weight + bn.bias
        return bn(x)

    def forward(
        self,
        encoded: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> MetadataFeatureSet:
        if encoded.dim() != 2:
            raise ShapeError(f"encoded metadata must be (B, E), got {tuple(encoded.shape)}")
        if encoded.shape[0] < 1:
            raise ShapeError("empty batch")
        if encoded.shape[1] != self.num_entities:
            raise ShapeError(
                f"expected {self.num_entities} encoded entities, got {encoded.shape[1]}"
            )
        x = encoded
        stage_features: list[torch.Tensor] = []
        for linear, norm in zip(self.linears, self.norms):
            x = linear(x)
            x = self._normalize(x, norm)
            x = F.leaky_relu(x, negative_slope=self.config.negative_slope)
            x = seeded_dropout(x, self.config.dropout_rate, self.training, generator)
            stage_features.append(x)
        head_input = self.head_proj(x)
        entity_outputs = {
            name: head(head_input) for name, head in self.entity_heads.items()
        }
        return MetadataFeatureSet(
            stage_features=stage_features,
            head_input=head_input,
            entity_outputs=entity_outputs,
        )
