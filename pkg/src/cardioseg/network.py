"""Compositional segmentation network.

A shared strided-convolution encoder feeds two decoders: a super-segmentation
decoder that localizes the whole heart as one binary map (with encoder skip
connections), and a sub-segmentation decoder that splits the region into
classes. The sub-decoder has no skip connections; instead it reuses the
super-decoder's per-stage features, merged by element-wise addition onto its
own upsampled features. Metadata enters twice: per-stage cross-modal fusion
blocks on the encoder path, and auxiliary per-entity prediction heads.

Ablation switches: use_cmfi removes the whole metadata branch (fusion blocks,
metadata MLP, heads); use_super_decoder removes the super decoder, leaving a
plain encoder + skip-free multiclass decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cmfi import CrossModalFeatureIntegration
from .errors import ConfigError, MissingMetadataError, ShapeError
from .metadata import MetadataRecord, MetadataSchema, encode_metadata
from .metamlp import MetadataFeatureSet, MetaMlpConfig, MetadataMLP

DEFAULT_STAGE_CHANNELS = (32, 64, 128, 256, 320)


@dataclass
class NetConfig:
    stage_channels: Sequence[int] = DEFAULT_STAGE_CHANNELS
    in_channels: int = 1
    num_sub_classes: int = 4
    negative_slope: float = 0.01
    use_super_decoder: bool = True
    use_cmfi: bool = True
    # fusion on decoder stages is reserved but not implemented; the encoder
    # placement is the one used throughout
    cmfi_on_decoder: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 2:
            raise ConfigError("need at least two stages")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be positive: {self.stage_channels}")
        if any(
            b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])
        ):
            raise ConfigError(
                f"stage_channels must be strictly increasing: {self.stage_channels}"
            )
        if self.num_sub_classes < 2:
            raise ConfigError(f"num_sub_classes must be >= 2, got {self.num_sub_classes}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.cmfi_on_decoder:
            raise ConfigError("decoder-side fusion is reserved and not implemented")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.num_stages - 1)


@dataclass
class SegmentationOutput:
    super_logits: Optional[torch.Tensor]          # (B, 1, H, W) or None
    sub_logits: torch.Tensor                      # (B, K, H, W)
    entity_outputs: Optional[dict[str, torch.Tensor]]
    meta_features: Optional[MetadataFeatureSet] = None


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by batch norm and LeakyReLU."""

    def __init__(self, in_ch: int, out_ch: int, negative_slope: float):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.negative_slope = negative_slope

    def forward(self, x):
        x = F.leaky_relu(self.bn1(self.conv1(x)), self.negative_slope)
        x = F.leaky_relu(self.bn2(self.conv2(x)), self.negative_slope)
        return x


class SegEncoder(nn.Module):
    """Stage blocks with strided 3x3 convolutions between them; channels
    follow stage_channels while resolution halves at each step down."""

    def __init__(self, config: NetConfig):
        super().__init__()
        chans = config.stage_channels
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        in_ch = config.in_channels
        for s, out_ch in enumerate(chans):
            self.stages.append(ConvBlock(in_ch, out_ch, config.negative_slope))
            if s < len(chans) - 1:
                self.downs.append(nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1))
            in_ch = out_ch

    def forward(
        self,
        image: torch.Tensor,
        fusion_blocks: Optional[nn.ModuleList] = None,
        meta_feats: Optional[MetadataFeatureSet] = None,
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Returns (per-stage skip features, bottleneck). Fusion, when given,
        is applied to each stage output before it is recorded or pooled."""
        x = image
        skips: list[torch.Tensor] = []
        for s, stage in enumerate(self.stages):
            x = stage(x)
            if fusion_blocks is not None:
                x = fusion_blocks[s](x, meta_feats.stage_features[s])
            if s < len(self.stages) - 1:
                skips.append(x)
                x = self.downs[s](x)
        return skips, x


class SuperDecoder(nn.Module):
    """Binary localization decoder with encoder skips (concatenation)."""

    def __init__(self, config: NetConfig):
        super().__init__()
        chans = config.stage_channels
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for s in range(len(chans) - 1, 0, -1):
            self.ups.append(nn.ConvTranspose2d(chans[s], chans[s - 1], 2, stride=2))
            self.blocks.append(
                ConvBlock(2 * chans[s - 1], chans[s - 1], config.negative_slope)
            )
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(
        self, bottleneck: torch.Tensor, skips: list[torch.Tensor]
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        x = bottleneck
        stage_feats: list[torch.Tensor] = []
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(x)
            if x.shape[2:] != skip.shape[2:]:
                raise ShapeError(
                    f"skip mismatch: decoder {tuple(x.shape)} vs skip {tuple(skip.shape)}"
                )
            x = block(torch.cat([x, skip], dim=1))
            stage_feats.append(x)
        return self.head(x), stage_feats


class SubDecoder(nn.Module):
    """Multiclass decoder without skip connections. When super-decoder
    features are provided they are added onto the upsampled features at the
    matching resolution."""

    def __init__(self, config: NetConfig):
        super().__init__()
        chans = config.stage_channels
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for s in range(len(chans) - 1, 0, -1):
            self.ups.append(nn.ConvTranspose2d(chans[s], chans[s - 1], 2, stride=2))
            self.blocks.append(
                ConvBlock(chans[s - 1], chans[s - 1], config.negative_slope)
            )
        self.head = nn.Conv2d(chans[0], config.num_sub_classes, 1)

    def forward(
        self,
        bottleneck: torch.Tensor,
        super_feats: Optional[list[torch.Tensor]],
    ) -> torch.Tensor:
        x = bottleneck
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            x = up(x)
            if super_feats is not None:
                copied = super_feats[i]
                if copied.shape != x.shape:
                    raise ShapeError(
                        f"copied feature mismatch: {tuple(copied.shape)} vs "
                        f"{tuple(x.shape)}"
                    )
                x = x + copied
            x = block(x)
        return self.head(x)


class CompositionalSegNet(nn.Module):
    def __init__(self, config: NetConfig, schema: Optional[MetadataSchema] = None):
        super().__init__()
        self.config = config
        self.schema = schema
        if config.use_cmfi:
            if schema is None:
                raise ConfigError("metadata fusion requires a schema")
            self.meta_mlp = MetadataMLP(
                MetaMlpConfig(
                    stage_widths=config.stage_channels,
                    negative_slope=config.negative_slope,
                ),
                schema,
            )
            self.fusion = nn.ModuleList(
                CrossModalFeatureIntegration(c) for c in config.stage_channels
            )
        else:
            self.meta_mlp = None
            self.fusion = None
        self.encoder = SegEncoder(config)
        self.super_decoder = SuperDecoder(config) if config.use_super_decoder else None
        self.sub_decoder = SubDecoder(config)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                if isinstance(module, nn.ConvTranspose2d):
                    fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                else:
                    fan_in = (
                        module.in_channels
                        // module.groups
                        * module.kernel_size[0]
                        * module.kernel_size[1]
                    )
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(module.weight, -bound, bound)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        if self.meta_mlp is not None:
            self.meta_mlp.reset_parameters()
        if self.fusion is not None:
            for block in self.fusion:
                block.reset_parameters()

    def _validate_image(self, image: torch.Tensor):
        if image.dim() != 4:
            raise ShapeError(f"image must be (B, C, H, W), got {tuple(image.shape)}")
        if image.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} input channels, got {image.shape[1]}"
            )
        if image.shape[0] < 1:
            raise ShapeError("empty batch")
        factor = self.config.downsample_factor
        H, W = image.shape[2], image.shape[3]
        if H % factor or W % factor:
            raise ShapeError(
                f"spatial dims {H}x{W} must be divisible by {factor} "
                f"for {self.config.num_stages} stages"
            )
        if not torch.isfinite(image).all():
            raise ValueError("non-finite values in input image")

    def encode_records(self, records: Sequence[MetadataRecord]) -> torch.Tensor:
        import numpy as np

        vecs = [encode_metadata(rec, self.schema) for rec in records]
        return torch.from_numpy(np.stack(vecs)).to(torch.float32)

    def forward(
        self,
        image: torch.Tensor,
        records: Optional[Sequence[MetadataRecord]] = None,
        encoded_meta: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> SegmentationOutput:
        """Run the full model. Metadata comes either as records (encoded
        against the schema here) or as an already-encoded (B, E) tensor;
        it is required when fusion is enabled and ignored otherwise."""
        self._validate_image(image)
        meta_feats = None
        entity_outputs = None
        if self.config.use_cmfi:
            if encoded_meta is None:
                if records is None:
                    raise MissingMetadataError(
                        "metadata fusion is enabled but no metadata was given; "
                        "pass records or use ensemble inference for missing "
                        "categorical entities"
                    )
                if len(records) != image.shape[0]:
                    raise ShapeError(
                        f"{len(records)} records for batch of {image.shape[0]}"
                    )
                encoded_meta = self.encode_records(records)
            encoded_meta = encoded_meta.to(image.dtype).to(image.device)
            meta_feats = self.meta_mlp(encoded_meta, generator=generator)
            entity_outputs = meta_feats.entity_outputs
        skips, bottleneck = self.encoder(image, self.fusion, meta_feats)
        super_logits = None
        super_feats = None
        if self.super_decoder is not None:
            super_logits, super_feats = self.super_decoder(bottleneck, skips)
        sub_logits = self.sub_decoder(bottleneck, super_feats)
        return SegmentationOutput(
            super_logits=super_logits,
            sub_logits=sub_logits,
            entity_outputs=entity_outputs,
            meta_features=meta_feats,
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
