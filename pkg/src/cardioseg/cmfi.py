"""Cross-modal feature integration: efficient additive cross-attention
between image features and spatially broadcast metadata features.

The block never materializes an N x N attention matrix; the attention
weights collapse each modality's queries into a single global query vector,
so cost is linear in N = H*W.

Pipeline for input f_I (B, C, H, W) and metadata feature f_M (B, C):
  1. reshape f_I to (B, N, C), broadcast f_M to (B, N, C)
  2. project to Q_I, K_I (image) and Q_M, K_M (metadata)
  3. attention weights w_aLI = Q_I w_aI / sqrt(C), w_aLM = Q_M w_aM / sqrt(C)
  4. global queries G_I = sum_n (w_aLI)_n * Q_I_n, G_M likewise
  5. f* = T1(G_I*K_I) + T2(G_I*K_M) + T3(G_M*K_M) + T4(G_M*K_I)
  6. f** = T(f* + Q_I/||Q_I|| + Q_M/||Q_M||), norms per position over
     channels, guarded by eps_norm
  7. reshape back to (B, C, H, W)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError

EPS_NORM = 1e-12


@dataclass
class CmfiIntermediate:
    """Intermediate tensors of one forward pass, kept for oracle tests."""

    w_aLI: torch.Tensor  # (B, N, 1)
    w_aLM: torch.Tensor  # (B, N, 1)
    G_I: torch.Tensor    # (B, C)
    G_M: torch.Tensor    # (B, C)
    f_star: torch.Tensor  # (B, N, C)
    f_out: torch.Tensor   # (B, N, C)


def broadcast_metadata(f_M: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Expand a (B, C) metadata feature to (B, N, C) with N = H*W.

    Every spatial position carries the identical row (a view, no copy).
    """
    if H < 1 or W < 1:
        raise ShapeError(f"H and W must be >= 1, got {H}x{W}")
    if f_M.dim() != 2:
        raise ShapeError(f"f_M must be (B, C), got {tuple(f_M.shape)}")
    B, C = f_M.shape
    return f_M.unsqueeze(1).expand(B, H * W, C)


class CrossModalFeatureIntegration(nn.Module):
    """Additive cross-attention block for one encoder stage."""

    def __init__(self, channels: int, eps_norm: float = EPS_NORM):
        super().__init__()
        if channels < 1:
            raise ShapeError(f"channels must be >= 1, got {channels}")
        if eps_norm <= 0:
            raise ValueError(f"eps_norm must be positive, got {eps_norm}")
        self.channels = channels
        self.eps_norm = eps_norm
        self.scale = 1.0 / math.sqrt(channels)

        self.image_query_proj = nn.Linear(channels, channels)
        self.image_key_proj = nn.Linear(channels, channels)
        self.meta_query_proj = nn.Linear(channels, channels)
        self.meta_key_proj = nn.Linear(channels, channels)
        # attention parameter vectors, one weight per channel
        self.attn_vec_image = nn.Parameter(torch.empty(channels))
        self.attn_vec_meta = nn.Parameter(torch.empty(channels))
        # T_1..T_4 for the pairwise global/key interactions
        self.mix_ii = nn.Linear(channels, channels)
        self.mix_im = nn.Linear(channels, channels)
        self.mix_mm = nn.Linear(channels, channels)
        self.mix_mi = nn.Linear(channels, channels)
        self.output_proj = nn.Linear(channels, channels)
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.channels)
        for lin in (
            self.image_query_proj,
            self.image_key_proj,
            self.meta_query_proj,
            self.meta_key_proj,
            self.mix_ii,
            self.mix_im,
            self.mix_mm,
            self.mix_mi,
            self.output_proj,
        ):
            nn.init.uniform_(lin.weight, -bound, bound)
            nn.init.zeros_(lin.bias)
        nn.init.uniform_(self.attn_vec_image, -bound, bound)
        nn.init.uniform_(self.attn_vec_meta, -bound, bound)

    def _validate(self, f_I: torch.Tensor, f_M: torch.Tensor):
        if f_I.dim() != 4:
            raise ShapeError(f"f_I must be (B, C, H, W), got {tuple(f_I.shape)}")
        if f_M.dim() != 2:
            raise ShapeError(f"f_M must be (B, C), got {tuple(f_M.shape)}")
        if f_I.shape[1] != self.channels or f_M.shape[1] != self.channels:
            raise ShapeError(
                f"channel mismatch: block C={self.channels}, "
                f"f_I C={f_I.shape[1]}, f_M C={f_M.shape[1]}"
            )
        if f_I.shape[0] != f_M.shape[0]:
            raise ShapeError(
                f"batch mismatch: f_I B={f_I.shape[0]}, f_M B={f_M.shape[0]}"
            )
        if not torch.isfinite(f_I).all() or not torch.isfinite(f_M).all():
            raise ValueError("non-finite values in CMFI input")

    def forward_detailed(
        self, f_I: torch.Tensor, f_M: torch.Tensor
    ) -> tuple[torch.Tensor, CmfiIntermediate]:
        self._validate(f_I, f_M)
        B, C, H, W = f_I.shape
        x_img = f_I.flatten(2).transpose(1, 2)  # (B, N, C)
        x_meta = broadcast_metadata(f_M, H, W)

        q_img = self.image_query_proj(x_img)
        k_img = self.image_key_proj(x_img)
        q_meta = self.meta_query_proj(x_meta)
        k_meta = self.meta_key_proj(x_meta)

        w_aLI = (q_img @ self.attn_vec_image).unsqueeze(-1) * self.scale
        w_aLM = (q_meta @ self.attn_vec_meta).unsqueeze(-1) * self.scale

        G_I = (w_aLI * q_img).sum(dim=1)  # (B, C)
        G_M = (w_aLM * q_meta).sum(dim=1)

        g_img = G_I.unsqueeze(1)  # broadcast over N
        g_meta = G_M.unsqueeze(1)
        f_star = (
            self.mix_ii(g_img * k_img)
            + self.mix_im(g_img * k_meta)
            + self.mix_mm(g_meta * k_meta)
            + self.mix_mi(g_meta * k_img)
        )

        q_img_unit = q_img / q_img.norm(dim=2, keepdim=True).clamp_min(self.eps_norm)
        q_meta_unit = q_meta / q_meta.norm(dim=2, keepdim=True).clamp_min(self.eps_norm)
        f_out = self.output_proj(f_star + q_img_unit + q_meta_unit)

        out = f_out.transpose(1, 2).reshape(B, C, H, W)
        inter = CmfiIntermediate(
            w_aLI=w_aLI, w_aLM=w_aLM, G_I=G_I, G_M=G_M, f_star=f_star, f_out=f_out
        )
        return out, inter

    def forward(self, f_I: torch.Tensor, f_M: torch.Tensor) -> torch.Tensor:
        out, _ = self.forward_detailed(f_I, f_M)
        return out


def cmfi_reference(
    f_I: np.ndarray, f_M: np.ndarray, module: CrossModalFeatureIntegration
) -> np.ndarray:
    """Scalar-loop reference evaluator of the CMFI pipeline.

    Loops explicitly over batch, position, and channel with no batched
    primitives; exists only to cross-check forward(). Operates in float64.
    """

    def weights(lin: nn.Linear):
        return (
            lin.weight.detach().cpu().numpy().astype(np.float64),
            lin.bias.detach().cpu().numpy().astype(np.float64),
        )

    def apply_linear(W, b, row):
        out = [0.0] * len(b)
        for j in range(len(b)):
            acc = 0.0
            wj = W[j]
            for k in range(len(row)):
                acc += wj[k] * row[k]
            out[j] = acc + b[j]
        return out

    f_I = np.asarray(f_I, dtype=np.float64)
    f_M = np.asarray(f_M, dtype=np.float64)
    B, C, H, W = f_I.shape
    N = H * W
    eps = module.eps_norm
    scale = 1.0 / math.sqrt(C)

    Wqi, bqi = weights(module.image_query_proj)
    Wki, bki = weights(module.image_key_proj)
    Wqm, bqm = weights(module.meta_query_proj)
    Wkm, bkm = weights(module.meta_key_proj)
    W1, b1 = weights(module.mix_ii)
    W2, b2 = weights(module.mix_im)
    W3, b3 = weights(module.mix_mm)
    W4, b4 = weights(module.mix_mi)
    Wt, bt = weights(module.output_proj)
    w_ai = module.attn_vec_image.detach().cpu().numpy().astype(np.float64)
    w_am = module.attn_vec_meta.detach().cpu().numpy().astype(np.float64)

    out = np.zeros((B, C, H, W), dtype=np.float64)
    for b in range(B):
        img_rows = [
            [float(f_I[b, c, n // W, n % W]) for c in range(C)] for n in range(N)
        ]
        meta_row = [float(f_M[b, c]) for c in range(C)]

        q_img = [apply_linear(Wqi, bqi, row) for row in img_rows]
        k_img = [apply_linear(Wki, bki, row) for row in img_rows]
        q_meta_row = apply_linear(Wqm, bqm, meta_row)
        k_meta_row = apply_linear(Wkm, bkm, meta_row)
        q_meta = [list(q_meta_row) for _ in range(N)]
        k_meta = [list(k_meta_row) for _ in range(N)]

        w_ali = []
        w_alm = []
        for n in range(N):
            acc_i = 0.0
            acc_m = 0.0
            for c in range(C):
                acc_i += q_img[n][c] * w_ai[c]
                acc_m += q_meta[n][c] * w_am[c]
            w_ali.append(acc_i * scale)
            w_alm.append(acc_m * scale)

        G_I = [0.0] * C
        G_M = [0.0] * C
        for n in range(N):
            for c in range(C):
                G_I[c] += w_ali[n] * q_img[n][c]
                G_M[c] += w_alm[n] * q_meta[n][c]

        for n in range(N):
            t1 = apply_linear(W1, b1, [G_I[c] * k_img[n][c] for c in range(C)])
            t2 = apply_linear(W2, b2, [G_I[c] * k_meta[n][c] for c in range(C)])
            t3 = apply_linear(W3, b3, [G_M[c] * k_meta[n][c] for c in range(C)])
            t4 = apply_linear(W4, b4, [G_M[c] * k_img[n][c] for c in range(C)])
            f_star = [t1[c] + t2[c] + t3[c] + t4[c] for c in range(C)]

            norm_i = math.sqrt(sum(v * v for v in q_img[n]))
            norm_m = math.sqrt(sum(v * v for v in q_meta[n]))
            norm_i = max(norm_i, eps)
            norm_m = max(norm_m, eps)
            pre = [
                f_star[c] + q_img[n][c] / norm_i + q_meta[n][c] / norm_m
                for c in range(C)
            ]
            f_out = apply_linear(Wt, bt, pre)
            for c in range(C):
                out[b, c, n // W, n % W] = f_out[c]
    return out
