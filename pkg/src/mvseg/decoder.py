"""Prompt-conditioned mask decoder.

Two-way transformer blocks alternate attention between the prompt-token stream
(all prompts plus one learnable mask token) and per-view point tokens. In
single_view scope each view is decoded independently against the full prompt
list, which is what makes predictions equivariant to frame order; full_view
scope concatenates every view's point tokens into one sequence and exists for
ablation. The per-position logit is the inner product of the final point token
with a feed-forward readout of the final mask token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

ATTENTION_SCOPES = ("single_view", "full_view")


@dataclass
class DecoderConfig:
    embed_dim: int = 128
    num_blocks: int = 2
    num_heads: int = 8
    mlp_ratio: int = 4
    attention_scope: str = "single_view"
    mask_threshold: float = 0.0
    min_area_fraction: float = 0.001

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.attention_scope not in ATTENTION_SCOPES:
            raise ValueError(f"attention_scope must be one of {ATTENTION_SCOPES}")


@dataclass(eq=False)
class EmbeddingSet:
    """Decoder input: per-view point-embedding grids plus shared prompt tokens."""

    point_embeddings: list            # per view: (Hc, Wc, D) tensor
    prompt_embeddings: torch.Tensor   # (P, D)
    view_sizes: list                  # per view: (H, W) full-resolution size


@dataclass(eq=False)
class MaskPrediction:
    logits: np.ndarray  # (Hc, Wc) float32, pre-upsample
    binary: np.ndarray  # (H, W) uint8 after upsample, threshold, post-process


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/out projections."""

    def __init__(self, embed_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, _ = x.shape
        return x.reshape(n, self.num_heads, self.head_dim).transpose(0, 1)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        attn = (qh @ kh.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = torch.softmax(attn, dim=-1)
        out = attn @ vh
        out = out.transpose(0, 1).reshape(q.shape[0], -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, embed_dim: int, mlp_ratio: int):
        super().__init__()
        hidden = embed_dim * mlp_ratio
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.fc2 = nn.Linear(hidden, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TwoWayBlock(nn.Module):
    """One exchange round: prompts self-attend, gather from points, run an MLP,
    then points gather from prompts. Pre-norm residuals throughout."""

    def __init__(self, embed_dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.self_attn = Attention(embed_dim, num_heads)
        self.cross_prompt_to_point = Attention(embed_dim, num_heads)
        self.mlp = FeedForward(embed_dim, mlp_ratio)
        self.cross_point_to_prompt = Attention(embed_dim, num_heads)
        self.norm_self = nn.LayerNorm(embed_dim)
        self.norm_cross_q = nn.LayerNorm(embed_dim)
        self.norm_point_kv = nn.LayerNorm(embed_dim)
        self.norm_mlp = nn.LayerNorm(embed_dim)
        self.norm_point_q = nn.LayerNorm(embed_dim)
        self.norm_prompt_kv = nn.LayerNorm(embed_dim)

    def forward(self, prompts: torch.Tensor, points: torch.Tensor):
        t = self.norm_self(prompts)
        prompts = prompts + self.self_attn(t, t, t)
        q = self.norm_cross_q(prompts)
        kv = self.norm_point_kv(points)
        prompts = prompts + self.cross_prompt_to_point(q, kv, kv)
        prompts = prompts + self.mlp(self.norm_mlp(prompts))
        q = self.norm_point_q(points)
        kv = self.norm_prompt_kv(prompts)
        points = points + self.cross_point_to_prompt(q, kv, kv)
        return prompts, points


class MaskDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.blocks = nn.ModuleList(
            TwoWayBlock(d, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_blocks)
        )
        self.norm_prompts_final = nn.LayerNorm(d)
        self.norm_points_final = nn.LayerNorm(d)
        self.mask_token = nn.Parameter(torch.randn(1, d) * 0.02)
        self.readout = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def _run_blocks(self, prompts: torch.Tensor, points: torch.Tensor):
        for block in self.blocks:
            prompts, points = block(prompts, points)
        prompts = self.norm_prompts_final(prompts)
        points = self.norm_points_final(points)
        return prompts, points

    def compute_logits(self, embeddings: EmbeddingSet, scope: Optional[str] = None):
        """Differentiable core: per-view (Hc, Wc) logit grids.

        The mask token is appended after the caller's prompt tokens, so prompt
        permutations never move it.
        """
        if embeddings.prompt_embeddings.shape[0] == 0:
            raise ValueError("at least one prompt required")
        scope = scope or self.config.attention_scope
        if scope not in ATTENTION_SCOPES:
            raise ValueError(f"attention_scope must be one of {ATTENTION_SCOPES}")
        prompt_tokens = torch.cat(
            [embeddings.prompt_embeddings, self.mask_token.to(embeddings.prompt_embeddings.dtype)]
        )
        grids = embeddings.point_embeddings
        if scope == "single_view":
            logits = []
            for grid in grids:
                hc, wc, d = grid.shape
                prompts, points = self._run_blocks(prompt_tokens, grid.reshape(hc * wc, d))
                per_pos = points @ self.readout(prompts[-1])
                logits.append(per_pos.reshape(hc, wc))
            return logits
        flat = torch.cat([g.reshape(-1, g.shape[-1]) for g in grids])
        prompts, points = self._run_blocks(prompt_tokens, flat)
        per_pos = points @ self.readout(prompts[-1])
        logits, offset = [], 0
        for grid in grids:
            hc, wc = grid.shape[:2]
            logits.append(per_pos[offset : offset + hc * wc].reshape(hc, wc))
            offset += hc * wc
        return logits


def upsample_logits(logits: torch.Tensor, size) -> torch.Tensor:
    """Bilinearly upsample one (Hc, Wc) logit grid to (H, W)."""
    if tuple(logits.shape) == tuple(size):
        return logits
    x = logits.unsqueeze(0).unsqueeze(0)
    y = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return y.squeeze(0).squeeze(0)


def postprocess(binary: np.ndarray, min_area_fraction: float = 0.001) -> np.ndarray:
    """Drop 8-connected positive components smaller than the area cutoff.

    Components with area < min_area_fraction * H * W are removed; holes inside
    surviving components are left alone.
    """
    binary = np.asarray(binary)
    out = (binary > 0).astype(np.uint8)
    cutoff = min_area_fraction * out.shape[0] * out.shape[1]
    labels, n = ndimage.label(out, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return out
    areas = ndimage.sum_labels(out, labels, index=np.arange(1, n + 1))
    kill = np.flatnonzero(areas < cutoff) + 1
    if kill.size:
        out[np.isin(labels, kill)] = 0
    return out


def decode(embeddings: EmbeddingSet, config: DecoderConfig, decoder: MaskDecoder):
    """Full inference path: logits, bilinear upsample, threshold, post-process."""
    if len(embeddings.point_embeddings) != len(embeddings.view_sizes):
        raise ValueError("one view_size per point-embedding grid required")
    with torch.no_grad():
        logit_grids = decoder.compute_logits(embeddings, scope=config.attention_scope)
    predictions = []
    for grid, size in zip(logit_grids, embeddings.view_sizes):
        up = upsample_logits(grid, size)
        binary = (up > config.mask_threshold).to(torch.uint8).cpu().numpy()
        binary = postprocess(binary, config.min_area_fraction)
        predictions.append(
            MaskPrediction(logits=grid.detach().cpu().numpy().astype(np.float32), binary=binary)
        )
    return predictions
