"""End-to-end promptable segmentation pipeline.

Wires the frozen geometric embeddings (geometry), the image encoder and the
two-way mask decoder into one model with a prepare/predict split: ``prepare``
caches everything that depends only on the scene (embeddings, stats, low
confidence flags), ``predict`` reruns only the prompt-dependent part. Batch
and interactive callers share this exact path, so their outputs are
bit-identical by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import geometry
from .decoder import DecoderConfig, EmbeddingSet, MaskDecoder, decode, upsample_logits
from .encoder import ImageEncoder, ImageEncoderConfig, encode_image

PE_MODES = ("3d", "2d", "none")


@dataclass
class PipelineConfig:
    pe_mode: str = "3d"
    use_confidence: bool = True
    standardize: bool = True
    low_conf_fraction: float = 0.15
    n_frequencies: int = 64
    basis_seed: int = 0
    encoder: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}")
        if not 0.0 <= self.low_conf_fraction <= 1.0:
            raise ValueError("low_conf_fraction must be in [0, 1]")
        d = 2 * self.n_frequencies
        if self.encoder.output_dim != d:
            raise ValueError("encoder output_dim must equal 2 * n_frequencies")
        if self.decoder.embed_dim != d:
            raise ValueError("decoder embed_dim must equal 2 * n_frequencies")


@dataclass(eq=False)
class SceneState:
    """Prompt-independent cache for one prepared scene (or view subset)."""

    point_grids: list                 # per view: (Hc, Wc, D) tensor, detached
    view_sizes: list                  # per view: (H, W)
    pointmaps: list                   # per view: (H, W, 3) float32
    stats: geometry.StandardizationStats
    low_flags: list                   # per view: (H, W) bool


class LearnableEmbeddings(nn.Module):
    """The four learned vectors: prompt polarity and confidence level."""

    def __init__(self, dim: int):
        super().__init__()
        self.positive = nn.Parameter(torch.randn(dim) * 0.02)
        self.negative = nn.Parameter(torch.randn(dim) * 0.02)
        self.high_conf = nn.Parameter(torch.randn(dim) * 0.02)
        self.low_conf = nn.Parameter(torch.randn(dim) * 0.02)


class SegmentationModel(nn.Module):
    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.config = config
        self.encoder = ImageEncoder(config.encoder)
        self.decoder = MaskDecoder(config.decoder)
        self.embeddings = LearnableEmbeddings(2 * config.n_frequencies)
        self.basis3d = geometry.FourierBasis(3, config.n_frequencies, seed=config.basis_seed)
        self.basis2d = geometry.FourierBasis(2, config.n_frequencies, seed=config.basis_seed + 1)

    @property
    def embed_dim(self) -> int:
        return 2 * self.config.n_frequencies

    # -- scene-dependent, prompt-independent -------------------------------

    def scene_stats(self, views) -> geometry.StandardizationStats:
        if not self.config.standardize:
            return geometry.StandardizationStats(mean=np.zeros(3), std=np.ones(3))
        return geometry.compute_stats([v.pointmap for v in views])

    def scene_low_flags(self, views):
        if not self.config.use_confidence or self.config.low_conf_fraction == 0.0:
            return [np.zeros(v.confidence.shape, dtype=bool) for v in views]
        _, flags = geometry.confidence_threshold(
            [v.confidence for v in views], self.config.low_conf_fraction
        )
        return flags

    def _grid_positional(self, view_index: int, pointmap, stats, grid_hw) -> np.ndarray:
        stride = self.config.encoder.stride
        if self.config.pe_mode == "3d":
            pooled = geometry.pooled_pointmap(pointmap, stride)
            return geometry.positional_embedding_3d(pooled, self.basis3d, stats)
        if self.config.pe_mode == "2d":
            hc, wc = grid_hw
            h, w = pointmap.shape[:2]
            ii, jj = np.meshgrid(np.arange(hc), np.arange(wc), indexing="ij")
            rows = ii * stride + (stride - 1) / 2.0
            cols = jj * stride + (stride - 1) / 2.0
            return geometry.positional_embedding_2d(rows, cols, h, w, self.basis2d)
        return np.zeros(grid_hw + (self.embed_dim,), dtype=np.float32)

    def _compose_view_grid(self, view_index, view, stats, low_flags) -> torch.Tensor:
        """Differentiable per-view point-embedding grid (Hc, Wc, D)."""
        image_emb = encode_image(self.encoder, view.image)
        pe = self._grid_positional(view_index, view.pointmap, stats, tuple(image_emb.shape[:2]))
        grid = image_emb + torch.from_numpy(pe).to(image_emb.dtype)
        if self.config.use_confidence:
            flags = geometry.pooled_low_flags(low_flags, self.config.encoder.stride)
            flag_t = torch.from_numpy(flags).unsqueeze(-1)
            emb = self.embeddings
            grid = grid + torch.where(
                flag_t,
                emb.low_conf.to(grid.dtype),
                emb.high_conf.to(grid.dtype),
            )
        return grid

    def prepare(self, views, stats=None, low_flags=None) -> SceneState:
        """Cache per-view point embeddings for a fixed view list.

        ``stats`` and ``low_flags`` default to values computed from exactly the
        given views; pass frozen ones to keep outputs comparable across
        different view subsets or orderings.
        """
        if len(views) == 0:
            raise ValueError("at least one view required")
        if stats is None or not self.config.standardize:
            stats = self.scene_stats(views)
        if low_flags is None:
            low_flags = self.scene_low_flags(views)
        self.eval()
        grids = []
        with torch.no_grad():
            for i, view in enumerate(views):
                grids.append(self._compose_view_grid(i, view, stats, low_flags[i]))
        return SceneState(
            point_grids=grids,
            view_sizes=[(v.image.shape[0], v.image.shape[1]) for v in views],
            pointmaps=[v.pointmap for v in views],
            stats=stats,
            low_flags=low_flags,
        )

    # -- prompt-dependent ---------------------------------------------------

    def _prompt_positional(self, prompts, pointmaps, stats) -> np.ndarray:
        if self.config.pe_mode == "3d":
            return geometry.prompt_positional(prompts, pointmaps, self.basis3d, stats)
        if self.config.pe_mode == "2d":
            out = np.empty((len(prompts), self.embed_dim), dtype=np.float32)
            for i, (view, row, col, _) in enumerate(prompts):
                h, w = pointmaps[view].shape[:2]
                out[i] = geometry.positional_embedding_2d(
                    np.array([row]), np.array([col]), h, w, self.basis2d
                )[0]
            return out
        return np.zeros((len(prompts), self.embed_dim), dtype=np.float32)

    def prompt_tokens(self, prompts, pointmaps, stats) -> torch.Tensor:
        """Differentiable (P, D) prompt embeddings: positional part + polarity."""
        if len(prompts) == 0:
            raise ValueError("at least one prompt required")
        for view, row, col, polarity in prompts:
            if not 0 <= view < len(pointmaps):
                raise ValueError(f"prompt view {view} out of range")
            h, w = pointmaps[view].shape[:2]
            if not (0 <= row < h and 0 <= col < w):
                raise ValueError(f"prompt pixel ({row}, {col}) outside view {view}")
            if polarity not in (1, -1):
                raise ValueError("prompt polarity must be +1 or -1")
        pe = torch.from_numpy(self._prompt_positional(prompts, pointmaps, stats))
        polarity = torch.tensor([1.0 if p[3] > 0 else 0.0 for p in prompts]).unsqueeze(-1)
        emb = self.embeddings
        return pe + polarity * emb.positive + (1.0 - polarity) * emb.negative

    def predict(self, state: SceneState, prompts, scope: Optional[str] = None):
        """Decode masks for the prepared scene under the given prompt list."""
        self.eval()
        with torch.no_grad():
            tokens = self.prompt_tokens(prompts, state.pointmaps, state.stats)
        embeddings = EmbeddingSet(
            point_embeddings=state.point_grids,
            prompt_embeddings=tokens,
            view_sizes=state.view_sizes,
        )
        config = self.config.decoder
        if scope is not None:
            config = DecoderConfig(**{**config.__dict__, "attention_scope": scope})
        return decode(embeddings, config, self.decoder)

    # -- training path ------------------------------------------------------

    def training_logits(self, views, prompts, stats=None, low_flags=None):
        """Differentiable full-resolution logits for a (usually single-view)
        training sample. Returns a list of (H, W) tensors, one per view."""
        if stats is None or not self.config.standardize:
            stats = self.scene_stats(views)
        if low_flags is None:
            low_flags = self.scene_low_flags(views)
        grids = [
            self._compose_view_grid(i, view, stats, low_flags[i])
            for i, view in enumerate(views)
        ]
        tokens = self.prompt_tokens(prompts, [v.pointmap for v in views], stats)
        embeddings = EmbeddingSet(
            point_embeddings=grids,
            prompt_embeddings=tokens,
            view_sizes=[(v.image.shape[0], v.image.shape[1]) for v in views],
        )
        logit_grids = self.decoder.compute_logits(embeddings)
        return [
            upsample_logits(grid, size)
            for grid, size in zip(logit_grids, embeddings.view_sizes)
        ]


def build_model(config: PipelineConfig, seed: int = 0) -> SegmentationModel:
    """Construct a model with weights drawn deterministically from the seed."""
    torch.manual_seed(seed)
    return SegmentationModel(config)
