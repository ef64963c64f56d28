"""Geometric embedding layer: 3D Fourier positional encodings on pointmaps.

All frozen math (standardization, sin/cos features, confidence quantiles,
pooling) lives here in numpy, computed in float64 and cast to float32 at the
boundary. Learnable vectors are composed on top of these outputs by the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS_STD = 1e-6
TWO_PI = 2.0 * math.pi


@dataclass(eq=False)
class StandardizationStats:
    """Per-axis mean and std over every point of every view of a scene."""

    mean: np.ndarray  # (3,) float64
    std: np.ndarray   # (3,) float64, population std clamped below by EPS_STD

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)


def compute_stats(pointmaps) -> StandardizationStats:
    """Fit standardization stats over all points of all views jointly.

    Args:
        pointmaps: iterable of (H, W, 3) arrays.
    """
    pts = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in pointmaps])
    if pts.size == 0:
        raise ValueError("cannot compute stats from zero points")
    mean = pts.mean(axis=0)
    # Clamp, not add: degenerate axes get a floor while healthy axes keep the
    # exact population std, which is what makes standardization cancel global
    # similarity transforms.
    std = np.maximum(pts.std(axis=0), EPS_STD)
    return StandardizationStats(mean=mean, std=std)


class FourierBasis:
    """Frozen random Fourier frequency matrix, (n_dims, n_frequencies).

    Entries are N(0, scale^2), drawn once from the seed and never trained.
    Embeddings built on it have dimension 2 * n_frequencies.
    """

    def __init__(self, n_dims: int = 3, n_frequencies: int = 64, scale: float = 1.0, seed: int = 0):
        if n_dims < 1 or n_frequencies < 1:
            raise ValueError("n_dims and n_frequencies must be >= 1")
        rng = np.random.default_rng(seed)
        # Stored float32 so checkpoints round-trip bit-exactly.
        self.matrix = (rng.normal(0.0, scale, size=(n_dims, n_frequencies))).astype(np.float32)
        self.n_dims = n_dims
        self.n_frequencies = n_frequencies
        self.scale = scale
        self.seed = seed

    @property
    def embedding_dim(self) -> int:
        return 2 * self.n_frequencies


def _fourier_features(coords: np.ndarray, basis: FourierBasis) -> np.ndarray:
    # coords (..., n_dims) float64 -> (..., 2K) float32; sin block then cos block.
    phases = TWO_PI * (coords @ basis.matrix.astype(np.float64))
    out = np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)
    return out.astype(np.float32)


def positional_embedding_3d(
    points: np.ndarray, basis: FourierBasis, stats: StandardizationStats
) -> np.ndarray:
    """Embed world points (..., 3) as (..., 2K) after global standardization."""
    if basis.n_dims != 3:
        raise ValueError("positional_embedding_3d needs a 3-dim basis")
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    standardized = (pts - stats.mean) / stats.std
    return _fourier_features(standardized, basis)


def positional_embedding_2d(
    rows: np.ndarray, cols: np.ndarray, height: int, width: int, basis: FourierBasis
) -> np.ndarray:
    """Pixel-grid embedding used by the 2D ablation; ignores geometry entirely.

    Pixel centers map to [-1, 1]^2 per view, so identical (row, col) in
    different views collide by construction.
    """
    if basis.n_dims != 2:
        raise ValueError("positional_embedding_2d needs a 2-dim basis")
    r = (np.asarray(rows, dtype=np.float64) + 0.5) / height * 2.0 - 1.0
    c = (np.asarray(cols, dtype=np.float64) + 0.5) / width * 2.0 - 1.0
    return _fourier_features(np.stack([r, c], axis=-1), basis)


# ---------------------------------------------------------------------------
# Confidence handling


def confidence_threshold(confidences, fraction: float):
    """Mark the lowest ``fraction`` of pixels across all views as low-confidence.

    Exactly k = round(fraction * total) pixels are flagged, ties broken by flat
    (view-major, row-major) index so the answer is deterministic. Returns
    (threshold, flags) where threshold is the k-th smallest confidence value
    (-inf when k == 0) and flags is a list of (H, W) bool arrays.

    Args:
        confidences: iterable of (H, W) float arrays.
        fraction: in [0, 1].
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    conf_list = [np.asarray(c, dtype=np.float64) for c in confidences]
    flat = np.concatenate([c.ravel() for c in conf_list])
    total = flat.size
    k = int(math.floor(fraction * total + 0.5))
    if k == 0:
        threshold = float("-inf")
        flags_flat = np.zeros(total, dtype=bool)
    else:
        order = np.argsort(flat, kind="stable")
        threshold = float(flat[order[k - 1]])
        flags_flat = np.zeros(total, dtype=bool)
        flags_flat[order[:k]] = True
    flags = []
    offset = 0
    for c in conf_list:
        n = c.size
        flags.append(flags_flat[offset : offset + n].reshape(c.shape))
        offset += n
    return threshold, flags


# ---------------------------------------------------------------------------
# Pooling to the encoder grid


def block_reduce(x: np.ndarray, stride: int, op: str) -> np.ndarray:
    """Pool (H, W, ...) to (ceil(H/s), ceil(W/s), ...) with mean/min/any blocks."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return x.copy()
    h, w = x.shape[:2]
    hc = -(-h // stride)
    wc = -(-w // stride)
    if h % stride == 0 and w % stride == 0:
        blocks = x.reshape(hc, stride, wc, stride, *x.shape[2:])
        if op == "mean":
            return blocks.mean(axis=(1, 3))
        if op == "min":
            return blocks.min(axis=(1, 3))
        if op == "any":
            return blocks.any(axis=(1, 3))
        raise ValueError(f"unknown op {op!r}")
    out_shape = (hc, wc) + x.shape[2:]
    out = np.empty(out_shape, dtype=bool if op == "any" else x.dtype)
    for i in range(hc):
        for j in range(wc):
            block = x[i * stride : (i + 1) * stride, j * stride : (j + 1) * stride]
            if op == "mean":
                out[i, j] = block.mean(axis=(0, 1))
            elif op == "min":
                out[i, j] = block.min(axis=(0, 1))
            elif op == "any":
                out[i, j] = block.any(axis=(0, 1))
            else:
                raise ValueError(f"unknown op {op!r}")
    return out


def pooled_pointmap(pointmap: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool a (H, W, 3) pointmap to the encoder grid, in float64."""
    return block_reduce(np.asarray(pointmap, dtype=np.float64), stride, "mean")


def pooled_low_flags(flags: np.ndarray, stride: int) -> np.ndarray:
    """A grid cell is low-confidence if any pixel inside it is."""
    return block_reduce(np.asarray(flags, dtype=bool), stride, "any")


# ---------------------------------------------------------------------------
# Prompt and point embedding composition (numpy reference path)


def encode_prompts(
    prompts,
    pointmaps,
    basis: FourierBasis,
    stats: StandardizationStats,
    positive_vec: np.ndarray,
    negative_vec: np.ndarray,
) -> np.ndarray:
    """Lift pixel prompts to 3D and embed them, (n_prompts, 2K).

    Each prompt is (view, row, col, polarity) with polarity +1 or -1. The
    prompt's world point is read straight from the full-resolution pointmap.
    """
    if len(prompts) == 0:
        raise ValueError("at least one prompt is required")
    pe = prompt_positional(prompts, pointmaps, basis, stats)
    out = np.empty_like(pe)
    for i, (_, _, _, polarity) in enumerate(prompts):
        vec = positive_vec if polarity > 0 else negative_vec
        out[i] = pe[i] + np.asarray(vec, dtype=np.float32)
    return out


def prompt_positional(prompts, pointmaps, basis, stats) -> np.ndarray:
    """The frozen positional part of prompt embeddings, (n_prompts, 2K)."""
    points = np.empty((len(prompts), 3), dtype=np.float64)
    for i, (view, row, col, _) in enumerate(prompts):
        pm = pointmaps[view]
        h, w = pm.shape[:2]
        if not (0 <= row < h and 0 <= col < w):
            raise ValueError(f"prompt pixel ({row}, {col}) outside view {view} of size {h}x{w}")
        points[i] = pm[row, col]
    return positional_embedding_3d(points, basis, stats)


def compose_point_embeddings(
    image_embedding: np.ndarray,
    pointmap: np.ndarray,
    low_flags: np.ndarray,
    stride: int,
    basis: FourierBasis,
    stats: StandardizationStats,
    high_conf_vec: np.ndarray,
    low_conf_vec: np.ndarray,
) -> np.ndarray:
    """Image embedding + confidence-augmented positional embedding, one view.

    Args:
        image_embedding: (Hc, Wc, D) from the encoder.
        pointmap: (H, W, 3) full resolution; average-pooled to the grid here.
        low_flags: (H, W) bool; OR-pooled to the grid.
        stride: encoder stride; ceil(H/stride) must equal Hc.
    """
    pooled = pooled_pointmap(pointmap, stride)
    if pooled.shape[:2] != image_embedding.shape[:2]:
        raise ValueError(
            f"pooled grid {pooled.shape[:2]} does not match embedding {image_embedding.shape[:2]}"
        )
    pe = positional_embedding_3d(pooled, basis, stats)
    flags = pooled_low_flags(low_flags, stride)
    conf_vec = np.where(
        flags[..., None],
        np.asarray(low_conf_vec, dtype=np.float32),
        np.asarray(high_conf_vec, dtype=np.float32),
    )
    return image_embedding.astype(np.float32) + pe + conf_vec
