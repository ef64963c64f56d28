"""Small convolutional image encoder.

Stands in for a large pretrained backbone: a few stride-2 mixing stages plus a
pointwise head reaching the configured stride and output dim. Only the
interface matters downstream (shape contract, determinism, differentiability,
and the frozen flag).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class ImageEncoderConfig:
    stride: int = 4
    channels: tuple = (32, 64)
    output_dim: int = 128
    frozen: bool = False

    def __post_init__(self):
        if self.stride not in (1, 2, 4):
            raise ValueError("stride must be one of 1, 2, 4")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")


class ImageEncoder(nn.Module):
    """Conv stack mapping (B, 3, H, W) in [0,1] to (B, D, ceil(H/s), ceil(W/s))."""

    def __init__(self, config: ImageEncoderConfig):
        super().__init__()
        self.config = config
        c1, c2 = config.channels[0], config.channels[-1]
        # Conv k3 p1 s2 yields ceil(H/2) per application, so the shape contract
        # holds for odd sizes too.
        if config.stride == 1:
            layers = [
                nn.Conv2d(3, c1, 3, stride=1, padding=1), nn.GELU(),
                nn.Conv2d(c1, c2, 3, stride=1, padding=1), nn.GELU(),
            ]
        elif config.stride == 2:
            layers = [
                nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(c1, c2, 3, stride=1, padding=1), nn.GELU(),
            ]
        else:
            layers = [
                nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.GELU(),
            ]
        layers.append(nn.Conv2d(c2, config.output_dim, 1))
        self.stack = nn.Sequential(*layers)
        self.norm = nn.LayerNorm(config.output_dim)
        if config.frozen:
            self.requires_grad_(False)

    @property
    def frozen(self) -> bool:
        return self.config.frozen

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        y = self.stack(x)
        # Normalize over channels so image features and positional features
        # arrive at the decoder on comparable scales.
        y = self.norm(y.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return y


def encode_image(encoder: ImageEncoder, image: np.ndarray) -> torch.Tensor:
    """Encode one (H, W, 3) image in [0, 1] to a (H', W', D) grid."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    dtype = next(encoder.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image)).to(dtype)
    x = x.permute(2, 0, 1).unsqueeze(0)
    y = encoder(x)
    return y.squeeze(0).permute(1, 2, 0)
