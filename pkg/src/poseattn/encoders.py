"""Appearance encoder E_A, pose encoder E_P and the semantic backbone E."""
from __future__ import annotations

import torch
from torch import nn

from poseattn.layers import check_channels, conv_bn_relu, init_weights
from poseattn.posecodec import NUM_JOINTS


class ConvEncoder(nn.Module):
    """Two stride-2 conv-BN-ReLU blocks: (B, in, H, W) -> (B, C, H/4, W/4)."""

    def __init__(self, in_channels: int, channels: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.net = nn.Sequential(
            *conv_bn_relu(in_channels, channels, stride=2),
            *conv_bn_relu(channels, channels, stride=2),
        )
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_channels(x, self.in_channels, type(self).__name__)
        return self.net(x)


class AppearanceEncoder(ConvEncoder):
    def __init__(self, channels: int = 64):
        super().__init__(3, channels)


class PoseEncoder(ConvEncoder):
    def __init__(self, channels: int = 64):
        super().__init__(NUM_JOINTS, channels)


class SemanticEncoder(nn.Module):
    """Four stride-2 conv blocks and global average pooling; output width ``dim``."""

    def __init__(self, dim: int = 256, widths: tuple[int, ...] | None = None):
        super().__init__()
        if widths is None:
            widths = (dim // 8, dim // 4, dim // 2, dim)
        if widths[-1] != dim:
            raise ValueError("last backbone width must equal dim")
        layers, prev = [], 3
        for w in widths:
            layers += conv_bn_relu(prev, w, stride=2)
            prev = w
        self.dim = dim
        self.features = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        check_channels(img, 3, "SemanticEncoder")
        return self.features(img).mean(dim=(2, 3))
