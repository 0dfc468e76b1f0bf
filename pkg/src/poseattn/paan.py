"""Pose attention-guided appearance network."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from poseattn.layers import ShapeError, conv_bn_relu, init_weights


class PaanState(NamedTuple):
    f_i: torch.Tensor
    f_p: torch.Tensor
    masks: list[torch.Tensor]


class PAANBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        # no ReLU before the sigmoid, otherwise the mask could not go below 0.5
        self.pose_stream = nn.Sequential(*conv_bn_relu(channels, channels), *conv_bn_relu(channels, channels, relu=False))
        self.app_stream = nn.Sequential(*conv_bn_relu(channels, channels), *conv_bn_relu(channels, channels))
        init_weights(self)

    def forward(self, f_i: torch.Tensor, f_p: torch.Tensor):
        if f_i.shape != f_p.shape:
            raise ShapeError(f"PAANBlock: stream shapes differ {tuple(f_i.shape)} vs {tuple(f_p.shape)}")
        f_p = self.pose_stream(f_p)
        mask = torch.sigmoid(f_p)
        f_i = mask * self.app_stream(f_i) + f_i
        return f_i, f_p, mask


class PAAN(nn.Module):
    def __init__(self, channels: int = 64, blocks: int = 4):
        super().__init__()
        if blocks < 1:
            raise ValueError(f"PAAN needs at least one block, got {blocks}")
        self.blocks = nn.ModuleList(PAANBlock(channels) for _ in range(blocks))

    def forward(self, f_i: torch.Tensor, f_p: torch.Tensor) -> PaanState:
        masks = []
        for block in self.blocks:
            f_i, f_p, mask = block(f_i, f_p)
            masks.append(mask)
        return PaanState(f_i, f_p, masks)

    @torch.no_grad()
    def zero_appearance_streams(self) -> None:
        """Make every appearance stream output exactly zero (pure residual pass-through)."""
        for block in self.blocks:
            for m in block.app_stream.modules():
                if isinstance(m, nn.Conv2d):
                    m.weight.zero_()
                elif isinstance(m, nn.BatchNorm2d):
                    m.bias.zero_()
