"""Pose attention-guided generation network and adaptive instance normalization."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from poseattn.layers import ShapeError, check_same_spatial, init_weights

ADAIN_EPS = 1e-5


def adain(style: torch.Tensor, content: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Re-normalize each content channel to the style channel's spatial mean/std.

    Statistics are per sample and channel, population variance. The ``eps``
    guard only engages for channels with variance below ``eps``; above it the
    moments are matched exactly.
    """
    if style.shape[:2] != content.shape[:2]:
        raise ShapeError(f"adain: channel mismatch {tuple(style.shape)} vs {tuple(content.shape)}")
    if not eps > 0:
        raise ValueError("adain: eps must be > 0")
    dims = tuple(range(2, content.dim()))
    c_mean = content.mean(dim=dims, keepdim=True)
    c_var = content.var(dim=dims, keepdim=True, unbiased=False)
    s_mean = style.mean(dim=dims, keepdim=True)
    s_std = style.var(dim=dims, keepdim=True, unbiased=False).sqrt()
    return s_std * (content - c_mean) / c_var.clamp_min(eps).sqrt() + s_mean


class PagnState(NamedTuple):
    f_g: torch.Tensor
    i_g: torch.Tensor
    masks: list[torch.Tensor]


class PAGNBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.style = nn.ConvTranspose2d(2 * c, c, 3, stride=1, padding=1)
        self.content = nn.Conv2d(c, c, 1)
        self.attention = nn.Sequential(nn.Conv2d(c, c, 3, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU())
        self.image = nn.ConvTranspose2d(2 * c, c, 3, stride=1, padding=1)
        init_weights(self)

    def forward(self, state: PagnState, p_t: torch.Tensor, f_app: torch.Tensor) -> PagnState:
        check_same_spatial(state.f_g, p_t, "PAGNBlock pose")
        check_same_spatial(state.f_g, f_app, "PAGNBlock appearance")
        a = self.style(torch.cat([state.f_g, p_t], dim=1))
        b = self.content(f_app)
        x = adain(a, b)
        mask = torch.sigmoid(self.attention(x))
        i_g = self.image(torch.cat([state.i_g, mask * x], dim=1))
        return PagnState(x + a, i_g, state.masks + [mask])


class PAGN(nn.Module):
    """N blocks at encoder resolution, then a x4 upsampling head to a tanh image."""

    def __init__(self, channels: int = 64, blocks: int = 4):
        super().__init__()
        if blocks < 1:
            raise ValueError(f"PAGN needs at least one block, got {blocks}")
        c = channels
        self.init_image = nn.Conv2d(c, c, 1)
        self.blocks = nn.ModuleList(PAGNBlock(c) for _ in range(blocks))
        self.head = nn.Sequential(
            nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU(),
            nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1, bias=False), nn.BatchNorm2d(c // 2), nn.ReLU(),
            nn.Conv2d(c // 2, 3, 3, padding=1), nn.Tanh(),
        )
        init_weights(self)

    def forward(self, f_app: torch.Tensor, f_pose: torch.Tensor, p_t: torch.Tensor):
        """``f_app``/``f_pose`` are the final PAAN maps, ``p_t`` the encoded target pose."""
        state = PagnState(f_pose, self.init_image(f_app), [])
        for block in self.blocks:
            state = block(state, p_t, f_app)
        img = self.head(torch.cat([state.f_g, state.i_g], dim=1))
        return img, state
