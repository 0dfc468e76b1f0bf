"""Small building blocks shared by the networks."""
from __future__ import annotations

import torch
from torch import nn

INIT_STD = 0.02


class ShapeError(ValueError):
    pass


def conv_bn_relu(in_ch: int, out_ch: int, stride: int = 1, relu: bool = True) -> list[nn.Module]:
    layers: list[nn.Module] = [
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_ch, momentum=0.1),
    ]
    if relu:
        layers.append(nn.ReLU())
    return layers


def init_weights(module: nn.Module) -> None:
    """Gaussian(0, 0.02) conv weights, zero biases, unit-scale/zero-shift norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ShapeError(f"{what}: expected (B, {expected}, H, W), got {tuple(x.shape)}")


def check_same_spatial(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
