"""Appearance and pose discriminators with their adversarial losses."""
from __future__ import annotations

import torch
from torch import nn

from poseattn.layers import ShapeError, init_weights
from poseattn.posecodec import NUM_JOINTS

SCORE_EPS = 1e-7


class Discriminator(nn.Module):
    """Conv stack (4x4, stride 2) -> global average pool -> linear -> sigmoid scalar."""

    def __init__(self, in_channels: int, widths: tuple[int, ...] = (64, 128, 256, 512)):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_channels
        for i, w in enumerate(widths):
            layers.append(nn.Conv2d(prev, w, 4, stride=2, padding=1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(w))
            layers.append(nn.LeakyReLU(0.2))
            prev = w
        self.in_channels = in_channels
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(prev, 1)
        init_weights(self)

    def score(self, x: torch.Tensor) -> torch.Tensor:
        logit = self.fc(self.features(x).mean(dim=(2, 3))).squeeze(1)
        return torch.sigmoid(logit).clamp(SCORE_EPS, 1.0 - SCORE_EPS)


class AppearanceDiscriminator(Discriminator):
    def __init__(self, widths: tuple[int, ...] = (64, 128, 256, 512)):
        super().__init__(6, widths)

    def forward(self, cond: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if cond.shape != candidate.shape or cond.dim() != 4 or cond.shape[1] != 3:
            raise ShapeError(f"D_I: expected two (B, 3, H, W) images, got {tuple(cond.shape)} and {tuple(candidate.shape)}")
        return self.score(torch.cat([cond, candidate], dim=1))


class PoseDiscriminator(Discriminator):
    def __init__(self, widths: tuple[int, ...] = (64, 128, 256, 512)):
        super().__init__(NUM_JOINTS + 3, widths)

    def forward(self, pose: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if (pose.dim() != 4 or pose.shape[1] != NUM_JOINTS or candidate.dim() != 4 or candidate.shape[1] != 3
                or pose.shape[0] != candidate.shape[0] or pose.shape[2:] != candidate.shape[2:]):
            raise ShapeError(f"D_P: expected (B, {NUM_JOINTS}, H, W) pose and (B, 3, H, W) image, "
                             f"got {tuple(pose.shape)} and {tuple(candidate.shape)}")
        return self.score(torch.cat([pose, candidate], dim=1))


def adversarial_value(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """E[log D(real) + log(1 - D(fake))]; the discriminator ascends this."""
    real_scores = real_scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    fake_scores = fake_scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    return (torch.log(real_scores) + torch.log1p(-fake_scores)).mean()


def gan_loss_appearance(d: AppearanceDiscriminator, cond, real_target, fake) -> torch.Tensor:
    return adversarial_value(d(cond, real_target), d(cond, fake))


def gan_loss_pose(d: PoseDiscriminator, pose, real_target, fake) -> torch.Tensor:
    return adversarial_value(d(pose, real_target), d(pose, fake))


def generator_adversarial(fake_scores: torch.Tensor, form: str = "nonsaturating") -> torch.Tensor:
    """Generator-side term: -E[log D(fake)] (default) or the literal E[log(1 - D(fake))]."""
    fake_scores = fake_scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    if form == "nonsaturating":
        return -torch.log(fake_scores).mean()
    if form == "literal":
        return torch.log1p(-fake_scores).mean()
    raise ValueError(f"unknown generator adversarial form {form!r}")
