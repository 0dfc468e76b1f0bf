"""Reconstruction, semantic-consistency, quartet and identification losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from poseattn.layers import ShapeError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 5.0
    lambda_r: float = 10.0
    lambda_s: float = 10.0
    lambda_quartet: float = 1.0
    lambda_id: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if not v >= 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")


@dataclass(frozen=True)
class Margins:
    tau1: float = 1.0
    tau2: float = 0.5

    def __post_init__(self):
        if self.tau1 < 0 or self.tau2 < 0:
            raise ConfigError("margins must be non-negative")
        if not self.tau2 < self.tau1:
            raise ConfigError(f"tau2 must be less than tau1 (got tau1={self.tau1}, tau2={self.tau2})")


COMPONENTS = ("L_gan_I", "L_gan_P", "L_R", "L_S", "L_quartet", "L_id")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_l1(generated: torch.Tensor, ground_truth: torch.Tensor) -> torch.Tensor:
    _same_shape(generated, ground_truth, "recon_l1")
    return (generated - ground_truth).abs().mean()


def semantic_consistency(e_cond: torch.Tensor, e_gen: torch.Tensor) -> torch.Tensor:
    _same_shape(e_cond, e_gen, "semantic_consistency")
    return (e_cond - e_gen).abs().mean()


def _sqdist(u, v):
    return ((u - v) ** 2).sum(dim=-1)


def quartet_loss(anchor, positive, neg1, neg2, margins: Margins = Margins(), form: str = "printed") -> torch.Tensor:
    """Quartet loss, averaged over the batch.

    ``printed``: max(2 d(a,p) - d(a,n1) - d(n2,n1), tau1) + max(d(a,p), tau2),
    which is floored at tau1 + tau2. ``hinge``: the zero-floored variant
    max(2 d(a,p) - d(a,n1) - d(n2,n1) + tau1, 0) + max(d(a,p) - tau2, 0).
    """
    for other, name in ((positive, "positive"), (neg1, "neg1"), (neg2, "neg2")):
        _same_shape(anchor, other, f"quartet_loss {name}")
    if not margins.tau2 < margins.tau1:
        raise ConfigError("tau2 must be less than tau1")
    d_ap = _sqdist(anchor, positive)
    push = d_ap - _sqdist(anchor, neg1) + d_ap - _sqdist(neg2, neg1)
    if form == "printed":
        t1, t2 = torch.full_like(d_ap, margins.tau1), torch.full_like(d_ap, margins.tau2)
        loss = torch.maximum(push, t1) + torch.maximum(d_ap, t2)
    elif form == "hinge":
        loss = F.relu(push + margins.tau1) + F.relu(d_ap - margins.tau2)
    else:
        raise ConfigError(f"unknown quartet_form {form!r}")
    return loss.mean()


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[label]."""
    if logits.dim() == 1:
        logits, labels = logits[None], torch.as_tensor(labels).reshape(1)
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"id_loss: label out of range for {k} classes")
    return F.cross_entropy(logits, labels)


def total_loss(components: Mapping[str, torch.Tensor | float], weights: LossWeights):
    """Weighted sum; missing components count as zero."""
    def get(name):
        return components.get(name, 0.0)

    return (weights.lambda_gan * (get("L_gan_I") + get("L_gan_P"))
            + weights.lambda_r * get("L_R")
            + weights.lambda_s * get("L_S")
            + weights.lambda_quartet * get("L_quartet")
            + weights.lambda_id * get("L_id"))
