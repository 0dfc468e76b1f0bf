"""Network containers binding encoders, PAAN, PAGN, re-ID heads and discriminators."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from poseattn.discriminators import AppearanceDiscriminator, PoseDiscriminator
from poseattn.encoders import AppearanceEncoder, PoseEncoder, SemanticEncoder
from poseattn.paan import PAAN
from poseattn.pagn import PAGN
from poseattn.reid import EMBED_DIM, EmbeddingHead, IdentityClassifier


@dataclass(frozen=True)
class NetworkSpec:
    num_ids: int
    channels: int = 64
    blocks: int = 4
    backbone_dim: int = 256
    embed_dim: int = EMBED_DIM
    disc_widths: tuple[int, ...] = (64, 128, 256, 512)

    def to_dict(self):
        d = asdict(self)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["disc_widths"] = tuple(d["disc_widths"])
        return cls(**d)


class GeneratorOutput(NamedTuple):
    image: torch.Tensor
    paan_masks: list[torch.Tensor]
    pagn_masks: list[torch.Tensor]


class PoseTransferGenerator(nn.Module):
    def __init__(self, channels: int = 64, blocks: int = 4):
        super().__init__()
        self.enc_app = AppearanceEncoder(channels)
        self.enc_pose = PoseEncoder(channels)
        self.paan = PAAN(channels, blocks)
        self.pagn = PAGN(channels, blocks)

    def forward(self, img_c: torch.Tensor, hm_c: torch.Tensor, hm_t: torch.Tensor) -> GeneratorOutput:
        state = self.paan(self.enc_app(img_c), self.enc_pose(hm_c))
        img, pagn_state = self.pagn(state.f_i, state.f_p, self.enc_pose(hm_t))
        return GeneratorOutput(img, state.masks, pagn_state.masks)


class ReidNet(nn.Module):
    """Semantic backbone E with the embedding and identity heads on top."""

    def __init__(self, num_ids: int, backbone_dim: int = 256, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.backbone = SemanticEncoder(backbone_dim)
        self.embed = EmbeddingHead(backbone_dim, embed_dim)
        self.classifier = IdentityClassifier(num_ids, backbone_dim)

    def forward(self, img: torch.Tensor):
        feat = self.backbone(img)
        return feat, self.embed(feat), self.classifier(feat)


class Networks(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.generator = PoseTransferGenerator(spec.channels, spec.blocks)
        self.reid = ReidNet(spec.num_ids, spec.backbone_dim, spec.embed_dim)
        self.d_app = AppearanceDiscriminator(spec.disc_widths)
        self.d_pose = PoseDiscriminator(spec.disc_widths)

    def generator_parameters(self):
        return list(self.generator.parameters()) + list(self.reid.parameters())

    def discriminator_parameters(self):
        return list(self.d_app.parameters()) + list(self.d_pose.parameters())
