"""Re-identification heads, quartet sampling and CMC/mAP evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
import torch
from torch import nn

from poseattn.layers import ShapeError

EMBED_DIM = 128


class SamplingError(ValueError):
    pass


class EmbeddingHead(nn.Module):
    """One affine layer from backbone features to the 128-d metric space."""

    def __init__(self, in_dim: int = 256, out_dim: int = EMBED_DIM):
        super().__init__()
        self.in_dim = in_dim
        self.fc = nn.Linear(in_dim, out_dim)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.shape[-1] != self.in_dim:
            raise ShapeError(f"EmbeddingHead: expected {self.in_dim}-d features, got {feature.shape[-1]}")
        return self.fc(feature)


class IdentityClassifier(nn.Module):
    """FC(128) -> BN -> dropout(0.5) -> ReLU -> FC(num_ids)."""

    def __init__(self, num_ids: int, in_dim: int = 256, hidden: int = EMBED_DIM, dropout: float = 0.5):
        super().__init__()
        self.in_dim = in_dim
        self.num_ids = num_ids
        self.hidden = nn.Sequential(nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.Dropout(dropout), nn.ReLU())
        self.out = nn.Linear(hidden, num_ids)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.shape[-1] != self.in_dim:
            raise ShapeError(f"IdentityClassifier: expected {self.in_dim}-d features, got {feature.shape[-1]}")
        return self.out(self.hidden(feature))


# --------------------------------------------------------------------------- quartets


@dataclass(frozen=True)
class Quartet:
    anchor: Hashable
    positive: Hashable
    neg1: Hashable
    neg2: Hashable
    labels: tuple[int, int, int, int]


class QuartetSampler:
    """Uniform quartet draws over a pool of ``(ref, identity)`` items.

    The anchor is uniform over items whose identity has a second image, the
    positive uniform over the other images of that identity, and each negative
    uniform over the images of the still-allowed identities.
    """

    def __init__(self, refs: Sequence[Hashable], labels: Sequence[int]):
        if len(refs) != len(labels):
            raise ValueError("refs and labels differ in length")
        self.refs = list(refs)
        self.labels = np.asarray(labels, dtype=np.int64)
        ids = np.unique(self.labels)
        if len(ids) < 3:
            raise SamplingError(f"quartets need at least 3 identities, got {len(ids)}")
        self._by_id = {int(i): np.flatnonzero(self.labels == i) for i in ids}
        self._anchors = np.concatenate([v for v in self._by_id.values() if len(v) >= 2] or [np.array([], int)])
        if len(self._anchors) == 0:
            raise SamplingError("no identity has two images to form a positive pair")

    def sample_indices(self, rng: np.random.Generator) -> tuple[int, int, int, int]:
        a = int(self._anchors[rng.integers(len(self._anchors))])
        la = int(self.labels[a])
        same = self._by_id[la]
        p = int(same[same != a][rng.integers(len(same) - 1)])
        pool1 = np.flatnonzero(self.labels != la)
        n1 = int(pool1[rng.integers(len(pool1))])
        ln1 = int(self.labels[n1])
        pool2 = np.flatnonzero((self.labels != la) & (self.labels != ln1))
        n2 = int(pool2[rng.integers(len(pool2))])
        return a, p, n1, n2

    def sample(self, rng: np.random.Generator) -> Quartet:
        idx = self.sample_indices(rng)
        return Quartet(*(self.refs[i] for i in idx), labels=tuple(int(self.labels[i]) for i in idx))


def sample_quartet(manifest, generated_pool: Sequence[tuple[Hashable, int]], rng: np.random.Generator) -> Quartet:
    """Draw one quartet from the manifest's train split plus generated ``(ref, identity)`` items."""
    refs = [r.image_path for r in manifest.split("train")]
    labels = [r.identity_id for r in manifest.split("train")]
    for ref, label in generated_pool:
        refs.append(ref)
        labels.append(int(label))
    return QuartetSampler(refs, labels).sample(rng)


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class ReidMetrics:
    rank1: float
    rank5: float
    rank10: float
    map: float
    skipped_queries: int = 0

    def to_dict(self):
        return {"rank1": self.rank1, "rank5": self.rank5, "rank10": self.rank10, "map": self.map,
                "skipped_queries": self.skipped_queries}

    def table(self) -> str:
        rows = [("rank-1", self.rank1), ("rank-5", self.rank5), ("rank-10", self.rank10), ("mAP", self.map)]
        lines = [f"{name:<8}{value:>8.1%}" for name, value in rows]
        lines.append(f"{'skipped':<8}{self.skipped_queries:>8d}")
        return "\n".join(lines)


def squared_distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return ((q[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1)


def evaluate(query_embs, query_labels, query_cams, gallery_embs, gallery_labels, gallery_cams,
             topk: tuple[int, ...] = (1, 5, 10)) -> ReidMetrics:
    """Single-query CMC and mAP over squared-L2 rankings.

    Gallery entries sharing both identity and camera with the query are
    dropped. Distance ties keep gallery order (stable sort). Queries with no
    remaining true match are skipped and counted.
    """
    q_lab, q_cam = np.asarray(query_labels), np.asarray(query_cams)
    g_lab, g_cam = np.asarray(gallery_labels), np.asarray(gallery_cams)
    if len(q_lab) == 0 or len(g_lab) == 0:
        raise ValueError("evaluate: query and gallery must be non-empty")
    dist = squared_distances(query_embs, gallery_embs)
    hits = np.zeros(max(topk))
    aps, skipped = [], 0
    for i in range(len(q_lab)):
        order = np.argsort(dist[i], kind="stable")
        keep = ~((g_lab[order] == q_lab[i]) & (g_cam[order] == q_cam[i]))
        match = (g_lab[order] == q_lab[i])[keep]
        if not match.any():
            skipped += 1
            continue
        first = int(np.argmax(match))
        if first < len(hits):
            hits[first:] += 1
        ranks = np.flatnonzero(match) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
    n = len(aps)
    if n == 0:
        return ReidMetrics(0.0, 0.0, 0.0, 0.0, skipped)
    cmc = hits / n
    return ReidMetrics(float(cmc[topk[0] - 1]), float(cmc[topk[1] - 1]), float(cmc[topk[2] - 1]),
                       float(np.mean(aps)), skipped)
