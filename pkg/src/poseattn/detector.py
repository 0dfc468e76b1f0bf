"""Small heatmap-regression pose detector for re-detecting joints in rendered or generated images."""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from poseattn.layers import conv_bn_relu, init_weights
from poseattn.posecodec import NUM_JOINTS, Keypoints, default_sigma, keypoints_to_heatmap
from poseattn.seeding import seed_torch, substream
from poseattn.synth import TEMPLATES, draw_identity, render_person, sample_pose, scale_pose

log = logging.getLogger(__name__)



class PoseDetector(nn.Module):
    """Small encoder-decoder emitting one heatmap per joint at half the input resolution.

    Output cell ``(j, i)`` is centered on input pixel ``(2j, 2i)``.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.stem = nn.Sequential(*conv_bn_relu(3, w), *conv_bn_relu(w, 2 * w, stride=2))
        self.down = nn.Sequential(*conv_bn_relu(2 * w, 4 * w, stride=2), *conv_bn_relu(4 * w, 4 * w),
                                  *conv_bn_relu(4 * w, 4 * w))
        self.head = nn.Sequential(*conv_bn_relu(6 * w, 2 * w), nn.Conv2d(2 * w, NUM_JOINTS, 3, padding=1))
        init_weights(self)
        nn.init.kaiming_normal_(self.head[-1].weight, nonlinearity="linear")

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = self.stem(img)
        y = F.interpolate(self.down(x), size=x.shape[2:])
        return self.head(torch.cat([x, y], 1))


def half_res_heatmap(kps: Keypoints, canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    half = Keypoints(kps.xy / 2.0, kps.visible)
    return keypoints_to_heatmap(half, ((h + 1) // 2, (w + 1) // 2), default_sigma(canvas))


def random_sample(rng: np.random.Generator, canvas: tuple[int, int]):
    """One rendered person with its keypoints; appearances skip the dataset separation rule."""
    ident = draw_identity(int(rng.integers(2 ** 31)), 0)
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    pose = scale_pose(sample_pose(int(rng.integers(2 ** 31)), template, canvas), ident.height_scale, canvas)
    return render_person(ident, pose, canvas, int(rng.integers(2))), pose


def make_training_set(n: int, canvas: tuple[int, int], seed: int = 0):
    rng = substream(seed, "detector/data")
    imgs, hms = [], []
    for _ in range(n):
        img, pose = random_sample(rng, canvas)
        imgs.append(img)
        hms.append(half_res_heatmap(pose, canvas))
    return torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(hms))


def _degrade(img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random blur and noise so the detector tolerates generator output."""
    b = img.shape[0]
    k = torch.tensor([0.25, 0.5, 0.25])
    kernel = (k[:, None] * k[None, :]).expand(3, 1, 3, 3)
    blurred = F.conv2d(F.pad(img, (1, 1, 1, 1), mode="replicate"), kernel, groups=3)
    mix = torch.rand(b, 1, 1, 1, generator=gen)
    out = mix * blurred + (1 - mix) * img
    noise = 0.05 * torch.rand(b, 1, 1, 1, generator=gen) * torch.randn(img.shape, generator=gen)
    return (out + noise).clamp(-1, 1)


@dataclasses.dataclass
class DetectorReport:
    steps: int
    final_loss: float
    clean_error_px: float


def train_detector(canvas: tuple[int, int] = (64, 32), samples: int = 3000, steps: int = 1500,
                   batch_size: int = 32, lr: float = 2e-3, seed: int = 0, width: int = 16):
    imgs, hms = make_training_set(samples, canvas, seed)
    seed_torch(seed, "detector/init")
    net = PoseDetector(width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    rng = substream(seed, "detector/batches")
    gen = torch.Generator().manual_seed(seed)
    net.train()
    loss = torch.tensor(0.0)
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(samples, batch_size, replace=False))
        pred = net(_degrade(imgs[idx], gen))
        # heatmap MSE, upweighted near the peaks so the argmax lands precisely
        target = hms[idx]
        loss = ((pred - target) ** 2 * (1 + 10 * target)).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("detector step %d loss %.5f", step, loss.item())
    net.eval()
    err = evaluate_detector(net, canvas, n=200, seed=seed + 1)
    return net, DetectorReport(steps, loss.item(), err)


def _log_parabola_offset(left, mid, right):
    """Sub-cell peak offset in [-0.5, 0.5]; exact when the samples lie on a Gaussian."""
    l, m, r = (v.clamp_min(1e-6).log() for v in (left, mid, right))
    curv = l - 2 * m + r
    off = torch.where(curv < 0, 0.5 * (l - r) / curv.clamp_max(-1e-12), torch.zeros_like(curv))
    return off.clamp(-0.5, 0.5)


@torch.no_grad()
def detect(net: PoseDetector, imgs: torch.Tensor, threshold: float = 0.1) -> list[Keypoints]:
    """Peak cell per joint refined by a log-parabola fit, mapped back to input pixels.

    A joint counts as visible when its peak reaches ``threshold``.
    """
    net.eval()
    hm = net(imgs)
    b, k, h, w = hm.shape
    peak, pos = hm.reshape(b, k, -1).max(dim=-1)
    py, px = pos // w, pos % w
    bi, ki = torch.arange(b)[:, None], torch.arange(k)[None, :]

    def at(y, x):
        return hm[bi, ki, y.clamp(0, h - 1), x.clamp(0, w - 1)]

    c = at(py, px)
    dx = _log_parabola_offset(at(py, px - 1), c, at(py, px + 1))
    dy = _log_parabola_offset(at(py - 1, px), c, at(py + 1, px))
    xy = torch.stack([px + dx, py + dy], dim=-1).double() * 2.0
    return [Keypoints(xy[i].numpy(), (peak[i] >= threshold).numpy()) for i in range(b)]


def joint_error(pred: Keypoints, target: Keypoints) -> np.ndarray:
    """Pixel distances at the joints visible in ``target``."""
    d = np.hypot(*(pred.xy - target.xy).T)
    return d[target.visible]


@torch.no_grad()
def evaluate_detector(net: PoseDetector, canvas: tuple[int, int], n: int = 200, seed: int = 1) -> float:
    rng = substream(seed, "detector/eval")
    samples = [random_sample(rng, canvas) for _ in range(n)]
    imgs = torch.from_numpy(np.stack([s[0] for s in samples]))
    preds = detect(net, imgs)
    return float(np.concatenate([joint_error(p, s[1]) for p, s in zip(preds, samples)]).mean())
