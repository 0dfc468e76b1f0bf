"""Joint training of the generator, re-ID heads and both discriminators."""
from __future__ import annotations

import collections
import colorsys
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from poseattn.config import TrainConfig, parse_config_dict
from poseattn.discriminators import adversarial_value, generator_adversarial
from poseattn.losses import id_loss, quartet_loss, recon_l1, semantic_consistency, total_loss
from poseattn.models import Networks, NetworkSpec
from poseattn.posecodec import NUM_JOINTS, default_sigma, keypoints_to_heatmap, load_keypoints
from poseattn.reid import QuartetSampler
from poseattn.seeding import seed_torch, substream
from poseattn.synth import DatasetManifest, load_png, save_png

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LOG_HEADER = "step,lr,L_gan_I,L_gan_P,L_R,L_S,L_quartet,L_id,total"
MASK_LOG_HEADER = "step,paan_min,paan_max,pagn_min,pagn_max"


class DataError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``base_lr``, then linear decay reaching 0 at ``epoch == cfg.epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.decay_start_epoch:
        return cfg.base_lr
    span = cfg.epochs - cfg.decay_start_epoch
    if span == 0:
        return 0.0
    return cfg.base_lr * (cfg.epochs - epoch) / span


# --------------------------------------------------------------------------- data


@dataclass
class TrainData:
    images: torch.Tensor  # (N, 3, H, W)
    heatmaps: torch.Tensor  # (N, 18, H, W)
    keypoints: list
    labels: torch.Tensor  # (N,) class index
    pairs: np.ndarray  # (P, 2) condition, target indices into images
    id_map: dict[int, int]
    canvas: tuple[int, int]


def load_split(manifest: DatasetManifest, split: str, sigma: float | None = None):
    records = manifest.split(split)
    if not records:
        return None
    canvas = tuple(manifest.canvas)
    sigma = sigma or default_sigma(canvas)
    imgs, hms, kps = [], [], []
    for r in records:
        imgs.append(load_png(manifest.resolve(r.image_path)))
        k = load_keypoints(manifest.resolve(r.keypoints_path), canvas)
        kps.append(k)
        hms.append(keypoints_to_heatmap(k, canvas, sigma))
    return records, torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(hms)), kps


def make_pairs(identity_ids, max_pairs: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """All ordered (condition, target) pairs of distinct images of one identity."""
    ids = np.asarray(identity_ids)
    pairs = [(i, j) for i in range(len(ids)) for j in range(len(ids)) if i != j and ids[i] == ids[j]]
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    if max_pairs and len(pairs) > max_pairs:
        rng = rng or np.random.default_rng(0)
        pairs = pairs[np.sort(rng.choice(len(pairs), max_pairs, replace=False))]
    return pairs


def load_train_data(manifest: DatasetManifest, cfg: TrainConfig) -> TrainData:
    loaded = load_split(manifest, "train", cfg.sigma or None)
    if loaded is None:
        raise DataError("manifest has no train split")
    records, imgs, hms, kps = loaded
    ids = [r.identity_id for r in records]
    id_map = {i: k for k, i in enumerate(sorted(set(ids)))}
    labels = torch.tensor([id_map[i] for i in ids])
    pairs = make_pairs(ids, cfg.max_pairs, substream(cfg.seed, "pairs"))
    if len(pairs) == 0:
        raise DataError("no identity in the train split has two images")
    return TrainData(imgs, hms, kps, labels, pairs, id_map, tuple(manifest.canvas))


class Batch(NamedTuple):
    img_c: torch.Tensor
    hm_c: torch.Tensor
    hm_t: torch.Tensor
    img_t: torch.Tensor | None
    labels: torch.Tensor


def make_batch(data: TrainData, pair_idx) -> Batch:
    c, t = data.pairs[pair_idx, 0], data.pairs[pair_idx, 1]
    return Batch(data.images[c], data.heatmaps[c], data.heatmaps[t], data.images[t], data.labels[c])


class AugmentedPool:
    """Real training images plus a FIFO of generated ones, for quartet draws."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, capacity: int = 256):
        self.real_images = images
        self.real_labels = labels
        self.generated = collections.deque(maxlen=capacity)

    def add(self, images: torch.Tensor, labels: torch.Tensor) -> None:
        for img, lab in zip(images.detach(), labels):
            self.generated.append((img, int(lab)))

    def sample(self, n: int, rng: np.random.Generator):
        n_real = len(self.real_labels)
        labels = self.real_labels.tolist() + [lab for _, lab in self.generated]
        sampler = QuartetSampler(list(range(len(labels))), labels)
        idx = np.array([sampler.sample_indices(rng) for _ in range(n)]).T.reshape(-1)  # role-major
        imgs = torch.stack([self.real_images[i] if i < n_real else self.generated[i - n_real][0] for i in idx])
        return imgs, torch.tensor([labels[i] for i in idx]), idx >= n_real


# --------------------------------------------------------------------------- steps


@dataclass
class LossReport:
    step: int
    lr: float
    L_gan_I: float
    L_gan_P: float
    L_R: float
    L_S: float
    L_quartet: float
    L_id: float
    total: float
    D_I: float = 0.0
    D_P: float = 0.0
    paan_min: float = math.nan
    paan_max: float = math.nan
    pagn_min: float = math.nan
    pagn_max: float = math.nan

    def components(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("L_gan_I", "L_gan_P", "L_R", "L_S", "L_quartet", "L_id")}

    def log_line(self) -> str:
        vals = [self.step, self.lr, *self.components().values(), self.total]
        return ",".join([str(vals[0])] + [f"{v:.6g}" for v in vals[1:]])

    def mask_line(self) -> str:
        return f"{self.step},{self.paan_min:.6g},{self.paan_max:.6g},{self.pagn_min:.6g},{self.pagn_max:.6g}"


class Optimizers(NamedTuple):
    generator: torch.optim.Optimizer
    discriminator: torch.optim.Optimizer


def make_optimizers(nets: Networks, lr: float) -> Optimizers:
    return Optimizers(
        torch.optim.Adam(nets.generator_parameters(), lr=lr, betas=(0.5, 0.999), foreach=True),
        torch.optim.Adam(nets.discriminator_parameters(), lr=lr, betas=(0.5, 0.999), foreach=True),
    )


def set_lr(opts: Optimizers, lr: float) -> None:
    for opt in opts:
        for group in opt.param_groups:
            group["lr"] = lr


def _check_finite(values: dict[str, torch.Tensor]) -> None:
    for name, v in values.items():
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(f"non-finite loss in component {name}")


def score_pair(d, cond: torch.Tensor, real: torch.Tensor, fake: torch.Tensor):
    """Real and fake scores from separate forward passes."""
    return d(cond, real), d(cond, fake)


def discriminator_step(batch: Batch, fake: torch.Tensor, nets: Networks, opt, cfg: TrainConfig) -> dict:
    """Ascend the adversarial objectives with the generator output detached."""
    fake = fake.detach()
    values = {}
    if cfg.use_d_appearance:
        values["D_I"] = adversarial_value(*score_pair(nets.d_app, batch.img_c, batch.img_t, fake))
    if cfg.use_d_pose:
        values["D_P"] = adversarial_value(*score_pair(nets.d_pose, batch.hm_t, batch.img_t, fake))
    if not values:
        return {}
    _check_finite(values)
    opt.zero_grad(set_to_none=True)
    (-sum(values.values())).backward()
    opt.step()
    return {k: float(v.detach()) for k, v in values.items()}


def generator_losses(batch: Batch, fake: torch.Tensor, nets: Networks, cfg: TrainConfig,
                     pool: AugmentedPool | None, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    """Components of the weighted objective; terms that are switched off are omitted."""
    w = cfg.weights
    comps: dict[str, torch.Tensor] = {}
    if cfg.use_d_appearance and w.lambda_gan > 0:
        comps["L_gan_I"] = generator_adversarial(nets.d_app(batch.img_c, fake), cfg.gan_form)
    if cfg.use_d_pose and w.lambda_gan > 0:
        comps["L_gan_P"] = generator_adversarial(nets.d_pose(batch.hm_t, fake), cfg.gan_form)
    if w.lambda_r > 0:
        comps["L_R"] = recon_l1(fake, batch.img_t)
    if cfg.use_semantic_loss and w.lambda_s > 0:
        comps["L_S"] = semantic_consistency(nets.reid.backbone(batch.img_c), nets.reid.backbone(fake))
    if pool is not None and (w.lambda_quartet > 0 or w.lambda_id > 0):
        imgs, labels, _ = pool.sample(len(batch.labels), rng)
        feat, emb, logits = nets.reid(imgs)
        if w.lambda_quartet > 0:
            a, p, n1, n2 = emb.chunk(4)
            comps["L_quartet"] = quartet_loss(a, p, n1, n2, cfg.margins, cfg.quartet_form)
        if w.lambda_id > 0:
            comps["L_id"] = id_loss(logits, labels)
    return comps


def _mask_range(masks):
    if not masks:
        return math.nan, math.nan
    return min(float(m.detach().min()) for m in masks), max(float(m.detach().max()) for m in masks)


def train_step(batch: Batch, nets: Networks, opts: Optimizers, cfg: TrainConfig,
               pool: AugmentedPool | None = None, rng: np.random.Generator | None = None,
               step: int = 0) -> LossReport:
    """One discriminator update followed by one generator/re-ID update."""
    if batch.img_t is None:
        raise DataError("batch is missing ground-truth target images")
    rng = rng if rng is not None else substream(cfg.seed, "quartets")
    nets.train()
    out = nets.generator(batch.img_c, batch.hm_c, batch.hm_t)
    d_vals = discriminator_step(batch, out.image, nets, opts.discriminator, cfg)

    comps = generator_losses(batch, out.image, nets, cfg, pool, rng)
    _check_finite(comps)
    total = total_loss(comps, cfg.weights)
    opts.generator.zero_grad(set_to_none=True)
    if torch.is_tensor(total) and total.requires_grad:
        total.backward()
        opts.generator.step()
    if pool is not None:
        pool.add(out.image, batch.labels)

    vals = {k: float(comps[k].detach()) if k in comps else 0.0 for k in ("L_gan_I", "L_gan_P", "L_R", "L_S", "L_quartet", "L_id")}
    paan = _mask_range(out.paan_masks)
    pagn = _mask_range(out.pagn_masks)
    return LossReport(step, opts.generator.param_groups[0]["lr"], **vals,
                      total=float(total_loss(vals, cfg.weights)),
                      D_I=d_vals.get("D_I", 0.0), D_P=d_vals.get("D_P", 0.0),
                      paan_min=paan[0], paan_max=paan[1], pagn_min=pagn[0], pagn_max=pagn[1])


# --------------------------------------------------------------------------- checkpoints


def build_networks(cfg: TrainConfig, num_ids: int) -> Networks:
    seed_torch(cfg.seed, "init")
    spec = NetworkSpec(num_ids=num_ids, channels=cfg.channels, blocks=cfg.blocks_n,
                       backbone_dim=cfg.backbone_dim, disc_widths=cfg.disc_widths)
    return Networks(spec)


def checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / f"ckpt_{epoch:05d}"


def save_checkpoint(path: Path, nets: Networks, opts: Optimizers | None, epoch: int, cfg: TrainConfig,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    blob = {
        "format_version": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "config": cfg.to_flat(),
        "network": nets.spec.to_dict(),
        "state": {name: mod.state_dict() for name, mod in nets.named_children()},
        "optim": {k: o.state_dict() for k, o in opts._asdict().items()} if opts else None,
        "extra": extra or {},
    }
    torch.save(blob, path)
    path.with_name(path.name + ".cfg").write_text(cfg.to_text())
    return path


@dataclass
class Checkpoint:
    nets: Networks
    cfg: TrainConfig
    epoch: int
    extra: dict
    optim_state: dict | None


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {blob.get('format_version')!r}")
    cfg = parse_config_dict(blob["config"])
    nets = Networks(NetworkSpec.from_dict(blob["network"]))
    for name, mod in nets.named_children():
        mod.load_state_dict(blob["state"][name])
    nets.eval()
    return Checkpoint(nets, cfg, blob["epoch"], blob["extra"], blob["optim"])


# --------------------------------------------------------------------------- sample grids

_JOINT_COLORS = np.array([colorsys.hsv_to_rgb(k / NUM_JOINTS, 1.0, 1.0) for k in range(NUM_JOINTS)])


def render_heatmap(hm: np.ndarray) -> np.ndarray:
    """(18, H, W) heatmap -> (3, H, W) image in [-1, 1], one hue per joint."""
    hm = np.asarray(hm, dtype=np.float64)
    weights = hm / np.maximum(hm.sum(axis=0, keepdims=True), 1e-8)
    color = np.einsum("khw,kc->chw", weights, _JOINT_COLORS)
    strength = hm.max(axis=0)
    return (color * strength * 2.0 - 1.0).astype(np.float32)


@torch.no_grad()
def generate(nets: Networks, img_c, hm_c, hm_t) -> torch.Tensor:
    was_training = nets.training
    nets.eval()
    try:
        return nets.generator(img_c, hm_c, hm_t).image
    finally:
        nets.train(was_training)


def sample_grid(nets: Networks, batch: Batch, path: Path) -> Path:
    """Rows: condition image | condition pose | target pose | generated image."""
    fake = generate(nets, batch.img_c, batch.hm_c, batch.hm_t)
    rows = []
    for i in range(len(fake)):
        cells = [batch.img_c[i].numpy(), render_heatmap(batch.hm_c[i].numpy()),
                 render_heatmap(batch.hm_t[i].numpy()), fake[i].numpy()]
        rows.append(np.concatenate(cells, axis=2))
    save_png(np.concatenate(rows, axis=1), path)
    return path


# --------------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    checkpoints: list[Path]
    history: list[LossReport]
    nets: Networks
    data: TrainData
    out_dir: Path
    initial_nets: Networks | None = field(default=None, repr=False)


def train(manifest: DatasetManifest, cfg: TrainConfig, out_dir: str | Path, keep_initial: bool = False) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_train_data(manifest, cfg)
    nets = build_networks(cfg, len(data.id_map))
    initial = None
    if keep_initial:
        initial = build_networks(cfg, len(data.id_map))
        initial.load_state_dict(nets.state_dict())
    opts = make_optimizers(nets, cfg.base_lr)
    seed_torch(cfg.seed, "train")
    batch_rng = substream(cfg.seed, "batches")
    quartet_rng = substream(cfg.seed, "quartets")
    pool = AugmentedPool(data.images, data.labels, cfg.pool_size)
    extra = {"id_map": data.id_map}
    grid_batch = make_batch(data, np.arange(min(8, len(data.pairs))))

    checkpoints = [save_checkpoint(checkpoint_path(out, 0), nets, opts, 0, cfg, extra)]
    history: list[LossReport] = []
    step = 0
    log_f = open(out / "train_log.csv", "w")
    mask_f = open(out / "mask_log.csv", "w")
    try:
        print(LOG_HEADER, file=log_f)
        print(MASK_LOG_HEADER, file=mask_f)
        epoch = 0
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            set_lr(opts, lr)
            order = batch_rng.permutation(len(data.pairs))
            n_batches = max(1, len(order) // cfg.batch_size)
            for b in range(n_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                report = train_step(make_batch(data, idx), nets, opts, cfg, pool, quartet_rng, step)
                history.append(report)
                print(report.log_line(), file=log_f)
                print(report.mask_line(), file=mask_f)
                step += 1
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            done = epoch + 1
            last = done == cfg.epochs or (cfg.max_steps and step >= cfg.max_steps)
            if done % cfg.checkpoint_every == 0 or last:
                path = save_checkpoint(checkpoint_path(out, done), nets, opts, done, cfg, extra)
                checkpoints.append(path)
                sample_grid(nets, grid_batch, out / f"samples_{done:05d}.png")
                log.info("epoch %d step %d: %s", done, step, report.log_line())
            if last:
                break
    finally:
        log_f.close()
        mask_f.close()
    return TrainResult(checkpoints, history, nets, data, out, initial)
