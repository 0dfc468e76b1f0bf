import copy

import numpy as np
import pytest
import torch

from poseattn import trainer
from poseattn.config import TrainConfig, load_config
from poseattn.losses import recon_l1
from poseattn.synth import build_dataset, load_png
from poseattn.trainer import (LOG_HEADER, AugmentedPool, Batch, DataError, NonFiniteLossError, build_networks,
                              discriminator_step, load_checkpoint, load_train_data, lr_schedule, make_batch,
                              make_optimizers, make_pairs, save_checkpoint, train, train_step)

TINY = dict(channels=8, backbone_dim=32, disc_widths=(8, 16, 16, 16), batch_size=4, epochs=4,
            decay_start_epoch=2, checkpoint_every=2)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    return build_dataset(4, 2, 0, tmp_path_factory.mktemp("tiny"), canvas=(32, 16), num_train_ids=4)


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, **kw}) if not any(k.startswith(("lambda", "tau")) for k in kw) \
        else TrainConfig(**TINY).replace(**kw)


def setup(manifest, cfg):
    data = load_train_data(manifest, cfg)
    nets = build_networks(cfg, len(data.id_map))
    return data, nets, make_optimizers(nets, cfg.base_lr), AugmentedPool(data.images, data.labels, 16)


# --------------------------------------------------------------------------- schedule


def test_schedule_paper_preset_points():
    cfg = load_config("paper")
    assert lr_schedule(0, cfg) == 0.0002
    assert lr_schedule(399, cfg) == 0.0002
    assert lr_schedule(400, cfg) == 0.0002
    assert lr_schedule(600, cfg) == pytest.approx(0.0001, abs=1e-18)
    assert lr_schedule(800, cfg) == 0.0


def test_schedule_monotone():
    cfg = load_config("paper")
    lrs = [lr_schedule(e, cfg) for e in range(cfg.epochs + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert len(set(lrs[:cfg.decay_start_epoch])) == 1


@pytest.mark.parametrize("epoch", [-1, 801])
def test_schedule_out_of_range(epoch):
    with pytest.raises(ValueError):
        lr_schedule(epoch, load_config("paper"))


def test_schedule_no_decay_phase():
    cfg = TrainConfig(epochs=10, decay_start_epoch=10)
    assert lr_schedule(9, cfg) == cfg.base_lr and lr_schedule(10, cfg) == 0.0


# --------------------------------------------------------------------------- data


def test_pairs_are_ordered_same_identity():
    pairs = make_pairs([0, 0, 1, 1, 1, 2])
    assert len(pairs) == 2 + 6
    ids = np.array([0, 0, 1, 1, 1, 2])
    assert all(ids[a] == ids[b] and a != b for a, b in pairs)
    assert len(make_pairs([0, 0, 1, 1, 1, 2], max_pairs=3)) == 3


def test_train_data(tiny_manifest):
    data = load_train_data(tiny_manifest, tiny_cfg())
    assert data.images.shape == (8, 3, 32, 16) and data.heatmaps.shape == (8, 18, 32, 16)
    assert len(data.pairs) == 8
    assert sorted(data.id_map.values()) == [0, 1, 2, 3]


def test_no_train_split(tmp_path):
    m = build_dataset(2, 2, 0, tmp_path, canvas=(32, 16), num_train_ids=0)
    with pytest.raises(DataError):
        load_train_data(m, tiny_cfg())


def test_pool_includes_generated(tiny_manifest):
    data = load_train_data(tiny_manifest, tiny_cfg())
    pool = AugmentedPool(data.images, data.labels, 4)
    pool.add(torch.zeros(6, 3, 32, 16), torch.tensor([0, 1, 2, 3, 0, 1]))
    assert len(pool.generated) == 4  # FIFO capacity
    rng = np.random.default_rng(0)
    seen = np.zeros(4, bool)
    for _ in range(200):
        imgs, labels, generated = pool.sample(2, rng)
        assert imgs.shape == (8, 3, 32, 16)
        a, p, n1, n2 = labels.reshape(4, 2)
        assert (a == p).all() and (n1 != a).all() and (n2 != a).all() and (n2 != n1).all()
        seen |= generated.reshape(4, 2).any(1)
    assert seen.all()


# --------------------------------------------------------------------------- steps


def test_step_deterministic(tiny_manifest):
    cfg = tiny_cfg()
    reports = []
    for _ in range(2):
        data, nets, opts, pool = setup(tiny_manifest, cfg)
        torch.manual_seed(0)
        batch = make_batch(data, np.arange(4))
        reports.append([train_step(batch, nets, opts, cfg, pool, np.random.default_rng(1), s) for s in range(2)])
    assert reports[0] == reports[1]


def test_report_total_accounting(tiny_manifest):
    cfg = tiny_cfg()
    data, nets, opts, pool = setup(tiny_manifest, cfg)
    r = train_step(make_batch(data, np.arange(4)), nets, opts, cfg, pool, np.random.default_rng(0))
    assert r.total == pytest.approx(trainer.total_loss(r.components(), cfg.weights), rel=1e-12)
    assert all(v > 0 for v in r.components().values())
    assert r.log_line().count(",") == LOG_HEADER.count(",")


def test_only_reconstruction_contributes(tiny_manifest):
    cfg = tiny_cfg(use_d_appearance=False, use_d_pose=False, use_semantic_loss=False,
                   lambda_quartet=0.0, lambda_id=0.0)
    data, nets, opts, pool = setup(tiny_manifest, cfg)
    batch = make_batch(data, np.arange(4))
    ref = copy.deepcopy(nets)
    r = train_step(batch, nets, opts, cfg, pool, np.random.default_rng(0))
    assert (r.L_gan_I, r.L_gan_P, r.L_S, r.L_quartet, r.L_id) == (0.0, 0.0, 0.0, 0.0, 0.0)
    for p in list(nets.reid.parameters()) + nets.discriminator_parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    # generator gradient equals that of lambda_r * L_R alone
    out = ref.generator(batch.img_c, batch.hm_c, batch.hm_t).image
    (cfg.weights.lambda_r * recon_l1(out, batch.img_t)).backward()
    for p, q in zip(nets.generator.parameters(), ref.generator.parameters()):
        assert torch.allclose(p.grad, q.grad, atol=1e-7)


def test_discriminator_phase_detached(tiny_manifest):
    cfg = tiny_cfg()
    data, nets, opts, _ = setup(tiny_manifest, cfg)
    batch = make_batch(data, np.arange(4))
    fake = nets.generator(batch.img_c, batch.hm_c, batch.hm_t).image
    before = [p.detach().clone() for p in nets.generator_parameters()]
    discriminator_step(batch, fake, nets, opts.discriminator, cfg)
    assert all(p.grad is None for p in nets.generator_parameters())
    assert all(torch.equal(a, p) for a, p in zip(before, nets.generator_parameters()))
    assert any(p.grad is not None for p in nets.discriminator_parameters())


def test_nan_component_aborts(tiny_manifest, monkeypatch):
    cfg = tiny_cfg()
    data, nets, opts, pool = setup(tiny_manifest, cfg)
    monkeypatch.setattr(trainer, "recon_l1", lambda a, b: (a - b).abs().mean() * float("nan"))
    with pytest.raises(NonFiniteLossError, match="L_R"):
        train_step(make_batch(data, np.arange(4)), nets, opts, cfg, pool, np.random.default_rng(0))


def test_missing_target(tiny_manifest):
    cfg = tiny_cfg()
    data, nets, opts, pool = setup(tiny_manifest, cfg)
    b = make_batch(data, np.arange(4))
    with pytest.raises(DataError):
        train_step(Batch(b.img_c, b.hm_c, b.hm_t, None, b.labels), nets, opts, cfg, pool)


# --------------------------------------------------------------------------- checkpoints and loop


def test_checkpoint_round_trip(tiny_manifest, tmp_path):
    cfg = tiny_cfg()
    data, nets, opts, pool = setup(tiny_manifest, cfg)
    train_step(make_batch(data, np.arange(4)), nets, opts, cfg, pool, np.random.default_rng(0))
    save_checkpoint(tmp_path / "ckpt_00001", nets, opts, 1, cfg, {"id_map": data.id_map})
    ck = load_checkpoint(tmp_path / "ckpt_00001")
    assert ck.cfg == cfg and ck.epoch == 1 and ck.extra["id_map"] == data.id_map
    assert (tmp_path / "ckpt_00001.cfg").read_text() == cfg.to_text()
    nets.eval()
    b = make_batch(data, np.arange(4))
    with torch.no_grad():
        assert torch.equal(nets.generator(b.img_c, b.hm_c, b.hm_t).image, ck.nets.generator(b.img_c, b.hm_c, b.hm_t).image)
        assert torch.equal(nets.reid(b.img_c)[1], ck.nets.reid(b.img_c)[1])
        assert torch.equal(nets.d_pose(b.hm_t, b.img_t), ck.nets.d_pose(b.hm_t, b.img_t))


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")


def test_train_outputs(tiny_manifest, tmp_path):
    cfg = tiny_cfg()
    res = train(tiny_manifest, cfg, tmp_path)
    assert [p.name for p in res.checkpoints] == ["ckpt_00000", "ckpt_00002", "ckpt_00004"]
    assert all(p.with_name(p.name + ".cfg").exists() for p in res.checkpoints)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == LOG_HEADER and len(lines) == 1 + len(res.history) == 1 + 4 * 2
    grid = load_png(tmp_path / "samples_00004.png")
    assert grid.shape == (3, 8 * 32, 4 * 16)
    assert lines[1].split(",")[0] == "0"
    lrs = [r.lr for r in res.history]
    assert lrs[0] == cfg.base_lr and lrs[-1] < cfg.base_lr


def test_train_deterministic(tiny_manifest, tmp_path):
    cfg = tiny_cfg(epochs=2, decay_start_epoch=1)
    a = train(tiny_manifest, cfg, tmp_path / "a").history
    b = train(tiny_manifest, cfg, tmp_path / "b").history
    assert a == b


def test_max_steps(tiny_manifest, tmp_path):
    res = train(tiny_manifest, tiny_cfg(max_steps=3), tmp_path)
    assert len(res.history) == 3
    assert res.checkpoints[-1].name == "ckpt_00002"
