import copy
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from hpmseg.trainer import (
    Pretrainer,
    TrainingError,
    _seed,
    build_segmentation_net,
    finetune,
    layer_decay_groups,
    layer_lrs,
    load_encoder_state,
    load_segmentation,
    lr_at,
    make_finetune_optimizer,
    predict_logits,
    pretrain_step,
    save_segmentation,
    window_starts,
)
from hpmseg.volume_io import PhantomSpec, generate_phantom, preprocess


def phantoms(n, grid=32, organs=2, seed0=0):
    return [preprocess(generate_phantom(PhantomSpec(grid, organs, seed=seed0 + i)), 0, 1)
            for i in range(n)]


def batch_of(vols):
    return torch.from_numpy(np.stack([v.data for v in vols])[:, None])


def test_lr_endpoints():
    assert lr_at(0, 100, 10, 1.0) == 0.0
    assert lr_at(10, 100, 10, 1.0) == 1.0
    assert lr_at(55, 100, 10, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert lr_at(100, 100, 10, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(5, 100, 10, 1.0) == 0.5


def test_lr_past_end():
    with pytest.raises(ValueError):
        lr_at(101, 100, 10, 1.0)


def test_layer_lrs():
    assert layer_lrs(2.0, 1.0, 4) == [2.0] * 5
    rates = layer_lrs(1.0, 0.75, 2)
    assert rates[0] == 0.5625 and rates[1] == 0.75 and rates[2] == 1.0


def test_layer_decay_assignment(tiny_cfg):
    net = build_segmentation_net(tiny_cfg, 3)
    groups = layer_decay_groups(net, tiny_cfg.finetune)
    scale_of = {}
    for g in groups:
        for p in g["params"]:
            scale_of[id(p)] = g["lr_scale"]
    named = dict(net.named_parameters())
    d = tiny_cfg.finetune.layer_decay
    assert scale_of[id(named["encoder.patch_embed.weight"])] == pytest.approx(d ** 2)
    assert scale_of[id(named["encoder.blocks.0.attn.qkv.weight"])] == pytest.approx(d ** 2)
    assert scale_of[id(named["encoder.blocks.1.mlp.fc1.weight"])] == pytest.approx(d)
    assert scale_of[id(named["encoder.norm.weight"])] == 1.0
    assert scale_of[id(named["out.weight"])] == 1.0
    no_decay = [g for g in groups if g["weight_decay"] == 0.0]
    assert any(named["out.bias"] is p for g in no_decay for p in g["params"])


def test_first_epoch_is_random_masking(tiny_cfg):
    pt = Pretrainer(tiny_cfg)
    rngs = [_seed(0, 1, 0, 0, b) for b in range(2)]
    out = pretrain_step(pt.pair, pt.optimizer, batch_of(phantoms(2)), 0, tiny_cfg, 1e-4, rngs)
    assert out["alpha"] == 0.0 and out["guided_count"] == 0
    assert out["masked_count"] == 6 and out["N"] == 8


def test_guided_counts_follow_schedule(tiny_cfg):
    tiny_cfg.mask.alpha0 = 0.5
    pt = Pretrainer(tiny_cfg)
    rngs = [_seed(0, 1, 0, 0, b) for b in range(2)]
    out = pretrain_step(pt.pair, pt.optimizer, batch_of(phantoms(2)), 0, tiny_cfg, 1e-4, rngs)
    assert out["guided_count"] == 3 and out["random_count"] == 3


def test_unguided_flag_pins_alpha(tiny_cfg):
    tiny_cfg.mask.alpha0 = 0.5
    tiny_cfg.mask.guided = False
    pt = Pretrainer(tiny_cfg)
    rngs = [_seed(0, 1, 0, 0, b) for b in range(2)]
    out = pretrain_step(pt.pair, pt.optimizer, batch_of(phantoms(2)), 1, tiny_cfg, 1e-4, rngs)
    assert out["guided_count"] == 0


def _trajectory(cfg, vols, steps=3):
    pt = Pretrainer(cfg)
    out = []
    for s in range(steps):
        rngs = [_seed(0, 1, 0, s, b) for b in range(2)]
        out.append(pretrain_step(pt.pair, pt.optimizer, batch_of(vols), 0, cfg, 1e-3, rngs))
    return out


def test_three_step_determinism(tiny_cfg):
    vols = phantoms(2)
    assert _trajectory(tiny_cfg, vols) == _trajectory(tiny_cfg, vols)


def test_nan_aborts_with_snapshot(tiny_cfg):
    pt = Pretrainer(tiny_cfg)
    with torch.no_grad():
        pt.pair.student.reconstructor.head.bias[0] = float("nan")
    rngs = [_seed(0, 1, 0, 0, b) for b in range(2)]
    with pytest.raises(TrainingError) as exc:
        pretrain_step(pt.pair, pt.optimizer, batch_of(phantoms(2)), 0, tiny_cfg, 1e-3, rngs)
    assert exc.value.snapshot["epoch"] == 0 and "l_rec" in exc.value.snapshot


def test_nonfinite_input_aborts(tiny_cfg):
    pt = Pretrainer(tiny_cfg)
    batch = batch_of(phantoms(2))
    batch[0, 0, 0, 0, 0] = float("nan")
    rngs = [_seed(0, 1, 0, 0, b) for b in range(2)]
    with pytest.raises(TrainingError):
        pretrain_step(pt.pair, pt.optimizer, batch, 0, tiny_cfg, 1e-3, rngs)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(epochs=4)
    vols = [v.data for v in phantoms(4)]
    full = Pretrainer(cfg).fit(vols)

    part = Pretrainer(cfg).fit(vols, epochs=2)
    part.save(tmp_path / "mid.ckpt")
    resumed = Pretrainer.load(tmp_path / "mid.ckpt").fit(vols)
    assert resumed.epoch == 4 and resumed.global_step == full.global_step
    assert resumed.history == full.history
    for a, b in zip(full.pair.teacher.parameters(), resumed.pair.teacher.parameters()):
        assert torch.equal(a, b)


def test_fit_writes_checkpoints_and_log(tmp_path, tiny_cfg):
    vols = [v.data for v in phantoms(2)]
    Pretrainer(tiny_cfg).fit(vols, log_path=tmp_path / "m.jsonl", ckpt_dir=tmp_path)
    assert (tmp_path / "last.ckpt").exists() and (tmp_path / "best.ckpt").exists()
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 2


def test_max_steps_stops_early(tiny_cfg):
    pt = Pretrainer(tiny_cfg).fit([v.data for v in phantoms(4)], max_steps=2)
    assert pt.global_step == 2


def test_encoder_round_trip(tmp_path, tiny_cfg):
    pt = Pretrainer(tiny_cfg).fit([v.data for v in phantoms(2)], epochs=1)
    pt.save(tmp_path / "a.ckpt")
    state, _ = load_encoder_state(tmp_path / "a.ckpt")
    net = build_segmentation_net(tiny_cfg, 3, state)
    save_segmentation(tmp_path / "s.ckpt", net, tiny_cfg)
    net2, _, _ = load_segmentation(tmp_path / "s.ckpt")
    for k, v in pt.pair.student.encoder.state_dict().items():
        assert torch.equal(net2.encoder.state_dict()[k], v)


def test_frozen_encoder_only_decoder_moves(tiny_cfg):
    tiny_cfg.finetune.freeze_encoder = True
    vols = phantoms(2)
    net = build_segmentation_net(tiny_cfg, 3)
    before = copy.deepcopy(net.state_dict())
    tiny_cfg.finetune.epochs = 1
    finetune(net, [(v.data, v.labels) for v in vols], tiny_cfg, max_steps=1)
    after = net.state_dict()
    changed_dec = False
    for k in before:
        if k.startswith("encoder."):
            assert torch.equal(before[k], after[k]), k
        elif not torch.equal(before[k], after[k]):
            changed_dec = True
    assert changed_dec


def test_class_count_mismatch(tiny_cfg):
    v = phantoms(1, organs=3)[0]
    net = build_segmentation_net(tiny_cfg, 3)
    with pytest.raises(ValueError):
        finetune(net, [(v.data, v.labels)], tiny_cfg)


def test_window_starts():
    assert window_starts(32, 32) == [0]
    assert window_starts(64, 32) == [0, 32]
    assert window_starts(80, 32) == [0, 32, 48]


def test_sliding_window_on_larger_volume(tiny_cfg):
    net = build_segmentation_net(tiny_cfg, 3)
    data = np.random.default_rng(0).random((48, 32, 32)).astype(np.float32)
    logits = predict_logits(net, data)
    assert logits.shape == (3, 48, 32, 32)
    with torch.no_grad():
        net.eval()
        ref = net(torch.from_numpy(data[16:48].copy())[None, None])[0]
    torch.testing.assert_close(logits[:, 16:], ref)


@pytest.mark.slow
def test_overfit_single_phantom():
    cfg = tiny_config(epochs=120)
    cfg.model.feature_size = 8
    cfg.finetune.batch_size = 1
    cfg.finetune.droppath_prob = 0.0
    cfg.finetune.base_lr = 3e-3
    cfg.finetune.weight_decay = 0.0
    cfg.data.flip_prob = 0.0
    v = phantoms(1, seed0=5)[0]
    net = build_segmentation_net(cfg, 3)
    net, hist = finetune(net, [(v.data, v.labels)], cfg, val=[(v.data, v.labels)])
    assert max(h["mean_dsc"] for h in hist) >= 0.99


@pytest.mark.slow
def test_moving_average_loss_decreases():
    cfg = tiny_config(grid=64, epochs=30)
    m = cfg.model
    m.embed_dim, m.depth, m.num_heads = 96, 4, 4
    m.decoder_dim, m.decoder_depth, m.decoder_heads = 128, 2, 4
    m.predictor_dim, m.predictor_depth, m.predictor_heads = 64, 1, 2
    cfg.data.num_organs = 4
    cfg.pretrain.batch_size = 4
    cfg.pretrain.base_lr = 1e-3
    cfg.mask.guided = False
    vols = [v.data for v in phantoms(16, grid=64, organs=4, seed0=200)]
    hist = Pretrainer(cfg).fit(vols).history
    l = np.array([h["l_rec"] for h in hist])
    ma = np.convolve(l, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) < 0), ma
