import copy

import numpy as np
import pytest
import torch

from hpmseg.masking import generate_mask
from hpmseg.nets import (
    DecoderConfig,
    EncoderConfig,
    HPMConfig,
    HPMNet,
    ModelPair,
    PatchEncoder,
    Reconstructor,
    SegmentationNet,
    encode,
    ema_update,
    full_positions,
    predict_difficulty,
    reconstruct,
    segment,
    sincos_3d,
    skip_depths,
    visible_positions,
)
from hpmseg.patching import patchify_array


def small_hpm(img=32, patch=16, dim=24, depth=2):
    return HPMConfig(
        encoder=EncoderConfig((img,) * 3, patch, 1, dim, depth, 2),
        reconstructor=DecoderConfig(16, 1, 2),
        predictor=DecoderConfig(12, 1, 2),
    )


def _gather(x, idx):
    return torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))


def test_pos_table_shape_and_padding():
    t = sincos_3d(32, (2, 3, 4))
    assert t.shape == (24, 32)
    assert np.all(t[:, 30:] == 0)
    assert len({row.tobytes() for row in t}) == 24


def test_teacher_path_full_sequence():
    enc = PatchEncoder(EncoderConfig((64,) * 3, 16, 1, 24, 1, 2))
    x = torch.randn(1, 64, 4096)
    assert encode(enc, x, full_positions(1, 64)).shape == (1, 64, 24)


def test_student_encodes_visible_only():
    enc = PatchEncoder(EncoderConfig((64,) * 3, 16, 1, 24, 1, 2))
    m = generate_mask(np.zeros(64), 0.0, 0.75, seed=0)
    mask = torch.from_numpy(m.as_bool())[None]
    vis = visible_positions(mask)
    out = encode(enc, torch.randn(1, vis.shape[1], 4096), vis)
    assert out.shape == (1, 16, 24)


def test_position_count_mismatch():
    enc = PatchEncoder(EncoderConfig((32,) * 3, 16, 1, 24, 1, 2))
    with pytest.raises(ValueError):
        enc(torch.randn(1, 3, 4096), full_positions(1, 4))


def test_permutation_equivariance():
    enc = PatchEncoder(EncoderConfig((16, 16, 4), 4, 1, 24, 2, 2)).double()  # 4x4x1 grid
    x = torch.randn(1, 4, 64, dtype=torch.float64)
    pos = torch.tensor([[0, 3, 7, 12]])
    perm = torch.tensor([2, 0, 3, 1])
    base = enc(x, pos)
    out = enc(x[:, perm], pos[:, perm])
    torch.testing.assert_close(out, base[:, perm], rtol=0, atol=1e-12)


def _toy_decoder():
    enc_cfg = EncoderConfig((8, 8, 4), 4, 1, 12, 1, 2)  # N = 4
    return enc_cfg, Reconstructor(enc_cfg, DecoderConfig(12, 1, 2)).double()


def test_reconstruct_output_count():
    enc_cfg, dec = _toy_decoder()
    mask = torch.tensor([[True, False, True, True]])
    vis = visible_positions(mask)
    out = reconstruct(dec, torch.randn(1, 1, 12, dtype=torch.float64), vis, mask)
    assert out.shape == (1, 3, 64)


def test_reconstruct_rejects_inconsistent_mask():
    _, dec = _toy_decoder()
    mask = torch.tensor([[True, False, True, True]])
    with pytest.raises(ValueError):
        reconstruct(dec, torch.randn(1, 2, 12, dtype=torch.float64), torch.tensor([[1, 2]]), mask)


def test_zero_weight_decoder_trace():
    _, dec = _toy_decoder()
    with torch.no_grad():
        for name, p in dec.named_parameters():
            if name.startswith(("embed", "blocks")):
                p.zero_()
    mask = torch.tensor([[True, False, True, True]])
    vis = visible_positions(mask)
    out = reconstruct(dec, torch.randn(1, 1, 12, dtype=torch.float64), vis, mask)
    # embed = 0 and residual branches = 0, so each masked output is
    # head(norm(mask_token + pos_i)); without positions they would be equal
    with torch.no_grad():
        expected = dec.head(dec.norm(dec.mask_token[0] + dec.pos_embed[[0, 2, 3]]))
        torch.testing.assert_close(out[0], expected, rtol=0, atol=1e-12)
        dec.pos_embed.zero_()
        flat = reconstruct(dec, torch.randn(1, 1, 12, dtype=torch.float64), vis, mask)[0]
    torch.testing.assert_close(flat, flat[:1].expand_as(flat), rtol=0, atol=1e-12)


def test_cross_patch_influence_only_through_attention():
    enc = PatchEncoder(EncoderConfig((8, 8, 4), 4, 1, 12, 1, 2)).double()
    x = torch.randn(1, 4, 64, dtype=torch.float64)
    pos = full_positions(1, 4)
    h = 1e-6

    def probe():
        up, dn = x.clone(), x.clone()
        up[0, 2, 5] += h
        dn[0, 2, 5] -= h
        with torch.no_grad():
            return ((enc(up, pos) - enc(dn, pos)) / (2 * h))[0, 0]

    assert probe().abs().max() > 1e-6
    with torch.no_grad():
        for blk in enc.blocks:
            blk.attn.proj.weight.zero_()
            blk.attn.proj.bias.zero_()
    assert probe().abs().max() == 0.0


def test_difficulty_over_all_patches():
    net = HPMNet(small_hpm())
    x = torch.randn(2, 8, 4096)
    pos = full_positions(2, 8)
    net.eval()
    a = predict_difficulty(net.predictor, net.encoder(x, pos), pos)
    b = predict_difficulty(net.predictor, net.encoder(x, pos), pos)
    assert a.shape == (2, 8)
    assert torch.equal(a, b)


def test_identical_weights_identical_difficulty():
    pair = ModelPair(HPMNet(small_hpm()))
    x = torch.randn(1, 8, 4096)
    pos = full_positions(1, 8)
    pair.student.eval()
    with torch.no_grad():
        s = pair.student.predictor(pair.student.encoder(x, pos), pos)
        t = pair.teacher.predictor(pair.teacher.encoder(x, pos), pos)
    assert torch.equal(s, t)


def _filled_pair(t_val, s_val, m):
    pair = ModelPair(HPMNet(small_hpm(dim=12, depth=1)), momentum=m)
    with torch.no_grad():
        for p in pair.teacher.parameters():
            p.fill_(t_val)
        for p in pair.student.parameters():
            p.fill_(s_val)
    return pair


def test_ema_momentum_one_keeps_teacher():
    pair = _filled_pair(1.0, 0.0, 1.0)
    ema_update(pair)
    assert all(torch.all(p == 1.0) for p in pair.teacher.parameters())


def test_ema_momentum_zero_copies_student():
    pair = _filled_pair(1.0, 0.25, 0.0)
    ema_update(pair)
    assert all(torch.all(p == 0.25) for p in pair.teacher.parameters())


def test_ema_default_rate():
    pair = _filled_pair(1.0, 0.0, 0.999)
    ema_update(pair)
    for p in pair.teacher.parameters():
        torch.testing.assert_close(p, torch.full_like(p, 0.999))


def test_ema_shape_mismatch():
    pair = ModelPair(HPMNet(small_hpm(dim=12)), teacher=HPMNet(small_hpm(dim=24)))
    with pytest.raises(ValueError):
        pair.ema_update()


def test_teacher_has_no_grad():
    pair = ModelPair(HPMNet(small_hpm()))
    assert not any(p.requires_grad for p in pair.teacher.parameters())


def test_skip_depths():
    assert skip_depths(12, 4) == [3, 6, 9, 12]
    assert skip_depths(6, 4) == [1, 3, 4, 6]
    assert skip_depths(2, 4) == [1, 1, 1, 2]


def test_segment_shape_contract():
    net = SegmentationNet(EncoderConfig((64,) * 3, 16, 1, 24, 2, 2), 5, feature_size=4)
    out = segment(net, np.random.default_rng(0).random((64, 64, 64)))
    assert out.shape == (64, 64, 64, 5)


def test_segment_rejects_wrong_size():
    net = SegmentationNet(EncoderConfig((32,) * 3, 16, 1, 24, 1, 2), 3, feature_size=4)
    with pytest.raises(ValueError):
        net(torch.zeros(1, 1, 16, 32, 32))


def test_non_power_of_two_patch():
    with pytest.raises(ValueError):
        SegmentationNet(EncoderConfig((36,) * 3, 12, 1, 24, 1, 2), 3)


def test_encoder_state_transfers():
    hpm = HPMNet(small_hpm())
    seg = SegmentationNet(small_hpm().encoder, 3, feature_size=4)
    seg.load_encoder_state(copy.deepcopy(hpm.encoder.state_dict()))
    for (n, a), b in zip(hpm.encoder.state_dict().items(), seg.encoder.state_dict().values()):
        assert torch.equal(a, b), n


def test_patchify_then_encode_grid_matches_seg_input():
    x = torch.randn(1, 1, 32, 32, 32)
    assert patchify_array(x, 16).shape == (1, 8, 4096)
