import numpy as np
import torch

from hpmseg.nets import DecoderConfig, EncoderConfig, HPMConfig, HPMNet
from hpmseg.patching import patchify_array
from hpmseg.viz import reconstruct_volume, to_uint8, write_slice_strips


def _net():
    return HPMNet(HPMConfig(EncoderConfig((32,) * 3, 8, 1, 24, 1, 2),
                            DecoderConfig(16, 1, 2), DecoderConfig(12, 1, 2)))


def test_paste_back_and_mask_ratio():
    data = np.random.default_rng(0).random((32, 32, 32)).astype(np.float32)
    masked, recon, vmask, mask = reconstruct_volume(_net(), data, 0.75, 0.0, seed=1)
    assert mask.num_masked == 48 and mask.N == 64
    assert vmask.mean() == 0.75
    assert np.array_equal(recon[~vmask], data[~vmask])
    assert np.array_equal(masked[~vmask], data[~vmask])
    assert np.all(masked[vmask] == 0)


def test_guided_uses_teacher_scores():
    net = _net()
    data = np.random.default_rng(1).random((32, 32, 32)).astype(np.float32)
    _, _, _, mask = reconstruct_volume(net, data, 0.75, 1.0, seed=0, teacher=net)
    x = torch.from_numpy(data)[None, None]
    p = patchify_array(x, 8)
    with torch.no_grad():
        pos = torch.arange(64)[None]
        scores = net.predictor(net.encoder(p, pos), pos)[0].numpy()
    top = np.sort(np.argsort(-scores, kind="stable")[:48])
    assert np.array_equal(mask.masked_indices, top)


def test_strip_files(tmp_path):
    vol = np.random.default_rng(2).random((16, 16, 16))
    paths = write_slice_strips(tmp_path, vol, vol * 0, vol, [1, 5, 9])
    assert len(paths) == 3
    from PIL import Image

    img = np.asarray(Image.open(paths[1]))
    assert img.shape == (48, 16)
    assert np.array_equal(img[:16], to_uint8(vol[:, :, 5]))
    assert np.all(img[16:32] == 0)
